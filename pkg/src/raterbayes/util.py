"""Small shared helpers: atomic file writes and capped parallel map."""

from __future__ import annotations

import os
import tempfile
from concurrent.futures import ThreadPoolExecutor


def atomic_write_bytes(path, data: bytes):
    """Write-temp-then-rename so readers never observe partial files."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode())


def max_workers() -> int:
    """Parallelism cap from RATERBAYES_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("RATERBAYES_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items):
    """Order-preserving map, threaded when RATERBAYES_THREADS > 1."""
    items = list(items)
    w = max_workers()
    if w == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=w) as ex:
        return list(ex.map(fn, items))
