"""Synthetic multi-annotator segmentation datasets and the on-disk format.

Two phantom tasks:

* ``vessel``: concentric lumen/EEM structures with smooth star-convex
  boundaries on a speckle-textured background (IVUS-like),
* ``blob``: a single elliptical structure.

Simulated raters perturb the true boundary with a fixed per-rater
radial bias plus smooth angular jitter (low-order Fourier perturbation
of the radius function), giving structured, correlated disagreement.

On-disk format: 8-bit binary PGM images, binary PBM masks, and a JSON
manifest; the loader accepts any dataset laid out the same way.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict, field

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .util import atomic_write_bytes, atomic_write_text

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


# -- portable graymap / bitmap -----------------------------------------


def write_pgm(path, image_u8: np.ndarray):
    img = np.asarray(image_u8, dtype=np.uint8)
    h, w = img.shape
    atomic_write_bytes(path, b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    try:
        fields = []
        pos = 0
        while len(fields) < 4:
            # skip whitespace and '#' comment lines between header tokens
            while raw[pos:pos + 1].isspace():
                pos += 1
            if raw[pos:pos + 1] == b"#":
                pos = raw.index(b"\n", pos) + 1
                continue
            end = pos
            while not raw[end:end + 1].isspace():
                end += 1
            fields.append(raw[pos:end])
            pos = end
        magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
        if magic != b"P5" or maxval != 255:
            raise ValueError
        pos += 1  # single whitespace after maxval
        data = np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8)
        return data.reshape(h, w).copy()
    except (ValueError, IndexError) as e:
        raise DataError(f"{path}: not a valid binary PGM") from e


def write_pbm(path, mask: np.ndarray):
    m = np.asarray(mask).astype(np.uint8)
    h, w = m.shape
    packed = np.packbits(m, axis=1)
    atomic_write_bytes(path, b"P4\n%d %d\n" % (w, h) + packed.tobytes())


def read_pbm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    try:
        parts = raw.split(None, 3)
        if parts[0] != b"P4":
            raise ValueError
        w, h = int(parts[1]), int(parts[2])
        row_bytes = (w + 7) // 8
        data = np.frombuffer(parts[3][: row_bytes * h], dtype=np.uint8).reshape(h, row_bytes)
        bits = np.unpackbits(data, axis=1)[:, :w]
        return bits.astype(np.uint8)
    except (ValueError, IndexError) as e:
        raise DataError(f"{path}: not a valid binary PBM") from e


# -- configuration and dataset types -----------------------------------


@dataclass(frozen=True)
class PhantomConfig:
    size: int = 64
    task: str = "vessel"
    num_raters: int = 4
    rater_bias: tuple | None = None   # per-rater radial offset (px); default spread
    rater_jitter: float = 1.0         # boundary noise std (px)
    texture_noise: float = 0.12
    n_train: int = 40
    n_val: int = 8
    n_test: int = 20
    repeats_per_rater: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.size < 8 or self.size & (self.size - 1):
            raise ConfigError("size must be a power of two >= 8")
        if self.task not in ("vessel", "blob"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.num_raters < 1 or self.repeats_per_rater < 1:
            raise ConfigError("num_raters and repeats_per_rater must be >= 1")
        if self.rater_jitter < 0 or self.texture_noise < 0:
            raise ConfigError("jitter and texture_noise must be >= 0")
        if self.rater_bias is None:
            r = self.num_raters
            bias = tuple(np.linspace(-1.5, 1.5, r)) if r > 1 else (0.0,)
            object.__setattr__(self, "rater_bias", bias)
        else:
            object.__setattr__(self, "rater_bias", tuple(float(b) for b in self.rater_bias))
        if len(self.rater_bias) != self.num_raters:
            raise ConfigError("rater_bias length must equal num_raters")

    @property
    def structures(self) -> tuple:
        # outer-to-inner nesting order; class id = number of containing structures
        return ("eem", "lumen") if self.task == "vessel" else ("blob",)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rater_bias"] = list(self.rater_bias)
        return d


@dataclass
class Case:
    id: str
    split: str
    image: np.ndarray                 # (H, W) float in [0, 1]
    annotations: list                 # per annotation: {structure: mask}
    consensus: dict = field(default_factory=dict)
    truth: dict = field(default_factory=dict)

    @property
    def num_annotations(self) -> int:
        return len(self.annotations)


@dataclass
class MultiRaterDataset:
    task: str
    structures: tuple
    cases: list

    @property
    def num_classes(self) -> int:
        return len(self.structures) + 1

    def split(self, name: str) -> list:
        return [c for c in self.cases if c.split == name]


# -- geometry ------------------------------------------------------------


def render_ellipse_mask(center, axes, rotation: float, size: int) -> np.ndarray:
    """Foreground where the pixel center lies inside the rotated ellipse."""
    ax, ay = axes
    if ax <= 0 or ay <= 0:
        raise ConfigError("ellipse axes must be positive")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - center[0], yy - center[1]
    c, s = np.cos(rotation), np.sin(rotation)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return ((u / ax) ** 2 + (v / ay) ** 2 <= 1.0).astype(np.uint8)


def _radial_mask(center, radius_fn, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - center[0], yy - center[1]
    r = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    return (r <= radius_fn(theta)).astype(np.uint8)


def _fourier_radius(r0: float, coeffs) -> callable:
    def fn(theta):
        out = np.full_like(theta, r0, dtype=np.float64)
        for m, (a, b) in coeffs.items():
            out += r0 * (a * np.cos(m * theta) + b * np.sin(m * theta))
        return out

    return fn


def _jitter_fn(rng: np.random.Generator, std: float, orders=(1, 2, 3)) -> callable:
    cs = rng.standard_normal((len(orders), 2)) * std / np.sqrt(len(orders))

    def fn(theta):
        out = np.zeros_like(theta, dtype=np.float64)
        for (c, s), m in zip(cs, orders):
            out += c * np.cos(m * theta) + s * np.sin(m * theta)
        return out

    return fn


# -- generation ----------------------------------------------------------


def _vessel_truth(cfg: PhantomConfig, rng: np.random.Generator) -> dict:
    size = cfg.size
    cx = size / 2 + rng.uniform(-0.04, 0.04) * size
    cy = size / 2 + rng.uniform(-0.04, 0.04) * size
    eem_r = rng.uniform(0.22, 0.30) * size
    lumen_frac = rng.uniform(0.50, 0.70)
    shape = {m: (rng.normal(0, 0.03), rng.normal(0, 0.03)) for m in (2, 3)}
    lumen_shape = {m: (rng.normal(0, 0.03), rng.normal(0, 0.03)) for m in (2, 3)}
    return {"center": (cx, cy), "eem_r": eem_r, "lumen_r": eem_r * lumen_frac,
            "eem_coeffs": shape, "lumen_coeffs": lumen_shape}


def _vessel_masks(truth: dict, size: int, eem_off=None, lumen_off=None) -> dict:
    eem_fn = _fourier_radius(truth["eem_r"], truth["eem_coeffs"])
    lum_fn = _fourier_radius(truth["lumen_r"], truth["lumen_coeffs"])
    if eem_off is not None:
        base_eem = eem_fn
        eem_fn = lambda t: base_eem(t) + eem_off(t)
    if lumen_off is not None:
        base_lum = lum_fn
        lum_fn = lambda t: base_lum(t) + lumen_off(t)
    eem = _radial_mask(truth["center"], eem_fn, size)
    lumen = _radial_mask(truth["center"], lum_fn, size)
    lumen = np.logical_and(lumen, eem).astype(np.uint8)  # preserve nesting
    return {"eem": eem, "lumen": lumen}


def _blob_truth(cfg: PhantomConfig, rng: np.random.Generator) -> dict:
    size = cfg.size
    return {
        "center": (size / 2 + rng.uniform(-0.08, 0.08) * size,
                   size / 2 + rng.uniform(-0.08, 0.08) * size),
        "axes": (rng.uniform(0.15, 0.28) * size, rng.uniform(0.15, 0.28) * size),
        "rotation": rng.uniform(0, np.pi),
    }


def _blob_masks(truth: dict, size: int, off: float = 0.0, jitter=(0.0, 0.0)) -> dict:
    ax = max(truth["axes"][0] + off + jitter[0], 1.0)
    ay = max(truth["axes"][1] + off + jitter[1], 1.0)
    return {"blob": render_ellipse_mask(truth["center"], (ax, ay), truth["rotation"], size)}


def _vessel_image(truth: dict, size: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    masks = _vessel_masks(truth, size)
    img = np.full((size, size), 0.35)
    img[masks["eem"] == 1] = 0.65
    img[masks["lumen"] == 1] = 0.15
    if noise > 0:
        img = img * (1.0 + noise * rng.standard_normal(img.shape))
    return np.clip(img, 0.0, 1.0)


def _blob_image(truth: dict, size: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    masks = _blob_masks(truth, size)
    img = np.full((size, size), 0.25)
    img[masks["blob"] == 1] = 0.7
    if noise > 0:
        img = img + noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def _case_annotations(cfg: PhantomConfig, truth: dict, rng: np.random.Generator) -> list:
    annos = []
    for r in range(cfg.num_raters):
        for _ in range(cfg.repeats_per_rater):
            bias = cfg.rater_bias[r]
            if cfg.task == "vessel":
                eem_off = _jitter_fn(rng, cfg.rater_jitter)
                lum_off = _jitter_fn(rng, cfg.rater_jitter)
                masks = _vessel_masks(
                    truth, cfg.size,
                    eem_off=lambda t, f=eem_off, b=bias: f(t) + b,
                    lumen_off=lambda t, f=lum_off, b=bias: f(t) + b,
                )
            else:
                jitter = rng.standard_normal(2) * cfg.rater_jitter
                masks = _blob_masks(truth, cfg.size, off=bias, jitter=jitter)
            annos.append(masks)
    return annos


def generate(cfg: PhantomConfig, out_dir) -> dict:
    """Write a full dataset (images, annotations, manifest); returns manifest.

    Per-case rng streams are derived from (seed, case index) so the
    output is byte-identical regardless of generation order.
    """
    out_dir = os.fspath(out_dir)
    counts = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    cases = []
    case_index = 0
    for split in SPLITS:
        for i in range(counts[split]):
            rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, case_index)))
            case_id = f"{split}_{i:03d}"
            truth = _vessel_truth(cfg, rng) if cfg.task == "vessel" else _blob_truth(cfg, rng)
            if cfg.task == "vessel":
                image = _vessel_image(truth, cfg.size, cfg.texture_noise, rng)
                true_masks = _vessel_masks(truth, cfg.size)
            else:
                image = _blob_image(truth, cfg.size, cfg.texture_noise, rng)
                true_masks = _blob_masks(truth, cfg.size)
            annos = _case_annotations(cfg, truth, rng)

            img_rel = f"images/{case_id}.pgm"
            write_pgm(os.path.join(out_dir, img_rel), np.round(image * 255).astype(np.uint8))
            ann_paths = {s: [] for s in cfg.structures}
            for a, masks in enumerate(annos):
                for s in cfg.structures:
                    rel = f"annotations/{case_id}/{s}_a{a}.pbm"
                    write_pbm(os.path.join(out_dir, rel), masks[s])
                    ann_paths[s].append(rel)
            truth_rec = {
                "true_areas": {s: int(true_masks[s].sum()) for s in cfg.structures},
                "params": _jsonable(truth),
            }
            cases.append({"id": case_id, "split": split, "image": img_rel,
                          "annotations": ann_paths, "truth": truth_rec})
            case_index += 1
    manifest = {
        "format_version": FORMAT_VERSION,
        "task": cfg.task,
        "size": cfg.size,
        "structures": list(cfg.structures),
        "annotations_per_case": cfg.num_raters * cfg.repeats_per_rater,
        "generator": cfg.to_dict(),
        "cases": cases,
    }
    atomic_write_text(os.path.join(out_dir, "manifest.json"),
                      json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    return obj


# -- consensus (also used by the trainer) --------------------------------


def build_consensus(masks) -> np.ndarray:
    """Pixelwise majority vote: foreground iff >= ceil((R+1)/2) raters mark it.

    Ties at even R resolve to background.
    """
    masks = [np.asarray(m) for m in masks]
    if not masks:
        raise DimensionError("build_consensus needs at least one mask")
    shape = masks[0].shape
    for m in masks:
        if m.shape != shape:
            raise DimensionError("consensus masks must share one shape")
    r = len(masks)
    votes = np.sum(np.stack(masks).astype(np.int64), axis=0)
    need = (r + 2) // 2  # ceil((R+1)/2)
    return (votes >= need).astype(np.uint8)


def _case_consensus(structures, annotations) -> dict:
    cons = {s: build_consensus([a[s] for a in annotations]) for s in structures}
    if "lumen" in cons and "eem" in cons:
        cons["lumen"] = np.logical_and(cons["lumen"], cons["eem"]).astype(np.uint8)
    return cons


# -- loading -------------------------------------------------------------


def load(manifest_path) -> MultiRaterDataset:
    """Load a dataset from its manifest; images scaled to [0, 1]."""
    manifest_path = os.fspath(manifest_path)
    root = os.path.dirname(manifest_path)
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except FileNotFoundError as e:
        raise DataError(f"manifest not found: {manifest_path}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"manifest does not parse: {manifest_path}: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported dataset format version {manifest.get('format_version')}")
    structures = tuple(manifest["structures"])
    cases = []
    for rec in manifest["cases"]:
        cid = rec["id"]
        img_path = os.path.join(root, rec["image"])
        if not os.path.exists(img_path):
            raise DataError(f"case {cid}: missing image file {rec['image']}")
        image = read_pgm(img_path).astype(np.float64) / 255.0
        annotations = []
        n_eff = None
        for s in structures:
            paths = rec["annotations"].get(s)
            if not paths:
                raise DataError(f"case {cid}: no annotations for structure {s!r}")
            if n_eff is None:
                n_eff = len(paths)
                annotations = [dict() for _ in range(n_eff)]
            elif len(paths) != n_eff:
                raise DataError(f"case {cid}: annotation count mismatch across structures")
            for a, rel in enumerate(paths):
                p = os.path.join(root, rel)
                if not os.path.exists(p):
                    raise DataError(f"case {cid}: missing annotation file {rel}")
                mask = read_pbm(p)
                if mask.shape != image.shape:
                    raise DataError(f"case {cid}: mask {rel} extents {mask.shape} != image {image.shape}")
                annotations[a][s] = mask
        cases.append(Case(id=cid, split=rec["split"], image=image,
                          annotations=annotations,
                          consensus=_case_consensus(structures, annotations),
                          truth=rec.get("truth", {})))
    return MultiRaterDataset(task=manifest["task"], structures=structures, cases=cases)
