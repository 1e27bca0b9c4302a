"""Atomic writes, parallelism cap, and SVG plot determinism."""

import os

import numpy as np

from raterbayes.svgplot import boxplot_svg, histogram_svg
from raterbayes.util import atomic_write_bytes, atomic_write_text, max_workers, parallel_map


class TestAtomicWrite:
    def test_writes_content_and_creates_dirs(self, tmp_path):
        p = tmp_path / "a" / "b" / "f.bin"
        atomic_write_bytes(p, b"\x00\x01")
        assert p.read_bytes() == b"\x00\x01"

    def test_overwrites_existing(self, tmp_path):
        p = tmp_path / "f.txt"
        atomic_write_text(p, "one")
        atomic_write_text(p, "two")
        assert p.read_text() == "two"

    def test_no_temp_files_left(self, tmp_path):
        atomic_write_text(tmp_path / "f.txt", "x")
        leftovers = [n for n in os.listdir(tmp_path) if n.startswith(".tmp-")]
        assert leftovers == []


class TestParallelMap:
    def test_order_preserved(self):
        assert parallel_map(lambda x: x * x, range(6)) == [0, 1, 4, 9, 16, 25]

    def test_respects_env_cap(self, monkeypatch):
        monkeypatch.setenv("RATERBAYES_THREADS", "3")
        assert max_workers() == 3
        assert parallel_map(lambda x: x + 1, [1, 2, 3]) == [2, 3, 4]

    def test_invalid_env_falls_back(self, monkeypatch):
        monkeypatch.setenv("RATERBAYES_THREADS", "lots")
        assert max_workers() == 1
        monkeypatch.setenv("RATERBAYES_THREADS", "-4")
        assert max_workers() == 1


class TestSvgPlots:
    GROUPS = {"a": [0.1, 0.2, 0.3, 0.4], "b": [0.5, 0.6, 0.7]}

    def test_boxplot_is_valid_and_deterministic(self, tmp_path):
        import xml.etree.ElementTree as ET

        p1, p2 = tmp_path / "one.svg", tmp_path / "two.svg"
        boxplot_svg(p1, self.GROUPS, "title", ylabel="y")
        boxplot_svg(p2, self.GROUPS, "title", ylabel="y")
        assert p1.read_bytes() == p2.read_bytes()
        ET.fromstring(p1.read_text())  # parses as XML

    def test_boxplot_embeds_data(self, tmp_path):
        p = tmp_path / "box.svg"
        boxplot_svg(p, self.GROUPS, "t")
        text = p.read_text()
        assert "data:" in text
        for label in self.GROUPS:
            assert label in text

    def test_histogram_is_valid_and_deterministic(self, tmp_path):
        import xml.etree.ElementTree as ET

        rng = np.random.default_rng(0)
        series = {"p": list(rng.random(30)), "q": list(rng.random(30))}
        p1, p2 = tmp_path / "h1.svg", tmp_path / "h2.svg"
        histogram_svg(p1, series, "hist", xlabel="x")
        histogram_svg(p2, series, "hist", xlabel="x")
        assert p1.read_bytes() == p2.read_bytes()
        ET.fromstring(p1.read_text())

    def test_constant_values_do_not_crash(self, tmp_path):
        boxplot_svg(tmp_path / "c.svg", {"flat": [0.5, 0.5, 0.5]}, "t")
        histogram_svg(tmp_path / "ch.svg", {"flat": [0.0, 0.0]}, "t")
