"""Clinical measurements from vessel mask ensembles.

Lumen area and EEM area are raw foreground pixel counts (unscaled);
plaque burden is (EEM - lumen) / EEM as a fraction in [0, 1]. An
optional calibration scalar (area units per pixel) is applied at
report time only.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .errors import DimensionError, MeasurementError


@dataclass
class VesselMaskPair:
    lumen: np.ndarray
    eem: np.ndarray
    clipped_pixels: int = 0


@dataclass
class QuantityStat:
    mean: float
    std: float

    def to_dict(self):
        return asdict(self)


@dataclass
class MeasurementDistribution:
    lumen: QuantityStat          # pixels^2
    eem: QuantityStat            # pixels^2
    plaque_burden: QuantityStat  # fraction
    n: int
    excluded: int = 0
    clipped_pixels: int = 0

    def to_dict(self):
        return {
            "lumen": self.lumen.to_dict(),
            "eem": self.eem.to_dict(),
            "plaque_burden": self.plaque_burden.to_dict(),
            "n": self.n,
            "excluded": self.excluded,
            "clipped_pixels": self.clipped_pixels,
        }


def area(mask) -> float:
    """Foreground pixel count."""
    return float(np.count_nonzero(np.asarray(mask)))


def plaque_burden(eem_area: float, lumen_area: float) -> float:
    """(EEM - lumen) / EEM as a fraction; lumen clamped into [0, EEM]."""
    if eem_area <= 0:
        raise MeasurementError("plaque burden undefined for empty EEM")
    lumen_area = min(max(lumen_area, 0.0), eem_area)
    return (eem_area - lumen_area) / eem_area


def validate_pair(pair: VesselMaskPair) -> VesselMaskPair:
    """Clip lumen to the EEM; returns a pair with the clipped pixel count."""
    lumen = np.asarray(pair.lumen).astype(bool)
    eem = np.asarray(pair.eem).astype(bool)
    if lumen.shape != eem.shape:
        raise DimensionError(f"lumen/eem shape mismatch: {lumen.shape} vs {eem.shape}")
    effective = np.logical_and(lumen, eem)
    clipped = int(lumen.sum() - effective.sum())
    return VesselMaskPair(lumen=effective.astype(np.uint8), eem=eem.astype(np.uint8),
                          clipped_pixels=clipped)


def _stat(values) -> QuantityStat:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return QuantityStat(mean=float(arr.mean()), std=std)


def measure_ensemble(pairs) -> MeasurementDistribution:
    """Mean and (n-1) std of lumen/EEM area and plaque burden over an ensemble.

    Samples with an empty EEM are excluded (and counted); all samples
    empty is a measurement error.
    """
    lumen_areas, eem_areas, burdens = [], [], []
    excluded = 0
    clipped = 0
    for pair in pairs:
        v = validate_pair(pair)
        clipped += v.clipped_pixels
        ea = area(v.eem)
        if ea == 0:
            excluded += 1
            continue
        la = area(v.lumen)
        lumen_areas.append(la)
        eem_areas.append(ea)
        burdens.append(plaque_burden(ea, la))
    if not eem_areas:
        raise MeasurementError("all samples have an empty EEM; no measurement possible")
    return MeasurementDistribution(
        lumen=_stat(lumen_areas),
        eem=_stat(eem_areas),
        plaque_burden=_stat(burdens),
        n=len(eem_areas),
        excluded=excluded,
        clipped_pixels=clipped,
    )
