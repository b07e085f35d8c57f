"""The three physical descriptors of a SAR-like raster.

All statistics run on the log-intensity raster:

* directional entropy — Shannon entropy (nats) of the histogram of Sobel
  gradient directions; low when the scene is dominated by one orientation.
* equivalent number of looks — (mean/std)^2 of the log intensities; high
  when speckle is weak.
* local roughness — population variance of blockwise mean log intensities
  over a fixed pooling grid; high for scenes with strong regional contrast.

Means and variances are population (divide-by-N) throughout.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError
from .raster import LogRaster, RasterImage, log_transform

ENL_MAX = 1e12

DEGENERATE_HISTOGRAM = "degenerate_histogram"
HOMOGENEOUS_IMAGE = "homogeneous_image"

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = np.array([[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]])


@dataclass(frozen=True)
class DescriptorConfig:
    """Knobs of the descriptor computations."""

    num_direction_bins: int = 36
    gradient_magnitude_floor: float = 1e-6
    roughness_grid: tuple[int, int] = (8, 8)
    enl_sigma_floor: float = 1e-12
    signed_angles: bool = True  # bin directions over [-pi, pi) rather than [0, pi)

    def __post_init__(self):
        if self.num_direction_bins < 2:
            raise InvalidInputError("num_direction_bins must be >= 2")
        rows, cols = self.roughness_grid
        if rows < 2 or cols < 2:
            raise InvalidInputError("roughness_grid dims must be >= 2")
        if self.gradient_magnitude_floor < 0 or self.enl_sigma_floor < 0:
            raise InvalidInputError("floors must be >= 0")


class ScalarDescriptor(NamedTuple):
    """A descriptor value plus its degenerate-input flag."""

    value: float
    flagged: bool


@dataclass(frozen=True)
class DescriptorVector:
    """The physics vector [directional entropy, ENL, local roughness]."""

    h_de: float
    enl: float
    r_lr: float
    flags: frozenset[str] = frozenset()

    def __post_init__(self):
        for name in ("h_de", "enl", "r_lr"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise InvalidInputError(f"{name} must be finite and >= 0, got {v}")
        object.__setattr__(self, "flags", frozenset(self.flags))

    def as_array(self) -> np.ndarray:
        return np.array([self.h_de, self.enl, self.r_lr])


def sobel_gradients(x: LogRaster) -> tuple[np.ndarray, np.ndarray]:
    """Standard 3x3 Sobel pair with replicate borders; returns (gx, gy)."""
    if x.height < 3 or x.width < 3:
        raise InvalidInputError(f"Sobel needs at least 3x3, got {x.height}x{x.width}")
    gx = ndimage.correlate(x.data, _SOBEL_X, mode="nearest")
    gy = ndimage.correlate(x.data, _SOBEL_Y, mode="nearest")
    return gx, gy


def directional_entropy(x: LogRaster, cfg: DescriptorConfig = DescriptorConfig()) -> ScalarDescriptor:
    """Entropy (nats) of the gradient-direction histogram.

    Pixels with gradient magnitude below the configured floor are excluded;
    if that excludes everything the histogram is degenerate and the result
    is 0 with the flag set.
    """
    gx, gy = sobel_gradients(x)
    magnitude = np.hypot(gx, gy)
    keep = magnitude >= cfg.gradient_magnitude_floor
    if not keep.any():
        return ScalarDescriptor(0.0, True)
    theta = np.arctan2(gy[keep], gx[keep])
    n = cfg.num_direction_bins
    if cfg.signed_angles:
        idx = np.floor((theta + np.pi) / (2.0 * np.pi) * n).astype(np.int64) % n
    else:
        idx = np.floor(np.mod(theta, np.pi) / np.pi * n).astype(np.int64) % n
    counts = np.bincount(idx, minlength=n)
    p = counts[counts > 0] / counts.sum()
    return ScalarDescriptor(float(-(p * np.log(p)).sum()), False)


def equivalent_number_of_looks(
    x: LogRaster, cfg: DescriptorConfig = DescriptorConfig()
) -> ScalarDescriptor:
    """(mean/std)^2 of the log intensities, saturated at ENL_MAX."""
    mu = float(x.data.mean())
    sigma = float(x.data.std())
    if sigma < cfg.enl_sigma_floor:
        return ScalarDescriptor(ENL_MAX, True)
    return ScalarDescriptor(min((mu / sigma) ** 2, ENL_MAX), False)


def _block_edges(extent: int, blocks: int) -> np.ndarray:
    """Split [0, extent) into `blocks` runs; the remainder joins the last run."""
    base = extent // blocks
    edges = np.arange(blocks + 1) * base
    edges[-1] = extent
    return edges


def local_roughness(x: LogRaster, cfg: DescriptorConfig = DescriptorConfig()) -> float:
    """Population variance of blockwise mean log intensities."""
    rows, cols = cfg.roughness_grid
    if x.height < rows or x.width < cols:
        raise InvalidInputError(
            f"raster {x.height}x{x.width} smaller than roughness grid {rows}x{cols}"
        )
    r_edges = _block_edges(x.height, rows)
    c_edges = _block_edges(x.width, cols)
    means = np.empty((rows, cols))
    for i in range(rows):
        for j in range(cols):
            block = x.data[r_edges[i] : r_edges[i + 1], c_edges[j] : c_edges[j + 1]]
            means[i, j] = block.mean()
    if (means == means.flat[0]).all():
        return 0.0  # np.var leaves ~ulp^2 dust even on identical values
    return float(means.var())


def compute_descriptors(
    img: RasterImage, cfg: DescriptorConfig = DescriptorConfig()
) -> DescriptorVector:
    """Log-transform, then assemble [H_DE, ENL, R_LR]."""
    x = log_transform(img)
    h = directional_entropy(x, cfg)
    enl = equivalent_number_of_looks(x, cfg)
    r = local_roughness(x, cfg)
    flags = set()
    if h.flagged:
        flags.add(DEGENERATE_HISTOGRAM)
    if enl.flagged:
        flags.add(HOMOGENEOUS_IMAGE)
    return DescriptorVector(h_de=h.value, enl=enl.value, r_lr=r, flags=frozenset(flags))


def normalize_descriptors(
    s: DescriptorVector, cfg: DescriptorConfig = DescriptorConfig()
) -> np.ndarray:
    """Fixed affine squashing of the raw descriptors into [0, 1]^3.

    Entropy divides by its ln(N) upper bound; ENL and roughness pass through
    log1p, ENL against its saturation ceiling and roughness against a fixed
    clamp at 10.
    """
    h = s.h_de / np.log(cfg.num_direction_bins)
    enl = np.log1p(min(s.enl, ENL_MAX)) / np.log1p(ENL_MAX)
    r = min(max(np.log1p(s.r_lr), 0.0), 10.0) / 10.0
    return np.array([min(h, 1.0), enl, r])


def mask_descriptors(s: DescriptorVector, enabled: tuple[bool, bool, bool]) -> DescriptorVector:
    """Zero the disabled raw descriptors (before any normalization)."""
    if len(enabled) != 3:
        raise InvalidInputError("descriptor mask must have exactly 3 entries")
    return DescriptorVector(
        h_de=s.h_de if enabled[0] else 0.0,
        enl=s.enl if enabled[1] else 0.0,
        r_lr=s.r_lr if enabled[2] else 0.0,
        flags=s.flags,
    )
