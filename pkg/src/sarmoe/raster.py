"""Raster data model, log-intensity transform, speckle synthesis, and file I/O.

Rasters live in the linear intensity domain as row-major float64 grids.
The native on-disk formats are deliberately tiny:

* ``SRF1`` — ASCII header ``SRF1 <width> <height>\\n`` followed by
  width*height little-endian float32 values, row-major.
* ``SLM1`` — ASCII header ``SLM1 <width> <height> <K>\\n`` followed by
  width*height uint8 class ids, row-major.

8-bit and 16-bit grayscale PNG files import as linear intensity in
[0, 255] / [0, 65535] with no further calibration.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatchError,
    InvalidInputError,
    RasterFormatError,
)

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _check_grid(name: str, width: int, height: int, arr: np.ndarray) -> None:
    if width <= 0 or height <= 0:
        raise DimensionMismatchError(f"{name}: non-positive dimensions {width}x{height}")
    if arr.shape != (height, width):
        raise DimensionMismatchError(
            f"{name}: data shape {arr.shape} does not match {height}x{width}"
        )


@dataclass(frozen=True)
class RasterImage:
    """2-D grid of nonnegative linear intensities."""

    width: int
    height: int
    data: np.ndarray  # (height, width) float64, read-only

    def __post_init__(self):
        arr = _frozen_array(self.data, np.float64)
        _check_grid("RasterImage", self.width, self.height, arr)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, values) -> "RasterImage":
        """Build from any 2-D array-like, validating finiteness and sign."""
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 2:
            raise InvalidInputError(f"expected a 2-D array, got ndim={arr.ndim}")
        bad = ~np.isfinite(arr)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise InvalidInputError(f"non-finite intensity at pixel ({r}, {c})")
        if (arr < 0).any():
            r, c = np.argwhere(arr < 0)[0]
            raise InvalidInputError(f"negative intensity at pixel ({r}, {c})")
        h, w = arr.shape
        return cls(width=w, height=h, data=arr)


@dataclass(frozen=True)
class LogRaster:
    """Log-intensity grid; every value is log1p of a source magnitude."""

    width: int
    height: int
    data: np.ndarray  # (height, width) float64, read-only

    def __post_init__(self):
        arr = _frozen_array(self.data, np.float64)
        _check_grid("LogRaster", self.width, self.height, arr)
        if arr.size and (not np.isfinite(arr).all() or arr.min() < 0):
            raise InvalidInputError("log raster values must be finite and >= 0")
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel class ids in [0, num_classes), with an optional ignore id."""

    width: int
    height: int
    labels: np.ndarray  # (height, width) int64, read-only
    num_classes: int
    ignore_value: int | None = None

    def __post_init__(self):
        arr = _frozen_array(self.labels, np.int64)
        _check_grid("LabelMap", self.width, self.height, arr)
        if self.num_classes < 1:
            raise InvalidInputError(f"num_classes must be >= 1, got {self.num_classes}")
        considered = arr if self.ignore_value is None else arr[arr != self.ignore_value]
        if considered.size and (considered.min() < 0 or considered.max() >= self.num_classes):
            raise InvalidInputError(
                f"labels outside [0, {self.num_classes}) present (ignore={self.ignore_value})"
            )
        object.__setattr__(self, "labels", arr)

    def valid_mask(self) -> np.ndarray:
        """Boolean mask of pixels that participate in metrics."""
        if self.ignore_value is None:
            return np.ones_like(self.labels, dtype=bool)
        return self.labels != self.ignore_value


class BasePattern(str, enum.Enum):
    CONSTANT = "constant"
    TWO_REGION = "two-region"
    STRIPES = "stripes"


@dataclass(frozen=True)
class SpeckleSpec:
    """Recipe for one synthetic speckled scene."""

    looks: float
    base_pattern: BasePattern = BasePattern.TWO_REGION
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "base_pattern", BasePattern(self.base_pattern))
        if not (self.looks > 0):
            raise InvalidInputError(f"looks must be > 0, got {self.looks}")


def log_transform(img: RasterImage) -> LogRaster:
    """Map intensities x to log(1 + |x|), preserving dimensions."""
    bad = ~np.isfinite(img.data)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise InvalidInputError(f"non-finite intensity at pixel ({r}, {c})")
    return LogRaster(width=img.width, height=img.height, data=np.log1p(np.abs(img.data)))


# Intensity levels of the non-constant base patterns. The mild 2:1 ratio
# keeps the classes separable through heavy speckle while leaving the
# image-level statistics dominated by speckle strength rather than layout.
_PATTERN_LOW = 1.0
_PATTERN_HIGH = 2.0


def _render_pattern(
    pattern: BasePattern, width: int, height: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Return (pattern intensities, class labels), drawing layout from rng."""
    if pattern is BasePattern.CONSTANT:
        return np.ones((height, width)), np.zeros((height, width), dtype=np.int64)

    if pattern is BasePattern.TWO_REGION:
        vertical = bool(rng.integers(0, 2))
        extent = width if vertical else height
        cut = int(rng.integers(extent // 4, 3 * extent // 4 + 1))
        labels = np.zeros((height, width), dtype=np.int64)
        if vertical:
            labels[:, cut:] = 1
        else:
            labels[cut:, :] = 1
        values = np.where(labels == 1, _PATTERN_HIGH, _PATTERN_LOW)
        return values, labels

    if pattern is BasePattern.STRIPES:
        vertical = bool(rng.integers(0, 2))
        period = int(rng.choice([8, 16]))
        axis = np.arange(width if vertical else height)
        band = (axis // period) % 2
        labels = np.broadcast_to(
            band[np.newaxis, :] if vertical else band[:, np.newaxis], (height, width)
        ).astype(np.int64)
        values = np.where(labels == 1, _PATTERN_HIGH, _PATTERN_LOW)
        return values, labels

    raise InvalidInputError(f"unknown base pattern {pattern!r}")


def generate_labeled_scene(
    spec: SpeckleSpec, width: int, height: int
) -> tuple[RasterImage, LabelMap]:
    """Render the base pattern, multiply by L-look Gamma speckle, pair with labels.

    The speckle factor is Gamma(shape=L, scale=1/L): unit mean, variance 1/L.
    Deterministic for a given spec.
    """
    if not (spec.looks > 0):
        raise InvalidInputError(f"looks must be > 0, got {spec.looks}")
    if width < 8 or height < 8:
        raise InvalidInputError(f"scene must be at least 8x8, got {width}x{height}")
    rng = np.random.default_rng(spec.seed)
    values, labels = _render_pattern(spec.base_pattern, width, height, rng)
    speckle = rng.gamma(shape=spec.looks, scale=1.0 / spec.looks, size=(height, width))
    img = RasterImage(width=width, height=height, data=values * speckle)
    num_classes = max(2, int(labels.max()) + 1)
    return img, LabelMap(width=width, height=height, labels=labels, num_classes=num_classes)


def generate_speckle(spec: SpeckleSpec, width: int, height: int) -> RasterImage:
    """Speckled scene without its label map."""
    img, _ = generate_labeled_scene(spec, width, height)
    return img


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def _read_header_line(blob: bytes, path: Path) -> tuple[list[bytes], bytes]:
    eol = blob.find(b"\n", 0, 128)
    if eol < 0:
        raise RasterFormatError(f"{path}: missing or truncated header line")
    return blob[:eol].split(), blob[eol + 1 :]


def write_raster(img: RasterImage, path) -> None:
    """Write in the native SRF1 format (float32 payload)."""
    path = Path(path)
    header = f"SRF1 {img.width} {img.height}\n".encode("ascii")
    path.write_bytes(header + img.data.astype("<f4").tobytes())


def _read_srf1(blob: bytes, path: Path) -> RasterImage:
    fields, payload = _read_header_line(blob, path)
    if len(fields) != 3 or fields[0] != b"SRF1":
        raise RasterFormatError(f"{path}: malformed SRF1 header")
    try:
        width, height = int(fields[1]), int(fields[2])
    except ValueError as exc:
        raise RasterFormatError(f"{path}: non-integer dimensions in header") from exc
    if width <= 0 or height <= 0:
        raise RasterFormatError(f"{path}: non-positive dimensions in header")
    expected = width * height * 4
    if len(payload) != expected:
        raise DimensionMismatchError(
            f"{path}: payload holds {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(height, width)
    return RasterImage(width=width, height=height, data=data)


def _read_png(path: Path) -> RasterImage:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode == "L":
            arr = np.asarray(im, dtype=np.float64)
        elif im.mode in ("I", "I;16", "I;16B", "I;16L"):
            arr = np.asarray(im, dtype=np.float64)
            if arr.max(initial=0.0) > 65535:
                raise RasterFormatError(f"{path}: integer PNG exceeds 16-bit range")
        else:
            raise RasterFormatError(f"{path}: unsupported PNG mode {im.mode!r}, need grayscale")
    h, w = arr.shape
    return RasterImage(width=w, height=h, data=arr)


def read_raster(path) -> RasterImage:
    """Read an SRF1 file or an 8/16-bit grayscale PNG, by content sniffing."""
    path = Path(path)
    blob = path.read_bytes()
    if blob.startswith(b"SRF1"):
        return _read_srf1(blob, path)
    if blob.startswith(_PNG_SIGNATURE):
        return _read_png(path)
    raise RasterFormatError(f"{path}: unrecognized or truncated header")


def write_labels(labels: LabelMap, path) -> None:
    """Write in the native SLM1 format (uint8 payload)."""
    if labels.num_classes > 255:
        raise InvalidInputError("SLM1 stores uint8 ids; num_classes must be <= 255")
    if labels.labels.max(initial=0) > 255 or labels.labels.min(initial=0) < 0:
        raise InvalidInputError("SLM1 stores uint8 ids; labels must lie in [0, 255]")
    path = Path(path)
    header = f"SLM1 {labels.width} {labels.height} {labels.num_classes}\n".encode("ascii")
    path.write_bytes(header + labels.labels.astype(np.uint8).tobytes())


def read_labels(path, ignore_value: int | None = None) -> LabelMap:
    """Read an SLM1 label map; ``ignore_value`` is a caller-side convention."""
    path = Path(path)
    blob = path.read_bytes()
    fields, payload = _read_header_line(blob, path)
    if len(fields) != 4 or fields[0] != b"SLM1":
        raise RasterFormatError(f"{path}: malformed SLM1 header")
    try:
        width, height, num_classes = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise RasterFormatError(f"{path}: non-integer fields in header") from exc
    if width <= 0 or height <= 0 or num_classes < 1:
        raise RasterFormatError(f"{path}: non-positive fields in header")
    expected = width * height
    if len(payload) != expected:
        raise DimensionMismatchError(
            f"{path}: payload holds {len(payload)} bytes, header implies {expected}"
        )
    ids = np.frombuffer(payload, dtype=np.uint8).astype(np.int64).reshape(height, width)
    try:
        return LabelMap(
            width=width,
            height=height,
            labels=ids,
            num_classes=num_classes,
            ignore_value=ignore_value,
        )
    except InvalidInputError as exc:
        raise RasterFormatError(f"{path}: {exc}") from exc
