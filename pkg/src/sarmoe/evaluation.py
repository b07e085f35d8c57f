"""Segmentation metrics, the multi-model agreement metric, and benchmark runs.

The confusion matrix is a merge monoid (elementwise addition, all-zeros
identity), so accumulation parallelizes by partitioning images. IoU reports
always pool counts first; they never average per-part IoUs.

Agreement over a set of per-model predictions scores each pixel 1 iff every
model predicts the same class, averages within each image, then averages
the per-image ratios with equal weight.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .descriptors import DescriptorConfig
from .errors import ContractViolationError, EmptyReportError
from .model import ToyModel, infer_image, load_checkpoint
from .moe import RoutingRecord
from .raster import LabelMap, RasterImage, read_labels, read_raster


@dataclass(frozen=True)
class ConfusionMatrix:
    num_classes: int
    counts: np.ndarray  # (K, K) int64; counts[truth][pred]

    def __post_init__(self):
        arr = np.ascontiguousarray(self.counts, dtype=np.int64)
        if arr.shape != (self.num_classes, self.num_classes):
            raise ContractViolationError(
                f"counts shape {arr.shape} != ({self.num_classes}, {self.num_classes})"
            )
        if (arr < 0).any():
            raise ContractViolationError("confusion counts must be nonnegative")
        arr.setflags(write=False)
        object.__setattr__(self, "counts", arr)

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(num_classes, np.zeros((num_classes, num_classes), dtype=np.int64))

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ContractViolationError("cannot merge matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    __add__ = merge


def accumulate(cm: ConfusionMatrix, truth: LabelMap, pred: LabelMap) -> ConfusionMatrix:
    """Count (truth, pred) pixel pairs into a new matrix; ignored pixels skip."""
    if (truth.width, truth.height) != (pred.width, pred.height):
        raise ContractViolationError(
            f"truth {truth.height}x{truth.width} vs pred {pred.height}x{pred.width}"
        )
    k = cm.num_classes
    if truth.num_classes != k or pred.num_classes != k:
        raise ContractViolationError(
            f"class counts differ: matrix {k}, truth {truth.num_classes}, pred {pred.num_classes}"
        )
    valid = truth.valid_mask()
    t = truth.labels[valid]
    p = pred.labels[valid]
    if p.size and (p.min() < 0 or p.max() >= k):
        raise ContractViolationError(
            "predictions contain ids outside [0, K) on counted pixels"
        )
    fresh = np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(k, cm.counts + fresh)


@dataclass(frozen=True)
class IoUReport:
    per_class: tuple[float, ...]  # NaN where undefined
    undefined: tuple[int, ...]
    miou: float

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "per_class": [None if np.isnan(v) else v for v in self.per_class],
            "undefined": list(self.undefined),
        }

    def to_csv(self) -> str:
        lines = ["class,iou"]
        lines += [
            f"{c},{'' if np.isnan(v) else repr(v)}" for c, v in enumerate(self.per_class)
        ]
        return "\n".join(lines) + "\n"


def iou_report(cm: ConfusionMatrix) -> IoUReport:
    """Per-class intersection-over-union from pooled counts."""
    diag = np.diag(cm.counts).astype(np.float64)
    denom = cm.counts.sum(axis=1) + cm.counts.sum(axis=0) - np.diag(cm.counts)
    defined = denom > 0
    if not defined.any():
        raise EmptyReportError("every class has an empty union; no IoU is defined")
    per_class = np.full(cm.num_classes, np.nan)
    per_class[defined] = diag[defined] / denom[defined]
    return IoUReport(
        per_class=tuple(per_class.tolist()),
        undefined=tuple(int(c) for c in np.nonzero(~defined)[0]),
        miou=float(per_class[defined].mean()),
    )


@dataclass(frozen=True)
class AgreementReport:
    per_image: tuple[float, ...]
    mean_agreement: float

    def to_dict(self) -> dict:
        return {"mean_agreement": self.mean_agreement, "per_image": list(self.per_image)}


def mean_agreement(predictions: Sequence[Sequence[LabelMap]]) -> AgreementReport:
    """Fraction of pixels on which every model agrees, averaged per image.

    ``predictions[m][i]`` is model m's label map for image i.
    """
    if len(predictions) < 2:
        raise ContractViolationError("agreement needs at least two prediction sets")
    n_images = len(predictions[0])
    if any(len(s) != n_images for s in predictions):
        raise ContractViolationError("prediction sets cover different image counts")
    if n_images == 0:
        raise ContractViolationError("prediction sets are empty")
    ratios = []
    for i in range(n_images):
        maps = [s[i] for s in predictions]
        shape = maps[0].labels.shape
        if any(m.labels.shape != shape for m in maps):
            raise ContractViolationError(f"image {i}: prediction dimensions differ")
        agree = np.ones(shape, dtype=bool)
        for m in maps[1:]:
            agree &= maps[0].labels == m.labels
        ratios.append(float(agree.mean()))
    return AgreementReport(per_image=tuple(ratios), mean_agreement=float(np.mean(ratios)))


@dataclass(frozen=True)
class BenchmarkManifest:
    name: str
    abbreviation: str
    source_dir: str
    target_dir: str
    num_classes: int
    class_names: tuple[str, ...]
    ignore_value: int | None = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "abbreviation": self.abbreviation,
            "source_dir": self.source_dir,
            "target_dir": self.target_dir,
            "num_classes": self.num_classes,
            "class_names": list(self.class_names),
            "ignore_value": self.ignore_value,
        }

    @classmethod
    def from_file(cls, path) -> "BenchmarkManifest":
        raw = json.loads(Path(path).read_text())
        try:
            return cls(
                name=raw["name"],
                abbreviation=raw["abbreviation"],
                source_dir=raw["source_dir"],
                target_dir=raw["target_dir"],
                num_classes=int(raw["num_classes"]),
                class_names=tuple(raw["class_names"]),
                ignore_value=raw.get("ignore_value"),
            )
        except KeyError as exc:
            raise ContractViolationError(f"manifest missing field {exc}") from exc


def discover_pairs(root) -> list[tuple[Path, Path, str, str]]:
    """Find <stem>.srf/<stem>.slm pairs in a directory or its direct subdirs.

    Subdirectory names become domain tags ("all" for the top level). Returns
    (raster_path, label_path, qualified_stem, tag) rows; any stem missing its
    partner aborts with every missing stem listed.
    """
    root = Path(root)
    if not root.is_dir():
        raise ContractViolationError(f"{root}: not a directory")
    scopes = [(root, "all")] + sorted(
        ((d, d.name) for d in root.iterdir() if d.is_dir()), key=lambda t: t[1]
    )
    pairs: list[tuple[Path, Path, str, str]] = []
    missing: list[str] = []
    for directory, tag in scopes:
        rasters = {p.stem: p for p in directory.glob("*.srf")}
        labels = {p.stem: p for p in directory.glob("*.slm")}
        for stem in sorted(rasters.keys() | labels.keys()):
            qualified = stem if tag == "all" else f"{tag}/{stem}"
            if stem in rasters and stem in labels:
                pairs.append((rasters[stem], labels[stem], qualified, tag))
            else:
                missing.append(qualified)
    if missing:
        raise ContractViolationError(f"{root}: unpaired stems: {', '.join(sorted(missing))}")
    if not pairs:
        raise ContractViolationError(f"{root}: no image/label pairs found")
    return pairs


def evaluate_dataset(
    model: ToyModel,
    items: Sequence,
    cfg: DescriptorConfig = DescriptorConfig(),
    enabled: tuple[bool, bool, bool] = (True, True, True),
) -> tuple[IoUReport, list[tuple[str, float]], list[list[RoutingRecord]]]:
    """Run inference over (image, truth[, tag]) items and pool one matrix.

    Returns the pooled report, per-image (stem-or-index, miou) rows, and the
    per-image routing records (one list per image, one record per block).
    """
    cm = ConfusionMatrix.zeros(model.num_classes)
    rows: list[tuple[str, float]] = []
    all_records: list[list[RoutingRecord]] = []
    for i, item in enumerate(items):
        img: RasterImage = item[0]
        truth: LabelMap = item[1]
        stem = str(item[2]) if len(item) > 2 else str(i)
        pred, records = infer_image(model, img, cfg, enabled)
        all_records.append(records)
        fresh = accumulate(ConfusionMatrix.zeros(model.num_classes), truth, pred)
        cm = cm.merge(fresh)
        try:
            rows.append((stem, iou_report(fresh).miou))
        except EmptyReportError:
            rows.append((stem, float("nan")))
    return iou_report(cm), rows, all_records


def load_benchmark_items(
    directory, num_classes: int, ignore_value: int | None
) -> list[tuple[RasterImage, LabelMap, str]]:
    """Read every image/label pair under a benchmark directory."""
    items = []
    for raster_path, label_path, stem, _tag in discover_pairs(directory):
        img = read_raster(raster_path)
        truth = read_labels(label_path, ignore_value=ignore_value)
        if truth.num_classes != num_classes:
            raise ContractViolationError(
                f"{stem}: label file declares {truth.num_classes} classes, manifest {num_classes}"
            )
        items.append((img, truth, stem))
    return items


def run_benchmark(
    manifest: BenchmarkManifest,
    checkpoint_path,
    cfg: DescriptorConfig = DescriptorConfig(),
    enabled: tuple[bool, bool, bool] = (True, True, True),
) -> tuple[IoUReport, list[tuple[str, float]]]:
    """Evaluate a checkpoint on the manifest's target split."""
    model = load_checkpoint(checkpoint_path)
    if model.num_classes != manifest.num_classes:
        raise ContractViolationError(
            f"checkpoint has {model.num_classes} classes, manifest {manifest.num_classes}"
        )
    items = load_benchmark_items(
        manifest.target_dir, manifest.num_classes, manifest.ignore_value
    )
    report, rows, _ = evaluate_dataset(model, items, cfg, enabled)
    return report, rows
