"""Segmentation metrics: confusion matrices, IoU, and multi-model agreement."""
import numpy as np

from sarmoe import (
    ConfusionMatrix,
    LabelMap,
    accumulate,
    iou_report,
    mean_agreement,
)


def labels(arr, k=2):
    arr = np.asarray(arr)
    return LabelMap(width=arr.shape[1], height=arr.shape[0], labels=arr, num_classes=k)


# a small worked example: counts[truth][pred] = [[3, 1], [2, 4]]
cm = ConfusionMatrix(2, np.array([[3, 1], [2, 4]]))
report = iou_report(cm)
print("per-class IoU:", [round(v, 4) for v in report.per_class])
print("mIoU:", report.miou, "(exact value (1/2 + 4/7) / 2 =", (0.5 + 4 / 7) / 2, ")")

# accumulation is a merge monoid: pooled counts, never averaged part scores
rng = np.random.default_rng(5)
truth_a, pred_a = rng.integers(0, 2, (2, 8, 8))
truth_b, pred_b = rng.integers(0, 2, (2, 8, 8))
part_a = accumulate(ConfusionMatrix.zeros(2), labels(truth_a), labels(pred_a))
part_b = accumulate(ConfusionMatrix.zeros(2), labels(truth_b), labels(pred_b))
pooled = iou_report(part_a + part_b).miou
averaged = (iou_report(part_a).miou + iou_report(part_b).miou) / 2
print(f"\npooled mIoU {pooled:.4f} vs averaged per-part {averaged:.4f} (pooled is the metric)")

# agreement: the share of pixels where every model votes the same class,
# averaged per image first, then over images
base = np.array([[0, 1], [1, 0]])
off_by_one = np.array([[0, 1], [1, 1]])
sets = [
    [labels(base), labels(base)],
    [labels(base), labels(base)],
    [labels(base), labels(off_by_one)],
]
agreement = mean_agreement(sets)
print("\nper-image agreement:", agreement.per_image)
print("mean agreement:", agreement.mean_agreement)
