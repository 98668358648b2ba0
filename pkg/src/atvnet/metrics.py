"""Confusion-matrix based IoU / mIoU evaluation."""
import numpy as np

IGNORE_INDEX = 255


class ConfusionMatrix:
    """counts[g, p] = number of valid pixels with ground truth g predicted as p."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, label, ignore_index=IGNORE_INDEX) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        label = np.asarray(label)
        if pred.shape != label.shape:
            raise ValueError(f"pred {pred.shape} and label {label.shape} differ in shape")
        k = self.num_classes
        valid = label != ignore_index
        p, g = pred[valid].astype(np.int64), label[valid].astype(np.int64)
        if p.size and (p.min() < 0 or p.max() >= k):
            raise ValueError("prediction out of class range")
        if g.size and (g.min() < 0 or g.max() >= k):
            raise ValueError("label out of class range")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN marks classes with TP + FP + FN = 0."""
    c = cm.counts
    tp = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - tp
    out = np.full(cm.num_classes, np.nan)
    defined = union > 0
    out[defined] = tp[defined] / union[defined]
    return out


def mean_iou(cm: ConfusionMatrix) -> float:
    iou = iou_per_class(cm)
    if np.isnan(iou).all():
        raise ValueError("mIoU undefined: no class appears in labels or predictions")
    return float(np.nanmean(iou))


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def format_report(cm: ConfusionMatrix) -> str:
    """Key=value report lines: class_<k>_iou, miou, pixel_acc."""
    lines = [f"class_{k}_iou={v:.6f}" for k, v in enumerate(iou_per_class(cm))]
    lines.append(f"miou={mean_iou(cm):.6f}")
    lines.append(f"pixel_acc={pixel_accuracy(cm):.6f}")
    return "\n".join(lines)
