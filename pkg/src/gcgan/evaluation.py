"""Translation quality metrics: scene-parsing scores and map-pixel scores."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class LabelPalette:
    """Class colors; ``ignore`` names the class excluded from scoring."""

    entries: List[Tuple[int, Tuple[int, int, int], str]]
    ignore: Optional[int] = None

    def __post_init__(self):
        self.entries = sorted(((int(c), tuple(int(v) for v in rgb), str(n)) for c, rgb, n in self.entries))
        ids = [c for c, _, _ in self.entries]
        if not ids:
            raise MetricError("palette is empty")
        if ids != list(range(len(ids))):
            raise MetricError(f"palette class ids must be contiguous from 0, got {ids}")
        colors = [rgb for _, rgb, _ in self.entries]
        if len(set(colors)) != len(colors):
            raise MetricError("palette colors must be unique")
        if self.ignore is not None and self.ignore not in ids:
            raise MetricError(f"ignore class {self.ignore} is not in the palette")

    @property
    def colors(self) -> np.ndarray:
        return np.array([rgb for _, rgb, _ in self.entries], dtype=np.int64)

    @property
    def n_labels(self) -> int:
        return len(self.entries)

    @classmethod
    def load(cls, path, ignore: Optional[int] = None) -> "LabelPalette":
        """Read ``class_id r g b name`` rows. A class named ``ignore`` (or
        the explicit ``ignore`` id) is the ignored label."""
        entries = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 4:
                raise MetricError(f"{path}:{lineno}: expected 'class_id r g b name'")
            name = " ".join(parts[4:]) or parts[0]
            entries.append((int(parts[0]), (int(parts[1]), int(parts[2]), int(parts[3])), name))
            if ignore is None and name.lower() in ("ignore", "ignored", "void"):
                ignore = int(parts[0])
        return cls(entries, ignore)

    def render(self, labels: np.ndarray) -> np.ndarray:
        return self.colors[np.asarray(labels)].astype(np.uint8)


@dataclass
class SegScores:
    pixel_acc: float
    class_acc: float
    mean_iou: float

    def as_dict(self) -> dict:
        return asdict(self)


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")


def rgb_to_labels(img: np.ndarray, palette: LabelPalette) -> np.ndarray:
    """Nearest palette color per pixel (Euclidean in RGB), ties to the
    lowest class id."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise MetricError(f"expected an (H, W, 3) image, got {img.shape}")
    px = (np.rint(img) if img.dtype.kind == "f" else img).astype(np.int64).reshape(-1, 3)
    colors = palette.colors[None]
    out = np.empty(len(px), dtype=np.int64)
    for start in range(0, len(px), 1 << 16):
        d2 = ((px[start:start + (1 << 16), None, :] - colors) ** 2).sum(-1)
        # argmin returns the first minimum, and colors are ordered by class id
        out[start:start + len(d2)] = d2.argmin(axis=1)
    return out.reshape(img.shape[:2])


def upsample_nearest(labels: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    h, w = labels.shape
    rows = (np.arange(size[0]) * h) // size[0]
    cols = (np.arange(size[1]) * w) // size[1]
    return labels[rows[:, None], cols[None, :]]


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, n_classes: int, ignore: Optional[int] = None) -> np.ndarray:
    """Counts with rows = ground truth, columns = prediction.

    Labels range over ``[0, n_classes)``. Pixels whose ground truth is
    ``ignore`` are dropped, and so is the ignore class's row and column.
    A final extra column collects predictions that are out of range or
    equal to ``ignore``. Those always count as errors.
    """
    pred = np.asarray(pred).astype(np.int64).ravel()
    gt = np.asarray(gt).astype(np.int64).ravel()
    valid = (gt >= 0) & (gt < n_classes)
    if ignore is not None:
        valid &= gt != ignore
    p = pred[valid]
    bad = (p < 0) | (p >= n_classes)
    if ignore is not None:
        bad |= p == ignore
    p = np.where(bad, n_classes, p)
    counts = np.bincount(gt[valid] * (n_classes + 1) + p, minlength=n_classes * (n_classes + 1))
    cm = counts.reshape(n_classes, n_classes + 1)
    if ignore is not None and 0 <= ignore < n_classes:
        cm = np.delete(np.delete(cm, ignore, axis=0), ignore, axis=1)
    return cm


def scores_from_confusion(cm: np.ndarray, class_acc_over: str = "gt") -> SegScores:
    """Pixel accuracy, mean class accuracy and mean IoU.

    Class accuracy averages over classes present in the ground truth
    (``class_acc_over="gt"``) or over every class seen in either map
    (``"union"``, absent-from-gt classes scoring 0). IoU averages over
    classes with a non-empty union.
    """
    n = cm.shape[0]
    tp = [int(cm[c, c]) for c in range(n)]
    gt_count = [int(cm[c].sum()) for c in range(n)]
    pred_count = [int(cm[:, c].sum()) for c in range(n)]
    total = int(cm.sum())
    pixel_acc = sum(tp) / total if total else 0.0
    if class_acc_over == "gt":
        accs = [Fraction(tp[c], gt_count[c]) for c in range(n) if gt_count[c] > 0]
    elif class_acc_over == "union":
        accs = [Fraction(tp[c], gt_count[c]) if gt_count[c] else Fraction(0)
                for c in range(n) if gt_count[c] + pred_count[c] > 0]
    else:
        raise ValueError(f"class_acc_over must be 'gt' or 'union', got {class_acc_over!r}")
    ious = []
    for c in range(n):
        union = gt_count[c] + pred_count[c] - tp[c]
        if union > 0:
            ious.append(Fraction(tp[c], union))
    # exact rational means, rounded once
    class_acc = float(sum(accs) / len(accs)) if accs else 0.0
    mean_iou = float(sum(ious) / len(ious)) if ious else 0.0
    return SegScores(pixel_acc, class_acc, mean_iou)


def segmentation_scores(
    pred: np.ndarray,
    gt: np.ndarray,
    n_classes: int,
    ignore: Optional[int] = None,
    class_acc_over: str = "gt",
) -> SegScores:
    pred, gt = np.asarray(pred), np.asarray(gt)
    _check_same(pred, gt)
    return scores_from_confusion(confusion_matrix(pred, gt, n_classes, ignore), class_acc_over)


def _as_int(a) -> np.ndarray:
    a = np.asarray(a)
    return a.astype(np.float64) if a.dtype.kind == "f" else a.astype(np.int64)


def map_accuracy(pred: np.ndarray, gt: np.ndarray, delta: float) -> float:
    """Fraction of pixels whose largest per-channel deviation is < delta."""
    if delta <= 0:
        raise MetricError("delta must be positive")
    pred, gt = _as_int(pred), _as_int(gt)
    _check_same(pred, gt)
    dev = np.abs(pred - gt)
    if dev.ndim == 3:
        dev = dev.max(axis=-1)
    return float((dev < delta).mean())


def rmse(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _as_int(pred), _as_int(gt)
    _check_same(pred, gt)
    return float(np.sqrt(np.mean((pred - gt).astype(np.float64) ** 2)))


def aggregate_score(s: SegScores) -> float:
    return (s.pixel_acc + s.class_acc + s.mean_iou) / 3.0
