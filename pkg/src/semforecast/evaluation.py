"""Forecast quality metrics, the Copy-Last baseline, and report emission.

Segmentation is scored by mean IoU over the classes present in the ground
truth (global confusion matrix per split), optionally restricted to a movable
subset. Depth is scored in disparity space after dequantizing bins: AbsRel
(x100) and the delta_1 threshold ratio (strict < 1.25). Ground-truth pixels
with labels outside [0, num_labels) are ignored.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .data import (
    DEPTH,
    SEGMENTATION,
    SequenceRecord,
    SyntheticSceneSpec,
    context_frame_indices,
    dequantize_depth,
    load_sequence,
    load_target_maps,
    nearest_resize,
    render_frame,
    render_synthetic,
)
from .model import FuturePredictor
from .rollout import rollout
from .types import DEFAULT_STRIDE, ROLLOUT_STEPS, Horizon, ModalitySpec

#: Disparity floor applied before ratio metrics; a no-op for 256 bins.
DISPARITY_FLOOR = 1.0 / 512.0


# --- segmentation ---------------------------------------------------------------

def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_labels: int) -> np.ndarray:
    """(num_labels, num_labels + 1) matrix, rows = gt class, cols = pred class.

    Ground-truth pixels outside [0, num_labels) are ignored; predictions
    outside the range land in the final overflow column (never intersecting).
    """
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    valid = (gt >= 0) & (gt < num_labels)
    pred = pred[valid]
    pred = np.where((pred >= 0) & (pred < num_labels), pred, num_labels)
    gt = gt[valid]
    counts = np.bincount(gt * (num_labels + 1) + pred,
                         minlength=num_labels * (num_labels + 1))
    return counts.reshape(num_labels, num_labels + 1)


def miou_from_confusion(cm: np.ndarray,
                        class_subset: Iterable[int] | None = None) -> float | None:
    """Mean IoU (x100) over classes present in gt; None when nothing is scorable."""
    num_labels = cm.shape[0]
    gt_count = cm.sum(axis=1)
    pred_count = cm[:, :num_labels].sum(axis=0)
    diag = np.diagonal(cm)[:num_labels].astype(np.float64)
    present = gt_count > 0
    if class_subset is not None:
        subset = np.zeros(num_labels, dtype=bool)
        subset[[c for c in class_subset if 0 <= c < num_labels]] = True
        present = present & subset
    if not present.any():
        return None
    union = gt_count + pred_count - np.diagonal(cm)[:num_labels]
    iou = diag[present] / union[present].astype(np.float64)
    return float(100.0 * iou.mean())


def miou(pred: np.ndarray, gt: np.ndarray, num_labels: int,
         class_subset: Iterable[int] | None = None) -> float | None:
    return miou_from_confusion(confusion_matrix(pred, gt, num_labels), class_subset)


# --- depth ------------------------------------------------------------------------

def absrel_delta(gt_disp: np.ndarray, pred_disp: np.ndarray,
                 denominator: str = "pred") -> tuple[float, float]:
    """(AbsRel x100, delta_1 percent) on disparity arrays; strict 1.25 threshold."""
    a = np.maximum(np.asarray(gt_disp, dtype=np.float64), DISPARITY_FLOOR)
    b = np.maximum(np.asarray(pred_disp, dtype=np.float64), DISPARITY_FLOOR)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: gt {a.shape} vs pred {b.shape}")
    if denominator == "pred":
        denom = b
    elif denominator == "gt":
        denom = a
    else:
        raise ValueError(f"denominator must be 'pred' or 'gt', got {denominator!r}")
    absrel = float(100.0 * np.mean(np.abs(a - b) / denom))
    ratio = np.maximum(a / b, b / a)
    delta1 = float(100.0 * np.mean(ratio < 1.25))
    return absrel, delta1


def depth_metrics(pred_bins: np.ndarray, gt_bins: np.ndarray, num_bins: int,
                  denominator: str = "pred") -> tuple[float, float]:
    """Depth metrics on quantized bins (dequantized to bin-center disparities)."""
    return absrel_delta(dequantize_depth(gt_bins, num_bins),
                        dequantize_depth(pred_bins, num_bins),
                        denominator=denominator)


# --- predictors -------------------------------------------------------------------

class CopyLastPredictor:
    """Repeats the last context frame's maps for every requested step."""

    name = "copy-last"

    def predict(self, context: SequenceRecord, steps: int) -> list[dict[str, np.ndarray]]:
        last = {name: seq.labels[-1] for name, seq in context.sequences.items()}
        return [dict(last) for _ in range(steps)]


class ModelPredictor:
    """Autoregressive rollout of a trained (or untrained) predictor."""

    name = "model"

    def __init__(self, model: FuturePredictor):
        self.model = model

    def predict(self, context: SequenceRecord, steps: int) -> list[dict[str, np.ndarray]]:
        return rollout(context, steps, self.model)


# --- evaluation items ---------------------------------------------------------------

@dataclass(frozen=True)
class EvalItem:
    name: str
    context: SequenceRecord
    targets: dict[str, np.ndarray]  # native-resolution ground truth


@dataclass(frozen=True)
class EvalFailure:
    name: str
    error: str


def synthetic_eval_items(
    scene_specs: Sequence[SyntheticSceneSpec],
    layout,
    horizon: Horizon,
    target_frame: int = 20,
    stride: int = DEFAULT_STRIDE,
) -> list[EvalItem]:
    """Evaluation items with exact rendered ground truth at the target frame."""
    items = []
    indices = None
    for i, spec in enumerate(scene_specs):
        indices = context_frame_indices(target_frame, horizon, layout.context_frames, stride)
        context = render_synthetic(spec, indices, provenance=f"synth_{i:06d}")
        gt_seg, gt_dep = render_frame(spec, target_frame)
        items.append(EvalItem(name=f"synth_{i:06d}", context=context,
                              targets={SEGMENTATION: gt_seg, DEPTH: gt_dep}))
    return items


def manifest_eval_items(
    root,
    entries: Sequence[tuple[str, str, int]],
    layout,
    horizon: Horizon,
    modalities: Sequence[ModalitySpec],
    stride: int = DEFAULT_STRIDE,
) -> list[EvalItem | EvalFailure]:
    items: list[EvalItem | EvalFailure] = []
    for city, seq_id, target in entries:
        name = f"{city}_{seq_id}"
        try:
            context = load_sequence(root, city, seq_id, target, horizon, layout,
                                    modalities, stride)
            targets = load_target_maps(root, city, seq_id, target, modalities)
        except (FileNotFoundError, ValueError) as exc:
            items.append(EvalFailure(name=name, error=str(exc)))
            continue
        items.append(EvalItem(name=name, context=context, targets=targets))
    return items


# --- split-level evaluation ------------------------------------------------------------

@dataclass
class MetricRow:
    method: str
    horizon: str
    miou_all: float | None
    miou_mo: float | None
    delta1: float | None
    absrel: float | None
    num_items: int
    num_failures: int


@dataclass
class MetricReport:
    rows: list[MetricRow]

    @property
    def complete(self) -> bool:
        return all(r.num_failures == 0 for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["method", "horizon", "miou_all", "miou_mo",
                         "delta1", "absrel", "items", "failures"])
        for r in self.rows:
            writer.writerow([
                r.method, r.horizon,
                *("" if v is None else f"{v:.4f}"
                  for v in (r.miou_all, r.miou_mo, r.delta1, r.absrel)),
                r.num_items, r.num_failures,
            ])
        return buf.getvalue()

    def to_text(self) -> str:
        header = (f"{'method':<12} {'horizon':<8} {'ALL':>8} {'MO':>8} "
                  f"{'delta1':>8} {'AbsRel':>8} {'items':>6} {'failed':>6}")
        lines = [header, "-" * len(header)]
        for r in self.rows:
            def fmt(v):
                return "-" if v is None else f"{v:.2f}"
            lines.append(
                f"{r.method:<12} {r.horizon:<8} {fmt(r.miou_all):>8} {fmt(r.miou_mo):>8} "
                f"{fmt(r.delta1):>8} {fmt(r.absrel):>8} {r.num_items:>6} {r.num_failures:>6}"
            )
        if not self.complete:
            lines.append("warning: some items failed to load; results are incomplete")
        return "\n".join(lines) + "\n"

    def save(self, prefix) -> tuple[str, str]:
        from pathlib import Path
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        csv_path = prefix.with_suffix(".csv")
        txt_path = prefix.with_suffix(".txt")
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        txt_path.write_text(self.to_text(), encoding="utf-8")
        return str(csv_path), str(txt_path)


def evaluate(
    predictor,
    items: Sequence[EvalItem | EvalFailure],
    horizon: Horizon,
    modalities: Sequence[ModalitySpec],
    absrel_denominator: str = "pred",
    method: str | None = None,
) -> MetricRow:
    """Score one predictor over a split; confusion matrix and depth pixel pools
    accumulate globally. Predictions are upscaled to ground-truth resolution
    by nearest neighbor before scoring."""
    steps = ROLLOUT_STEPS[horizon]
    seg_spec = next((m for m in modalities if m.name != DEPTH), None)
    dep_spec = next((m for m in modalities if m.name == DEPTH), None)

    cm = (np.zeros((seg_spec.num_labels, seg_spec.num_labels + 1), dtype=np.int64)
          if seg_spec else None)
    abs_sum = 0.0
    delta_hits = 0
    depth_pixels = 0

    num_items = 0
    num_failures = 0
    for item in items:
        if isinstance(item, EvalFailure):
            num_failures += 1
            continue
        num_items += 1
        final = predictor.predict(item.context, steps)[-1]
        if seg_spec is not None:
            gt = item.targets[seg_spec.name]
            pred = nearest_resize(final[seg_spec.name], *gt.shape)
            cm += confusion_matrix(pred, gt, seg_spec.num_labels)
        if dep_spec is not None:
            gt = item.targets[dep_spec.name]
            pred = nearest_resize(final[dep_spec.name], *gt.shape)
            a = np.maximum(dequantize_depth(gt, dep_spec.num_labels), DISPARITY_FLOOR)
            b = np.maximum(dequantize_depth(pred, dep_spec.num_labels), DISPARITY_FLOOR)
            denom = b if absrel_denominator == "pred" else a
            abs_sum += float(np.sum(np.abs(a - b) / denom))
            delta_hits += int(np.sum(np.maximum(a / b, b / a) < 1.25))
            depth_pixels += a.size

    movable = seg_spec.movable_label_ids if seg_spec else None
    return MetricRow(
        method=method or getattr(predictor, "name", "model"),
        horizon=horizon.name,
        miou_all=miou_from_confusion(cm) if cm is not None else None,
        miou_mo=(miou_from_confusion(cm, movable)
                 if cm is not None and movable else None),
        delta1=(100.0 * delta_hits / depth_pixels) if depth_pixels else None,
        absrel=(100.0 * abs_sum / depth_pixels) if depth_pixels else None,
        num_items=num_items,
        num_failures=num_failures,
    )


# --- colorized output ------------------------------------------------------------------

#: Cityscapes train-id colors for the 19 evaluation classes.
CITYSCAPES_PALETTE = np.array([
    (128, 64, 128), (244, 35, 232), (70, 70, 70), (102, 102, 156),
    (190, 153, 153), (153, 153, 153), (250, 170, 30), (220, 220, 0),
    (107, 142, 35), (152, 251, 152), (70, 130, 180), (220, 20, 60),
    (255, 0, 0), (0, 0, 142), (0, 0, 70), (0, 60, 100),
    (0, 80, 100), (0, 0, 230), (119, 11, 32),
], dtype=np.uint8)

_TURBO_ANCHORS = np.array([
    (48, 18, 59), (33, 144, 254), (27, 228, 181), (122, 252, 82),
    (237, 208, 58), (251, 112, 26), (122, 4, 3),
], dtype=np.float64)


def seg_palette(num_labels: int) -> np.ndarray:
    """(num_labels, 3) uint8 palette with pairwise-distinct colors."""
    if num_labels <= len(CITYSCAPES_PALETTE):
        return CITYSCAPES_PALETTE[:num_labels].copy()
    palette = list(map(tuple, CITYSCAPES_PALETTE))
    rng = np.random.default_rng(0)
    seen = set(palette)
    while len(palette) < num_labels:
        color = tuple(int(c) for c in rng.integers(0, 256, size=3))
        if color not in seen:
            palette.append(color)
            seen.add(color)
    return np.array(palette, dtype=np.uint8)


def depth_palette(num_bins: int) -> np.ndarray:
    """Turbo-style LUT mapping bin 0..num_bins-1 to RGB."""
    t = np.linspace(0.0, 1.0, num_bins)
    anchors_t = np.linspace(0.0, 1.0, len(_TURBO_ANCHORS))
    rgb = np.stack([np.interp(t, anchors_t, _TURBO_ANCHORS[:, c]) for c in range(3)], axis=1)
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def colorize(labels: np.ndarray, palette: np.ndarray) -> np.ndarray:
    return palette[np.asarray(labels).astype(np.int64)]


def save_indexed_png(path, labels: np.ndarray, palette: np.ndarray) -> None:
    """Palette PNG: pixels store label ids, the palette carries the colors."""
    from pathlib import Path
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    full = np.zeros((256, 3), dtype=np.uint8)
    full[: len(palette)] = palette
    img.putpalette(full.reshape(-1).tolist())
    img.save(path)


def save_rgb_png(path, rgb: np.ndarray) -> None:
    from pathlib import Path
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path)
