"""Single-step future prediction and frame-wise autoregressive rollout."""

from __future__ import annotations

import numpy as np
import torch

from .data import SequenceRecord
from .model import FuturePredictor
from .types import FrameSequence, label_dtype


def predict_next(record: SequenceRecord, model: FuturePredictor) -> dict[str, np.ndarray]:
    """Predict the next frame's label maps from exactly N_c context frames.

    Every future-frame token enters the transformer as the modality's mask
    embedding; predictions are per-pixel argmax, ties toward the smaller label.
    """
    layout = model.layout
    if record.num_frames != layout.context_frames:
        raise ValueError(
            f"context has {record.num_frames} frames, model expects {layout.context_frames}"
        )
    names = model.modality_names
    labels = {}
    for name in names:
        seq = record.sequences[name]
        ctx = seq.labels.astype(np.int64)
        # future-frame labels are irrelevant: the tokens are fully masked
        full = np.concatenate(
            [ctx, np.zeros((layout.future_frames,) + ctx.shape[1:], dtype=np.int64)]
        )
        labels[name] = torch.from_numpy(full).unsqueeze(0)
    masks = {
        name: torch.ones(1, layout.future_tokens, dtype=torch.bool) for name in names
    }
    was_training = model.training
    model.eval()
    with torch.no_grad():
        logits = model(labels, masks, frames="future")
    if was_training:
        model.train()
    preds = {}
    for name in names:
        spec = model.cfg.modality(name)
        arr = logits[name][0, 0].numpy()  # (H, W, num_labels)
        preds[name] = np.argmax(arr, axis=-1).astype(label_dtype(spec.num_labels))
    return preds


def advance(record: SequenceRecord, prediction: dict[str, np.ndarray]) -> SequenceRecord:
    """Shift the context window: drop the oldest frame, append the prediction."""
    stride = record.subsample_factor
    sequences = {}
    for name, seq in record.sequences.items():
        labels = np.concatenate([seq.labels[1:], prediction[name][None]])
        indices = seq.frame_indices[1:] + (seq.frame_indices[-1] + stride,)
        sequences[name] = FrameSequence(seq.modality, labels, indices)
    return SequenceRecord(sequences=sequences, provenance=record.provenance,
                          subsample_factor=stride)


def rollout(record: SequenceRecord, steps: int,
            model: FuturePredictor) -> list[dict[str, np.ndarray]]:
    """Autoregressive rollout: all modalities advance together each step."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    current = record
    predictions = []
    for _ in range(steps):
        pred = predict_next(current, model)
        predictions.append(pred)
        current = advance(current, pred)
    return predictions
