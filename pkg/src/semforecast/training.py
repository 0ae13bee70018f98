"""Masked multimodal cross-entropy objective, training loop, and checkpoints.

The per-modality loss sums cross-entropy over masked future tokens and their
pixels, normalized by (masked tokens x P^2) so the learning rate does not
depend on the sampled masking ratio; the total is the loss-weighted sum over
modalities, averaged over batch items.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import SequenceRecord
from .masking import MaskSampler
from .model import ConfigError, FuturePredictor, build_model
from .tokenizer import patchify
from .types import (
    DEFAULT_STRIDE,
    FrameSequence,
    MaskSet,
    ModalitySpec,
    ModelConfig,
    TokenLayout,
    config_from_text,
    config_to_text,
    validate_config,
)

CHECKPOINT_VERSION = 1
_HEADER_LEN_FMT = "<Q"

LossCallback = Callable[[int, "LossBreakdown", float], None]


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


@dataclass
class LossBreakdown:
    """Weighted multimodal objective value plus its per-modality terms."""

    per_modality: dict[str, float]
    masked_tokens: dict[str, int]
    total: float
    normalization: str = "masked_tokens_x_patch_pixels"


def _tokenwise_ce(logits: torch.Tensor, targets: torch.Tensor,
                  layout: TokenLayout) -> torch.Tensor:
    """Cross-entropy per (token, pixel): (B, Np, H, W, Lab) -> (B, Np*L, P^2)."""
    b, lab = logits.shape[0], logits.shape[-1]
    p = layout.patch
    tok = patchify(logits, p).view(b, layout.future_tokens, p * p, lab)
    tgt = patchify(targets.unsqueeze(-1).long(), p).view(b, layout.future_tokens, p * p)
    ce = F.cross_entropy(tok.reshape(-1, lab), tgt.reshape(-1), reduction="none")
    return ce.view(b, layout.future_tokens, p * p)


def _as_label_tensor(targets) -> torch.Tensor:
    if isinstance(targets, FrameSequence):
        targets = targets.labels
    if isinstance(targets, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(targets.astype(np.int64)))
    return targets.long()


def masked_loss(
    logits: Mapping[str, torch.Tensor],
    targets: Mapping[str, FrameSequence | np.ndarray | torch.Tensor],
    masks: MaskSet,
    layout: TokenLayout,
    modalities: Sequence[ModalitySpec],
) -> tuple[torch.Tensor, LossBreakdown]:
    """Single-record objective. `logits` holds per-modality label logits over
    all N frames, shape (N, H, W, num_labels); only masked future tokens
    contribute. Returns the differentiable total and a detached breakdown.
    """
    per: dict[str, float] = {}
    counts: dict[str, int] = {}
    total = None
    pixels_per_token = layout.patch * layout.patch
    for spec in modalities:
        name = spec.name
        mask = torch.from_numpy(np.ascontiguousarray(masks.per_modality[name])).float()
        count = int(mask.sum().item())
        if count == 0:
            raise ValueError(
                f"contract violation: empty mask for modality '{name}' "
                "(the schedule clamp guarantees at least one masked token)"
            )
        lg = logits[name]
        if lg.shape[0] != layout.frames:
            raise ValueError(
                f"logits for '{name}' must cover all {layout.frames} frames, "
                f"got {lg.shape[0]}"
            )
        fut = lg[layout.context_frames:].unsqueeze(0)
        tgt = _as_label_tensor(targets[name])[layout.context_frames:].unsqueeze(0)
        ce = _tokenwise_ce(fut, tgt, layout)[0]  # (T, P^2)
        loss = (ce * mask.unsqueeze(1)).sum() / (count * pixels_per_token)
        per[name] = float(loss.detach())
        counts[name] = count
        term = spec.loss_weight * loss
        total = term if total is None else total + term
    breakdown = LossBreakdown(per_modality=per, masked_tokens=counts,
                              total=float(total.detach()))
    return total, breakdown


def batched_masked_loss(
    future_logits: Mapping[str, torch.Tensor],
    future_targets: Mapping[str, torch.Tensor],
    masks: Mapping[str, torch.Tensor],
    layout: TokenLayout,
    modalities: Sequence[ModalitySpec],
) -> tuple[torch.Tensor, LossBreakdown]:
    """Batch objective: plain mean over items of the per-item normalized loss.

    future_logits: (B, Np, H, W, Lab); masks: (B, Np*L) with 1 = masked.
    """
    per: dict[str, float] = {}
    counts: dict[str, int] = {}
    total = None
    pixels_per_token = layout.patch * layout.patch
    for spec in modalities:
        name = spec.name
        mask = masks[name].float()
        item_counts = mask.sum(dim=1)
        if int(item_counts.min().item()) == 0:
            raise ValueError(f"contract violation: empty mask for modality '{name}'")
        ce = _tokenwise_ce(future_logits[name], future_targets[name], layout)
        item_loss = (ce * mask.unsqueeze(-1)).sum(dim=(1, 2)) / (item_counts * pixels_per_token)
        loss = item_loss.mean()
        per[name] = float(loss.detach())
        counts[name] = int(item_counts.sum().item())
        term = spec.loss_weight * loss
        total = term if total is None else total + term
    breakdown = LossBreakdown(per_modality=per, masked_tokens=counts,
                              total=float(total.detach()))
    return total, breakdown


def _train_step_loss(
    model: FuturePredictor,
    labels: Mapping[str, torch.Tensor],
    masks: Mapping[str, torch.Tensor],
) -> tuple[torch.Tensor, LossBreakdown]:
    """Trainer fast path: decode and score only the masked future tokens.

    Numerically the same objective as batched_masked_loss over the full
    image-space logits, without materializing them.
    """
    layout = model.layout
    pp = layout.patch * layout.patch
    out = model.backbone(model.encode(labels, masks))
    fut = out[:, layout.context_frames * layout.tokens_per_frame:]  # (B, T, d)
    b, t, d = fut.shape
    flat = fut.reshape(b * t, d)
    item_of_token = torch.arange(b).repeat_interleave(t)

    per: dict[str, float] = {}
    counts: dict[str, int] = {}
    total = None
    for spec in model.cfg.modalities:
        name = spec.name
        mask = masks[name]
        item_counts = mask.sum(dim=1)
        if int(item_counts.min().item()) == 0:
            raise ValueError(f"contract violation: empty mask for modality '{name}'")
        sel = mask.reshape(-1)
        tokens = flat[sel]  # (M, d)
        pix = model.decoders[name].head(tokens).view(-1, pp, spec.pixel_embed_dim)
        logits = F.linear(pix, model.embedders[name].pixel_table)  # (M, pp, lab)
        future_labels = labels[name][:, layout.context_frames:]
        tgt = patchify(future_labels.unsqueeze(-1).long(), layout.patch)
        tgt = tgt.view(b * t, pp)[sel]
        ce = F.cross_entropy(logits.reshape(-1, spec.num_labels), tgt.reshape(-1),
                             reduction="none").view(-1, pp)
        per_item = torch.zeros(b, dtype=ce.dtype).index_add_(
            0, item_of_token[sel], ce.sum(dim=1))
        loss = (per_item / (item_counts.to(ce.dtype) * pp)).mean()
        per[name] = float(loss.detach())
        counts[name] = int(item_counts.sum().item())
        term = spec.loss_weight * loss
        total = term if total is None else total + term
    breakdown = LossBreakdown(per_modality=per, masked_tokens=counts,
                              total=float(total.detach()))
    return total, breakdown


def cosine_lr(base: float, step: int, total_steps: int) -> float:
    """Cosine-annealed learning rate from `base` at step 0 toward 0."""
    if total_steps <= 0:
        return base
    t = min(step, total_steps)
    return 0.5 * base * (1.0 + math.cos(math.pi * t / total_steps))


# --- checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    """Full training state: parameters, optimizer moments, counters, rng."""

    config: ModelConfig
    step: int
    epoch: int
    params: dict[str, np.ndarray]
    opt_state: dict[str, np.ndarray] = field(default_factory=dict)
    rng: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Single binary file: little-endian header length, UTF-8 JSON header
    (version, config, tensor manifest with offsets/dtypes/shapes), raw bytes."""
    arrays: dict[str, np.ndarray] = {}
    for name, arr in ckpt.params.items():
        arrays[f"model/{name}"] = arr
    for name, arr in ckpt.opt_state.items():
        arrays[f"opt/{name}"] = arr

    manifest = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        manifest.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)

    header = {
        "format_version": ckpt.version,
        "config": config_to_text(ckpt.config),
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "rng": ckpt.rng,
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(struct.pack(_HEADER_LEN_FMT, len(header_bytes)))
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    data = path.read_bytes()
    prefix = struct.calcsize(_HEADER_LEN_FMT)
    if len(data) < prefix:
        raise CheckpointCorruptError(f"{path}: file too short for a header")
    (header_len,) = struct.unpack(_HEADER_LEN_FMT, data[:prefix])
    if len(data) < prefix + header_len:
        raise CheckpointCorruptError(f"{path}: truncated header")
    try:
        header = json.loads(data[prefix:prefix + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable header ({exc})") from exc
    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {version} is incompatible "
            f"with supported version {CHECKPOINT_VERSION}"
        )
    blob = data[prefix + header_len:]
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(blob):
            raise CheckpointCorruptError(
                f"{path}: tensor '{entry['name']}' extends past end of file"
            )
        arr = np.frombuffer(blob[start:start + nbytes], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    params = {n[len("model/"):]: a for n, a in arrays.items() if n.startswith("model/")}
    opt_state = {n[len("opt/"):]: a for n, a in arrays.items() if n.startswith("opt/")}
    return Checkpoint(
        config=config_from_text(header["config"]),
        step=int(header["step"]),
        epoch=int(header["epoch"]),
        params=params,
        opt_state=opt_state,
        rng=header.get("rng", {}),
        version=int(version),
    )


def _snapshot(model: FuturePredictor, optimizer: torch.optim.Optimizer,
              cfg: ModelConfig, step: int, epoch: int, rng: dict) -> Checkpoint:
    params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    opt_state: dict[str, np.ndarray] = {}
    names = {id(p): n for n, p in model.named_parameters()}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            base = names[id(p)]
            for key in ("step", "exp_avg", "exp_avg_sq"):
                value = state[key]
                if isinstance(value, torch.Tensor):
                    opt_state[f"{base}.{key}"] = value.detach().cpu().numpy().copy()
                else:
                    opt_state[f"{base}.{key}"] = np.asarray(value)
    return Checkpoint(config=cfg, step=step, epoch=epoch, params=params,
                      opt_state=opt_state, rng=rng)


def restore_model(ckpt: Checkpoint) -> FuturePredictor:
    """Rebuild a predictor from a checkpoint (inference-ready, eval mode)."""
    model = FuturePredictor(ckpt.config)
    state = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in ckpt.params.items()}
    model.load_state_dict(state)
    model.eval()
    return model


def _restore_optimizer(optimizer: torch.optim.Optimizer, model: FuturePredictor,
                       opt_state: Mapping[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    for base, p in params.items():
        key = f"{base}.exp_avg"
        if key not in opt_state:
            continue
        optimizer.state[p] = {
            "step": torch.from_numpy(np.ascontiguousarray(opt_state[f"{base}.step"])),
            "exp_avg": torch.from_numpy(np.ascontiguousarray(opt_state[f"{base}.exp_avg"])),
            "exp_avg_sq": torch.from_numpy(np.ascontiguousarray(opt_state[f"{base}.exp_avg_sq"])),
        }


# --- training loop ---------------------------------------------------------------

def enumerate_windows(records: Sequence[SequenceRecord], layout: TokenLayout,
                      stride: int) -> list[tuple[int, int]]:
    """(record, start) pairs such that start + (N-1)*stride is a valid frame."""
    need = (layout.frames - 1) * stride
    out = []
    for ri, rec in enumerate(records):
        for start in range(rec.num_frames - need):
            out.append((ri, start))
    return out


def _collate(records: Sequence[SequenceRecord], windows: Sequence[tuple[int, int]],
             layout: TokenLayout, stride: int, names: Sequence[str]) -> dict[str, torch.Tensor]:
    span = (layout.frames - 1) * stride + 1
    labels = {}
    for name in names:
        stack = np.stack([
            records[ri].sequences[name].labels[start:start + span:stride]
            for ri, start in windows
        ])
        labels[name] = torch.from_numpy(stack.astype(np.int64))
    return labels


def train(
    cfg: ModelConfig,
    records: Sequence[SequenceRecord],
    callbacks: Sequence[LossCallback] = (),
    checkpoint_path=None,
    resume: Checkpoint | str | Path | None = None,
    stride: int = DEFAULT_STRIDE,
) -> Checkpoint:
    """Run the masked-modeling training loop; returns the final checkpoint.

    Deterministic for a fixed config seed and record order. A checkpoint is
    written at every epoch boundary when `checkpoint_path` is given; resuming
    from one reproduces the uninterrupted trajectory exactly.
    """
    violations = validate_config(cfg)
    if violations:
        raise ConfigError(violations)
    if not records:
        raise ValueError("training dataset is empty")

    layout = cfg.layout
    names = [m.name for m in cfg.modalities]
    windows = enumerate_windows(records, layout, stride)
    if not windows:
        raise ValueError(
            f"no training windows: sequences need at least "
            f"{(layout.frames - 1) * stride + 1} frames"
        )

    model = build_model(cfg)
    model.train()
    opt_cfg = cfg.optimizer
    optimizer = torch.optim.Adam(model.parameters(), lr=opt_cfg.learning_rate,
                                 betas=(opt_cfg.beta1, opt_cfg.beta2))

    master_rng = np.random.default_rng(cfg.seed)
    sampler = MaskSampler(
        strategy=cfg.masking_strategy, schedule=cfg.schedule, layout=layout,
        modalities=cfg.modalities,
        rng=np.random.default_rng(int(master_rng.integers(2 ** 62))),
    )

    batch_size = min(opt_cfg.batch_size, len(windows))
    steps_per_epoch = len(windows) // batch_size
    total_steps = opt_cfg.epochs * steps_per_epoch

    step = 0
    start_epoch = 0
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        if config_to_text(ckpt.config) != config_to_text(cfg):
            raise ConfigError(["resume checkpoint config does not match the requested config"])
        state = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in ckpt.params.items()}
        model.load_state_dict(state)
        _restore_optimizer(optimizer, model, ckpt.opt_state)
        if ckpt.rng:
            master_rng.bit_generator.state = ckpt.rng["trainer"]
            sampler.rng.bit_generator.state = ckpt.rng["sampler"]
        step = ckpt.step
        start_epoch = ckpt.epoch

    def rng_state() -> dict:
        return {"trainer": master_rng.bit_generator.state,
                "sampler": sampler.rng.bit_generator.state}

    for epoch in range(start_epoch, opt_cfg.epochs):
        order = master_rng.permutation(len(windows))
        for b in range(steps_per_epoch):
            chunk = [windows[i] for i in order[b * batch_size:(b + 1) * batch_size]]
            labels = _collate(records, chunk, layout, stride, names)
            mask_sets = [sampler.sample() for _ in chunk]
            masks = {
                name: torch.from_numpy(
                    np.stack([m.per_modality[name] for m in mask_sets])
                ).bool()
                for name in names
            }
            lr = cosine_lr(opt_cfg.learning_rate, step, total_steps)
            for group in optimizer.param_groups:
                group["lr"] = lr

            total, breakdown = _train_step_loss(model, labels, masks)
            if not math.isfinite(breakdown.total):
                raise TrainingDiverged(
                    f"non-finite loss at step {step}: {breakdown.per_modality}"
                )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            step += 1
            for cb in callbacks:
                cb(step, breakdown, lr)
        if checkpoint_path is not None:
            save_checkpoint(
                _snapshot(model, optimizer, cfg, step, epoch + 1, rng_state()),
                checkpoint_path,
            )

    final = _snapshot(model, optimizer, cfg, step, max(start_epoch, opt_cfg.epochs),
                      rng_state())
    if checkpoint_path is not None:
        save_checkpoint(final, checkpoint_path)
    return final
