"""Shared domain types, token-layout arithmetic, and config (de)serialization."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np


class Fusion(Enum):
    CONCAT = "CONCAT"
    ADD = "ADD"


class MaskingStrategy(Enum):
    FULLY_INDEPENDENT_SAME_R = "FULLY_INDEPENDENT_SAME_R"
    FULLY_INDEPENDENT_DIFF_R = "FULLY_INDEPENDENT_DIFF_R"
    FULLY_SHARED = "FULLY_SHARED"
    PARTIALLY_SHARED_EXCLUSIVE = "PARTIALLY_SHARED_EXCLUSIVE"
    FULLY_MASKED = "FULLY_MASKED"


class Schedule(Enum):
    IDENTITY = "IDENTITY"
    COSINE = "COSINE"


class Horizon(Enum):
    SHORT = "SHORT"
    MID = "MID"


#: Autoregressive steps per evaluation horizon (frames 14, 17, 20 for MID).
ROLLOUT_STEPS = {Horizon.SHORT: 1, Horizon.MID: 3}

#: Temporal subsampling factor applied to source sequences.
DEFAULT_STRIDE = 3


def label_dtype(num_labels: int) -> np.dtype:
    """Smallest unsigned integer dtype that can hold labels 0..num_labels-1."""
    if num_labels <= 256:
        return np.dtype(np.uint8)
    if num_labels <= 65536:
        return np.dtype(np.uint16)
    return np.dtype(np.uint32)


@dataclass(frozen=True)
class ModalitySpec:
    """One discrete per-pixel label channel and its embedding widths."""

    name: str
    num_labels: int
    pixel_embed_dim: int
    token_embed_dim: int
    loss_weight: float = 1.0
    movable_label_ids: frozenset[int] | None = None


@dataclass(frozen=True)
class TokenLayout:
    """Frame/patch geometry; every token index in the model derives from this."""

    frames: int
    context_frames: int
    future_frames: int
    height: int
    width: int
    patch: int

    @property
    def grid_height(self) -> int:
        return self.height // self.patch

    @property
    def grid_width(self) -> int:
        return self.width // self.patch

    @property
    def tokens_per_frame(self) -> int:
        return self.grid_height * self.grid_width

    @property
    def total_tokens(self) -> int:
        return self.frames * self.tokens_per_frame

    @property
    def future_tokens(self) -> int:
        return self.future_frames * self.tokens_per_frame


def token_index(frame: int, row: int, col: int, layout: TokenLayout) -> int:
    """Flatten (frame, patch-row, patch-col) to a token index in [0, N*L)."""
    if not (0 <= frame < layout.frames):
        raise IndexError(f"frame {frame} out of range [0, {layout.frames})")
    if not (0 <= row < layout.grid_height):
        raise IndexError(f"row {row} out of range [0, {layout.grid_height})")
    if not (0 <= col < layout.grid_width):
        raise IndexError(f"col {col} out of range [0, {layout.grid_width})")
    return frame * layout.tokens_per_frame + row * layout.grid_width + col


def token_coords(index: int, layout: TokenLayout) -> tuple[int, int, int]:
    """Inverse of token_index."""
    if not (0 <= index < layout.total_tokens):
        raise IndexError(f"token index {index} out of range [0, {layout.total_tokens})")
    frame, rest = divmod(index, layout.tokens_per_frame)
    row, col = divmod(rest, layout.grid_width)
    return frame, row, col


@dataclass(frozen=True)
class FrameSequence:
    """N frames of H x W discrete labels for one modality."""

    modality: ModalitySpec
    labels: np.ndarray  # (N, H, W) unsigned integer
    frame_indices: tuple[int, ...]

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError(f"labels must be (N, H, W), got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError(f"labels must be integer, got dtype {labels.dtype}")
        if labels.shape[0] != len(self.frame_indices):
            raise ValueError("frame_indices length must match number of frames")
        if labels.size and int(labels.max()) >= self.modality.num_labels:
            raise ValueError(
                f"label {int(labels.max())} out of range for modality "
                f"'{self.modality.name}' with {self.modality.num_labels} labels"
            )
        if labels.size and int(labels.min()) < 0:
            raise ValueError("labels must be nonnegative")
        idx = self.frame_indices
        if len(idx) >= 2:
            strides = {idx[i + 1] - idx[i] for i in range(len(idx) - 1)}
            if len(strides) != 1 or next(iter(strides)) <= 0:
                raise ValueError(f"frame_indices must strictly increase with constant stride: {idx}")
        labels = np.ascontiguousarray(labels)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "frame_indices", tuple(int(i) for i in idx))

    @property
    def stride(self) -> int:
        if len(self.frame_indices) < 2:
            return 1
        return self.frame_indices[1] - self.frame_indices[0]


@dataclass(frozen=True)
class MaskSet:
    """Per-modality binary masks over the future-frame tokens (1 = masked)."""

    per_modality: Mapping[str, np.ndarray]
    ratio: float
    scheduled_count: int
    ratios: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        frozen = {}
        lengths = set()
        for name, vec in self.per_modality.items():
            vec = np.ascontiguousarray(np.asarray(vec, dtype=np.uint8))
            if vec.ndim != 1:
                raise ValueError(f"mask for '{name}' must be 1-D")
            if vec.size and int(vec.max()) > 1:
                raise ValueError(f"mask for '{name}' must be binary")
            vec.flags.writeable = False
            frozen[name] = vec
            lengths.add(vec.shape[0])
        if len(lengths) > 1:
            raise ValueError(f"per-modality masks differ in length: {sorted(lengths)}")
        object.__setattr__(self, "per_modality", frozen)

    @property
    def length(self) -> int:
        return next(iter(self.per_modality.values())).shape[0]


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1.6e-4
    beta1: float = 0.9
    beta2: float = 0.99
    epochs: int = 1
    batch_size: int = 16


@dataclass(frozen=True)
class ModelConfig:
    """All architecture and training hyperparameters; serializable to flat text."""

    layout: TokenLayout
    modalities: tuple[ModalitySpec, ...]
    hidden_dim: int
    num_layers: int
    num_heads: int
    fusion: Fusion = Fusion.CONCAT
    masking_strategy: MaskingStrategy = MaskingStrategy.PARTIALLY_SHARED_EXCLUSIVE
    schedule: Schedule = Schedule.COSINE
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    absrel_denominator: str = "pred"

    def modality(self, name: str) -> ModalitySpec:
        for spec in self.modalities:
            if spec.name == name:
                return spec
        raise KeyError(f"no modality named '{name}'")


def validate_config(cfg: ModelConfig) -> list[str]:
    """Return all invariant violations (empty list when the config is valid).

    Never raises; each entry names the offending field and constraint.
    """
    v: list[str] = []
    lay = cfg.layout
    if lay.frames != lay.context_frames + lay.future_frames:
        v.append(
            f"layout.frames: {lay.frames} != context_frames + future_frames "
            f"({lay.context_frames} + {lay.future_frames})"
        )
    if lay.future_frames < 1:
        v.append("layout.future_frames: must be >= 1")
    if lay.context_frames < 1:
        v.append("layout.context_frames: must be >= 1")
    if lay.patch < 1:
        v.append("layout.patch: must be >= 1")
    else:
        if lay.height % lay.patch != 0:
            v.append(f"layout.height: {lay.height} not divisible by patch {lay.patch}")
        if lay.width % lay.patch != 0:
            v.append(f"layout.width: {lay.width} not divisible by patch {lay.patch}")

    if not cfg.modalities:
        v.append("modalities: must not be empty")
    names = [m.name for m in cfg.modalities]
    if len(set(names)) != len(names):
        v.append(f"modalities: duplicate names {names}")
    for i, m in enumerate(cfg.modalities):
        prefix = f"modalities.{i}"
        if m.num_labels < 2:
            v.append(f"{prefix}.num_labels: must be >= 2, got {m.num_labels}")
        if m.pixel_embed_dim < 1:
            v.append(f"{prefix}.pixel_embed_dim: must be >= 1, got {m.pixel_embed_dim}")
        if m.token_embed_dim < 1:
            v.append(f"{prefix}.token_embed_dim: must be >= 1, got {m.token_embed_dim}")
        if m.loss_weight < 0:
            v.append(f"{prefix}.loss_weight: must be >= 0, got {m.loss_weight}")
        if m.movable_label_ids is not None:
            bad = sorted(x for x in m.movable_label_ids if not (0 <= x < m.num_labels))
            if bad:
                v.append(f"{prefix}.movable_label_ids: ids {bad} outside [0, {m.num_labels})")

    if cfg.fusion is Fusion.CONCAT:
        total = sum(m.token_embed_dim for m in cfg.modalities)
        if total != cfg.hidden_dim:
            v.append(
                f"fusion: CONCAT requires sum of token_embed_dim == hidden_dim, "
                f"got {total} != {cfg.hidden_dim}"
            )
    elif cfg.fusion is Fusion.ADD:
        for i, m in enumerate(cfg.modalities):
            if m.token_embed_dim != cfg.hidden_dim:
                v.append(
                    f"fusion: ADD requires modalities.{i}.token_embed_dim == hidden_dim, "
                    f"got {m.token_embed_dim} != {cfg.hidden_dim}"
                )

    if cfg.hidden_dim < 1:
        v.append("hidden_dim: must be >= 1")
    if cfg.num_layers < 1:
        v.append("num_layers: must be >= 1")
    if cfg.num_heads < 1:
        v.append("num_heads: must be >= 1")
    elif cfg.hidden_dim % cfg.num_heads != 0:
        v.append(f"hidden_dim: {cfg.hidden_dim} not divisible by num_heads {cfg.num_heads}")

    opt = cfg.optimizer
    if opt.learning_rate <= 0:
        v.append(f"optimizer.learning_rate: must be > 0, got {opt.learning_rate}")
    if not (0 <= opt.beta1 < 1):
        v.append(f"optimizer.beta1: must be in [0, 1), got {opt.beta1}")
    if not (0 <= opt.beta2 < 1):
        v.append(f"optimizer.beta2: must be in [0, 1), got {opt.beta2}")
    if opt.epochs < 0:
        v.append(f"optimizer.epochs: must be >= 0, got {opt.epochs}")
    if opt.batch_size < 1:
        v.append(f"optimizer.batch_size: must be >= 1, got {opt.batch_size}")

    if cfg.absrel_denominator not in ("pred", "gt"):
        v.append(f"absrel_denominator: must be 'pred' or 'gt', got '{cfg.absrel_denominator}'")
    return v


# --- flat key = value config text -------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, Enum):
        return value.name
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_to_text(cfg: ModelConfig) -> str:
    """Serialize to the flat `key = value` text format (round-trips exactly)."""
    lines = []
    lay = cfg.layout
    for key in ("frames", "context_frames", "future_frames", "height", "width", "patch"):
        lines.append(f"layout.{key} = {_fmt(getattr(lay, key))}")
    for i, m in enumerate(cfg.modalities):
        p = f"modalities.{i}"
        lines.append(f"{p}.name = {m.name}")
        lines.append(f"{p}.num_labels = {m.num_labels}")
        lines.append(f"{p}.pixel_embed_dim = {m.pixel_embed_dim}")
        lines.append(f"{p}.token_embed_dim = {m.token_embed_dim}")
        lines.append(f"{p}.loss_weight = {_fmt(m.loss_weight)}")
        if m.movable_label_ids is not None:
            lines.append(f"{p}.movable_label_ids = {','.join(str(x) for x in sorted(m.movable_label_ids))}")
    lines.append(f"hidden_dim = {cfg.hidden_dim}")
    lines.append(f"num_layers = {cfg.num_layers}")
    lines.append(f"num_heads = {cfg.num_heads}")
    lines.append(f"fusion = {cfg.fusion.name}")
    lines.append(f"masking_strategy = {cfg.masking_strategy.name}")
    lines.append(f"schedule = {cfg.schedule.name}")
    opt = cfg.optimizer
    lines.append(f"optimizer.learning_rate = {_fmt(opt.learning_rate)}")
    lines.append(f"optimizer.beta1 = {_fmt(opt.beta1)}")
    lines.append(f"optimizer.beta2 = {_fmt(opt.beta2)}")
    lines.append(f"optimizer.epochs = {opt.epochs}")
    lines.append(f"optimizer.batch_size = {opt.batch_size}")
    lines.append(f"seed = {cfg.seed}")
    lines.append(f"absrel_denominator = {cfg.absrel_denominator}")
    return "\n".join(lines) + "\n"


def parse_flat_text(text: str) -> dict[str, str]:
    """Parse `key = value` lines; `#` starts a comment, blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _parse_id_set(value: str) -> frozenset[int]:
    value = value.strip()
    if not value:
        return frozenset()
    return frozenset(int(x) for x in value.split(","))


def config_from_text(text: str) -> ModelConfig:
    kv = parse_flat_text(text)

    def take(key: str) -> str:
        if key not in kv:
            raise ValueError(f"missing config key '{key}'")
        return kv.pop(key)

    layout = TokenLayout(
        frames=int(take("layout.frames")),
        context_frames=int(take("layout.context_frames")),
        future_frames=int(take("layout.future_frames")),
        height=int(take("layout.height")),
        width=int(take("layout.width")),
        patch=int(take("layout.patch")),
    )
    modalities = []
    i = 0
    while f"modalities.{i}.name" in kv:
        p = f"modalities.{i}"
        movable = None
        if f"{p}.movable_label_ids" in kv:
            movable = _parse_id_set(kv.pop(f"{p}.movable_label_ids"))
        modalities.append(
            ModalitySpec(
                name=take(f"{p}.name"),
                num_labels=int(take(f"{p}.num_labels")),
                pixel_embed_dim=int(take(f"{p}.pixel_embed_dim")),
                token_embed_dim=int(take(f"{p}.token_embed_dim")),
                loss_weight=float(take(f"{p}.loss_weight")),
                movable_label_ids=movable,
            )
        )
        i += 1
    if not modalities:
        raise ValueError("config defines no modalities (missing 'modalities.0.name')")
    cfg = ModelConfig(
        layout=layout,
        modalities=tuple(modalities),
        hidden_dim=int(take("hidden_dim")),
        num_layers=int(take("num_layers")),
        num_heads=int(take("num_heads")),
        fusion=Fusion[take("fusion")],
        masking_strategy=MaskingStrategy[take("masking_strategy")],
        schedule=Schedule[take("schedule")],
        optimizer=OptimizerConfig(
            learning_rate=float(take("optimizer.learning_rate")),
            beta1=float(take("optimizer.beta1")),
            beta2=float(take("optimizer.beta2")),
            epochs=int(take("optimizer.epochs")),
            batch_size=int(take("optimizer.batch_size")),
        ),
        seed=int(take("seed")),
        absrel_denominator=take("absrel_denominator"),
    )
    if kv:
        raise ValueError(f"unknown config keys: {sorted(kv)}")
    return cfg


def save_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(config_to_text(cfg), encoding="utf-8")


def load_config(path) -> ModelConfig:
    return config_from_text(Path(path).read_text(encoding="utf-8"))


def apply_overrides(cfg: ModelConfig, overrides: Mapping[str, str]) -> ModelConfig:
    """Re-serialize, replace the given keys, and re-parse (CLI --set support)."""
    kv = parse_flat_text(config_to_text(cfg))
    for key, value in overrides.items():
        kv[key] = value
    text = "\n".join(f"{k} = {v}" for k, v in kv.items()) + "\n"
    return config_from_text(text)


# --- stock configurations ----------------------------------------------------

#: Cityscapes movable-object train ids (person, rider, car, truck, bus,
#: train, motorcycle, bicycle).
CITYSCAPES_MOVABLE_IDS = frozenset({11, 12, 13, 14, 15, 16, 17, 18})


def desk_config(
    *,
    modality_names: tuple[str, ...] = ("segmentation", "depth"),
    seed: int = 0,
    epochs: int = 10,
    learning_rate: float = 1e-3,
) -> ModelConfig:
    """Desk-scale default: 64x128 frames, d=128, 4 layers, N=5 (4 context + 1 future).

    A faithful shrink of the reference 256x512 / d=1536 / 12-layer setup; the
    segmentation modality uses 19 labels and depth 256 disparity bins.
    """
    layout = TokenLayout(frames=5, context_frames=4, future_frames=1,
                         height=64, width=128, patch=16)
    hidden = 128
    per = hidden // len(modality_names)
    specs = []
    for name in modality_names:
        if name == "depth":
            specs.append(ModalitySpec(name="depth", num_labels=256,
                                      pixel_embed_dim=10, token_embed_dim=per))
        else:
            specs.append(ModalitySpec(name=name, num_labels=19,
                                      pixel_embed_dim=10, token_embed_dim=per,
                                      movable_label_ids=frozenset(range(1, 19))))
    return ModelConfig(
        layout=layout,
        modalities=tuple(specs),
        hidden_dim=hidden,
        num_layers=4,
        num_heads=4,
        fusion=Fusion.CONCAT,
        masking_strategy=MaskingStrategy.PARTIALLY_SHARED_EXCLUSIVE,
        schedule=Schedule.COSINE,
        optimizer=OptimizerConfig(learning_rate=learning_rate, epochs=epochs),
        seed=seed,
    )


def paper_scale_config() -> ModelConfig:
    """Full-scale reference configuration (256x512, d=1536, 12 layers)."""
    layout = TokenLayout(frames=5, context_frames=4, future_frames=1,
                         height=256, width=512, patch=16)
    return ModelConfig(
        layout=layout,
        modalities=(
            ModalitySpec(name="segmentation", num_labels=19, pixel_embed_dim=10,
                         token_embed_dim=768, movable_label_ids=CITYSCAPES_MOVABLE_IDS),
            ModalitySpec(name="depth", num_labels=256, pixel_embed_dim=10,
                         token_embed_dim=768),
        ),
        hidden_dim=1536,
        num_layers=12,
        num_heads=16,
        fusion=Fusion.CONCAT,
        masking_strategy=MaskingStrategy.PARTIALLY_SHARED_EXCLUSIVE,
        schedule=Schedule.COSINE,
        optimizer=OptimizerConfig(learning_rate=1.6e-4, epochs=800, batch_size=64),
        seed=0,
    )
