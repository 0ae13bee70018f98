"""Synthetic moving-shapes generation and on-disk pseudo-label sequence loading.

On-disk layout follows the Cityscapes convention: one grayscale PNG per frame
per modality at `root/<city>/<city>_<seq>_<frame:06d>_<modality>.png`, plus a
manifest text file of `<city> <sequence_id> <target_frame>` lines.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .types import (
    DEFAULT_STRIDE,
    ROLLOUT_STEPS,
    FrameSequence,
    Horizon,
    ModalitySpec,
    TokenLayout,
    label_dtype,
)

SEGMENTATION = "segmentation"
DEPTH = "depth"

RECTANGLE = "rectangle"
DISC = "disc"


# --- synthetic scenes ---------------------------------------------------------

@dataclass(frozen=True)
class Shape:
    """One moving shape: a filled rectangle or disc inside a size x size box.

    `velocity` is (dx, dy) pixels per source frame: dx shifts columns, dy rows.
    Smaller `depth_bin` means nearer, so it renders on top.
    """

    kind: str
    label: int
    depth_bin: int
    velocity: tuple[int, int]
    size: tuple[int, int]  # (height, width); equal for discs
    origin: tuple[int, int]  # (row, col) of the bounding box at frame 0


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Deterministic scene description; rendering at frame t is pure in (spec, t)."""

    height: int
    width: int
    shapes: tuple[Shape, ...]
    num_labels: int = 19
    num_depth_bins: int = 256
    background_label: int = 0
    background_depth_bin: int = 255

    def __post_init__(self):
        for s in self.shapes:
            sh, sw = s.size
            if sh > self.height or sw > self.width:
                raise ValueError(
                    f"shape of size {s.size} does not fit the {self.height}x{self.width} canvas"
                )
            if sh < 1 or sw < 1:
                raise ValueError(f"shape size must be positive, got {s.size}")
            if s.kind not in (RECTANGLE, DISC):
                raise ValueError(f"unknown shape kind '{s.kind}'")
            if s.kind == DISC and sh != sw:
                raise ValueError(f"disc requires a square box, got {s.size}")
            if not (0 <= s.label < self.num_labels):
                raise ValueError(f"shape label {s.label} out of range [0, {self.num_labels})")
            if not (0 <= s.depth_bin < self.num_depth_bins):
                raise ValueError(f"depth bin {s.depth_bin} out of range [0, {self.num_depth_bins})")
        if not (0 <= self.background_label < self.num_labels):
            raise ValueError("background label out of range")
        if not (0 <= self.background_depth_bin < self.num_depth_bins):
            raise ValueError("background depth bin out of range")


@dataclass(frozen=True)
class SequenceRecord:
    """Per-modality frame sequences sharing layout and frame indices."""

    sequences: Mapping[str, FrameSequence]
    provenance: str = ""
    subsample_factor: int = 1

    def __post_init__(self):
        shapes = {seq.labels.shape for seq in self.sequences.values()}
        indices = {seq.frame_indices for seq in self.sequences.values()}
        if len(shapes) > 1 or len(indices) > 1:
            raise ValueError("all modalities must share N, H, W and frame_indices")
        object.__setattr__(self, "sequences", dict(self.sequences))

    @property
    def frame_indices(self) -> tuple[int, ...]:
        return next(iter(self.sequences.values())).frame_indices

    @property
    def num_frames(self) -> int:
        return len(self.frame_indices)


def _shape_mask(shape: Shape) -> np.ndarray:
    sh, sw = shape.size
    if shape.kind == RECTANGLE:
        return np.ones((sh, sw), dtype=bool)
    # disc inscribed in the box; center/radius handle even sizes too
    c = (sh - 1) / 2.0
    rr, cc = np.mgrid[0:sh, 0:sw]
    return (rr - c) ** 2 + (cc - c) ** 2 <= c * c + 1e-9


def _paint(seg: np.ndarray, dep: np.ndarray, shape: Shape, frame: int) -> None:
    h, w = seg.shape
    dx, dy = shape.velocity
    row0 = (shape.origin[0] + frame * dy) % h
    col0 = (shape.origin[1] + frame * dx) % w
    sh, sw = shape.size
    rows = (row0 + np.arange(sh)) % h
    cols = (col0 + np.arange(sw)) % w
    mask = _shape_mask(shape)
    rr = np.broadcast_to(rows[:, None], (sh, sw))[mask]
    cc = np.broadcast_to(cols[None, :], (sh, sw))[mask]
    seg[rr, cc] = shape.label
    dep[rr, cc] = shape.depth_bin


def render_frame(spec: SyntheticSceneSpec, frame: int) -> tuple[np.ndarray, np.ndarray]:
    """Render the segmentation and depth-bin maps at one source-frame index."""
    seg = np.full((spec.height, spec.width), spec.background_label,
                  dtype=label_dtype(spec.num_labels))
    dep = np.full((spec.height, spec.width), spec.background_depth_bin,
                  dtype=label_dtype(spec.num_depth_bins))
    # far-to-near painting; stable sort keeps equal-bin order deterministic
    for shape in sorted(spec.shapes, key=lambda s: -s.depth_bin):
        _paint(seg, dep, shape, frame)
    return seg, dep


def scene_modalities(spec: SyntheticSceneSpec) -> tuple[ModalitySpec, ModalitySpec]:
    seg = ModalitySpec(name=SEGMENTATION, num_labels=spec.num_labels,
                       pixel_embed_dim=10, token_embed_dim=64,
                       movable_label_ids=frozenset(range(1, spec.num_labels)))
    dep = ModalitySpec(name=DEPTH, num_labels=spec.num_depth_bins,
                       pixel_embed_dim=10, token_embed_dim=64)
    return seg, dep


def render_synthetic(
    spec: SyntheticSceneSpec,
    frame_indices: Sequence[int],
    modalities: tuple[ModalitySpec, ModalitySpec] | None = None,
    provenance: str = "synthetic",
) -> SequenceRecord:
    """Render a SequenceRecord (segmentation + depth bins) at the given frames."""
    idx = [int(i) for i in frame_indices]
    if any(i < 0 for i in idx) or any(b <= a for a, b in zip(idx, idx[1:])):
        raise ValueError(f"frame indices must be nonnegative and strictly increasing: {idx}")
    seg_spec, dep_spec = modalities if modalities is not None else scene_modalities(spec)
    segs, deps = [], []
    for i in idx:
        seg, dep = render_frame(spec, i)
        segs.append(seg)
        deps.append(dep)
    stride = idx[1] - idx[0] if len(idx) >= 2 else 1
    return SequenceRecord(
        sequences={
            seg_spec.name: FrameSequence(seg_spec, np.stack(segs), tuple(idx)),
            dep_spec.name: FrameSequence(dep_spec, np.stack(deps), tuple(idx)),
        },
        provenance=provenance,
        subsample_factor=stride,
    )


def make_random_scene(
    rng: np.random.Generator,
    height: int = 64,
    width: int = 128,
    num_shapes: int = 3,
    num_labels: int = 19,
    num_depth_bins: int = 256,
    kinds: tuple[str, ...] = (RECTANGLE, DISC),
    max_speed: int = 3,
) -> SyntheticSceneSpec:
    """Random scene with distinct labels/depth bins per shape; every shape moves."""
    if num_shapes > num_labels - 1:
        raise ValueError("need at least one distinct non-background label per shape")
    labels = rng.choice(np.arange(1, num_labels), size=num_shapes, replace=False)
    bins = rng.choice(np.arange(32, num_depth_bins - 32), size=num_shapes, replace=False)
    shapes = []
    for i in range(num_shapes):
        kind = kinds[int(rng.integers(len(kinds)))]
        if kind == DISC:
            side = int(rng.integers(11, 25)) | 1  # odd box for a centered disc
            size = (side, side)
        else:
            size = (int(rng.integers(10, 29)), int(rng.integers(10, 29)))
        velocity = (0, 0)
        while velocity == (0, 0):
            velocity = (int(rng.integers(-max_speed, max_speed + 1)),
                        int(rng.integers(-max_speed, max_speed + 1)))
        shapes.append(Shape(
            kind=kind,
            label=int(labels[i]),
            depth_bin=int(bins[i]),
            velocity=velocity,
            size=size,
            origin=(int(rng.integers(height)), int(rng.integers(width))),
        ))
    return SyntheticSceneSpec(height=height, width=width, shapes=tuple(shapes),
                              num_labels=num_labels, num_depth_bins=num_depth_bins)


# --- depth discretization -----------------------------------------------------

def quantize_depth(disparity: np.ndarray, num_bins: int) -> np.ndarray:
    """Quantize normalized disparity in [0, 1] into uniform bins."""
    if num_bins < 2:
        raise ValueError(f"num_bins must be >= 2, got {num_bins}")
    arr = np.asarray(disparity, dtype=np.float64)
    if arr.size and (float(arr.min()) < 0.0 or float(arr.max()) > 1.0):
        raise ValueError("disparity values must lie in [0, 1]")
    bins = np.minimum(np.floor(arr * num_bins), num_bins - 1)
    return bins.astype(label_dtype(num_bins))


def dequantize_depth(bins: np.ndarray, num_bins: int) -> np.ndarray:
    """Map bins back to their center disparities (bin + 0.5) / num_bins."""
    return (np.asarray(bins, dtype=np.float64) + 0.5) / num_bins


# --- resampling ---------------------------------------------------------------

def nearest_resize(arr: np.ndarray, out_height: int, out_width: int) -> np.ndarray:
    """Nearest-neighbor resampling; the only legal resampling for label maps."""
    in_h, in_w = arr.shape
    if (in_h, in_w) == (out_height, out_width):
        return arr
    rows = (np.arange(out_height) * in_h) // out_height
    cols = (np.arange(out_width) * in_w) // out_width
    return arr[np.ix_(rows, cols)]


# --- PNG + manifest i/o ---------------------------------------------------------

def frame_filename(city: str, sequence_id: str, frame: int, modality: str) -> str:
    return f"{city}_{sequence_id}_{frame:06d}_{modality}.png"


def frame_path(root, city: str, sequence_id: str, frame: int, modality: str) -> Path:
    return Path(root) / city / frame_filename(city, sequence_id, frame, modality)


def save_label_map(path, arr: np.ndarray) -> None:
    """Write a label map as a lossless 8-bit or 16-bit grayscale PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        img = Image.fromarray(arr, mode="L")
    elif arr.dtype == np.uint16:
        img = Image.fromarray(arr.astype(np.int32), mode="I;16")
    else:
        raise ValueError(f"label maps must be uint8 or uint16, got {arr.dtype}")
    img.save(path)


def load_label_map(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing frame file: {path}")
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype == np.int32:  # PIL decodes 16-bit grayscale as I mode
        arr = arr.astype(np.uint16)
    if arr.dtype not in (np.dtype(np.uint8), np.dtype(np.uint16)):
        raise ValueError(f"unsupported label PNG dtype {arr.dtype} at {path}")
    return arr


def write_manifest(path, entries: Iterable[tuple[str, str, int]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{city} {seq} {target}" for city, seq, target in entries]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_manifest(path) -> list[tuple[str, str, int]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing manifest file: {path}")
    entries = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'city sequence_id target_frame'")
        entries.append((parts[0], parts[1], int(parts[2])))
    return entries


def write_synthetic_dataset(
    out_dir,
    scene_specs: Sequence[SyntheticSceneSpec],
    num_frames: int = 30,
    city: str = "synth",
    target_frame: int = 20,
) -> Path:
    """Render scenes to PNG frames plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    entries = []
    for i, spec in enumerate(scene_specs):
        seq_id = f"{i:06d}"
        for frame in range(num_frames):
            seg, dep = render_frame(spec, frame)
            save_label_map(frame_path(out_dir, city, seq_id, frame, SEGMENTATION), seg)
            save_label_map(frame_path(out_dir, city, seq_id, frame, DEPTH), dep)
        entries.append((city, seq_id, target_frame))
    manifest = out_dir / "manifest.txt"
    write_manifest(manifest, entries)
    return manifest


# --- sequence loading -----------------------------------------------------------

def context_frame_indices(target_frame: int, horizon: Horizon, n_context: int,
                          stride: int = DEFAULT_STRIDE) -> list[int]:
    """Source-frame indices of the context window for a forecasting target.

    The context ends `steps` subsampled frames before the target, where SHORT
    predicts in one step and MID rolls out three.
    """
    steps = ROLLOUT_STEPS[horizon]
    end = target_frame - steps * stride
    return [end - (n_context - 1 - i) * stride for i in range(n_context)]


def load_sequence(
    root,
    city: str,
    sequence_id: str,
    target_frame: int,
    horizon: Horizon,
    layout: TokenLayout,
    modalities: Sequence[ModalitySpec],
    stride: int = DEFAULT_STRIDE,
) -> SequenceRecord:
    """Load the context frames for one forecasting item, downscaled to the layout."""
    indices = context_frame_indices(target_frame, horizon, layout.context_frames, stride)
    if indices[0] < 0:
        raise ValueError(
            f"context for target {target_frame} ({horizon.name}) starts before frame 0: {indices}"
        )
    sequences = {}
    for spec in modalities:
        frames = []
        for frame in indices:
            arr = load_label_map(frame_path(root, city, sequence_id, frame, spec.name))
            frames.append(nearest_resize(arr, layout.height, layout.width))
        sequences[spec.name] = FrameSequence(spec, np.stack(frames), tuple(indices))
    return SequenceRecord(sequences=sequences, provenance=f"{city}_{sequence_id}",
                          subsample_factor=stride)


def load_target_maps(root, city: str, sequence_id: str, target_frame: int,
                     modalities: Sequence[ModalitySpec]) -> dict[str, np.ndarray]:
    """Ground-truth maps at the target frame, at their native resolution."""
    return {
        spec.name: load_label_map(frame_path(root, city, sequence_id, target_frame, spec.name))
        for spec in modalities
    }


def discover_frames(root, city: str, sequence_id: str, modality: str) -> list[int]:
    """Frame indices present on disk for one sequence/modality, sorted."""
    directory = Path(root) / city
    prefix = f"{city}_{sequence_id}_"
    suffix = f"_{modality}.png"
    frames = []
    if directory.is_dir():
        for p in directory.iterdir():
            name = p.name
            if name.startswith(prefix) and name.endswith(suffix):
                middle = name[len(prefix):-len(suffix)]
                if middle.isdigit():
                    frames.append(int(middle))
    return sorted(frames)


def load_full_sequence(
    root,
    city: str,
    sequence_id: str,
    num_frames: int,
    layout: TokenLayout,
    modalities: Sequence[ModalitySpec],
) -> SequenceRecord:
    """Load frames 0..num_frames-1 at model resolution (training windows source)."""
    indices = tuple(range(num_frames))
    sequences = {}
    for spec in modalities:
        frames = [
            nearest_resize(load_label_map(frame_path(root, city, sequence_id, f, spec.name)),
                           layout.height, layout.width)
            for f in indices
        ]
        sequences[spec.name] = FrameSequence(spec, np.stack(frames), indices)
    return SequenceRecord(sequences=sequences, provenance=f"{city}_{sequence_id}")
