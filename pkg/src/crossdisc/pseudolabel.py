"""Motion-mask ingestion, front-view filtering, slot matching and teacher candidates."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .losses import EPS
from .pcproj import FrontViewImage

logger = logging.getLogger(__name__)

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass
class MaskSet:
    masks: np.ndarray  # (L, h, w) bool
    scores: np.ndarray | None = None
    frame_id: int = 0
    ids: list[int] = field(default_factory=list)  # instance ids from the label file, if any

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim != 3:
            raise ValueError("masks must be a (L, h, w) array")
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64).reshape(len(self.masks))

    @classmethod
    def empty(cls, shape: tuple[int, int], frame_id: int = 0) -> "MaskSet":
        return cls(np.zeros((0, *shape), dtype=bool), frame_id=frame_id)

    def __len__(self) -> int:
        return self.masks.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.masks.shape[1], self.masks.shape[2]

    def subset(self, keep) -> "MaskSet":
        keep = list(keep)
        return MaskSet(self.masks[keep] if keep else np.zeros((0, *self.shape), bool),
                       None if self.scores is None else self.scores[keep],
                       self.frame_id, [self.ids[k] for k in keep] if self.ids else [])


@dataclass
class Candidate:
    mask: np.ndarray  # (h, w) bool
    confidence: float
    source_slot: int


# -------------------------------------------------------------- label files

def read_label_pgm(path) -> np.ndarray:
    """16-bit binary PGM (P5, maxval 65535, big-endian samples) -> (H, W) uint16 labels."""
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(buf, pos)
        if m is None:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1  # single whitespace after maxval
    if maxval != 65535:
        raise ValueError(f"{path}: expected maxval 65535, found {maxval}")
    data = np.frombuffer(buf, dtype=">u2", count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.uint16)


def write_label_pgm(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.min(initial=0) < 0 or labels.max(initial=0) > 65535:
        raise ValueError("labels must be a 2-D array of values in [0, 65535]")
    h, w = labels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + labels.astype(">u2").tobytes())


def masks_from_labels(labels: np.ndarray, frame_id: int = 0) -> MaskSet:
    ids = [int(v) for v in np.unique(labels) if v > 0]
    masks = np.stack([labels == i for i in ids]) if ids else np.zeros((0, *labels.shape), bool)
    return MaskSet(masks, frame_id=frame_id, ids=ids)


def labels_from_masks(ms: MaskSet) -> np.ndarray:
    """Label image with instance k+1 for mask k (later masks win overlaps)."""
    labels = np.zeros(ms.shape, dtype=np.uint16)
    for k, m in enumerate(ms.masks):
        labels[m] = ms.ids[k] if ms.ids else k + 1
    return labels


def read_mask_set(path, frame_id: int = 0) -> MaskSet:
    return masks_from_labels(read_label_pgm(path), frame_id)


def resize_masks(ms: MaskSet, shape: tuple[int, int], drop_empty: bool = True) -> MaskSet:
    """Nearest-neighbour resampling at cell centres."""
    if ms.shape == tuple(shape):
        return ms
    h, w = shape
    rows = np.minimum(((np.arange(h) + 0.5) * ms.shape[0] / h).astype(int), ms.shape[0] - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * ms.shape[1] / w).astype(int), ms.shape[1] - 1)
    out = MaskSet(ms.masks[:, rows][:, :, cols], ms.scores, ms.frame_id, list(ms.ids))
    if drop_empty:
        out = out.subset(np.flatnonzero(out.masks.reshape(len(out), h * w).any(axis=1)))
    return out


# -------------------------------------------------------------- operations

def filter_motion_masks(motion: MaskSet, fv: FrontViewImage) -> MaskSet:
    """Keep masks that touch at least one pixel carrying a projected 3D point."""
    if motion.shape != fv.shape:
        raise ValueError(f"mask shape {motion.shape} differs from front-view shape {fv.shape}")
    if len(motion) == 0:
        return motion
    hit = (motion.masks & fv.valid[None]).reshape(len(motion), -1).any(axis=1)
    return motion.subset(np.flatnonzero(hit))


def bce_cost(masks: np.ndarray, W: np.ndarray) -> np.ndarray:
    """(L, N) binary masks vs (N, K) maps -> (L, K) mean BCE."""
    Wc = np.clip(W, EPS, 1 - EPS)
    m = masks.astype(np.float64)
    return -(m @ np.log(Wc) + (1 - m) @ np.log1p(-Wc)) / masks.shape[1]


def solve_assignment(cost: np.ndarray, maximize: bool = False) -> list[tuple[int, int]]:
    rows, cols = linear_sum_assignment(np.asarray(cost, dtype=np.float64), maximize=maximize)
    return [(int(r), int(c)) for r, c in zip(rows, cols)]


def match(masks, W) -> list[tuple[int, int]]:
    """Optimal one-to-one assignment of target masks to slot maps.

    ``masks`` is a MaskSet or (L, N)/(L, h, w) array; ``W`` is (N, K) or an
    AttentionMaps for a single frame.
    """
    m = masks.masks if isinstance(masks, MaskSet) else np.asarray(masks)
    W = _slot_array(W)
    if len(m) == 0:
        return []
    m = m.reshape(len(m), -1)
    if len(m) > W.shape[1]:
        raise ValueError(f"{len(m)} masks cannot be matched to {W.shape[1]} slots")
    return solve_assignment(bce_cost(m, W))


def _slot_array(maps) -> np.ndarray:
    if hasattr(maps, "slots"):
        return _np(maps.slots).reshape(-1, maps.slots.shape[-1])
    return _np(maps)


def _np(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def binarize_teacher(slot_maps, bg_map) -> np.ndarray:
    """Per-pixel argmax over [slots | background]; slot k -> label k+1, background -> 0.

    Ties resolve to the lowest slot index, and to a slot over the background.
    """
    W = _np(slot_maps)
    stacked = np.concatenate([W, _np(bg_map)[..., None]], axis=-1)
    best = np.argmax(stacked, axis=-1)
    return np.where(best == W.shape[-1], 0, best + 1)


def confidence_score(mask, fg_map) -> float:
    m = np.asarray(mask, dtype=bool).ravel()
    if not m.any():
        raise ValueError("confidence of an empty mask is undefined")
    return float(_np(fg_map).ravel()[m].mean())


def extract_candidates(slot_maps, bg_map, grid: tuple[int, int], min_area: int = 16,
                       conf_threshold: float = 0.7) -> list[Candidate]:
    """Connected regions (4-connectivity) of each slot's argmax territory that pass the confidence test."""
    labels = binarize_teacher(slot_maps, bg_map).reshape(grid)
    fg = 1.0 - _np(bg_map).reshape(grid)
    out = []
    for slot in range(_np(slot_maps).shape[-1]):
        region = labels == slot + 1
        if not region.any():
            continue
        comps, n = ndimage.label(region, structure=FOUR_CONNECTED)
        for c in range(1, n + 1):
            comp = comps == c
            if comp.sum() < min_area:
                continue
            s = confidence_score(comp, fg)
            if s >= conf_threshold:
                out.append(Candidate(comp, s, slot))
    return out
