"""Prediction extraction, late fusion, and evaluation metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .pcproj import FrontViewImage
from .pseudolabel import MaskSet, solve_assignment

logger = logging.getLogger(__name__)

DEFAULT_BANDS = ((0.0, 10.0), (10.0, 30.0), (30.0, 70.0))


@dataclass
class Prediction:
    masks: MaskSet
    modality: str = "2D"
    frame_id: int = 0

    def __len__(self) -> int:
        return len(self.masks)


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def scores(self) -> tuple[float, float, float]:
        p = self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0
        r = self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return f1, p, r


@dataclass
class MetricsReport:
    fg_ari: float = float("nan")
    all_ari: float = float("nan")
    f1_50: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    bands: list[dict] = field(default_factory=list)

    def rows(self) -> list[dict]:
        """Per-band rows followed by the overall row."""
        overall = {"range": "all", "avg_pts_per_obj": float("nan"), "n_objects": -1,
                   "f1_50": self.f1_50, "precision": self.precision, "recall": self.recall,
                   "fg_ari": self.fg_ari, "all_ari": self.all_ari}
        return [*self.bands, overall]


# ------------------------------------------------------------ extraction

def prediction_labels(slot_maps: torch.Tensor, bg_map: torch.Tensor, grid: tuple[int, int],
                      image_shape: tuple[int, int]) -> np.ndarray:
    """Argmax label image at input resolution (0 = background, k+1 = slot k).

    Attention maps are upsampled bilinearly before the argmax.
    """
    probs = torch.cat([bg_map.unsqueeze(-1), slot_maps], dim=-1)  # (..., N, K+1)
    lead = probs.shape[:-2]
    probs = probs.reshape(-1, grid[0], grid[1], probs.shape[-1]).permute(0, 3, 1, 2)
    up = F.interpolate(probs.double(), size=tuple(image_shape), mode="bilinear", align_corners=False)
    labels = up.argmax(dim=1).reshape(*lead, *image_shape)
    return labels.cpu().numpy().astype(np.uint16)


def extract_prediction(labels: np.ndarray, modality: str = "2D", frame_id: int = 0,
                       min_area: int = 0) -> Prediction:
    ms = _labels_to_maskset(labels, frame_id)
    if min_area > 0 and len(ms):
        ms = ms.subset(np.flatnonzero(ms.masks.reshape(len(ms), -1).sum(axis=1) >= min_area))
    return Prediction(ms, modality, frame_id)


def _labels_to_maskset(labels, frame_id: int = 0) -> MaskSet:
    ids = [int(v) for v in np.unique(labels) if v > 0]
    masks = np.stack([labels == i for i in ids]) if ids else np.zeros((0, *labels.shape), bool)
    return MaskSet(masks, frame_id=frame_id, ids=ids)


def prediction_to_labels(pred: Prediction) -> np.ndarray:
    labels = np.zeros(pred.masks.shape, dtype=np.uint16)
    for k, m in enumerate(pred.masks.masks):
        labels[m] = k + 1
    return labels


# ------------------------------------------------------------ fusion

def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (La, ...) and (Lb, ...) binary masks."""
    a = a.reshape(len(a), int(np.prod(a.shape[1:]))).astype(np.float64)
    b = b.reshape(len(b), int(np.prod(b.shape[1:]))).astype(np.float64)
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def late_fuse(pred2d: Prediction, pred3d: Prediction, tau: float = 0.3) -> Prediction:
    """Keep cross-modal pairs with IoU >= tau as pixel unions; drop single-modality masks.

    Pairs are chosen by an assignment maximising total IoU over eligible pairs.
    """
    a, b = pred2d.masks, pred3d.masks
    if a.shape != b.shape:
        raise ValueError(f"prediction shapes differ: {a.shape} vs {b.shape}")
    if len(a) == 0 or len(b) == 0:
        return Prediction(MaskSet.empty(a.shape, pred2d.frame_id), "fused", pred2d.frame_id)
    iou = iou_matrix(a.masks, b.masks)
    eligible = iou >= tau
    gain = np.where(eligible, iou, 0.0)
    pairs = [(i, j) for i, j in solve_assignment(gain, maximize=True) if eligible[i, j]]
    pairs.sort()
    fused = np.stack([a.masks[i] | b.masks[j] for i, j in pairs]) if pairs else np.zeros((0, *a.shape), bool)
    return Prediction(MaskSet(fused, frame_id=pred2d.frame_id), "fused", pred2d.frame_id)


# ------------------------------------------------------------ metrics

def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2.0


def ari(pred_labels, true_labels, foreground_only: bool = False) -> float:
    """Adjusted Rand index from the contingency table.

    With ``foreground_only`` the comparison is restricted to pixels whose true
    label is non-zero.
    """
    p = np.asarray(pred_labels).ravel()
    t = np.asarray(true_labels).ravel()
    if p.shape != t.shape:
        raise ValueError("label grids differ in shape")
    if foreground_only:
        keep = t > 0
        p, t = p[keep], t[keep]
    n = p.size
    if n < 2:
        raise ValueError("ARI needs at least two pixels in scope")
    _, pi = np.unique(p, return_inverse=True)
    _, ti = np.unique(t, return_inverse=True)
    table = np.zeros((ti.max() + 1, pi.max() + 1), dtype=np.int64)
    np.add.at(table, (ti, pi), 1)
    index = _comb2(table).sum()
    sum_t = _comb2(table.sum(axis=1)).sum()
    sum_p = _comb2(table.sum(axis=0)).sum()
    expected = sum_t * sum_p / _comb2(n)
    max_index = 0.5 * (sum_t + sum_p)
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def match_counts(pred: MaskSet, gt: MaskSet, iou_threshold: float = 0.5) -> Counts:
    """Greedy one-to-one matching by descending IoU; matches at or above the threshold are TPs."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("IoU threshold must lie in (0, 1]")
    if len(pred) == 0 or len(gt) == 0:
        return Counts(0, len(pred), len(gt))
    iou = iou_matrix(pred.masks, gt.masks)
    order = sorted(((-iou[i, j], i, j) for i in range(iou.shape[0]) for j in range(iou.shape[1])))
    used_p, used_g = set(), set()
    tp = 0
    for neg, i, j in order:
        if -neg < iou_threshold:
            break
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        tp += 1
    return Counts(tp, len(pred) - tp, len(gt) - tp)


def f1_at_iou(pred, gt: MaskSet, iou_threshold: float = 0.5) -> tuple[float, float, float]:
    """(F1, precision, recall) for one frame."""
    masks = pred.masks if isinstance(pred, Prediction) else pred
    return match_counts(masks, gt, iou_threshold).scores()


def object_distance(mask: np.ndarray, fv: FrontViewImage) -> tuple[float, int]:
    """Median camera distance over the object's valid pixels, and their count."""
    sel = mask & fv.valid
    n = int(sel.sum())
    if n == 0:
        return float("nan"), 0
    return float(np.median(fv.distance[sel])), n


def assign_band(distance: float, bands) -> int:
    if not np.isfinite(distance):
        return len(bands) - 1
    for k, (lo, hi) in enumerate(bands):
        if lo <= distance < hi:
            return k
    return 0 if distance < bands[0][0] else len(bands) - 1


def banded_counts(pred, gt: MaskSet, fv: FrontViewImage, bands=DEFAULT_BANDS,
                  iou_threshold: float = 0.5) -> list[tuple[Counts, list[int]]]:
    """Per band: match counts and per-object valid-point counts for one frame."""
    masks = pred.masks if isinstance(pred, Prediction) else pred
    band_of, npts = [], []
    for k, m in enumerate(gt.masks):
        d, n = object_distance(m, fv)
        if n == 0:
            logger.warning("frame %s object %d has no valid 3D pixels; using farthest band", gt.frame_id, k)
        band_of.append(assign_band(d, bands))
        npts.append(n)
    out = []
    for b in range(len(bands)):
        members = [k for k in range(len(gt)) if band_of[k] == b]
        gsub = gt.subset(members)
        if members and len(masks):
            touch = (masks.masks.reshape(len(masks), -1).astype(np.int64)
                     @ gsub.masks.reshape(len(gsub), -1).T.astype(np.int64)) > 0
            psub = masks.subset(np.flatnonzero(touch.any(axis=1)))
        else:
            psub = masks.subset([])
        out.append((match_counts(psub, gsub, iou_threshold), [npts[k] for k in members]))
    return out


def banded_eval(pred, gt: MaskSet, fv: FrontViewImage, bands=DEFAULT_BANDS,
                iou_threshold: float = 0.5) -> list[dict]:
    """Per-band F1 rows for a single frame."""
    return band_rows(banded_counts(pred, gt, fv, bands, iou_threshold), bands)


def band_rows(per_band, bands) -> list[dict]:
    rows = []
    for (lo, hi), (counts, pts) in zip(bands, per_band):
        f1, p, r = counts.scores()
        rows.append({"range": f"{lo:g}-{hi:g}", "avg_pts_per_obj": float(np.mean(pts)) if pts else float("nan"),
                     "n_objects": len(pts), "f1_50": f1, "precision": p, "recall": r,
                     "fg_ari": float("nan"), "all_ari": float("nan")})
    return rows


class Evaluator:
    """Accumulates frame-level results into a dataset-level report."""

    def __init__(self, bands=None, iou_threshold: float = 0.5):
        self.bands = tuple(bands) if bands else None
        self.iou_threshold = iou_threshold
        self.counts = Counts()
        self.fg_aris: list[float] = []
        self.all_aris: list[float] = []
        self.band_counts = [Counts() for _ in self.bands] if self.bands else []
        self.band_pts: list[list[int]] = [[] for _ in self.bands] if self.bands else []

    def add(self, pred_labels: np.ndarray, gt_labels: np.ndarray, fv: FrontViewImage | None = None,
            min_area: int = 0) -> None:
        pred = extract_prediction(pred_labels, min_area=min_area).masks
        gt = _labels_to_maskset(gt_labels)
        if (gt_labels > 0).sum() >= 2:
            self.fg_aris.append(ari(pred_labels, gt_labels, foreground_only=True))
        self.all_aris.append(ari(pred_labels, gt_labels))
        self.counts = self.counts + match_counts(pred, gt, self.iou_threshold)
        if self.bands:
            if fv is None:
                raise ValueError("banded evaluation needs front-view images")
            for b, (c, pts) in enumerate(banded_counts(pred, gt, fv, self.bands, self.iou_threshold)):
                self.band_counts[b] = self.band_counts[b] + c
                self.band_pts[b].extend(pts)

    def report(self) -> MetricsReport:
        f1, p, r = self.counts.scores()
        rep = MetricsReport(
            fg_ari=float(np.mean(self.fg_aris)) if self.fg_aris else float("nan"),
            all_ari=float(np.mean(self.all_aris)) if self.all_aris else float("nan"),
            f1_50=f1, precision=p, recall=r)
        if self.bands:
            rep.bands = band_rows(list(zip(self.band_counts, self.band_pts)), self.bands)
        return rep
