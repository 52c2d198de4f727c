"""Training objectives for both branches.

All functions take torch tensors and return scalar tensors so gradients flow
through the attention maps and decoder outputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

EPS = 1e-7
MODALITIES = ("2D", "3D")
SOURCES = ("motion2D", "motion3D", "teacher2D", "teacher3D")
BASE_TERMS = ("motion", "mse", "bg")


@dataclass
class SupervisionTarget:
    mask: np.ndarray  # (N,) or (h, w) binary
    confidence: float
    source: str

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown target source {self.source!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def modality(self) -> str:
        return self.source[-2:]

    @property
    def is_teacher(self) -> bool:
        return self.source.startswith("teacher")


def dist_term(src: str, dst: str) -> str:
    return f"dist_{src}->{dst}"


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if like is None else x.to(like.dtype)
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


def weighted_bce(mask, W, confidence=0.0) -> torch.Tensor:
    """Confidence-weighted BCE between binary targets and probability maps.

    ``mask`` and ``W`` have shape (..., N); ``confidence`` broadcasts over the
    leading dims.  Per-map losses are averaged over N, then over maps.
    """
    W = _as_tensor(W)
    m = _as_tensor(mask, W)
    if m.shape != W.shape:
        raise ValueError(f"mask shape {tuple(m.shape)} does not match map shape {tuple(W.shape)}")
    s = _as_tensor(confidence, W)
    if s.dim():
        s = s.unsqueeze(-1)
    Wc = W.clamp(EPS, 1.0 - EPS)
    per_pixel = (1.0 + s) * m * torch.log(Wc) + (1.0 - m) * torch.log1p(-Wc)
    return -per_pixel.mean(dim=-1).mean()


def completion_mse(pred, target, valid) -> torch.Tensor:
    """Squared error averaged over channels and over valid pixels only.

    ``pred``/``target`` are (..., C, H, W); ``valid`` is (..., H, W).
    """
    pred = _as_tensor(pred)
    target = _as_tensor(target, pred)
    valid = torch.as_tensor(np.asarray(valid) if not isinstance(valid, torch.Tensor) else valid, dtype=torch.bool)
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    if valid.shape != pred.shape[:-3] + pred.shape[-2:]:
        raise ValueError("valid mask shape does not match image shape")
    n = valid.sum()
    if n == 0:
        raise ValueError("completion_mse needs at least one valid pixel")
    sq = ((pred - target) ** 2).mean(dim=-3)
    return torch.where(valid, sq, torch.zeros_like(sq)).sum() / n


def background_nll(W_bg, covered) -> torch.Tensor:
    """Pushes W_bg to 1 off every supervision target and to 0 on them."""
    W_bg = _as_tensor(W_bg)
    c = _as_tensor(covered, W_bg)
    if c.shape != W_bg.shape:
        raise ValueError("covered mask and background map lengths differ")
    Wc = W_bg.clamp(EPS, 1.0 - EPS)
    return -((1.0 - c) * torch.log(Wc) + c * torch.log1p(-Wc)).mean()


def check_term(branch: str, phase: str, name: str) -> None:
    if branch not in MODALITIES:
        raise ValueError(f"unknown branch {branch!r}")
    if name in BASE_TERMS:
        return
    if not name.startswith("dist_") or "->" not in name:
        raise ValueError(f"unknown loss term {name!r}")
    if phase != "distill":
        raise ValueError(f"distillation term {name!r} is not allowed during {phase}")
    src, dst = name[len("dist_"):].split("->")
    if dst != branch:
        raise ValueError(f"term {name!r} does not target the {branch} branch")
    if src == dst:
        raise ValueError(f"intra-modal distillation {name!r} is not used")
    if src not in MODALITIES:
        raise ValueError(f"unknown source modality in {name!r}")


def total_loss(branch: str, phase: str, parts: dict, weights: dict | None = None):
    """Weighted sum of labelled loss terms for one student."""
    if phase not in ("burn_in", "distill"):
        raise ValueError(f"unknown phase {phase!r}")
    weights = weights or {}
    total = 0.0
    for name, value in parts.items():
        check_term(branch, phase, name)
        key = "dist" if name.startswith("dist_") else name
        total = total + weights.get(name, weights.get(key, 1.0)) * value
    return total
