"""Burn-in and cross-modal teacher/student distillation for the 2D and 3D branches.

Four models are trained: a student and an EMA teacher per modality.  During
burn-in each student learns from motion masks plus its pretext task.  During
distillation, each teacher's binarised attention maps become extra targets
for the *other* modality's student; intra-modal targets are never used.
"""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as datamod
from .config import Config
from .losses import (background_nll, completion_mse, dist_term, total_loss, weighted_bce)
from .pcproj import FrontViewStats, drop_points, normalize_front_view
from .pseudolabel import (MaskSet, confidence_score, extract_candidates, filter_motion_masks, match,
                          resize_masks)
from .slotcore import (ModelConfig, NonFiniteError, SlotModel, backward, forward_video, load_model,
                       load_tensors, save_model, save_tensors, stack_maps, upsample_maps)

logger = logging.getLogger(__name__)

BRANCHES = ("2D", "3D")
OTHER = {"2D": "3D", "3D": "2D"}
LOG_COLUMNS = ["step", "phase",
               "total_2D", "motion_2D", "mse_2D", "bg_2D", "dist_3D->2D", "n_dist_2D",
               "total_3D", "motion_3D", "mse_3D", "bg_3D", "dist_2D->3D", "n_dist_3D"]


# ------------------------------------------------------------------ EMA

def ema_update(teacher, student, keep_rate: float):
    """teacher <- keep_rate * teacher + (1 - keep_rate) * student.

    Works in place on modules; for dicts of tensors returns a new dict.
    """
    if not 0.0 <= keep_rate < 1.0:
        raise ValueError(f"keep_rate must lie in [0, 1), got {keep_rate}")
    if isinstance(teacher, torch.nn.Module):
        t_params = dict(teacher.named_parameters())
        s_params = dict(student.named_parameters())
        if t_params.keys() != s_params.keys():
            raise ValueError("teacher and student parameter names differ")
        with torch.no_grad():
            for name, pt in t_params.items():
                ps = s_params[name]
                if pt.shape != ps.shape:
                    raise ValueError(f"shape mismatch for {name}")
                pt.mul_(keep_rate).add_(ps, alpha=1.0 - keep_rate)
        return teacher
    out = {}
    for name, pt in teacher.items():
        ps = student[name]
        if pt.shape != ps.shape:
            raise ValueError(f"shape mismatch for {name}")
        out[name] = keep_rate * pt + (1.0 - keep_rate) * ps
    return out


# ------------------------------------------------------------------ augmentation

@dataclass
class AugmentRecord:
    flip: bool = False
    crop: tuple[float, float, float, float] | None = None  # normalised (y0, x0, y1, x1)
    photometric: list[str] = field(default_factory=list)
    seed: int = 0

    @property
    def geometric(self) -> bool:
        return self.flip or self.crop is not None

    def check(self) -> None:
        if self.crop is not None:
            y0, x0, y1, x1 = self.crop
            if not (0.0 <= y0 < y1 <= 1.0 and 0.0 <= x0 < x1 <= 1.0):
                raise ValueError(f"crop window {self.crop} is not invertible")

    def source_indices(self, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
        """Nearest source row/column for every output row/column."""
        y0, x0, y1, x1 = self.crop if self.crop is not None else (0.0, 0.0, 1.0, 1.0)
        v = (np.arange(h) + 0.5) / h
        u = (np.arange(w) + 0.5) / w
        if self.flip:
            u = 1.0 - u
        rows = np.clip(np.floor((y0 + v * (y1 - y0)) * h), 0, h - 1).astype(np.int64)
        cols = np.clip(np.floor((x0 + u * (x1 - x0)) * w), 0, w - 1).astype(np.int64)
        return rows, cols

    def apply(self, arr: np.ndarray) -> np.ndarray:
        """Apply the geometric part to (..., H, W) data."""
        self.check()
        if not self.geometric:
            return arr
        rows, cols = self.source_indices(arr.shape[-2], arr.shape[-1])
        return arr[..., rows[:, None], cols[None, :]]


@dataclass
class AugmentConfig:
    flip: float = 0.0
    crop: float = 0.0
    crop_scale: tuple[float, float] = (0.7, 1.0)
    color: float = 0.0
    dark: float = 0.0
    jitter: float = 0.0
    jitter_sigma: float = 0.02
    drop: float = 0.0
    drop_fraction: float = 0.1

    @classmethod
    def for_branch(cls, cfg: Config, branch: str) -> "AugmentConfig":
        if branch == "2D":
            return cls(flip=cfg.flip_2d, crop=cfg.crop_2d, color=cfg.color_2d, dark=cfg.dark_2d)
        return cls(flip=cfg.flip_3d, crop=cfg.crop_3d, jitter=cfg.jitter_3d, drop=cfg.drop_3d)


def augment(x: np.ndarray, branch: str, seed: int, cfg: AugmentConfig,
            valid: np.ndarray | None = None):
    """Student-side augmentation of a (..., C, H, W) frame or sequence.

    One geometric transform is drawn per call and shared by all frames.
    Returns (augmented, augmented validity or None, record).
    """
    rng = np.random.default_rng(seed)
    rec = AugmentRecord(seed=int(seed))
    if rng.random() < cfg.flip:
        rec.flip = True
    if rng.random() < cfg.crop:
        s = rng.uniform(*cfg.crop_scale)
        y0, x0 = rng.uniform(0, 1 - s), rng.uniform(0, 1 - s)
        rec.crop = (float(y0), float(x0), float(y0 + s), float(x0 + s))
    out = rec.apply(x).astype(np.float32, copy=True)
    vout = rec.apply(valid) if valid is not None else None

    if branch == "2D":
        if rng.random() < cfg.color:
            b = rng.uniform(0.7, 1.3)
            c = rng.uniform(0.7, 1.3)
            gains = rng.uniform(0.9, 1.1, size=3).astype(np.float32)
            mean = out.mean(axis=(-1, -2, -3), keepdims=True)
            out = (out - mean) * c + mean * b
            out = out * gains.reshape(3, 1, 1)
            out = out + rng.normal(0.0, 0.02, out.shape).astype(np.float32)
            rec.photometric.append("color")
        if rng.random() < cfg.dark:
            out = out * rng.uniform(0.05, 0.4)
            rec.photometric.append("dark")
        out = np.clip(out, 0.0, 1.0)
    else:
        v = vout if vout is not None else np.ones(out.shape[:-3] + out.shape[-2:], bool)
        if rng.random() < cfg.jitter:
            noise = rng.normal(0.0, cfg.jitter_sigma, out.shape).astype(np.float32)
            out = np.where(v[..., None, :, :], out + noise, out)
            rec.photometric.append("jitter")
        if rng.random() < cfg.drop:
            drop = (rng.random(v.shape) < cfg.drop_fraction) & v
            out = np.where(drop[..., None, :, :], 0.0, out).astype(np.float32)
            v = v & ~drop
            rec.photometric.append("drop")
        vout = v if valid is not None else None
    return out.astype(np.float32), vout, rec


def align_targets(targets, record: AugmentRecord):
    """Carry teacher-frame targets into a student's augmented frame (geometry only)."""
    record.check()
    if isinstance(targets, MaskSet):
        return MaskSet(record.apply(targets.masks), targets.scores, targets.frame_id, list(targets.ids))
    if isinstance(targets, np.ndarray):
        return record.apply(targets)
    from .pseudolabel import Candidate
    return [Candidate(record.apply(c.mask), c.confidence, c.source_slot) for c in targets]


# ------------------------------------------------------------------ state

@dataclass
class ModelPair:
    teacher: SlotModel
    student: SlotModel
    optimizer: torch.optim.Optimizer


@dataclass
class TrainState:
    pair2d: ModelPair
    pair3d: ModelPair
    config: Config
    phase: str = "burn_in"
    step: int = 0

    @property
    def keep_rate(self) -> float:
        return self.config.keep_rate

    def pair(self, branch: str) -> ModelPair:
        return self.pair2d if branch == "2D" else self.pair3d


def model_config(cfg: Config, branch: str) -> ModelConfig:
    return ModelConfig(in_channels=3 if branch == "2D" else 4, dim=cfg.dim, num_slots=cfg.num_slots,
                       enc_width=cfg.enc_width, dec_width=cfg.dec_width, mlp_hidden=cfg.mlp_hidden)


def init_state(cfg: Config) -> TrainState:
    pairs = []
    for k, branch in enumerate(BRANCHES):
        torch.manual_seed(cfg.seed * 1000 + k)
        student = SlotModel(model_config(cfg, branch))
        teacher = copy.deepcopy(student)
        for p in teacher.parameters():
            p.requires_grad_(False)
        opt = torch.optim.Adam(student.parameters(), lr=cfg.lr)
        pairs.append(ModelPair(teacher, student, opt))
    return TrainState(pairs[0], pairs[1], cfg)


def learning_rate(cfg: Config, step: int) -> float:
    total = max(1, cfg.burn_in_steps + cfg.distill_steps)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


# ------------------------------------------------------------------ batches

@dataclass
class Batch:
    rgb: np.ndarray  # (B, T, 3, H, W)
    fvs: list[list]  # raw FrontViewImage per (b, t)
    motion: list[list[MaskSet]]  # full-resolution motion masks per (b, t)
    names: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.rgb.shape[0]

    @property
    def T(self) -> int:
        return self.rgb.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.rgb.shape[-2], self.rgb.shape[-1]


def sample_batch(scenes: list, batch_size: int, T: int, rng: np.random.Generator) -> Batch:
    idx = rng.integers(0, len(scenes), size=batch_size)
    rgb, fvs, motion, names = [], [], [], []
    for i in idx:
        s = scenes[int(i)]
        if s.T < T:
            raise ValueError(f"scene {s.name} has {s.T} frames, need {T}")
        t0 = int(rng.integers(0, s.T - T + 1))
        rgb.append(s.rgb[t0:t0 + T])
        fvs.append(s.fvs[t0:t0 + T])
        motion.append(s.motion[t0:t0 + T])
        names.append(s.name)
    return Batch(np.stack(rgb), fvs, motion, names)


@dataclass
class BranchInput:
    teacher_x: torch.Tensor  # unaugmented (B, T, C, H, W)
    student_x: torch.Tensor  # augmented
    target: torch.Tensor  # pretext target in student frame
    target_valid: torch.Tensor | None  # (B, T, H, W) for completion; None = all pixels
    records: list[AugmentRecord]
    motion: list[list[MaskSet]]  # aligned to student frame, full resolution


def prepare_2d(batch: Batch, cfg: Config, rng: np.random.Generator) -> BranchInput:
    aug = AugmentConfig.for_branch(cfg, "2D")
    xs, targets, records, motion = [], [], [], []
    for b in range(batch.size):
        seq = batch.rgb[b]
        x, _, rec = augment(seq, "2D", int(rng.integers(2**31)), aug)
        xs.append(x)
        targets.append(rec.apply(seq))
        records.append(rec)
        motion.append([align_targets(m, rec) for m in batch.motion[b]])
    return BranchInput(torch.from_numpy(batch.rgb.astype(np.float32)), torch.from_numpy(np.stack(xs)),
                       torch.from_numpy(np.stack(targets).astype(np.float32)), None, records, motion)


def prepare_3d(batch: Batch, cfg: Config, stats: FrontViewStats, rng: np.random.Generator) -> BranchInput:
    aug = AugmentConfig.for_branch(cfg, "3D")
    teach, xs, targets, valids, records, motion = [], [], [], [], [], []
    for b in range(batch.size):
        full, dropped, valid_full, valid_drop, m3d = [], [], [], [], []
        for t, fv in enumerate(batch.fvs[b]):
            norm = normalize_front_view(fv, stats)
            full.append(norm.data.transpose(2, 0, 1))
            valid_full.append(fv.valid)
            if cfg.completion and cfg.drop_ratio > 0:
                d, _ = drop_points(norm, cfg.drop_ratio, int(rng.integers(2**31)))
            else:
                d = norm
            dropped.append(d.data.transpose(2, 0, 1))
            valid_drop.append(d.valid)
            m3d.append(filter_motion_masks(batch.motion[b][t], fv))
        full_a = np.stack(full).astype(np.float32)
        x, _, rec = augment(np.stack(dropped), "3D", int(rng.integers(2**31)), aug, np.stack(valid_drop))
        teach.append(full_a)
        xs.append(x)
        targets.append(rec.apply(full_a))
        valids.append(rec.apply(np.stack(valid_full)))
        records.append(rec)
        motion.append([align_targets(m, rec) for m in m3d])
    return BranchInput(torch.from_numpy(np.stack(teach)), torch.from_numpy(np.stack(xs)),
                       torch.from_numpy(np.stack(targets)), torch.from_numpy(np.stack(valids)),
                       records, motion)


# ------------------------------------------------------------------ supervision

def teacher_candidates(model: SlotModel, x: torch.Tensor, cfg: Config):
    """Candidates per (b, t) at input resolution from a teacher pass on unaugmented input."""
    b, t = x.shape[:2]
    with torch.no_grad():
        outs = forward_video(x, model, iters=cfg.slot_iters, decode_output=False)
        slots, bg = stack_maps(outs)
        grid = outs[0].maps.grid
        shape = tuple(x.shape[-2:])
        up_s, up_bg = upsample_maps(slots.reshape(b * t, *slots.shape[2:]), bg.reshape(b * t, -1), grid, shape)
    up_s, up_bg = up_s.numpy(), up_bg.numpy()
    out = []
    for i in range(b):
        row = []
        for j in range(t):
            f = i * t + j
            row.append(extract_candidates(up_s[f], up_bg[f], shape, cfg.min_area, cfg.conf_threshold))
        out.append(row)
    return out


@dataclass
class FrameTargets:
    masks: np.ndarray  # (L, N) at the attention grid
    confidence: np.ndarray  # (L,)
    is_dist: np.ndarray  # (L,) bool


def build_targets(motion: MaskSet, candidates, W: np.ndarray, fg: np.ndarray, grid, K: int) -> FrameTargets:
    """Motion masks plus non-redundant candidates, resized to the grid and capped at K."""
    mm = resize_masks(motion, grid)
    masks = [m.ravel() for m in mm.masks]
    conf = [confidence_score(m, fg) for m in masks]
    is_dist = [False] * len(masks)
    if candidates:
        cand = MaskSet(np.stack([c.mask for c in candidates]), np.array([c.confidence for c in candidates]))
        cand = resize_masks(cand, grid)
        order = np.argsort(-cand.scores, kind="stable")
        for k in order:
            cm = cand.masks[k].ravel()
            if any(_iou(cm, m) >= 0.5 for m in masks):
                continue
            masks.append(cm)
            conf.append(float(cand.scores[k]))
            is_dist.append(True)
    masks, conf, is_dist = masks[:K], conf[:K], is_dist[:K]
    n = grid[0] * grid[1]
    return FrameTargets(np.array(masks, dtype=np.float32).reshape(-1, n), np.array(conf, dtype=np.float32),
                        np.array(is_dist, dtype=bool))


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter / union) if union else 0.0


def branch_losses(branch: str, phase: str, slots: torch.Tensor, bg: torch.Tensor, decoded: torch.Tensor,
                  inp: BranchInput, candidates, grid, cfg: Config) -> tuple[dict, int]:
    """Labelled loss terms for one student; returns (parts, number of distillation pairs)."""
    b, t, n, k = slots.shape
    W_all = slots.reshape(b * t, n, k)
    bg_all = bg.reshape(b * t, n)
    W_np = W_all.detach().numpy().astype(np.float64)
    fg_np = 1.0 - bg_all.detach().numpy().astype(np.float64)

    tgt = np.zeros((b * t, k, n), dtype=np.float32)
    conf = np.zeros((b * t, k), dtype=np.float32)
    has_motion = np.zeros((b * t, k), dtype=bool)
    has_dist = np.zeros((b * t, k), dtype=bool)
    covered = np.zeros((b * t, n), dtype=np.float32)
    supervised = np.zeros(b * t, dtype=bool)
    for i in range(b):
        for j in range(t):
            f = i * t + j
            cands = candidates[i][j] if candidates is not None else []
            ft = build_targets(inp.motion[i][j], cands, W_np[f], fg_np[f], grid, k)
            if len(ft.masks) == 0:
                continue
            supervised[f] = True
            covered[f] = ft.masks.max(axis=0)
            for li, slot in match(ft.masks, W_np[f]):
                tgt[f, slot] = ft.masks[li]
                conf[f, slot] = ft.confidence[li]
                (has_dist if ft.is_dist[li] else has_motion)[f, slot] = True

    W_fk = W_all.permute(0, 2, 1)  # (F, K, N)
    parts = {}
    zero = W_all.sum() * 0.0
    if has_motion.any():
        sel = torch.from_numpy(has_motion)
        parts["motion"] = weighted_bce(torch.from_numpy(tgt)[sel], W_fk[sel], torch.from_numpy(conf)[sel])
    else:
        parts["motion"] = zero
    if phase == "distill":
        name = dist_term(OTHER[branch], branch)
        if has_dist.any():
            sel = torch.from_numpy(has_dist)
            parts[name] = weighted_bce(torch.from_numpy(tgt)[sel], W_fk[sel], torch.from_numpy(conf)[sel])
        else:
            parts[name] = zero
    if supervised.any():
        sel = torch.from_numpy(supervised)
        parts["bg"] = background_nll(bg_all[sel], torch.from_numpy(covered)[sel])
    else:
        parts["bg"] = zero

    if branch == "2D":
        parts["mse"] = ((decoded - inp.target) ** 2).mean()
    elif cfg.completion:
        parts["mse"] = completion_mse(decoded, inp.target, inp.target_valid)
    return parts, int(has_dist.sum())


def _student_update(branch: str, phase: str, state: TrainState, inp: BranchInput, candidates) -> dict:
    cfg = state.config
    pair = state.pair(branch)
    outs = forward_video(inp.student_x, pair.student, iters=cfg.slot_iters)
    slots, bg = stack_maps(outs)
    decoded = torch.stack([o.decoded for o in outs], dim=1)
    parts, n_dist = branch_losses(branch, phase, slots, bg, decoded, inp, candidates, outs[0].maps.grid, cfg)
    loss = total_loss(branch, phase, parts, cfg.loss_weights())
    if not torch.isfinite(loss):
        raise NonFiniteError(f"{branch} loss at step {state.step}")
    grads = backward(loss, pair.student)
    for name, p in pair.student.named_parameters():
        p.grad = grads[name]
    for group in pair.optimizer.param_groups:
        group["lr"] = learning_rate(cfg, state.step)
    pair.optimizer.step()
    ema_update(pair.teacher, pair.student, cfg.keep_rate)
    report = {f"{name}_{branch}" if not name.startswith("dist_") else name: float(v.detach()) for name, v in parts.items()}
    report[f"total_{branch}"] = float(loss.detach())
    report[f"n_dist_{branch}"] = n_dist
    return report


def burn_in_step(batch: Batch, state: TrainState, stats: FrontViewStats, rng: np.random.Generator) -> dict:
    """Motion + pretext supervision for both students, then EMA of both teachers."""
    if state.phase != "burn_in":
        raise ValueError("burn_in_step called outside the burn-in phase")
    inp2d = prepare_2d(batch, state.config, rng)
    inp3d = prepare_3d(batch, state.config, stats, rng)
    report = {"step": state.step, "phase": state.phase}
    report.update(_student_update("2D", "burn_in", state, inp2d, None))
    report.update(_student_update("3D", "burn_in", state, inp3d, None))
    state.step += 1
    return report


def distill_step(batch: Batch, state: TrainState, stats: FrontViewStats, rng: np.random.Generator) -> dict:
    """Cross-modal exchange: 2D teacher -> 3D student and 3D teacher -> 2D student."""
    if state.phase != "distill":
        raise ValueError("distill_step called outside the distillation phase")
    cfg = state.config
    inp2d = prepare_2d(batch, cfg, rng)
    inp3d = prepare_3d(batch, cfg, stats, rng)
    cand2d = teacher_candidates(state.pair2d.teacher, inp2d.teacher_x, cfg)
    cand3d = teacher_candidates(state.pair3d.teacher, inp3d.teacher_x, cfg)
    to_3d = [[align_targets(c, inp3d.records[b]) for c in row] for b, row in enumerate(cand2d)]
    to_2d = [[align_targets(c, inp2d.records[b]) for c in row] for b, row in enumerate(cand3d)]
    report = {"step": state.step, "phase": state.phase}
    report.update(_student_update("2D", "distill", state, inp2d, to_2d))
    report.update(_student_update("3D", "distill", state, inp3d, to_3d))
    state.step += 1
    return report


# ------------------------------------------------------------------ checkpoints

MODEL_FILES = {("2D", "teacher"): "teacher2d.ckpt", ("2D", "student"): "student2d.ckpt",
               ("3D", "teacher"): "teacher3d.ckpt", ("3D", "student"): "student3d.ckpt"}


def save_checkpoint(directory, state: TrainState, with_optimizer: bool = True) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for (branch, role), fname in MODEL_FILES.items():
        save_model(d / fname, getattr(state.pair(branch), role))
    if with_optimizer:
        for branch in BRANCHES:
            opt = state.pair(branch).optimizer
            tensors = {}
            for name, p in state.pair(branch).student.named_parameters():
                st = opt.state.get(p)
                if st:
                    tensors[f"{name}/exp_avg"] = st["exp_avg"]
                    tensors[f"{name}/exp_avg_sq"] = st["exp_avg_sq"]
                    tensors[f"{name}/step"] = torch.as_tensor(float(st["step"]))
            save_tensors(d / f"optim{branch.lower()}.ckpt", tensors)
    (d / "state.txt").write_text(f"step = {state.step}\nphase = {state.phase}\nseed = {state.config.seed}\n")
    return d


def load_checkpoint(directory, cfg: Config, with_optimizer: bool = True) -> TrainState:
    d = Path(directory)
    state = init_state(cfg)
    for (branch, role), fname in MODEL_FILES.items():
        load_model(d / fname, getattr(state.pair(branch), role))
    meta = dict(line.split(" = ", 1) for line in (d / "state.txt").read_text().splitlines() if " = " in line)
    state.step = int(meta["step"])
    state.phase = meta["phase"].strip()
    if with_optimizer:
        for branch in BRANCHES:
            path = d / f"optim{branch.lower()}.ckpt"
            if not path.exists():
                continue
            tensors = load_tensors(path)
            opt = state.pair(branch).optimizer
            for name, p in state.pair(branch).student.named_parameters():
                if f"{name}/exp_avg" in tensors:
                    opt.state[p] = {"step": torch.tensor(float(tensors[f"{name}/step"])),
                                    "exp_avg": tensors[f"{name}/exp_avg"].clone(),
                                    "exp_avg_sq": tensors[f"{name}/exp_avg_sq"].clone()}
    return state


def load_student(directory, cfg: Config, branch: str, role: str = "student") -> SlotModel:
    model = SlotModel(model_config(cfg, branch))
    load_model(Path(directory) / MODEL_FILES[(branch, role)], model)
    model.eval()
    return model


# ------------------------------------------------------------------ loop

class LossLog:
    """Append-only CSV of per-step loss terms."""

    def __init__(self, path):
        self.path = Path(path)

    def truncate_to(self, step: int) -> None:
        if not self.path.exists():
            return
        with open(self.path, newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if int(r["step"]) < step]
        self._write(rows, "w")

    def append(self, row: dict) -> None:
        self._write([row], "a")

    def _write(self, rows, mode):
        new = mode == "w" or not self.path.exists()
        with open(self.path, mode, newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
            if new:
                w.writeheader()
            for r in rows:
                w.writerow({c: _fmt(r.get(c, "")) for c in LOG_COLUMNS})


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def train(cfg: Config, scenes=None, out_dir=None, resume: bool = False, stop_at: int | None = None) -> TrainState:
    """Burn-in then distillation; writes checkpoints and a loss log under ``out_dir``.

    ``stop_at`` ends the run early (after saving a resumable checkpoint).
    """
    torch.set_num_threads(1)
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if scenes is None:
        scenes = datamod.load_split(cfg.data_dir, "train")
    if not scenes:
        raise ValueError("no training scenes")
    stats = datamod.dataset_stats(scenes)
    datamod.write_stats(out / "fv_stats.txt", stats)
    log = LossLog(out / "losses.csv")

    if resume and (out / "last" / "state.txt").exists():
        state = load_checkpoint(out / "last", cfg)
        log.truncate_to(state.step)
        logger.info("resumed at step %d", state.step)
    else:
        state = init_state(cfg)
        if log.path.exists():
            log.path.unlink()

    total = cfg.burn_in_steps + cfg.distill_steps
    if state.step >= cfg.burn_in_steps and cfg.burn_in_steps == 0:
        state.phase = "distill"
    while state.step < total:
        if stop_at is not None and state.step >= stop_at:
            save_checkpoint(out / "last", state)
            return state
        state.phase = "burn_in" if state.step < cfg.burn_in_steps else "distill"
        rng = np.random.default_rng([cfg.seed, state.step])
        batch = sample_batch(scenes, cfg.batch_size, cfg.T, rng)
        step_fn = burn_in_step if state.phase == "burn_in" else distill_step
        report = step_fn(batch, state, stats, rng)
        log.append(report)
        if state.step % 50 == 0:
            logger.info("step %d %s 2D %.4f 3D %.4f", state.step, state.phase,
                        report["total_2D"], report["total_3D"])
        if state.step == cfg.burn_in_steps:
            save_checkpoint(out / "burn_in", state, with_optimizer=False)
        if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(out / "last", state)
    if cfg.burn_in_steps == 0 and not (out / "burn_in").exists():
        save_checkpoint(out / "burn_in", state, with_optimizer=False)
    state.phase = "distill" if cfg.distill_steps else "burn_in"
    save_checkpoint(out / "final", state, with_optimizer=False)
    save_checkpoint(out / "last", state)
    return state


# ------------------------------------------------------------------ inference

def scene_input(scene, branch: str, stats: FrontViewStats) -> torch.Tensor:
    """(1, T, C, H, W) unaugmented model input for a loaded scene."""
    if branch == "2D":
        x = scene.rgb
    else:
        x, _ = datamod.normalized_stack(scene.fvs, stats)
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))[None]


def predict_labels(model: SlotModel, x: torch.Tensor, iters: int) -> np.ndarray:
    """Argmax label images (T, H, W) for a (1, T, C, H, W) sequence."""
    from .evalfuse import prediction_labels
    with torch.no_grad():
        outs = forward_video(x, model, iters=iters, decode_output=False)
        slots, bg = stack_maps(outs)
    return prediction_labels(slots[0], bg[0], outs[0].maps.grid, tuple(x.shape[-2:]))
