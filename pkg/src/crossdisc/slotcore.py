"""Convolutional encoder, recurrent slot attention over video, and dense decoder.

Slots from frame ``t-1`` seed the attention at frame ``t``.  A dedicated
background slot shares the k/q/v projections with the K object slots and
competes with them in the per-pixel softmax.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)

STRIDE = 4
CKPT_MAGIC = b"SCKP"
CKPT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """A forward value or gradient became NaN/inf."""

    def __init__(self, what: str):
        super().__init__(f"non-finite values in {what}")
        self.what = what


@dataclass
class ModelConfig:
    in_channels: int = 3
    dim: int = 64
    num_slots: int = 5
    enc_width: int = 32
    dec_width: int = 32
    mlp_hidden: int = 64


@dataclass
class SlotState:
    slots: torch.Tensor  # (B, K, D)
    bg: torch.Tensor  # (B, D)

    @property
    def num_slots(self) -> int:
        return self.slots.shape[-2]


@dataclass
class AttentionMaps:
    slots: torch.Tensor  # (B, N, K) per-slot maps W
    bg: torch.Tensor  # (B, N) background map W_bg
    grid: tuple[int, int]  # (h, w)

    @property
    def fg(self) -> torch.Tensor:
        return 1.0 - self.bg


@dataclass
class FrameOutput:
    maps: AttentionMaps
    state: SlotState
    decoded: torch.Tensor  # (B, C, H', W')


class Encoder(nn.Module):
    """Four conv layers (total stride 4), additive position embedding, per-pixel MLP."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w, d = cfg.enc_width, cfg.dim
        self.convs = nn.ModuleList([
            nn.Conv2d(cfg.in_channels, w, 5, stride=2, padding=2),
            nn.Conv2d(w, w, 3, stride=2, padding=1),
            nn.Conv2d(w, w, 3, padding=2, dilation=2),
            nn.Conv2d(w, d, 3, padding=1),
        ])
        self.pos = nn.Linear(4, d)
        self.norm = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, cfg.mlp_hidden), nn.ReLU(), nn.Linear(cfg.mlp_hidden, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.relu(x)
        h = x.permute(0, 2, 3, 1)  # (B, h, w, D)
        h = h + self.pos(position_grid(h.shape[1], h.shape[2], h.dtype))
        return self.mlp(self.norm(h))


class SlotAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.dim
        self.norm_inputs = nn.LayerNorm(d)
        self.norm_slots = nn.LayerNorm(d)
        self.norm_mlp = nn.LayerNorm(d)
        self.k = nn.Linear(d, d, bias=False)
        self.q = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)
        self.gru = nn.GRUCell(d, d)
        self.mlp = nn.Sequential(nn.Linear(d, cfg.mlp_hidden), nn.ReLU(), nn.Linear(cfg.mlp_hidden, d))


class Decoder(nn.Module):
    """Feature map -> dense image at stride-4 resolution via pixel shuffle."""

    def __init__(self, cfg: ModelConfig, out_channels: int):
        super().__init__()
        w = cfg.dec_width
        self.out_channels = out_channels
        self.conv1 = nn.Conv2d(cfg.dim, w, 3, padding=1)
        self.conv2 = nn.Conv2d(w, w, 3, padding=1)
        self.head = nn.Conv2d(w, out_channels * STRIDE * STRIDE, 1)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        x = h.permute(0, 3, 1, 2)
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        return F.pixel_shuffle(self.head(x), STRIDE)


class SlotModel(nn.Module):
    """All learnable parameters of one branch (2D or 3D)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.attention = SlotAttention(cfg)
        self.decoder = Decoder(cfg, cfg.in_channels)
        self.slot_init = nn.Parameter(torch.randn(cfg.num_slots, cfg.dim) * cfg.dim ** -0.5)
        self.bg_init = nn.Parameter(torch.randn(cfg.dim) * cfg.dim ** -0.5)

    def initial_state(self, batch: int) -> SlotState:
        return SlotState(self.slot_init.unsqueeze(0).expand(batch, -1, -1),
                         self.bg_init.unsqueeze(0).expand(batch, -1))


def position_grid(h: int, w: int, dtype=torch.float32) -> torch.Tensor:
    """(h, w, 4) ramps [y, x, 1-y, 1-x] sampled at cell centres."""
    ys = (torch.arange(h, dtype=dtype) + 0.5) / h
    xs = (torch.arange(w, dtype=dtype) + 0.5) / w
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gy, gx, 1 - gy, 1 - gx], dim=-1)


def encode(frame: torch.Tensor, model: SlotModel) -> torch.Tensor:
    """(B, C, H', W') frames -> (B, h, w, D) features."""
    if frame.dim() == 3:
        frame = frame.unsqueeze(0)
    if frame.shape[1] != model.cfg.in_channels:
        raise ValueError(f"expected {model.cfg.in_channels} input channels, got {frame.shape[1]}")
    return model.encoder(frame)


def attention_logits(keys: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
    """Scaled dot-product scores (B, N, S) between keys (B, N, D) and queries (B, S, D)."""
    return torch.einsum("bnd,bsd->bns", keys, queries) / math.sqrt(keys.shape[-1])


def slot_attention_step(features: torch.Tensor, state: SlotState,
                        model: SlotModel) -> tuple[AttentionMaps, SlotState]:
    """One attention/update round: softmax over [slots | bg], weighted-mean aggregation, GRU + MLP."""
    sa = model.attention
    b, h, w, d = features.shape
    if state.slots.shape[-1] != d:
        raise ValueError(f"slot width {state.slots.shape[-1]} does not match feature width {d}")
    inputs = sa.norm_inputs(features.reshape(b, h * w, d))
    keys, values = sa.k(inputs), sa.v(inputs)
    all_slots = torch.cat([state.slots, state.bg.unsqueeze(1)], dim=1)  # (B, K+1, D)
    queries = sa.q(sa.norm_slots(all_slots))
    attn = torch.softmax(attention_logits(keys, queries), dim=-1)  # over slots
    if not torch.isfinite(attn).all():
        raise NonFiniteError("attention weights")

    weights = attn / (attn.sum(dim=1, keepdim=True) + 1e-8)
    updates = torch.einsum("bns,bnd->bsd", weights, values)
    k1 = all_slots.shape[1]
    new = sa.gru(updates.reshape(b * k1, d), all_slots.reshape(b * k1, d)).reshape(b, k1, d)
    new = new + sa.mlp(sa.norm_mlp(new))
    if not torch.isfinite(new).all():
        raise NonFiniteError("slot update")
    maps = AttentionMaps(attn[..., :-1], attn[..., -1], (h, w))
    return maps, SlotState(new[:, :-1], new[:, -1])


def decode(features: torch.Tensor, model: SlotModel, target_shape: tuple[int, int] | None = None) -> torch.Tensor:
    """(B, h, w, D) features -> (B, C, H', W'); resized bilinearly if ``target_shape`` differs."""
    out = model.decoder(features)
    if target_shape is not None and tuple(out.shape[-2:]) != tuple(target_shape):
        out = F.interpolate(out, size=tuple(target_shape), mode="bilinear", align_corners=False)
    return out


def forward_video(frames, model: SlotModel, state: SlotState | None = None,
                  iters: int = 1, decode_output: bool = True) -> list[FrameOutput]:
    """Run the recurrent model over ``frames`` of shape (B, T, C, H', W') or a list of (B, C, H', W')."""
    if isinstance(frames, torch.Tensor):
        if frames.dim() != 5:
            raise ValueError("frame tensor must be (B, T, C, H, W)")
        seq = frames
    else:
        if len(frames) == 0:
            raise ValueError("empty frame list")
        seq = torch.stack(list(frames), dim=1)
    b, t = seq.shape[:2]
    target = tuple(seq.shape[-2:])
    feats = encode(seq.reshape(b * t, *seq.shape[2:]), model)
    decoded = decode(feats, model, target) if decode_output else None
    feats = feats.reshape(b, t, *feats.shape[1:])
    if state is None:
        state = model.initial_state(b)

    outputs = []
    for i in range(t):
        for _ in range(iters):
            maps, state = slot_attention_step(feats[:, i], state, model)
        dec = decoded.reshape(b, t, *decoded.shape[1:])[:, i] if decoded is not None else None
        outputs.append(FrameOutput(maps, state, dec))
    return outputs


def stack_maps(outputs: list[FrameOutput]) -> tuple[torch.Tensor, torch.Tensor]:
    """Slot maps (B, T, N, K) and background maps (B, T, N) from a video pass."""
    return (torch.stack([o.maps.slots for o in outputs], dim=1),
            torch.stack([o.maps.bg for o in outputs], dim=1))


def upsample_maps(slot_maps: torch.Tensor, bg_map: torch.Tensor, grid: tuple[int, int],
                  shape: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor]:
    """Bilinearly resample (F, N, K) slot maps and (F, N) background maps to ``shape``.

    Returns (F, H*W, K) and (F, H*W); columns still sum to one per pixel.
    """
    probs = torch.cat([slot_maps, bg_map.unsqueeze(-1)], dim=-1)
    f, _, k1 = probs.shape
    img = probs.reshape(f, grid[0], grid[1], k1).permute(0, 3, 1, 2)
    if tuple(grid) != tuple(shape):
        img = F.interpolate(img, size=tuple(shape), mode="bilinear", align_corners=False)
    flat = img.permute(0, 2, 3, 1).reshape(f, -1, k1)
    return flat[..., :-1], flat[..., -1]


def backward(loss: torch.Tensor, model: nn.Module) -> dict[str, torch.Tensor]:
    """Exact gradients of a scalar loss with respect to every named parameter."""
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = {}
    for name, p, g in zip(names, params, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"gradient of {name}")
        out[name] = g
    return out


# ------------------------------------------------------------------ checkpoints
#
# Layout (little-endian):
#   b"SCKP", u32 version, u32 count, then per tensor:
#   u16 name length, utf-8 name, u8 ndim, u32 dims[ndim], f32 payload (C order)

def save_tensors(path, tensors: dict[str, torch.Tensor | np.ndarray]) -> None:
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path) -> dict[str, torch.Tensor]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint container")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        out[name] = torch.from_numpy(arr.astype(np.float32))
    return out


def save_model(path, model: SlotModel) -> None:
    save_tensors(path, dict(model.state_dict()))


def load_model(path, model: SlotModel) -> SlotModel:
    tensors = load_tensors(path)
    own = model.state_dict()
    if set(tensors) != set(own):
        raise ValueError(f"{path}: parameter names do not match the model")
    for name, t in tensors.items():
        if tuple(t.shape) != tuple(own[name].shape):
            raise ValueError(f"{path}: shape mismatch for {name}")
    model.load_state_dict(tensors)
    return model
