"""Loading generated (or KITTI-layout) scenes into memory."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pcproj import (Calibration, FrontViewImage, FrontViewStats, front_view_stats, normalize_front_view,
                     project_front_view, read_calibration, read_point_cloud)
from .pseudolabel import MaskSet, masks_from_labels, read_label_pgm
from .synthgen import read_manifest, read_ppm

logger = logging.getLogger(__name__)


@dataclass
class Scene:
    name: str
    frames: list[str]
    rgb: np.ndarray  # (T, 3, H, W) float32 in [0, 1]
    fvs: list[FrontViewImage]  # raw (metric) front views
    calib: Calibration
    motion: list[MaskSet]  # full resolution
    gt: list[np.ndarray] | None  # label images, None when absent

    @property
    def T(self) -> int:
        return self.rgb.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.rgb.shape[2], self.rgb.shape[3]


def load_scene(root, name: str, frames: list[str]) -> Scene:
    d = Path(root) / name
    calib = read_calibration(d / "calib.txt")
    rgb, fvs, motion, gt = [], [], [], []
    for t, stem in enumerate(frames):
        img = read_ppm(d / "rgb" / f"{stem}.ppm")
        h, w = img.shape[:2]
        rgb.append(img.astype(np.float32).transpose(2, 0, 1) / 255.0)
        pc = read_point_cloud(d / "velodyne" / f"{stem}.bin", frame_id=t)
        fvs.append(project_front_view(pc, calib, h, w))
        mpath = d / "motion" / f"{stem}.pgm"
        motion.append(masks_from_labels(read_label_pgm(mpath), t) if mpath.exists() else MaskSet.empty((h, w), t))
        gpath = d / "gt" / f"{stem}.pgm"
        gt.append(read_label_pgm(gpath) if gpath.exists() else None)
    return Scene(name, list(frames), np.stack(rgb), fvs, calib, motion,
                 gt if all(g is not None for g in gt) else None)


def load_split(root, split: str) -> list[Scene]:
    manifest = Path(root) / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest}")
    return [load_scene(root, name, frames) for name, sp, frames in read_manifest(manifest) if sp == split]


def dataset_stats(scenes: list[Scene]) -> FrontViewStats:
    return front_view_stats(fv for s in scenes for fv in s.fvs)


def normalized_stack(fvs: list[FrontViewImage], stats: FrontViewStats) -> tuple[np.ndarray, np.ndarray]:
    """(T, 4, H, W) normalised front views and (T, H, W) validity."""
    norm = [normalize_front_view(fv, stats) for fv in fvs]
    return (np.stack([n.data.transpose(2, 0, 1) for n in norm]).astype(np.float32),
            np.stack([fv.valid for fv in fvs]))


def write_stats(path, stats: FrontViewStats) -> None:
    Path(path).write_text("min = " + " ".join(repr(float(v)) for v in stats.minimum) + "\n"
                          "max = " + " ".join(repr(float(v)) for v in stats.maximum) + "\n")


def read_stats(path) -> FrontViewStats:
    vals = {}
    for line in Path(path).read_text().splitlines():
        key, _, rest = line.partition("=")
        vals[key.strip()] = [float(v) for v in rest.split()]
    return FrontViewStats(vals["min"], vals["max"])
