"""Toy driving-like scenes with RGB, LiDAR, calibration, GT and motion masks.

The camera looks along the road with its principal point on the horizon.
Objects are textured fronto-parallel rectangles or ellipses standing on the
ground plane; moving ones translate sideways at a constant pixel speed.
LiDAR points are back-projected from the dense depth grid on a subset of
image rows, which imitates beam structure and a narrower vertical field of
view than the camera.
"""
from __future__ import annotations

import colorsys
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .pcproj import (Calibration, PointCloud, project_front_view, write_calibration,
                     write_front_view, write_point_cloud)
from .pseudolabel import write_label_pgm

logger = logging.getLogger(__name__)

# LiDAR (x forward, y left, z up) -> camera (x right, y down, z forward), KITTI-like offset
LIDAR_ROTATION = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
LIDAR_OFFSET = np.array([0.0, -0.08, -0.27])
MAX_PLACEMENT_TRIES = 200


@dataclass
class SceneSpec:
    seed: int = 0
    n_objects: int = 3
    n_moving: int = 2
    T: int = 5
    height: int = 64
    width: int = 128
    focal: float = 96.0
    camera_height: float = 1.6
    depth_range: tuple[float, float] = (5.0, 16.0)
    object_width: tuple[float, float] = (1.6, 3.2)
    object_height: tuple[float, float] = (1.3, 2.2)
    speed_px: tuple[float, float] = (2.0, 4.0)
    lidar_top_row: int = 16
    row_step: int = 2
    point_dropout: float = 0.0
    max_range: float = 70.0
    low_reflectivity: tuple[int, ...] = ()

    def validate(self) -> None:
        if self.n_objects < 1:
            raise ValueError("a scene needs at least one object")
        if not 0 <= self.n_moving <= self.n_objects:
            raise ValueError("n_moving must lie in [0, n_objects]")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        lo, hi = self.depth_range
        if not (1.0 <= lo <= hi <= 70.0):
            raise ValueError("object depths must lie within [1, 70] m")
        if self.row_step < 1:
            raise ValueError("row_step must be >= 1")
        if not 0.0 <= self.point_dropout < 1.0:
            raise ValueError("point_dropout must lie in [0, 1)")


@dataclass
class SceneObject:
    depth: float
    width_px: int
    height_px: int
    top: int
    left0: float
    speed: float
    ellipse: bool
    color: np.ndarray
    stripe: tuple[float, float, float]
    reflectance: float

    @property
    def moving(self) -> bool:
        return self.speed != 0.0

    def left(self, t: int) -> int:
        return int(np.floor(self.left0 + self.speed * t + 0.5))

    def mask(self, t: int, shape: tuple[int, int]) -> np.ndarray:
        h, w = shape
        m = np.zeros(shape, dtype=bool)
        top, left = self.top, self.left(t)
        ys = np.arange(top, top + self.height_px)
        xs = np.arange(left, left + self.width_px)
        if self.ellipse:
            cy, cx = top + (self.height_px - 1) / 2, left + (self.width_px - 1) / 2
            ry, rx = self.height_px / 2, self.width_px / 2
            inside = (((ys[:, None] - cy) / ry) ** 2 + ((xs[None, :] - cx) / rx) ** 2) <= 1.0
        else:
            inside = np.ones((len(ys), len(xs)), dtype=bool)
        ok_y = (ys >= 0) & (ys < h)
        ok_x = (xs >= 0) & (xs < w)
        m[np.ix_(ys[ok_y], xs[ok_x])] = inside[np.ix_(ok_y, ok_x)]
        return m


@dataclass
class SceneBundle:
    spec: SceneSpec
    rgb: np.ndarray  # (T, H, W, 3) uint8
    clouds: list[PointCloud]
    point_labels: list[np.ndarray]  # per-point instance id (0 = background)
    calib: Calibration
    gt: list[np.ndarray]  # (H, W) uint16 label images, ids 1..n_objects
    motion: list[np.ndarray]  # same ids, moving objects only
    objects: list[SceneObject] = field(default_factory=list)


def make_calibration(spec: SceneSpec) -> Calibration:
    tr = np.hstack([LIDAR_ROTATION, LIDAR_OFFSET[:, None]])
    return Calibration.pinhole(spec.focal, spec.width / 2.0, spec.height / 2.0, tr)


def _horizon(spec: SceneSpec) -> float:
    return spec.height / 2.0


def _place_objects(spec: SceneSpec, rng: np.random.Generator) -> list[SceneObject]:
    H, W, f = spec.height, spec.width, spec.focal
    cy = _horizon(spec)
    moving = np.zeros(spec.n_objects, dtype=bool)
    moving[rng.permutation(spec.n_objects)[:spec.n_moving]] = True
    placed: list[SceneObject] = []
    for k in range(spec.n_objects):
        for _ in range(MAX_PLACEMENT_TRIES):
            z = float(rng.uniform(*spec.depth_range))
            w_px = max(3, int(round(f * rng.uniform(*spec.object_width) / z)))
            h_px = max(3, int(round(f * rng.uniform(*spec.object_height) / z)))
            bottom = min(H - 1, int(np.floor(cy + f * spec.camera_height / z + 0.5)))
            top = bottom - h_px + 1
            speed = 0.0
            if moving[k]:
                speed = float(rng.uniform(*spec.speed_px)) * (1 if rng.random() < 0.5 else -1)
            travel = speed * (spec.T - 1)
            lo = max(0.0, -travel)
            hi = W - w_px - max(0.0, travel)
            if hi <= lo:
                continue
            left0 = float(rng.uniform(lo, hi))
            hue = rng.random()
            color = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.55, 1.0)))
            stripe = (float(rng.uniform(0, np.pi)), float(rng.uniform(3.0, 7.0)), float(rng.uniform(0, 2 * np.pi)))
            obj = SceneObject(z, w_px, h_px, top, left0, speed, bool(rng.random() < 0.5), color, stripe,
                              float(rng.uniform(0.4, 0.9)))
            if all(not _collide(obj, other, spec.T) for other in placed):
                placed.append(obj)
                break
        else:
            raise RuntimeError(f"could not place object {k} without overlap after {MAX_PLACEMENT_TRIES} tries")
    return placed


def _collide(a: SceneObject, b: SceneObject, T: int, margin: int = 2) -> bool:
    if a.top > b.top + b.height_px - 1 + margin or b.top > a.top + a.height_px - 1 + margin:
        return False
    for t in range(T):
        la, lb = a.left(t), b.left(t)
        if not (la > lb + b.width_px - 1 + margin or lb > la + a.width_px - 1 + margin):
            return True
    return False


def _background(spec: SceneSpec, rng: np.random.Generator):
    """Static background colour and camera depth (inf where the LiDAR sees nothing)."""
    H, W, f = spec.height, spec.width, spec.focal
    cy = _horizon(spec)
    rows = np.arange(H)[:, None].astype(np.float64)
    cols = np.arange(W)[None, :].astype(np.float64)
    img = np.zeros((H, W, 3))
    depth = np.full((H, W), np.inf)
    refl = np.zeros((H, W))

    sky_top = np.array([0.55, 0.65, 0.8]) + rng.uniform(-0.05, 0.05, 3)
    sky = sky_top + (np.array([0.85, 0.87, 0.9]) - sky_top) * (rows / cy)[..., None]
    img[:] = sky

    # building band just above the horizon at 45-60 m
    n_blocks = int(rng.integers(4, 9))
    edges = np.sort(rng.choice(np.arange(8, W - 8), n_blocks - 1, replace=False))
    edges = np.concatenate([[0], edges, [W]])
    for b in range(n_blocks):
        c0, c1 = edges[b], edges[b + 1]
        top = int(cy - rng.integers(4, 12))
        z = float(rng.uniform(45.0, 60.0))
        gray = float(rng.uniform(0.35, 0.6))
        tone = np.array([gray, gray * rng.uniform(0.92, 1.02), gray * rng.uniform(0.9, 1.05)])
        sl = (slice(top, int(cy) + 1), slice(c0, c1))
        img[sl] = tone
        win = ((np.arange(top, int(cy) + 1)[:, None] % 3 == 0) & (np.arange(c0, c1)[None, :] % 4 == 1))
        img[sl][win] = tone * 0.8
        depth[sl] = z
        refl[sl] = 0.5

    # ground plane below the horizon
    below = rows[:, 0] > cy
    ground_z = np.where(below, f * spec.camera_height / np.maximum(rows[:, 0] - cy, 1e-9), np.inf)
    shade = np.clip(0.25 + 0.25 * (rows[:, 0] - cy) / (H - cy), 0, 1)
    base = np.array([0.42, 0.4, 0.37]) + rng.uniform(-0.04, 0.04, 3)
    noise = rng.normal(0.0, 0.025, (H, W))
    for i in np.flatnonzero(below):
        img[i] = base * (0.7 + shade[i]) + noise[i, :, None]
        depth[i] = ground_z[i]
        refl[i] = 0.25
    # lane marking
    lane = below[:, None] & (np.abs(cols - spec.width / 2.0 - 0.15 * (rows - cy)) < 0.6 + 0.04 * (rows - cy))
    img[lane] = np.array([0.85, 0.85, 0.8])
    return np.clip(img, 0, 1), depth, refl


def _texture(obj: SceneObject, mask: np.ndarray, t: int) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    angle, period, phase = obj.stripe
    u = (xs - obj.left(t)) * np.cos(angle) + (ys - obj.top) * np.sin(angle)
    mod = 0.78 + 0.22 * np.sin(2 * np.pi * u / period + phase)
    vshade = 1.0 - 0.25 * (ys - obj.top) / max(obj.height_px, 1)
    return np.clip(obj.color[None, :] * (mod * vshade)[:, None], 0, 1)


def _points_from_depth(spec: SceneSpec, calib: Calibration, depth: np.ndarray, refl: np.ndarray,
                       labels: np.ndarray, rng: np.random.Generator):
    H, W = depth.shape
    f, cx, cy = spec.focal, spec.width / 2.0, spec.height / 2.0
    rows = np.arange(H)
    beam = (rows >= spec.lidar_top_row) & ((rows - spec.lidar_top_row) % spec.row_step == 0)
    sel = beam[:, None] & np.isfinite(depth)
    ii, jj = np.nonzero(sel)
    z = depth[ii, jj]
    cam = np.stack([(jj - cx) * z / f, (ii - cy) * z / f, z], axis=1)
    inrange = np.linalg.norm(cam, axis=1) <= spec.max_range
    if spec.point_dropout > 0:
        inrange &= rng.random(len(z)) >= spec.point_dropout
    cam, ii, jj = cam[inrange], ii[inrange], jj[inrange]
    xyz = calib.rect_to_lidar(cam)
    pts = np.hstack([xyz, refl[ii, jj][:, None]])
    return pts, labels[ii, jj].astype(np.int64)


def generate(spec: SceneSpec) -> SceneBundle:
    """Deterministic toy scene for ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    calib = make_calibration(spec)
    objects = _place_objects(spec, rng)
    bg_img, bg_depth, bg_refl = _background(spec, rng)
    shape = (spec.height, spec.width)

    rgb, clouds, point_labels, gt, motion = [], [], [], [], []
    for t in range(spec.T):
        img = bg_img.copy()
        depth = bg_depth.copy()
        refl = bg_refl.copy()
        labels = np.zeros(shape, dtype=np.uint16)
        mlabels = np.zeros(shape, dtype=np.uint16)
        for k, obj in enumerate(objects, start=1):
            m = obj.mask(t, shape)
            img[m] = _texture(obj, m, t)
            depth[m] = obj.depth
            refl[m] = obj.reflectance
            labels[m] = k
            if obj.moving:
                mlabels[m] = k
        img = np.clip(img + rng.normal(0.0, 0.01, img.shape), 0, 1)
        pts, plab = _points_from_depth(spec, calib, depth, refl, labels, rng)
        rgb.append(np.round(img * 255).astype(np.uint8))
        clouds.append(PointCloud(pts, frame_id=t))
        point_labels.append(plab)
        gt.append(labels)
        motion.append(mlabels)
    return SceneBundle(spec, np.stack(rgb), clouds, point_labels, calib, gt, motion, objects)


def degrade(bundle: SceneBundle, mode: str, strength: float, objects=None) -> SceneBundle:
    """Night dimming of RGB, or point removal on low-reflectivity objects."""
    if not 0.0 <= strength <= 1.0:
        raise ValueError("strength must lie in [0, 1]")
    if mode == "night":
        rgb = np.round(bundle.rgb.astype(np.float64) * (1.0 - strength)).astype(np.uint8)
        return replace(bundle, rgb=rgb)
    if mode != "low_reflectivity":
        raise ValueError(f"unknown degradation mode {mode!r}")
    if objects is None:
        objects = [k + 1 for k in bundle.spec.low_reflectivity] or list(range(1, len(bundle.objects) + 1))
    targets = set(int(k) for k in objects)
    rng = np.random.default_rng([bundle.spec.seed, 7919])
    clouds, labels = [], []
    for pc, lab in zip(bundle.clouds, bundle.point_labels):
        keep = np.ones(len(lab), dtype=bool)
        for k in targets:
            idx = np.flatnonzero(lab == k)
            n_remove = int(np.ceil(strength * len(idx) - 1e-12))
            keep[rng.choice(idx, size=n_remove, replace=False)] = False
        clouds.append(PointCloud(pc.points[keep], pc.frame_id))
        labels.append(lab[keep])
    return replace(bundle, clouds=clouds, point_labels=labels)


# ------------------------------------------------------------------ disk layout

def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    # header tokens are whitespace separated; exactly one whitespace byte precedes the raster
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", buf)
    if m is None or int(m.group(3)) != 255:
        raise ValueError(f"{path}: expected an 8-bit binary PPM")
    w, h = int(m.group(1)), int(m.group(2))
    raster = buf[m.end(): m.end() + w * h * 3]
    if len(raster) != w * h * 3:
        raise ValueError(f"{path}: truncated PPM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def write_scene(root, name: str, bundle: SceneBundle) -> Path:
    """Write one scene in the on-disk layout consumed by training and evaluation."""
    d = Path(root) / name
    for sub in ("rgb", "velodyne", "fv", "gt", "motion"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    write_calibration(d / "calib.txt", bundle.calib)
    H, W = bundle.spec.height, bundle.spec.width
    for t in range(bundle.spec.T):
        stem = f"{t:03d}"
        write_ppm(d / "rgb" / f"{stem}.ppm", bundle.rgb[t])
        write_point_cloud(d / "velodyne" / f"{stem}.bin", bundle.clouds[t])
        write_front_view(d / "fv" / f"{stem}.fvim", project_front_view(bundle.clouds[t], bundle.calib, H, W))
        write_label_pgm(d / "gt" / f"{stem}.pgm", bundle.gt[t])
        write_label_pgm(d / "motion" / f"{stem}.pgm", bundle.motion[t])
    return d


def write_manifest(root, entries: list[tuple[str, str, int]]) -> Path:
    lines = ["# scene split frames"]
    for name, split, T in entries:
        lines.append(" ".join([name, split, *(f"{t:03d}" for t in range(T))]))
    path = Path(root) / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> list[tuple[str, str, list[str]]]:
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise ValueError(f"{path}: malformed manifest line {line!r}")
        out.append((parts[0], parts[1], parts[2:]))
    return out
