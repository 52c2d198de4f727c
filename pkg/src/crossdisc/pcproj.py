"""LiDAR point clouds to image-aligned front-view (X, Y, Z, d) grids.

Points are carried through KITTI-style chained matrices
(``P2 @ R0_rect @ Tr_velo_to_cam``) and rasterised with round-to-nearest
pixel placement.  Empty pixels hold a fill vector ``(f, f, f, f)``.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

FVIM_MAGIC = b"FVIM"
_FVIM_HEADER = struct.Struct("<4sIIf")


@dataclass
class PointCloud:
    points: np.ndarray  # (M, 4): x, y, z [m], reflectance
    frame_id: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class Calibration:
    projection_matrix: np.ndarray  # P2, 3x4
    rectification: np.ndarray  # R0_rect, 3x3
    lidar_to_camera: np.ndarray  # Tr_velo_to_cam, 3x4

    def __post_init__(self):
        self.projection_matrix = np.asarray(self.projection_matrix, dtype=np.float64).reshape(3, 4)
        self.rectification = np.asarray(self.rectification, dtype=np.float64).reshape(3, 3)
        self.lidar_to_camera = np.asarray(self.lidar_to_camera, dtype=np.float64).reshape(3, 4)
        for name in ("projection_matrix", "rectification", "lidar_to_camera"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"calibration {name} is not finite")
        if self.projection_matrix[0, 0] == 0 or self.projection_matrix[1, 1] == 0:
            raise ValueError("projection matrix has a zero focal entry")

    @classmethod
    def pinhole(cls, focal: float, cx: float, cy: float, lidar_to_camera=None) -> "Calibration":
        P = np.array([[focal, 0, cx, 0], [0, focal, cy, 0], [0, 0, 1, 0]], dtype=np.float64)
        if lidar_to_camera is None:
            lidar_to_camera = np.hstack([np.eye(3), np.zeros((3, 1))])
        return cls(P, np.eye(3), lidar_to_camera)

    def lidar_to_rect(self, xyz: np.ndarray) -> np.ndarray:
        """(M, 3) LiDAR coordinates -> (M, 3) rectified camera coordinates."""
        R, t = self.lidar_to_camera[:, :3], self.lidar_to_camera[:, 3]
        return (xyz @ R.T + t) @ self.rectification.T

    def rect_to_lidar(self, cam: np.ndarray) -> np.ndarray:
        R, t = self.lidar_to_camera[:, :3], self.lidar_to_camera[:, 3]
        unrect = np.linalg.solve(self.rectification, np.asarray(cam, dtype=np.float64).T).T
        return np.linalg.solve(R, (unrect - t).T).T

    @property
    def camera_center(self) -> np.ndarray:
        """Optical centre of P2 in rectified coordinates (non-zero for stereo offsets)."""
        M, p4 = self.projection_matrix[:, :3], self.projection_matrix[:, 3]
        return -np.linalg.solve(M, p4)


@dataclass
class FrontViewImage:
    data: np.ndarray  # (H, W, 4): X, Y, Z, d
    valid: np.ndarray  # (H, W) bool, the valid-pixel set P
    fill: float = 0.0

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    @property
    def distance(self) -> np.ndarray:
        return self.data[..., 3]

    def valid_coords(self) -> np.ndarray:
        """(|P|, 2) row-major (i, j) coordinates of valid pixels."""
        return np.argwhere(self.valid)

    def copy(self) -> "FrontViewImage":
        return FrontViewImage(self.data.copy(), self.valid.copy(), self.fill)


@dataclass
class DropRecord:
    dropped: np.ndarray  # (n, 2) int (i, j)
    drop_ratio: float
    rng_seed: int

    def as_mask(self, shape: tuple[int, int]) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        if len(self.dropped):
            m[self.dropped[:, 0], self.dropped[:, 1]] = True
        return m


@dataclass
class FrontViewStats:
    """Per-channel dataset-wide min/max over valid pixels."""

    minimum: np.ndarray = field(default_factory=lambda: np.zeros(4))
    maximum: np.ndarray = field(default_factory=lambda: np.ones(4))

    def __post_init__(self):
        self.minimum = np.asarray(self.minimum, dtype=np.float64).reshape(4)
        self.maximum = np.asarray(self.maximum, dtype=np.float64).reshape(4)


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(np.int64)


def project_points(xyz: np.ndarray, calib: Calibration):
    """Pixel rows, columns and camera distances for LiDAR points.

    Points at or behind the image plane get ``front=False`` and meaningless
    pixel coordinates.
    """
    cam = calib.lidar_to_rect(xyz)
    hom = np.hstack([cam, np.ones((cam.shape[0], 1))]) @ calib.projection_matrix.T
    w = hom[:, 2]
    front = (cam[:, 2] > 0) & (w > 0)
    safe_w = np.where(front, w, 1.0)
    cols = _round_half_up(hom[:, 0] / safe_w)
    rows = _round_half_up(hom[:, 1] / safe_w)
    dist = np.linalg.norm(cam - calib.camera_center, axis=1)
    return rows, cols, dist, front


def project_front_view(pc: PointCloud, calib: Calibration, height: int, width: int,
                       fill: float = 0.0) -> FrontViewImage:
    """Rasterise a point cloud into an (H', W', 4) front view.

    Nearest point wins on collisions.  Exact distance ties fall back to
    the point's coordinates and then its input index, so the result does not
    depend on point order.
    """
    if height <= 0 or width <= 0:
        raise ValueError(f"front-view size must be positive, got {height}x{width}")
    data = np.full((height, width, 4), fill, dtype=np.float64)
    valid = np.zeros((height, width), dtype=bool)
    if len(pc) == 0:
        return FrontViewImage(data, valid, fill)

    xyz = pc.points[:, :3]
    rows, cols, dist, front = project_points(xyz, calib)
    keep = front & (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return FrontViewImage(data, valid, fill)

    lin = rows[idx] * width + cols[idx]
    d = dist[idx]
    x, y, z = xyz[idx, 0], xyz[idx, 1], xyz[idx, 2]
    # lexsort: last key is primary
    order = np.lexsort((idx, z, y, x, d, lin))
    lin_sorted = lin[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = lin_sorted[1:] != lin_sorted[:-1]
    winners = idx[order[first]]
    win_lin = lin_sorted[first]

    r, c = np.divmod(win_lin, width)
    data[r, c, :3] = xyz[winners]
    data[r, c, 3] = dist[winners]
    valid[r, c] = True
    return FrontViewImage(data, valid, fill)


def unproject_front_view(fv: FrontViewImage) -> PointCloud:
    """Points stored at valid pixels (reflectance is not kept and set to 0)."""
    xyz = fv.data[fv.valid][:, :3]
    return PointCloud(np.hstack([xyz, np.zeros((xyz.shape[0], 1))]))


def drop_points(fv: FrontViewImage, drop_ratio: float, seed: int) -> tuple[FrontViewImage, DropRecord]:
    if not 0.0 <= drop_ratio <= 1.0:
        raise ValueError(f"drop_ratio must lie in [0, 1], got {drop_ratio}")
    coords = fv.valid_coords()
    n_drop = int(math.floor(drop_ratio * len(coords) + 0.5))
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(coords), size=n_drop, replace=False)) if n_drop else np.zeros(0, dtype=np.int64)
    dropped = coords[pick].reshape(-1, 2)
    out = fv.copy()
    out.data[dropped[:, 0], dropped[:, 1], :] = fv.fill
    out.valid[dropped[:, 0], dropped[:, 1]] = False
    return out, DropRecord(dropped, float(drop_ratio), int(seed))


def front_view_stats(fvs) -> FrontViewStats:
    lo = np.full(4, np.inf)
    hi = np.full(4, -np.inf)
    for fv in fvs:
        if fv.valid.any():
            vals = fv.data[fv.valid]
            lo = np.minimum(lo, vals.min(axis=0))
            hi = np.maximum(hi, vals.max(axis=0))
    if not np.all(np.isfinite(lo)):
        raise ValueError("no valid pixels to compute front-view statistics")
    return FrontViewStats(lo, hi)


def normalize_front_view(fv: FrontViewImage, stats: FrontViewStats) -> FrontViewImage:
    """Min-max map valid pixels into [0, 1]; fill pixels stay at the fill value."""
    span = stats.maximum - stats.minimum
    if np.any(span <= 0):
        raise ValueError("degenerate front-view statistics (max <= min)")
    out = fv.copy()
    scaled = np.clip((fv.data[fv.valid] - stats.minimum) / span, 0.0, 1.0)
    out.data[fv.valid] = scaled
    return out


# ---------------------------------------------------------------- file formats

def read_point_cloud(path, frame_id: int = 0) -> PointCloud:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4:
        raise ValueError(f"{path}: size is not a multiple of 4 floats")
    return PointCloud(raw.reshape(-1, 4).astype(np.float64), frame_id)


def write_point_cloud(path, pc: PointCloud) -> None:
    pc.points.astype("<f4").tofile(path)


def read_calibration(path) -> Calibration:
    entries: dict[str, np.ndarray] = {}
    for line in Path(path).read_text().splitlines():
        if ":" not in line:
            continue
        key, _, rest = line.partition(":")
        try:
            entries[key.strip()] = np.array([float(v) for v in rest.split()])
        except ValueError as exc:
            raise ValueError(f"{path}: bad numbers for {key.strip()}") from exc
    missing = [k for k in ("P2", "R0_rect", "Tr_velo_to_cam") if k not in entries]
    if missing:
        raise ValueError(f"{path}: missing calibration keys {missing}")
    return Calibration(entries["P2"].reshape(3, 4), entries["R0_rect"].reshape(3, 3),
                       entries["Tr_velo_to_cam"].reshape(3, 4))


def write_calibration(path, calib: Calibration) -> None:
    def fmt(m):
        return " ".join(f"{v:.12e}" for v in np.asarray(m).ravel())

    Path(path).write_text(
        f"P2: {fmt(calib.projection_matrix)}\n"
        f"R0_rect: {fmt(calib.rectification)}\n"
        f"Tr_velo_to_cam: {fmt(calib.lidar_to_camera)}\n"
    )


def write_front_view(path, fv: FrontViewImage) -> None:
    with open(path, "wb") as fh:
        fh.write(_FVIM_HEADER.pack(FVIM_MAGIC, fv.height, fv.width, fv.fill))
        fh.write(fv.data.astype("<f4").tobytes(order="C"))


def read_front_view(path) -> FrontViewImage:
    buf = Path(path).read_bytes()
    if len(buf) < _FVIM_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, h, w, fill = _FVIM_HEADER.unpack_from(buf)
    if magic != FVIM_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    expected = _FVIM_HEADER.size + h * w * 4 * 4
    if len(buf) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", offset=_FVIM_HEADER.size).reshape(h, w, 4).astype(np.float64)
    fill = float(np.float32(fill))
    valid = ~np.all(data == fill, axis=-1)
    return FrontViewImage(data, valid, fill)
