"""Robot-centric 2.5D elevation mapping with per-cell Kalman fusion.

Each cell holds a height estimate and its variance. Measurements fuse in
information form (the grid stores 1/variance internally), which makes
repeated equal-variance fusion exact and batch order irrelevant up to
floating-point rounding:

    h <- (sigma_m^2 h + sigma^2 h_m) / (sigma^2 + sigma_m^2)
    sigma^2 <- sigma^2 sigma_m^2 / (sigma^2 + sigma_m^2)

Measurement variance grows with range, sigma_m^2 = a + b d^2. A measurement
more than 3 combined sigma away from the cell replaces it (dynamic-change
rule). Robot motion inflates every valid cell's variance and recenters the
grid by whole cells, shifting data without resampling, whenever the robot
leaves the grid's central quarter.
"""

from __future__ import annotations

import base64
import math
from dataclasses import dataclass

import numpy as np

from .model import RobotModel
from .rotations import Transform

RANGE_VAR_A = 1e-4     # m^2
RANGE_VAR_B = 1e-3     # per m^2 of range squared
REPLACE_SIGMA = 3.0
MOTION_NOISE = 1e-3    # m^2 per m of translation
LIDAR_RANGE_NOISE = 0.02  # m
LIDAR_MAX_RANGE = 10.0    # m
LIDAR_EL_MIN = math.radians(-80.0)
LIDAR_EL_MAX = math.radians(10.0)


@dataclass
class PointCloud:
    sensor_id: int
    points: np.ndarray      # (N, 3) m, sensor frame
    t: float = 0.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)


def range_variance(d):
    return RANGE_VAR_A + RANGE_VAR_B * np.square(d)


class ElevationGrid:
    """Square grid; `origin` is the world (x, y) of cell (0, 0)'s center."""

    def __init__(self, size: int = 160, resolution: float = 0.05,
                 center=(0.0, 0.0)):
        self.size = size
        self.resolution = resolution
        half = (size - 1) / 2.0 * resolution
        self.origin = np.array([center[0] - half, center[1] - half])
        self.height = np.zeros((size, size))
        self.info = np.zeros((size, size))       # 1 / variance; 0 = invalid
        self.last_update = np.zeros((size, size))
        self.robot_xy = np.array([float(center[0]), float(center[1])])
        self.skipped_nonfinite = 0

    # --- basic accessors ---

    @property
    def valid(self) -> np.ndarray:
        return self.info > 0.0

    def variance(self) -> np.ndarray:
        """Per-cell variance; 0 where the cell has never been observed."""
        with np.errstate(divide="ignore"):
            v = np.where(self.info > 0.0, 1.0 / self.info, 0.0)
        return v

    def center(self) -> np.ndarray:
        return self.origin + (self.size - 1) / 2.0 * self.resolution

    def cell_index(self, x, y):
        i = int(math.floor((x - self.origin[0]) / self.resolution + 0.5))
        j = int(math.floor((y - self.origin[1]) / self.resolution + 0.5))
        return i, j

    def cell_center(self, i, j):
        return self.origin + np.array([i, j]) * self.resolution

    def query(self, x, y):
        """Nearest-cell (height, variance), or None if outside / unobserved."""
        i, j = self.cell_index(x, y)
        if not (0 <= i < self.size and 0 <= j < self.size):
            return None
        if self.info[i, j] <= 0.0:
            return None
        return float(self.height[i, j]), float(1.0 / self.info[i, j])

    # --- measurement fusion ---

    def fuse_measurement(self, i, j, h_m, var_m, t: float = 0.0):
        info_m = 1.0 / var_m
        if self.info[i, j] <= 0.0:
            self.height[i, j] = h_m
            self.info[i, j] = info_m
        else:
            combined_var = 1.0 / self.info[i, j] + var_m
            if abs(h_m - self.height[i, j]) / math.sqrt(combined_var) > REPLACE_SIGMA:
                # terrain changed under the cell: trust the new measurement
                self.height[i, j] = h_m
                self.info[i, j] = info_m
            else:
                new_info = self.info[i, j] + info_m
                self.height[i, j] = (self.info[i, j] * self.height[i, j]
                                     + info_m * h_m) / new_info
                self.info[i, j] = new_info
        self.last_update[i, j] = t

    def integrate(self, cloud: PointCloud, base_pose: Transform,
                  model: RobotModel) -> "ElevationGrid":
        """Fuse one point cloud; non-finite points are skipped and counted."""
        extrinsic = model.sensor_extrinsics[cloud.sensor_id]
        pts = cloud.points
        finite = np.all(np.isfinite(pts), axis=1)
        self.skipped_nonfinite += int(np.sum(~finite))
        pts = pts[finite]
        if pts.size == 0:
            return self

        ranges = np.linalg.norm(pts, axis=1)
        var_m = range_variance(ranges)
        world = base_pose.apply(extrinsic.apply(pts))

        ii = np.floor((world[:, 0] - self.origin[0]) / self.resolution + 0.5)
        jj = np.floor((world[:, 1] - self.origin[1]) / self.resolution + 0.5)
        for k in range(world.shape[0]):
            i, j = int(ii[k]), int(jj[k])
            if not (0 <= i < self.size and 0 <= j < self.size):
                continue
            self.fuse_measurement(i, j, world[k, 2], var_m[k], cloud.t)
        return self

    # --- motion update ---

    def on_motion(self, pose_delta, motion_noise: float = MOTION_NOISE) -> "ElevationGrid":
        """Inflate variances by motion_noise * |translation| and recenter."""
        delta = np.asarray(pose_delta, dtype=float).reshape(-1)[:3]
        dist = float(np.linalg.norm(delta))
        if dist > 0.0:
            mask = self.info > 0.0
            self.info[mask] = 1.0 / (1.0 / self.info[mask] + motion_noise * dist)
        self.robot_xy = self.robot_xy + delta[:2]

        off = self.robot_xy - self.center()
        quarter = self.size * self.resolution / 4.0
        if abs(off[0]) > quarter or abs(off[1]) > quarter:
            di = int(round(off[0] / self.resolution))
            dj = int(round(off[1] / self.resolution))
            self.shift_cells(di, dj)
        return self

    def shift_cells(self, di: int, dj: int):
        """Move the grid window by (di, dj) cells; vacated cells invalid."""
        for arr in (self.height, self.info, self.last_update):
            shifted = np.zeros_like(arr)
            src_i = slice(max(di, 0), self.size + min(di, 0))
            dst_i = slice(max(-di, 0), self.size + min(-di, 0))
            src_j = slice(max(dj, 0), self.size + min(dj, 0))
            dst_j = slice(max(-dj, 0), self.size + min(-dj, 0))
            shifted[dst_i, dst_j] = arr[src_i, src_j]
            arr[:] = shifted
        self.origin = self.origin + np.array([di, dj]) * self.resolution

    def copy(self) -> "ElevationGrid":
        g = ElevationGrid(self.size, self.resolution)
        g.origin = self.origin.copy()
        g.height = self.height.copy()
        g.info = self.info.copy()
        g.last_update = self.last_update.copy()
        g.robot_xy = self.robot_xy.copy()
        g.skipped_nonfinite = self.skipped_nonfinite
        return g


# --- synthetic LiDAR ---------------------------------------------------------

def lidar_directions(rays: int) -> np.ndarray:
    """Deterministic dome pattern in the sensor frame (about `rays` rays)."""
    n_el = max(3, int(round(math.sqrt(rays / 8.0))))
    n_az = max(8, int(round(rays / n_el)))
    el = np.linspace(LIDAR_EL_MIN, LIDAR_EL_MAX, n_el)
    az = np.linspace(0.0, 2.0 * math.pi, n_az, endpoint=False)
    ee, aa = np.meshgrid(el, az, indexing="ij")
    d = np.stack([np.cos(ee) * np.cos(aa),
                  np.cos(ee) * np.sin(aa),
                  np.sin(ee)], axis=-1)
    return d.reshape(-1, 3)


def simulate_lidar(terrain, base_pose: Transform, model: RobotModel,
                   rays: int, sensor_id: int = 0,
                   range_noise: float = LIDAR_RANGE_NOISE, rng=None,
                   max_range: float = LIDAR_MAX_RANGE, t: float = 0.0) -> PointCloud:
    """Cast a dome of rays against the terrain height function.

    Points come back in the sensor frame with Gaussian range noise. A fixed
    default RNG keeps unseeded calls deterministic.
    """
    if rays <= 0:
        raise ValueError(f"rays must be > 0, got {rays}")
    if rng is None:
        rng = np.random.default_rng(0)

    dirs_s = lidar_directions(rays)
    sensor_pose = base_pose.compose(model.sensor_extrinsics[sensor_id])
    origin = sensor_pose.translation
    dirs_w = dirs_s @ _quat_matrix(sensor_pose.rotation).T

    t_hit = _raycast(terrain, origin, dirs_w, max_range)
    hit = np.isfinite(t_hit)
    t_hit = t_hit[hit]
    if range_noise > 0.0 and t_hit.size:
        t_hit = t_hit + rng.normal(0.0, range_noise, t_hit.size)
    points = dirs_s[hit] * t_hit[:, None]
    return PointCloud(sensor_id=sensor_id, points=points, t=t)


def simulate_all_lidars(terrain, base_pose, model, rays, **kwargs) -> list:
    return [simulate_lidar(terrain, base_pose, model, rays, sensor_id=i, **kwargs)
            for i in range(len(model.sensor_extrinsics))]


def _quat_matrix(q):
    from .rotations import quat_to_matrix
    return quat_to_matrix(q)


def _raycast(terrain, origin, dirs, max_range, coarse_step: float = 0.05,
             iters: int = 40):
    """First terrain crossing per ray; NaN where the ray never goes below."""
    n = dirs.shape[0]
    ts = np.arange(coarse_step, max_range + coarse_step, coarse_step)
    pts = origin[None, None, :] + dirs[:, None, :] * ts[None, :, None]
    below = pts[:, :, 2] < terrain.height(pts[:, :, 0], pts[:, :, 1])
    first = np.argmax(below, axis=1)
    any_hit = below.any(axis=1)

    t_hit = np.full(n, np.nan)
    idx = np.nonzero(any_hit)[0]
    if idx.size == 0:
        return t_hit
    lo = np.where(first[idx] > 0, ts[np.maximum(first[idx] - 1, 0)], 0.0)
    hi = ts[first[idx]]
    d = dirs[idx]
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        p = origin[None, :] + d * mid[:, None]
        under = p[:, 2] < terrain.height(p[:, 0], p[:, 1])
        hi = np.where(under, mid, hi)
        lo = np.where(under, lo, mid)
    t_hit[idx] = 0.5 * (lo + hi)
    return t_hit


# --- serialization (the exact format the telemetry gateway streams) ----------

def grid_to_message(grid: ElevationGrid) -> dict:
    """Structured header plus base64 little-endian float32 row-major arrays."""
    valid = grid.valid
    heights = np.where(valid, grid.height, 0.0).astype("<f4")
    variances = np.where(valid, grid.variance(), 0.0).astype("<f4")
    return {
        "type": "grid_map",
        "origin": [float(grid.origin[0]), float(grid.origin[1])],
        "resolution": grid.resolution,
        "size": [grid.size, grid.size],
        "heights": base64.b64encode(heights.tobytes()).decode("ascii"),
        "variances": base64.b64encode(variances.tobytes()).decode("ascii"),
        "valid": base64.b64encode(
            valid.astype(np.uint8).tobytes()).decode("ascii"),
    }


def grid_from_message(msg: dict) -> ElevationGrid:
    size = int(msg["size"][0])
    grid = ElevationGrid(size=size, resolution=float(msg["resolution"]))
    grid.origin = np.array([float(msg["origin"][0]), float(msg["origin"][1])])
    heights = np.frombuffer(base64.b64decode(msg["heights"]),
                            dtype="<f4").reshape(size, size)
    variances = np.frombuffer(base64.b64decode(msg["variances"]),
                              dtype="<f4").reshape(size, size)
    valid = np.frombuffer(base64.b64decode(msg["valid"]),
                          dtype=np.uint8).reshape(size, size).astype(bool)
    grid.height = heights.astype(float)
    with np.errstate(divide="ignore"):
        grid.info = np.where(valid & (variances > 0),
                             1.0 / variances.astype(float), 0.0)
    grid.robot_xy = grid.center()
    return grid
