"""Dynamic TSDF voxel map and its 2-D projection.

The grid covers a fixed vertical extent (one floor, 3.5 m) and grows
horizontally on demand as depth frames arrive. Fusion projects voxel centers
into the depth image and folds truncated signed distances into a running
weighted average; occupancy falls out of the fused sign. Exploration status
is tracked separately: pixels inside a trimmed sub-window of the image sweep
2-D sight segments, and every grid column touched by a segment is marked
explored over its full height (a column is either seen or it is not, which is
what the downstream 2-D map needs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GridCapacityError
from .geometry import CameraModel, Pose

FREE, OCCUPIED, UNKNOWN = 0, 1, 2


def disk(radius_cells: int) -> np.ndarray:
    """Boolean disk structuring element of the given cell radius."""
    r = int(radius_cells)
    ax = np.arange(-r, r + 1)
    return (ax[:, None] ** 2 + ax[None, :] ** 2) <= r * r


@dataclass
class GridParams:
    voxel_size: float = 0.1
    height_m: float = 3.5
    trunc_voxels: float = 3.0
    weight_cap: float = 100.0
    max_voxels: int = 50_000_000
    margin_w_ratio: float = 0.25
    margin_h_ratio: float = 0.6
    max_depth: float = 6.0

    @property
    def tau(self) -> float:
        return self.trunc_voxels * self.voxel_size

    @property
    def height_voxels(self) -> int:
        return int(round(self.height_m / self.voxel_size))

    @classmethod
    def from_hyperparams(cls, hp) -> "GridParams":
        return cls(voxel_size=hp.tsdf_grid_size, height_m=hp.grid_height_m,
                   trunc_voxels=hp.tsdf_trunc_voxels, weight_cap=hp.tsdf_weight_cap,
                   max_voxels=hp.max_voxels, margin_w_ratio=hp.margin_w_ratio,
                   margin_h_ratio=hp.margin_h_ratio, max_depth=hp.max_depth)


class VoxelGrid:
    """Extensible TSDF grid. Arrays are indexed [ix, iy, iz]; the origin sits
    on the voxel lattice so expansion preserves world-coordinate readback."""

    def __init__(self, origin_xy: tuple[float, float], cells_xy: tuple[int, int],
                 params: GridParams | None = None):
        self.params = params or GridParams()
        nz = self.params.height_voxels
        nx, ny = int(cells_xy[0]), int(cells_xy[1])
        if nx <= 0 or ny <= 0:
            raise ValueError("grid must have positive horizontal extent")
        self._check_budget(nx, ny, nz)
        self.origin = np.array([origin_xy[0], origin_xy[1], 0.0])
        self.tsdf = np.zeros((nx, ny, nz), dtype=np.float32)
        self.weight = np.zeros((nx, ny, nz), dtype=np.float32)
        self.explored = np.zeros((nx, ny, nz), dtype=bool)

    def _check_budget(self, nx: int, ny: int, nz: int) -> None:
        total = nx * ny * nz
        if total > self.params.max_voxels:
            raise GridCapacityError(
                f"grid of {nx}x{ny}x{nz} = {total} voxels exceeds the cap "
                f"of {self.params.max_voxels}")

    @classmethod
    def around(cls, position: np.ndarray, clearance: float = 0.5,
               params: GridParams | None = None) -> "VoxelGrid":
        """Small grid centered on a starting position."""
        params = params or GridParams()
        l = params.voxel_size
        x0 = math.floor((position[0] - clearance) / l) * l
        y0 = math.floor((position[1] - clearance) / l) * l
        cells_x = max(2, int(math.ceil((position[0] + clearance - x0) / l)))
        cells_y = max(2, int(math.ceil((position[1] + clearance - y0) / l)))
        return cls((x0, y0), (cells_x, cells_y), params)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.tsdf.shape

    @property
    def voxel_size(self) -> float:
        return self.params.voxel_size

    def bounds_xy(self) -> tuple[float, float, float, float]:
        """(x_min, y_min, x_max, y_max) of the covered area."""
        l = self.voxel_size
        nx, ny, _ = self.shape
        return (self.origin[0], self.origin[1],
                self.origin[0] + nx * l, self.origin[1] + ny * l)

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        """(N, 3) world points -> (N, 3) integer voxel indices (may be out of range)."""
        pts = np.atleast_2d(points)
        return np.floor((pts - self.origin) / self.voxel_size).astype(np.int64)

    def voxel_centers(self, idx: np.ndarray) -> np.ndarray:
        return self.origin + (np.atleast_2d(idx) + 0.5) * self.voxel_size

    def tsdf_at(self, point: np.ndarray) -> tuple[float, float]:
        """(tsdf, weight) of the voxel containing a world point."""
        i, j, k = self.world_to_index(np.asarray(point))[0]
        nx, ny, nz = self.shape
        if not (0 <= i < nx and 0 <= j < ny and 0 <= k < nz):
            return 0.0, 0.0
        return float(self.tsdf[i, j, k]), float(self.weight[i, j, k])

    def occupancy(self) -> np.ndarray:
        """Per-voxel occupancy: FREE, OCCUPIED or UNKNOWN from the fused sign."""
        occ = np.full(self.shape, UNKNOWN, dtype=np.int8)
        known = self.weight > 0.0
        occ[known & (self.tsdf < 0.0)] = OCCUPIED
        occ[known & (self.tsdf >= 0.0)] = FREE
        return occ

    # -- expansion ----------------------------------------------------------

    def expand(self, min_xy: tuple[float, float],
               max_xy: tuple[float, float]) -> "VoxelGrid":
        """Grow to cover the union of the current bounds and the requested box.
        No-op when already covered. Contents keep their world coordinates."""
        if not all(map(math.isfinite, (*min_xy, *max_xy))):
            raise ValueError("expansion bounds must be finite")
        l = self.voxel_size
        x0, y0, x1, y1 = self.bounds_xy()
        nx0 = min(x0, math.floor(min_xy[0] / l) * l)
        ny0 = min(y0, math.floor(min_xy[1] / l) * l)
        nx1 = max(x1, math.ceil(max_xy[0] / l) * l)
        ny1 = max(y1, math.ceil(max_xy[1] / l) * l)
        if (nx0, ny0, nx1, ny1) == (x0, y0, x1, y1):
            return self
        nx = int(round((nx1 - nx0) / l))
        ny = int(round((ny1 - ny0) / l))
        nz = self.shape[2]
        self._check_budget(nx, ny, nz)
        off_x = int(round((x0 - nx0) / l))
        off_y = int(round((y0 - ny0) / l))
        old_nx, old_ny, _ = self.shape
        tsdf = np.zeros((nx, ny, nz), dtype=np.float32)
        weight = np.zeros((nx, ny, nz), dtype=np.float32)
        explored = np.zeros((nx, ny, nz), dtype=bool)
        tsdf[off_x:off_x + old_nx, off_y:off_y + old_ny] = self.tsdf
        weight[off_x:off_x + old_nx, off_y:off_y + old_ny] = self.weight
        explored[off_x:off_x + old_nx, off_y:off_y + old_ny] = self.explored
        self.tsdf, self.weight, self.explored = tsdf, weight, explored
        self.origin = np.array([nx0, ny0, 0.0])
        return self

    # -- fusion ---------------------------------------------------------------

    def integrate_depth(self, depth: np.ndarray, pose: Pose, cam: CameraModel) -> "VoxelGrid":
        """Fuse one depth frame (z-depth convention, shape (H, W)).

        Non-finite depth samples are ignored. Depth at or beyond max_depth is
        treated as a miss: free space is carved along the ray but no surface
        band is written.
        """
        depth = np.asarray(depth, dtype=np.float64)
        if depth.shape != (cam.height, cam.width):
            raise ValueError(
                f"depth shape {depth.shape} does not match camera "
                f"{(cam.height, cam.width)}")
        p = self.params
        tau = p.tau
        origin_cam = cam.camera_origin(pose)
        finite = np.isfinite(depth)
        if not np.any(finite):
            return self

        self._expand_for_frustum(depth, pose, cam, finite)

        # candidate voxels: frustum AABB clipped to the grid
        aabb_min, aabb_max = self._frustum_aabb(depth, pose, cam, finite)
        l = p.voxel_size
        lo = np.maximum(self.world_to_index(aabb_min - tau)[0], 0)
        hi = np.minimum(self.world_to_index(aabb_max + tau)[0] + 1,
                        np.array(self.shape))
        if np.any(lo >= hi):
            return self

        # camera coordinates of voxel centers are affine in the indices, so
        # broadcast per-axis contributions instead of materializing points
        rot_t = cam.rotation(pose).T
        base = self.origin + (lo + 0.5) * l - origin_cam
        cam_base = rot_t @ base
        ex, ey, ez = rot_t[:, 0] * l, rot_t[:, 1] * l, rot_t[:, 2] * l
        ri = np.arange(hi[0] - lo[0])
        rj = np.arange(hi[1] - lo[1])
        rk = np.arange(hi[2] - lo[2])
        x_cam = (cam_base[0] + (ri * ex[0])[:, None, None]
                 + (rj * ey[0])[None, :, None] + (rk * ez[0])[None, None, :])
        y_cam = (cam_base[1] + (ri * ex[1])[:, None, None]
                 + (rj * ey[1])[None, :, None] + (rk * ez[1])[None, None, :])
        z_cam = (cam_base[2] + (ri * ex[2])[:, None, None]
                 + (rj * ey[2])[None, :, None] + (rk * ez[2])[None, None, :])
        with np.errstate(divide="ignore", invalid="ignore"):
            u = x_cam / z_cam * cam.fx + cam.cx
            v = y_cam / z_cam * cam.fy + cam.cy
        valid = ((z_cam > 1e-6) & (u >= 0) & (u < cam.width)
                 & (v >= 0) & (v < cam.height))
        if not np.any(valid):
            return self
        flat = np.flatnonzero(valid.ravel())
        nyb, nzb = rj.size, rk.size
        ui = u.ravel()[flat].astype(np.int64)
        vi = v.ravel()[flat].astype(np.int64)
        zv = z_cam.ravel()[flat]
        dsel = depth[vi, ui]
        ok = np.isfinite(dsel)

        miss = ok & (dsel >= p.max_depth)
        hit = ok & ~miss
        sdf = dsel - zv
        upd = np.zeros_like(ok)
        upd[hit] = sdf[hit] > -tau
        # miss rays carve free space out to the 3-D range cap, no surface band
        ray_len = np.sqrt(x_cam.ravel()[flat] ** 2 + y_cam.ravel()[flat] ** 2
                          + zv ** 2)
        upd[miss] = ray_len[miss] < p.max_depth
        if not np.any(upd):
            return self
        tsdf_new = np.where(miss, tau, np.clip(sdf, -tau, tau))

        sel = flat[upd]
        f = tsdf_new[upd].astype(np.float32)
        ix = lo[0] + sel // (nyb * nzb)
        jy = lo[1] + (sel // nzb) % nyb
        kz = lo[2] + sel % nzb
        w_old = self.weight[ix, jy, kz]
        v_old = self.tsdf[ix, jy, kz]
        self.tsdf[ix, jy, kz] = (v_old * w_old + f) / (w_old + 1.0)
        self.weight[ix, jy, kz] = np.minimum(w_old + 1.0, p.weight_cap)

        self._mark_explored(depth, pose, cam)
        return self

    def _frustum_aabb(self, depth, pose, cam, finite) -> tuple[np.ndarray, np.ndarray]:
        o = cam.camera_origin(pose)
        dirs = cam.pixel_dirs_world(pose)
        d = np.where(finite, np.minimum(depth, self.params.max_depth), 0.0)
        # cap the per-pixel reach at a 3-D length of max_depth
        norms = np.linalg.norm(cam.pixel_dirs_cam(), axis=-1)
        t = np.minimum(d, self.params.max_depth / norms)
        pts = o[None, None, :] + dirs * t[..., None]
        flat = pts.reshape(-1, 3)
        return (np.minimum(flat.min(axis=0), o) - 1e-9,
                np.maximum(flat.max(axis=0), o) + 1e-9)

    def _expand_for_frustum(self, depth, pose, cam, finite) -> None:
        lo, hi = self._frustum_aabb(depth, pose, cam, finite)
        tau = self.params.tau
        lo, hi = lo - tau, hi + tau  # the truncation band extends past hits
        x0, y0, x1, y1 = self.bounds_xy()
        if lo[0] < x0 or lo[1] < y0 or hi[0] > x1 or hi[1] > y1:
            self.expand((lo[0], lo[1]), (hi[0], hi[1]))

    def carve_free_disk(self, xy: np.ndarray, radius: float) -> "VoxelGrid":
        """Fuse a free-space observation over the columns within `radius` of a
        point and mark them explored. Used for the agent's own footprint,
        which the camera can never see but is known to be free."""
        if radius <= 0:
            return self
        self.expand((xy[0] - radius, xy[1] - radius),
                    (xy[0] + radius, xy[1] + radius))
        l = self.voxel_size
        nx, ny, _ = self.shape
        lo = self.world_to_index(np.array([xy[0] - radius, xy[1] - radius, 0.0]))[0]
        hi = self.world_to_index(np.array([xy[0] + radius, xy[1] + radius, 0.0]))[0]
        xs = np.arange(max(lo[0], 0), min(hi[0] + 1, nx))
        ys = np.arange(max(lo[1], 0), min(hi[1] + 1, ny))
        if xs.size == 0 or ys.size == 0:
            return self
        cx = self.origin[0] + (xs + 0.5) * l
        cy = self.origin[1] + (ys + 0.5) * l
        dist = np.hypot(cx[:, None] - xy[0], cy[None, :] - xy[1])
        ix, iy = np.nonzero(dist <= radius)
        gx, gy = xs[ix], ys[iy]
        w_old = self.weight[gx, gy, :]
        v_old = self.tsdf[gx, gy, :]
        self.tsdf[gx, gy, :] = (v_old * w_old + self.params.tau) / (w_old + 1.0)
        self.weight[gx, gy, :] = np.minimum(w_old + 1.0, self.params.weight_cap)
        self.explored[gx, gy, :] = True
        return self

    def _mark_explored(self, depth, pose, cam) -> None:
        """Sweep 2-D sight segments for pixels inside the trimmed window and
        mark every touched column fully explored, stopping each sweep at the
        first column already fused as an obstacle (occlusion-aware: nothing
        behind furniture or walls gets marked). The margin ratios trim that
        fraction of the image, split between the two borders."""
        p = self.params
        w0 = int(math.floor(p.margin_w_ratio / 2.0 * cam.width))
        w1 = cam.width - w0
        v0 = int(math.floor(p.margin_h_ratio / 2.0 * cam.height))
        v1 = cam.height - v0
        if w0 >= w1 or v0 >= v1:
            return
        sub = depth[v0:v1, w0:w1]
        finite = np.isfinite(sub)
        if not np.any(finite):
            return
        dirs = cam.pixel_dirs_world(pose)[v0:v1, w0:w1]
        norms = np.linalg.norm(cam.pixel_dirs_cam(), axis=-1)[v0:v1, w0:w1]
        t = np.where(finite, np.minimum(sub, p.max_depth / norms), 0.0)
        o = cam.camera_origin(pose)
        # hit points in the floor plane
        hx = o[0] + dirs[..., 0] * t
        hy = o[1] + dirs[..., 1] * t
        seg_x = (hx - o[0]).ravel()
        seg_y = (hy - o[1]).ravel()
        length = np.hypot(seg_x, seg_y)
        # nudge actual hits half a voxel forward so the struck surface column
        # itself counts as seen (misses get no extension)
        is_hit = (finite & (sub < p.max_depth)).ravel()
        with np.errstate(divide="ignore", invalid="ignore"):
            grow = np.where(is_hit & (length > 1e-9),
                            (length + 0.5 * p.voxel_size) / np.maximum(length, 1e-9),
                            1.0)
        seg_x = seg_x * grow
        seg_y = seg_y * grow
        length = length * grow
        steps = np.maximum(1, np.ceil(length / (p.voxel_size * 0.5)).astype(np.int64))
        max_steps = int(steps.max())
        frac = np.linspace(0.0, 1.0, max_steps + 1)
        # sample every segment at max resolution; duplicates collapse in the mask
        px = o[0] + seg_x[:, None] * frac[None, :]
        py = o[1] + seg_y[:, None] * frac[None, :]
        ix = np.floor((px - self.origin[0]) / p.voxel_size).astype(np.int64)
        iy = np.floor((py - self.origin[1]) / p.voxel_size).astype(np.int64)
        nx, ny, _ = self.shape
        in_grid = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)

        below = max(1, min(int(math.ceil(cam.height_m / p.voxel_size - 0.5)),
                           self.shape[2]))
        obstacle = np.any((self.weight[:, :, :below] > 0.0)
                          & (self.tsdf[:, :, :below] < 0.0), axis=2)
        hit_obstacle = np.zeros_like(in_grid)
        hit_obstacle[in_grid] = obstacle[ix[in_grid], iy[in_grid]]
        seen_before = np.logical_and.accumulate(~hit_obstacle, axis=1)
        # allow samples up to and including the first obstacle column
        allowed = np.empty_like(seen_before)
        allowed[:, 0] = True
        allowed[:, 1:] = seen_before[:, :-1]
        keep = in_grid & allowed
        self.explored[ix[keep], iy[keep], :] = True

    # -- projection ----------------------------------------------------------

    def project_to_2d(self, cam: CameraModel) -> "Map2D":
        """Collapse to the 2-D navigation map. A cell is traversable when every
        voxel with center below the camera height is observed free; explored
        when its whole column carries the explored flag. The obstacle layer
        marks columns with at least one observed-occupied voxel below camera
        height (used for clearance-aware planning)."""
        below = int(math.ceil(cam.height_m / self.voxel_size - 0.5))
        below = max(1, min(below, self.shape[2]))
        occ = self.occupancy()[:, :, :below]
        traversable = np.all(occ == FREE, axis=2)
        explored = np.all(self.explored, axis=2)
        obstacle = np.any(occ == OCCUPIED, axis=2)
        return Map2D(origin_xy=(float(self.origin[0]), float(self.origin[1])),
                     resolution=self.voxel_size,
                     traversable=traversable, explored=explored,
                     obstacle=obstacle)


@dataclass
class Map2D:
    """2-D traversability/exploration map on the voxel lattice, indexed [ix, iy]."""

    origin_xy: tuple[float, float]
    resolution: float
    traversable: np.ndarray
    explored: np.ndarray
    obstacle: np.ndarray | None = None

    def __post_init__(self):
        if self.obstacle is None:
            self.obstacle = ~self.traversable & self.explored

    @property
    def shape(self) -> tuple[int, int]:
        return self.traversable.shape

    def cell_of(self, xy: np.ndarray) -> tuple[int, int]:
        ix = int(math.floor((xy[0] - self.origin_xy[0]) / self.resolution))
        iy = int(math.floor((xy[1] - self.origin_xy[1]) / self.resolution))
        return ix, iy

    def center_of(self, cell: tuple[int, int]) -> np.ndarray:
        return np.array([
            self.origin_xy[0] + (cell[0] + 0.5) * self.resolution,
            self.origin_xy[1] + (cell[1] + 0.5) * self.resolution,
        ])

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.shape[0] and 0 <= iy < self.shape[1]
