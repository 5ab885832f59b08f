"""Deterministic 2-D gridworld with raycast RGB-D rendering.

The world is a cell grid of walls plus axis-aligned colored objects, extruded
vertically: walls span the full floor height, objects reach OBJECT_HEIGHT.
Rendering casts one ray per pixel through the extruded world with an exact
cell-boundary DDA, so depth equals the analytic segment intersection. Misses
(beyond max range or outside the world) are black with depth = max range,
which is what the downstream black-view gate keys on.

Scene file format (structured text, '#' comments):

    scene <name>
    resolution <meters-per-cell>
    size <nx> <ny>
    row <iy> <ix>:<count> [...]          # run-length wall cells
    wallrect <x0> <y0> <x1> <y1>         # meters; convenience form
    room <name> | <x0> <y0> <x1> <y1>    # meters, axis-aligned
    object <id> <category> <color> | <x> <y> | <w> <d> [| extra attrs]
    spawn <x> <y> <yaw>

`save_scene` always emits canonical run-length rows.
"""

from __future__ import annotations

import importlib.resources
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .encoders import COLOR_RGB, FLOOR_RGB, WALL_RGB
from .errors import SceneFormatError
from .geometry import CameraModel, Detection, Pose
from .mapping import disk

WALL_HEIGHT = 3.5
OBJECT_HEIGHT = 1.2
# the agent body radius, in cells: motion collides on obstacle cells
# inflated by this much, so a standing agent always has that much clearance
NAV_RADIUS_CELLS = 3
_WALL, _FREE = -2, -1


def _cell_floor(x: float, l: float) -> int:
    """floor(x / l) robust to x being an exact multiple of l in floats."""
    return int(math.floor(x / l + 1e-9))


def _cell_ceil(x: float, l: float) -> int:
    return int(math.ceil(x / l - 1e-9))


@dataclass
class Room:
    name: str
    rect: tuple[float, float, float, float]  # x0, y0, x1, y1 meters

    def contains(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.rect
        return x0 <= x <= x1 and y0 <= y <= y1


@dataclass
class SceneObject:
    object_id: str
    category: str
    color: str
    position: np.ndarray                  # (2,) meters
    footprint: tuple[float, float]        # w (along x), d (along y) meters
    extra_attrs: tuple[str, ...] = ()

    @property
    def attribute(self) -> str:
        return " ".join((self.color,) + self.extra_attrs)


@dataclass
class Observation:
    rgb: np.ndarray                       # (H, W, 3) uint8
    depth: np.ndarray                     # (H, W) float32, z-depth meters
    pose: Pose
    detections: list[Detection] = field(default_factory=list)


class Scene:
    def __init__(self, name: str, resolution: float, walls: np.ndarray,
                 rooms: list[Room], objects: list[SceneObject],
                 spawns: list[Pose]):
        self.name = name
        self.resolution = float(resolution)
        self.walls = np.asarray(walls, dtype=bool)      # [ix, iy]
        self.rooms = rooms
        self.objects = objects
        self.spawns = spawns
        self._build_grids()
        self._validate()

    # -- derived grids -----------------------------------------------------

    def _build_grids(self) -> None:
        nx, ny = self.walls.shape
        occ = np.full((nx, ny), _FREE, dtype=np.int16)
        occ[self.walls] = _WALL
        l = self.resolution
        for k, obj in enumerate(self.objects):
            x, y = obj.position
            w, d = obj.footprint
            ix0 = max(0, _cell_floor(x - w / 2, l))
            ix1 = min(nx, _cell_ceil(x + w / 2, l))
            iy0 = max(0, _cell_floor(y - d / 2, l))
            iy1 = min(ny, _cell_ceil(y + d / 2, l))
            region = occ[ix0:ix1, iy0:iy1]
            if np.any(region == _WALL):
                raise SceneFormatError(
                    f"object {obj.object_id}: footprint overlaps a wall")
            region[:] = k
        self._occ = occ
        tops = np.zeros((nx, ny), dtype=np.float64)
        tops[occ == _WALL] = WALL_HEIGHT
        tops[occ >= 0] = OBJECT_HEIGHT
        self._top = tops
        self._blocked = occ != _FREE
        self._blocked_nav = ndimage.binary_dilation(self._blocked,
                                                    structure=disk(NAV_RADIUS_CELLS))
        self._colors = np.array(
            [COLOR_RGB.get(o.color, COLOR_RGB["white"]) for o in self.objects]
            or [(0, 0, 0)], dtype=np.float64)

    def _validate(self) -> None:
        nx, ny = self.walls.shape
        if nx < 3 or ny < 3:
            raise SceneFormatError(f"scene {self.name}: grid {nx}x{ny} too small")
        l = self.resolution
        for obj in self.objects:
            x, y = obj.position
            if not (0 <= x <= nx * l and 0 <= y <= ny * l):
                raise SceneFormatError(
                    f"object {obj.object_id}: position ({x}, {y}) outside walls")
            if obj.color not in COLOR_RGB:
                raise SceneFormatError(
                    f"object {obj.object_id}: unknown color {obj.color!r}")
        for i, a in enumerate(self.rooms):
            for b in self.rooms[i + 1:]:
                ax0, ay0, ax1, ay1 = a.rect
                bx0, by0, bx1, by1 = b.rect
                if ax0 < bx1 and bx0 < ax1 and ay0 < by1 and by0 < ay1:
                    raise SceneFormatError(
                        f"rooms {a.name!r} and {b.name!r} overlap")
        if not self.spawns:
            raise SceneFormatError(f"scene {self.name}: no spawn poses")
        if not any(self.traversable_at(p.xy) for p in self.spawns):
            raise SceneFormatError(
                f"scene {self.name}: no spawn pose is traversable")

    # -- queries -------------------------------------------------------------

    @property
    def size_m(self) -> tuple[float, float]:
        nx, ny = self.walls.shape
        return nx * self.resolution, ny * self.resolution

    def area_m2(self) -> float:
        """Interior (non-wall) floor area."""
        return float(np.count_nonzero(~self.walls)) * self.resolution ** 2

    def cell_of(self, xy) -> tuple[int, int]:
        l = self.resolution
        return int(math.floor(xy[0] / l)), int(math.floor(xy[1] / l))

    def in_bounds_cell(self, ix: int, iy: int) -> bool:
        nx, ny = self.walls.shape
        return 0 <= ix < nx and 0 <= iy < ny

    def traversable_at(self, xy) -> bool:
        """True when an agent body can stand here (clearance included)."""
        ix, iy = self.cell_of(xy)
        return self.in_bounds_cell(ix, iy) and not self._blocked_nav[ix, iy]

    def room_of(self, xy) -> str:
        for room in self.rooms:
            if room.contains(float(xy[0]), float(xy[1])):
                return room.name
        return ""

    # -- rendering -------------------------------------------------------------

    def render(self, pose: Pose, cam: CameraModel, max_depth: float = 6.0) -> Observation:
        ix, iy = self.cell_of(pose.xy)
        if not self.in_bounds_cell(ix, iy) or self._occ[ix, iy] == _WALL:
            raise ValueError(f"render pose {pose.xy} is inside a wall")
        h, w = cam.height, cam.width
        dirs = cam.pixel_dirs_world(pose).reshape(-1, 3)
        norms = np.linalg.norm(cam.pixel_dirs_cam(), axis=-1).reshape(-1)
        t_hit, mat = self._raycast(cam.camera_origin(pose), dirs, norms, max_depth)

        depth = np.where(np.isfinite(t_hit), t_hit, max_depth)
        rgb = np.zeros((h * w, 3), dtype=np.float64)
        hit = np.isfinite(t_hit)
        r3 = np.where(hit, t_hit * norms, max_depth)
        shade = np.clip(1.0 - 0.25 * (r3 / max_depth), 0.75, 1.0)
        rgb[mat == -2] = FLOOR_RGB
        rgb[mat == -1] = WALL_RGB
        obj_mask = mat >= 0
        if np.any(obj_mask):
            rgb[obj_mask] = self._colors[mat[obj_mask]]
        rgb *= shade[:, None]
        rgb[~hit] = 0.0
        obs = Observation(
            rgb=rgb.reshape(h, w, 3).round().astype(np.uint8),
            depth=depth.reshape(h, w).astype(np.float32),
            pose=pose,
            detections=self.detections(pose, cam, max_depth),
        )
        return obs

    def _raycast(self, origin: np.ndarray, dirs: np.ndarray, norms: np.ndarray,
                 max_depth: float) -> tuple[np.ndarray, np.ndarray]:
        """Batched exact DDA. Returns (t_hit, material) per ray with t the
        z-depth parameter; material -3 none, -2 floor, -1 wall, k>=0 object."""
        n = dirs.shape[0]
        l = self.resolution
        nx, ny = self.walls.shape
        ox, oy, oz = origin
        wx, wy, wz = dirs[:, 0].copy(), dirs[:, 1].copy(), dirs[:, 2]
        tiny = 1e-12
        wx[np.abs(wx) < tiny] = tiny
        wy[np.abs(wy) < tiny] = tiny
        t_cap = max_depth / norms
        t_floor = np.where(wz < -tiny, (0.0 - oz) / wz, np.inf)

        ix = np.full(n, int(math.floor(ox / l)), dtype=np.int64)
        iy = np.full(n, int(math.floor(oy / l)), dtype=np.int64)
        step_x = np.where(wx > 0, 1, -1).astype(np.int64)
        step_y = np.where(wy > 0, 1, -1).astype(np.int64)
        t_next_x = ((ix + (wx > 0)) * l - ox) / wx
        t_next_y = ((iy + (wy > 0)) * l - oy) / wy
        dt_x = np.abs(l / wx)
        dt_y = np.abs(l / wy)

        t0 = np.zeros(n)
        t_hit = np.full(n, np.inf)
        mat = np.full(n, -3, dtype=np.int64)
        active = np.ones(n, dtype=bool)

        max_iter = 2 * (nx + ny) + 4
        for _ in range(max_iter):
            if not active.any():
                break
            a = np.flatnonzero(active)
            axi, ayi = ix[a], iy[a]
            oob = (axi < 0) | (axi >= nx) | (ayi < 0) | (ayi >= ny)
            if np.any(oob):
                active[a[oob]] = False
                a = a[~oob]
                if a.size == 0:
                    continue
                axi, ayi = ix[a], iy[a]
            t_exit = np.minimum(t_next_x[a], t_next_y[a])
            occ = self._occ[axi, ayi]
            top = self._top[axi, ayi]
            z0 = oz + wz[a] * t0[a]
            occupied = occ != _FREE
            side = occupied & (z0 >= 0.0) & (z0 <= top)
            with np.errstate(divide="ignore", invalid="ignore"):
                t_top = (top - oz) / wz[a]
            topf = (occupied & ~side & (wz[a] < 0) & (z0 > top)
                    & (t_top > t0[a]) & (t_top <= t_exit))
            flo = (~side & ~topf & (t_floor[a] > t0[a]) & (t_floor[a] <= t_exit))

            cand_t = np.where(side, t0[a], np.where(topf, t_top, t_floor[a]))
            cand_m = np.where(side | topf,
                              np.where(occ == _WALL, -1, occ),
                              -2)
            hits = side | topf | flo
            good = hits & (cand_t <= t_cap[a])
            t_hit[a[good]] = cand_t[good]
            mat[a[good]] = cand_m[good]
            done = good | (hits & (cand_t > t_cap[a])) | (t_exit >= t_cap[a])
            active[a[done]] = False

            rest = a[~done]
            if rest.size:
                go_x = t_next_x[rest] < t_next_y[rest]
                gx = rest[go_x]
                gy = rest[~go_x]
                t0[rest] = np.where(go_x, t_next_x[rest], t_next_y[rest])
                ix[gx] += step_x[gx]
                t_next_x[gx] += dt_x[gx]
                iy[gy] += step_y[gy]
                t_next_y[gy] += dt_y[gy]
        return t_hit, mat

    # -- ground-truth detections ------------------------------------------------

    def detections(self, pose: Pose, cam: CameraModel,
                   max_depth: float = 6.0) -> list[Detection]:
        """Objects whose center projects into the frame, within range and
        unoccluded along the sight line to their center."""
        out = []
        o = cam.camera_origin(pose)
        for k, obj in enumerate(self.objects):
            center = np.array([obj.position[0], obj.position[1], OBJECT_HEIGHT / 2])
            u, v, z = cam.project(center[None, :], pose)
            if z[0] <= 1e-6 or not (0 <= u[0] < cam.width and 0 <= v[0] < cam.height):
                continue
            if np.linalg.norm(center - o) > max_depth:
                continue
            if not self._sight_clear(o, center, k):
                continue
            bbox = self._project_bbox(obj, pose, cam)
            if bbox is None:
                continue
            out.append(Detection(
                object_id=obj.object_id,
                category=obj.category,
                attribute=obj.attribute,
                description="",
                bbox=bbox,
                position=np.array([obj.position[0], obj.position[1], 0.0]),
                room=self.room_of(obj.position),
            ))
        return out

    def _sight_clear(self, origin: np.ndarray, target: np.ndarray,
                     target_idx: int) -> bool:
        seg = target[:2] - origin[:2]
        length = float(np.linalg.norm(seg))
        if length < 1e-9:
            return True
        steps = max(2, int(math.ceil(length / (self.resolution / 3.0))))
        fr = np.linspace(0.0, 1.0, steps, endpoint=False)[1:]
        xs = origin[0] + seg[0] * fr
        ys = origin[1] + seg[1] * fr
        zs = origin[2] + (target[2] - origin[2]) * fr
        l = self.resolution
        ix = np.floor(xs / l).astype(np.int64)
        iy = np.floor(ys / l).astype(np.int64)
        nx, ny = self.walls.shape
        inb = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
        if not np.all(inb):
            return False
        occ = self._occ[ix, iy]
        tgt_cells = occ == target_idx
        blocked = (occ == _WALL) | ((occ >= 0) & ~tgt_cells
                                    & (zs <= self._top[ix, iy]))
        return not bool(np.any(blocked))

    def _project_bbox(self, obj: SceneObject, pose: Pose,
                      cam: CameraModel) -> tuple[int, int, int, int] | None:
        x, y = obj.position
        w, d = obj.footprint
        corners = []
        for cx in (x - w / 2, x + w / 2):
            for cy in (y - d / 2, y + d / 2):
                for cz in (0.0, OBJECT_HEIGHT):
                    corners.append((cx, cy, cz))
        u, v, z = cam.project(np.array(corners), pose)
        front = z > 1e-6
        if not np.any(front):
            return None
        u, v = u[front], v[front]
        u0 = int(np.clip(np.floor(u.min()), 0, cam.width - 1))
        u1 = int(np.clip(np.ceil(u.max()), 0, cam.width - 1))
        v0 = int(np.clip(np.floor(v.min()), 0, cam.height - 1))
        v1 = int(np.clip(np.ceil(v.max()), 0, cam.height - 1))
        return (u0, v0, u1, v1)

    # -- kinematics -----------------------------------------------------------

    def move(self, pose: Pose, target: Pose) -> Pose:
        """Straight-line motion toward the target position, stopping at the
        first blocked cell boundary (with half a cell of clearance so the
        agent is never glued to an obstacle). The returned pose never sits
        inside an occupied cell; heading comes from the target."""
        p0 = pose.xy.astype(np.float64)
        p1 = target.xy.astype(np.float64)
        seg = p1 - p0
        length = float(np.linalg.norm(seg))
        if length < 1e-12:
            return Pose(np.array([p0[0], p0[1], 0.0]), target.yaw)
        d = seg / length
        reach = self._free_distance(p0, d, length, margin=self.resolution / 2)
        stop = p0 + d * reach
        return Pose(np.array([stop[0], stop[1], 0.0]), target.yaw)

    def _free_distance(self, p0: np.ndarray, d: np.ndarray, length: float,
                       margin: float = 1e-6) -> float:
        """Distance travelable from p0 along unit d before the agent body
        would enter a blocked or out-of-bounds cell, capped at length."""
        l = self.resolution
        nx, ny = self.walls.shape
        ix, iy = int(math.floor(p0[0] / l)), int(math.floor(p0[1] / l))
        dx = d[0] if abs(d[0]) > 1e-12 else 1e-12
        dy = d[1] if abs(d[1]) > 1e-12 else 1e-12
        step_x = 1 if dx > 0 else -1
        step_y = 1 if dy > 0 else -1
        t_next_x = ((ix + (dx > 0)) * l - p0[0]) / dx
        t_next_y = ((iy + (dy > 0)) * l - p0[1]) / dy
        t = 0.0
        while t < length:
            t_exit = min(t_next_x, t_next_y, length)
            if t_exit >= length:
                return length
            if t_next_x < t_next_y:
                ix += step_x
                t_next_x += abs(l / dx)
            else:
                iy += step_y
                t_next_y += abs(l / dy)
            if not (0 <= ix < nx and 0 <= iy < ny) or self._blocked_nav[ix, iy]:
                return max(0.0, t_exit - margin)
            t = t_exit
        return length


# -- scene file io ------------------------------------------------------------


def load_scene(path: str | Path) -> Scene:
    return parse_scene(Path(path).read_text(encoding="utf-8"))


def parse_scene(text: str) -> Scene:
    name = ""
    resolution = 0.1
    size: tuple[int, int] | None = None
    walls: np.ndarray | None = None
    wallrects: list[tuple[float, float, float, float]] = []
    rooms: list[Room] = []
    objects: list[SceneObject] = []
    spawns: list[Pose] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, _, rest = line.partition(" ")
        try:
            if head == "scene":
                name = rest.strip()
            elif head == "resolution":
                resolution = float(rest)
            elif head == "size":
                nx, ny = map(int, rest.split())
                size = (nx, ny)
                walls = np.zeros((nx, ny), dtype=bool)
            elif head == "row":
                if walls is None:
                    raise SceneFormatError("row before size")
                parts = rest.split()
                iy = int(parts[0])
                for run in parts[1:]:
                    start, count = map(int, run.split(":"))
                    walls[start:start + count, iy] = True
            elif head == "wallrect":
                x0, y0, x1, y1 = map(float, rest.split())
                wallrects.append((x0, y0, x1, y1))
            elif head == "room":
                rname, _, coords = rest.partition("|")
                x0, y0, x1, y1 = map(float, coords.split())
                rooms.append(Room(rname.strip(), (x0, y0, x1, y1)))
            elif head == "object":
                fields = [f.strip() for f in rest.split("|")]
                ident, category, color = fields[0].split()
                x, y = map(float, fields[1].split())
                w, d = map(float, fields[2].split())
                extras = tuple(fields[3].split()) if len(fields) > 3 else ()
                objects.append(SceneObject(ident, category, color,
                                           np.array([x, y]), (w, d), extras))
            elif head == "spawn":
                x, y, yaw = map(float, rest.split())
                spawns.append(Pose.at(x, y, yaw))
            else:
                raise SceneFormatError(f"unknown directive {head!r}")
        except SceneFormatError:
            raise
        except Exception as exc:
            raise SceneFormatError(f"line {lineno}: cannot parse {raw!r}: {exc}") from exc
    if size is None or walls is None:
        raise SceneFormatError("scene file missing 'size'")
    l = resolution
    for x0, y0, x1, y1 in wallrects:
        ix0 = max(0, _cell_floor(x0, l))
        ix1 = min(size[0], _cell_ceil(x1, l))
        iy0 = max(0, _cell_floor(y0, l))
        iy1 = min(size[1], _cell_ceil(y1, l))
        walls[ix0:ix1, iy0:iy1] = True
    return Scene(name or "unnamed", resolution, walls, rooms, objects, spawns)


def save_scene(scene: Scene, path: str | Path) -> None:
    lines = [f"scene {scene.name}",
             f"resolution {scene.resolution}",
             f"size {scene.walls.shape[0]} {scene.walls.shape[1]}"]
    nx, ny = scene.walls.shape
    for iy in range(ny):
        col = scene.walls[:, iy]
        if not col.any():
            continue
        runs = []
        start = None
        for ix in range(nx + 1):
            filled = ix < nx and col[ix]
            if filled and start is None:
                start = ix
            elif not filled and start is not None:
                runs.append(f"{start}:{ix - start}")
                start = None
        lines.append(f"row {iy} " + " ".join(runs))
    for room in scene.rooms:
        x0, y0, x1, y1 = room.rect
        lines.append(f"room {room.name} | {x0} {y0} {x1} {y1}")
    for o in scene.objects:
        extra = (" | " + " ".join(o.extra_attrs)) if o.extra_attrs else ""
        lines.append(
            f"object {o.object_id} {o.category} {o.color} | "
            f"{o.position[0]} {o.position[1]} | {o.footprint[0]} {o.footprint[1]}"
            f"{extra}")
    for s in scene.spawns:
        lines.append(f"spawn {s.position[0]} {s.position[1]} {s.yaw}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def bundled_scene_path(name: str) -> Path:
    root = importlib.resources.files("memnav") / "scenes"
    path = Path(str(root / f"{name}.scene"))
    if not path.exists():
        raise SceneFormatError(f"no bundled scene named {name!r}")
    return path


def load_bundled_scene(name: str) -> Scene:
    return load_scene(bundled_scene_path(name))
