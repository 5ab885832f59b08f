"""Frontier detection and candidate pose sampling on the 2-D map.

A frontier cell is explored, traversable, and 4-adjacent to at least one
unexplored in-bounds cell. Cells group into 8-connected components; small
components are noise and get dropped. Candidate poses sit on frontier cells,
face the unexplored side, and are thinned so that prompts stay small.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import Pose
from .mapping import Map2D


@dataclass
class FrontierParams:
    min_points_clustering: int = 3
    frontier_spacing: float = 1.5
    cluster_threshold: float = 1.0
    num_prompt_points: int = 3
    min_prompt_points: int = 2
    point_min_dist: float = 2.0
    point_max_dist: float = 10.0

    @classmethod
    def from_hyperparams(cls, hp) -> "FrontierParams":
        return cls(min_points_clustering=hp.min_points_clustering,
                   frontier_spacing=hp.frontier_spacing,
                   cluster_threshold=hp.cluster_threshold,
                   num_prompt_points=hp.num_prompt_points,
                   min_prompt_points=hp.min_prompt_points,
                   point_min_dist=hp.point_min_dist,
                   point_max_dist=hp.point_max_dist)


@dataclass
class Frontier:
    cells: list[tuple[int, int]]
    centroid: np.ndarray                  # world xy
    candidate_poses: list[Pose] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.cells)


@dataclass
class CandidatePose:
    pose: Pose
    frontier_index: int


@dataclass
class CandidateSet:
    candidates: list[CandidatePose]
    relaxed: bool = False                 # distance band could not be honored

    def __len__(self) -> int:
        return len(self.candidates)


def frontier_mask(map2d: Map2D) -> np.ndarray:
    """Boolean mask of frontier cells. Out-of-bounds neighbors never count as
    unexplored, so a fully explored map has no frontier."""
    trav = map2d.traversable & map2d.explored
    unexp = ~map2d.explored
    near_unexplored = np.zeros_like(unexp)
    near_unexplored[:-1, :] |= unexp[1:, :]
    near_unexplored[1:, :] |= unexp[:-1, :]
    near_unexplored[:, :-1] |= unexp[:, 1:]
    near_unexplored[:, 1:] |= unexp[:, :-1]
    return trav & near_unexplored


def detect_frontiers(map2d: Map2D, params: FrontierParams) -> list[Frontier]:
    """8-connected frontier components with spaced, outward-facing poses.
    Components smaller than min_points_clustering are dropped. Deterministic:
    components and cells are ordered lexicographically."""
    mask = frontier_mask(map2d)
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    frontiers = []
    for lab in range(1, n + 1):
        xs, ys = np.nonzero(labels == lab)
        if xs.size < params.min_points_clustering:
            continue
        order = np.lexsort((ys, xs))
        cells = [(int(xs[i]), int(ys[i])) for i in order]
        centers = np.array([map2d.center_of(c) for c in cells])
        centroid = centers.mean(axis=0)
        poses = _spaced_poses(map2d, cells, centers, params.frontier_spacing)
        frontiers.append(Frontier(cells=cells, centroid=centroid,
                                  candidate_poses=poses))
    frontiers.sort(key=lambda f: f.cells[0])
    return frontiers


def _outward_yaw(map2d: Map2D, cell: tuple[int, int]) -> float:
    """Yaw pointing at the mean of the unexplored 4-neighbors of a cell."""
    ix, iy = cell
    dx = dy = 0.0
    for ox, oy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        jx, jy = ix + ox, iy + oy
        if map2d.in_bounds(jx, jy) and not map2d.explored[jx, jy]:
            dx += ox
            dy += oy
    if dx == 0.0 and dy == 0.0:
        return 0.0
    return math.atan2(dy, dx)


def _spaced_poses(map2d: Map2D, cells, centers, spacing: float) -> list[Pose]:
    poses: list[Pose] = []
    chosen: list[np.ndarray] = []
    for cell, center in zip(cells, centers):
        if any(np.linalg.norm(center - c) < spacing for c in chosen):
            continue
        chosen.append(center)
        yaw = _outward_yaw(map2d, cell)
        poses.append(Pose(np.array([center[0], center[1], 0.0]), yaw))
    return poses


def sample_candidates(frontiers: list[Frontier], agent: Pose,
                      params: FrontierParams) -> CandidateSet:
    """Pick up to num_prompt_points candidate poses inside the distance band
    [point_min_dist, point_max_dist] from the agent, pairwise separated by at
    least cluster_threshold. Larger frontiers are preferred. When no pose fits
    the band the nearest frontier centroid is returned with `relaxed` set.
    """
    if not frontiers:
        raise ValueError("sample_candidates requires at least one frontier")
    pool: list[tuple[float, float, int, int, Pose]] = []
    for fi, fr in enumerate(frontiers):
        for pi, pose in enumerate(fr.candidate_poses):
            d = float(np.linalg.norm(pose.xy - agent.xy))
            pool.append((d, -len(fr), fi, pi, pose))

    in_band = [item for item in pool
               if params.point_min_dist <= item[0] <= params.point_max_dist]
    relaxed = not in_band
    if relaxed:
        # fall back to the nearest centroid, flagged for the caller
        fi = min(range(len(frontiers)),
                 key=lambda i: (float(np.linalg.norm(frontiers[i].centroid - agent.xy)), i))
        c = frontiers[fi].centroid
        yaw = math.atan2(c[1] - agent.xy[1], c[0] - agent.xy[0])
        pose = Pose(np.array([c[0], c[1], 0.0]), yaw)
        return CandidateSet([CandidatePose(pose, fi)], relaxed=True)

    # prefer big frontiers, then nearness; greedy thinning by cluster_threshold
    in_band.sort(key=lambda it: (it[1], it[0], it[2], it[3]))
    chosen: list[CandidatePose] = []
    for d, negsize, fi, pi, pose in in_band:
        if len(chosen) >= params.num_prompt_points:
            break
        if any(np.linalg.norm(pose.xy - c.pose.xy) < params.cluster_threshold
               for c in chosen):
            continue
        chosen.append(CandidatePose(pose, fi))
    if len(chosen) < params.min_prompt_points:
        for d, negsize, fi, pi, pose in in_band:
            if len(chosen) >= params.min_prompt_points:
                break
            if any(c.pose.close_to(pose) for c in chosen):
                continue
            chosen.append(CandidatePose(pose, fi))
    return CandidateSet(chosen, relaxed=False)
