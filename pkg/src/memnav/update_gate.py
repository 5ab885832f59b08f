"""Memory-update gating: a new observation enters memory only when the agent
is in a novel region, the view is dissimilar from everything stored, and the
field of view is not blacked out. All three rules must pass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import Pose, angle_diff
from .memory import GlobalMemoryEntry, LocalMemoryEntry, MemoryStore

log = logging.getLogger(__name__)

BLACK_PIXEL_THRESHOLD = 8  # of 255, per channel


@dataclass
class UpdateParams:
    beta_p: float = 1.0         # meters
    beta_r: float = 0.5235988   # radians (30 deg)
    alpha: float = 0.5          # SSIM weight in the blend
    sim_threshold: float = 0.85
    black_ratio_max: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if not 0.0 <= self.sim_threshold <= 1.0:
            raise ValueError("sim_threshold must be in [0, 1]")
        if not 0.0 <= self.black_ratio_max <= 1.0:
            raise ValueError("black_ratio_max must be in [0, 1]")

    @classmethod
    def from_hyperparams(cls, hp) -> "UpdateParams":
        return cls(beta_p=hp.beta_p, beta_r=hp.beta_r, alpha=hp.alpha,
                   sim_threshold=hp.sim_threshold,
                   black_ratio_max=hp.black_ratio_max)


def memory_poses(store: MemoryStore, scene_id: int) -> list[Pose]:
    """Poses recorded in a scene partition (local states and target observers)."""
    poses = []
    for rec in store.scene_records(scene_id):
        if isinstance(rec.payload, LocalMemoryEntry):
            poses.append(rec.payload.state)
        elif isinstance(rec.payload, GlobalMemoryEntry) and rec.payload.observer:
            poses.append(rec.payload.observer)
    return poses


def novelty_gate(pose: Pose, store: MemoryStore, scene_id: int,
                 params: UpdateParams) -> bool:
    """True iff the pose is farther than beta_p from every remembered position
    AND turned more than beta_r from every remembered heading. Vacuously true
    on an empty partition."""
    poses = memory_poses(store, scene_id)
    if not poses:
        return True
    min_dist = min(float(np.linalg.norm(pose.position - p.position)) for p in poses)
    min_ang = min(angle_diff(pose.yaw, p.yaw) for p in poses)
    return min_dist > params.beta_p and min_ang > params.beta_r


def _to_gray(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        arr = 0.299 * arr[..., 0] + 0.587 * arr[..., 1] + 0.114 * arr[..., 2]
    return arr


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8, stride: int = 4) -> float:
    """Mean structural similarity over uniform sliding windows.

    Grayscale conversion via ITU-R 601 luma; 8-bit dynamic range stabilizers
    C1=(0.01*255)^2, C2=(0.03*255)^2, population statistics per window.
    """
    ga, gb = _to_gray(a), _to_gray(b)
    if ga.shape != gb.shape:
        raise ValueError(f"image shapes differ: {ga.shape} vs {gb.shape}")
    h, w = ga.shape
    win = min(window, h, w)
    if win < 1:
        raise ValueError("empty image")
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    wa = np.lib.stride_tricks.sliding_window_view(ga, (win, win))[::stride, ::stride]
    wb = np.lib.stride_tricks.sliding_window_view(gb, (win, win))[::stride, ::stride]
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def blended_similarity(obs_a: np.ndarray | None, obs_b: np.ndarray | None,
                       f_a: np.ndarray, f_b: np.ndarray, alpha: float) -> float:
    """alpha * SSIM(a, b) + (1 - alpha) * cos(f_a, f_b). When either raster is
    unavailable (e.g. records loaded from a persisted bank keep no pixels) the
    semantic term stands alone."""
    cos = float(np.dot(np.asarray(f_a, dtype=np.float64).reshape(-1),
                       np.asarray(f_b, dtype=np.float64).reshape(-1)))
    if obs_a is None or obs_b is None:
        return cos
    return alpha * ssim(obs_a, obs_b) + (1.0 - alpha) * cos


def black_fraction(obs: np.ndarray) -> float:
    arr = np.asarray(obs)
    if arr.size == 0:
        raise ValueError("empty observation")
    if arr.ndim == 3:
        black = np.all(arr < BLACK_PIXEL_THRESHOLD, axis=-1)
    else:
        black = arr < BLACK_PIXEL_THRESHOLD
    return float(np.count_nonzero(black)) / black.size


def fov_gate(obs: np.ndarray, params: UpdateParams) -> bool:
    """True iff the black fraction is at most black_ratio_max (inclusive)."""
    return black_fraction(obs) <= params.black_ratio_max


def should_update(pose: Pose, obs: np.ndarray, f_obs: np.ndarray,
                  store: MemoryStore, scene_id: int, params: UpdateParams) -> bool:
    """Conjunction of the three rules, short-circuit in order: pose novelty,
    observation dissimilarity, unobstructed view."""
    if not novelty_gate(pose, store, scene_id, params):
        return False
    for rec in store.scene_records(scene_id):
        if not isinstance(rec.payload, LocalMemoryEntry):
            continue
        stored_img = store.observation_image(rec.index)
        # records reloaded from disk keep no image feature; the record
        # embedding is the closest available stand-in
        f_stored = store.observation_feature(rec.index)
        if f_stored is None:
            f_stored = rec.embedding
        sim = blended_similarity(obs, stored_img, f_obs, f_stored, params.alpha)
        if sim >= params.sim_threshold:
            return False
    return fov_gate(obs, params)
