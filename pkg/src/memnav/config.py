"""Runtime hyperparameters.

Every named threshold and weight lives here so that runs are reproducible
from a single YAML file. Field names double as the config file keys.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import yaml

from .geometry import CameraModel


@dataclass
class HyperParams:
    # global
    seed: int = 42

    # encoder / retrieval
    dim: int = 768                    # record embedding dimension; fused queries use 2*dim
    max_retrieval_num: int = 10
    k_min: int = 2
    beta: float = 8.0                 # entropy weight in the dynamic-k rule
    alpha_e: float = 0.9              # base radius of the euclidean retrieval gate
    alpha_s: float = 0.5              # cosine retrieval gate
    alpha_scene: float = 0.6          # scene-vote similarity threshold
    top_k_scene: int = 5

    # camera / image
    camera_height: float = 1.5
    camera_tilt_deg: float = -30.0
    img_width: int = 640
    img_height: int = 480
    hfov: float = 120.0
    tsdf_grid_size: float = 0.1       # voxel edge, meters
    margin_w_ratio: float = 0.25      # horizontal margin trimmed from each image side
    margin_h_ratio: float = 0.6       # top margin trimmed before explored-marking
    max_depth: float = 6.0            # render / fusion range cap, meters

    # navigation
    init_clearance: float = 0.5
    max_step_room_size_ratio: float = 3.0   # also gamma_s in the normalized-steps metric
    black_pixel_ratio: float = 0.7    # navigation-time view rejection ratio
    min_random_init_steps: int = 2

    # planner
    dist_T: float = 10.0
    unexplored_T: float = 0.2
    unoccupied_T: float = 2.0
    val_T: float = 0.5
    val_dir_T: float = 0.5
    max_val_check: int = 3
    smooth_sigma: float = 5.0         # gaussian smoothing of the semantic weight, cells
    eps: float = 1.0
    min_dist_from_cur: float = 0.5
    max_dist_from_cur: float = 3.0
    frontier_spacing: float = 1.5
    min_neighbors: int = 3
    max_neighbors: int = 4
    max_unexplored: int = 3
    max_unoccupied: int = 1

    # visual prompt
    cluster_threshold: float = 1.0
    num_prompt_points: int = 3
    num_max_unoccupied: int = 300
    min_points_clustering: int = 3
    point_min_dist: float = 2.0
    point_max_dist: float = 10.0
    cam_offset: float = 0.6
    min_prompt_points: int = 2
    circle_radius: int = 18

    # memory update gate
    alpha: float = 0.5                # structural vs semantic blend
    beta_p: float = 1.0               # pose novelty distance, meters
    beta_r_deg: float = 30.0          # pose novelty heading, degrees
    sim_threshold: float = 0.85       # blended observation similarity cutoff
    black_ratio_max: float = 0.5      # update-gate black fraction bound (inclusive)

    # stop criterion
    gamma: float = 0.5                # confidence value needed to stop (>=)

    # mapping internals
    tsdf_trunc_voxels: float = 3.0    # truncation tau = tsdf_trunc_voxels * tsdf_grid_size
    tsdf_weight_cap: float = 100.0
    grid_height_m: float = 3.5
    max_voxels: int = 50_000_000

    @property
    def tau(self) -> float:
        return self.tsdf_trunc_voxels * self.tsdf_grid_size

    @property
    def beta_r(self) -> float:
        """Heading novelty threshold in radians."""
        return math.radians(self.beta_r_deg)

    @property
    def gamma_s(self) -> float:
        """Step/room-size ratio used by the normalized-steps metric."""
        return self.max_step_room_size_ratio

    def camera(self) -> CameraModel:
        return CameraModel(
            height_m=self.camera_height,
            tilt_deg=self.camera_tilt_deg,
            hfov_deg=self.hfov,
            width=self.img_width,
            height=self.img_height,
        )

    def max_steps(self, area_m2: float) -> int:
        """Hard step budget: ceil(ratio * sqrt(room area))."""
        return int(math.ceil(self.max_step_room_size_ratio * math.sqrt(max(area_m2, 1.0))))

    def validate(self) -> None:
        problems = []
        if self.dim <= 0:
            problems.append("dim must be positive")
        if self.k_min < 1:
            problems.append("k_min must be >= 1")
        if self.max_retrieval_num < self.k_min:
            problems.append("max_retrieval_num must be >= k_min")
        if self.beta < 0:
            problems.append("beta must be >= 0")
        if not 0.0 < self.alpha_s < 1.0:
            problems.append("alpha_s must be in (0, 1)")
        if self.alpha_e < 0:
            problems.append("alpha_e must be >= 0")
        if not 0.0 < self.alpha_scene < 1.0:
            problems.append("alpha_scene must be in (0, 1)")
        if not 0.0 <= self.alpha <= 1.0:
            problems.append("alpha must be in [0, 1]")
        if not 0.0 <= self.black_ratio_max <= 1.0:
            problems.append("black_ratio_max must be in [0, 1]")
        if not 0.0 <= self.sim_threshold <= 1.0:
            problems.append("sim_threshold must be in [0, 1]")
        if self.tsdf_grid_size <= 0:
            problems.append("tsdf_grid_size must be positive")
        if not 0.0 <= self.margin_w_ratio < 0.5:
            problems.append("margin_w_ratio must be in [0, 0.5)")
        if not 0.0 <= self.margin_h_ratio < 1.0:
            problems.append("margin_h_ratio must be in [0, 1)")
        if self.min_prompt_points > self.num_prompt_points:
            problems.append("min_prompt_points must be <= num_prompt_points")
        if problems:
            raise ValueError("invalid hyperparameters: " + "; ".join(problems))

    @classmethod
    def desk_profile(cls, **overrides) -> "HyperParams":
        """Small-raster profile used by tests and the bundled fixtures."""
        base = dict(img_width=64, img_height=48, max_depth=6.0)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_file(cls, path: str | Path) -> "HyperParams":
        raw = yaml.safe_load(Path(path).read_text()) or {}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        hp = cls(**raw)
        hp.validate()
        return hp

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(dataclasses.asdict(self), sort_keys=False))
