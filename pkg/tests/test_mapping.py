import math

import numpy as np
import pytest

from memnav.errors import GridCapacityError
from memnav.geometry import CameraModel, Pose
from memnav.mapping import FREE, OCCUPIED, UNKNOWN, GridParams, VoxelGrid


def straight_cam(width=64, height=48):
    """Level camera whose optical axis aligns with a voxel-center row."""
    return CameraModel(height_m=1.55, tilt_deg=0.0, hfov_deg=90.0,
                       width=width, height=height)


def make_grid(x0=0.0, y0=0.0, nx=80, ny=40, **kw):
    return VoxelGrid((x0, y0), (nx, ny), GridParams(**kw))


def test_empty_depth_marks_free_none_occupied():
    p = GridParams(max_depth=4.0)
    grid = VoxelGrid((0.0, 0.0), (80, 40), p)
    cam = straight_cam()
    pose = Pose.at(1.05, 2.05, 0.0)
    depth = np.full((cam.height, cam.width), p.max_depth)
    grid.integrate_depth(depth, pose, cam)
    occ = grid.occupancy()
    assert np.count_nonzero(occ == OCCUPIED) == 0
    # a voxel straight ahead inside range is observed free
    v, w = grid.tsdf_at(np.array([2.05, 2.05, 1.55]))
    assert w > 0 and v > 0
    # beyond the range cap nothing is touched
    v, w = grid.tsdf_at(np.array([5.55, 2.05, 1.55]))
    assert w == 0.0


def test_single_ray_matches_hand_march():
    """One centered ray hitting a wall at 2.03 m; every voxel along the ray
    should carry tsdf = clamp(hit - x, -tau, tau) per the fusion formula.
    (2.03 keeps voxel centers off the exact truncation boundary.)"""
    hit = 2.03
    p = GridParams(max_depth=6.0)
    tau = p.tau
    grid = VoxelGrid((0.0, 0.0), (60, 20), p)
    cam = straight_cam()
    pose = Pose.at(0.05, 1.05, 0.0)  # camera at a voxel center, looking +x
    depth = np.full((cam.height, cam.width), np.nan)
    depth[24, 32] = hit  # the optical-axis pixel
    grid.integrate_depth(depth, pose, cam)

    for k in range(1, 40):
        x = 0.05 + k * 0.1
        dist_along = x - 0.05
        sdf = hit - dist_along
        v, w = grid.tsdf_at(np.array([x, 1.05, 1.55]))
        if sdf > -tau:
            assert w > 0, f"voxel at {x} should be observed"
            assert v == pytest.approx(max(min(sdf, tau), -tau), abs=1e-5)
        else:
            assert w == 0.0, f"voxel {x} beyond the truncation band must stay unknown"


def test_voxel_behind_surface_unchanged():
    p = GridParams()
    grid = VoxelGrid((0.0, 0.0), (60, 20), p)
    cam = straight_cam()
    pose = Pose.at(0.05, 1.05, 0.0)
    depth = np.full((cam.height, cam.width), np.nan)
    depth[24, 32] = 2.0
    grid.integrate_depth(depth, pose, cam)
    v, w = grid.tsdf_at(np.array([2.55, 1.05, 1.55]))  # 0.5 m behind, > tau
    assert (v, w) == (0.0, 0.0)


def test_mismatched_depth_shape_raises():
    grid = make_grid()
    cam = straight_cam()
    with pytest.raises(ValueError):
        grid.integrate_depth(np.zeros((10, 10)), Pose.at(1, 1), cam)


def test_non_finite_depth_rejected_sample():
    p = GridParams()
    grid = VoxelGrid((0.0, 0.0), (60, 20), p)
    cam = straight_cam()
    pose = Pose.at(0.05, 1.05, 0.0)
    depth = np.full((cam.height, cam.width), np.nan)
    grid.integrate_depth(depth, pose, cam)
    assert np.count_nonzero(grid.weight) == 0


def test_fusion_order_insensitive():
    cam = straight_cam()
    pose_a = Pose.at(0.05, 1.05, 0.0)
    pose_b = Pose.at(0.05, 1.05, 0.3)
    depth_a = np.full((cam.height, cam.width), 2.0)
    depth_b = np.full((cam.height, cam.width), 3.0)

    g1 = VoxelGrid((0.0, 0.0), (60, 20), GridParams())
    g1.integrate_depth(depth_a, pose_a, cam).integrate_depth(depth_b, pose_b, cam)
    g2 = VoxelGrid((0.0, 0.0), (60, 20), GridParams())
    g2.integrate_depth(depth_b, pose_b, cam).integrate_depth(depth_a, pose_a, cam)
    assert g1.shape == g2.shape
    np.testing.assert_allclose(g1.tsdf, g2.tsdf, atol=1e-6)
    np.testing.assert_allclose(g1.weight, g2.weight, atol=1e-6)


# -- expansion --------------------------------------------------------------

def test_expand_inside_bounds_is_identity():
    grid = make_grid(nx=20, ny=20)
    before = grid.bounds_xy()
    shape = grid.shape
    grid.expand((0.5, 0.5), (1.0, 1.0))
    assert grid.bounds_xy() == before and grid.shape == shape


def test_expand_preserves_world_readback():
    rng = np.random.default_rng(7)
    grid = make_grid(nx=10, ny=10)
    pts = []
    for _ in range(50):
        i, j, k = rng.integers(0, 10), rng.integers(0, 10), rng.integers(0, 35)
        grid.tsdf[i, j, k] = rng.standard_normal()
        grid.weight[i, j, k] = 1.0
        pts.append(((i + 0.5) * 0.1, (j + 0.5) * 0.1, (k + 0.5) * 0.1,
                    grid.tsdf[i, j, k]))
    grid.expand((-1.0, -0.35), (2.0, 1.0))
    assert grid.shape[0] == 30  # grew by 10 in -x and 10 in +x
    for x, y, z, val in pts:
        v, w = grid.tsdf_at(np.array([x, y, z]))
        assert w == 1.0 and v == pytest.approx(val, abs=0)


def test_expand_over_cap_raises():
    grid = make_grid(nx=10, ny=10, max_voxels=10 * 10 * 35)
    with pytest.raises(GridCapacityError):
        grid.expand((0.0, 0.0), (50.0, 50.0))
    with pytest.raises(ValueError):
        grid.expand((0.0, 0.0), (math.inf, 1.0))


# -- projection ------------------------------------------------------------

def test_projection_rules():
    grid = make_grid(nx=4, ny=1)
    cam = CameraModel(height_m=1.5)
    below = 15  # voxel centers 0.05 .. 1.45

    # column 0: free below camera height, occupied above -> traversable
    grid.weight[0, 0, :] = 1.0
    grid.tsdf[0, 0, :below] = 0.5
    grid.tsdf[0, 0, below:] = -0.5
    # column 1: one occupied voxel at 0.4 m -> not traversable
    grid.weight[1, 0, :] = 1.0
    grid.tsdf[1, 0, :] = 0.5
    grid.tsdf[1, 0, 4] = -0.5
    # column 2: fully explored; column 3 has one unexplored voxel
    grid.explored[2, 0, :] = True
    grid.explored[3, 0, :] = True
    grid.explored[3, 0, 20] = False

    m = grid.project_to_2d(cam)
    assert m.traversable[0, 0]
    assert not m.traversable[1, 0]
    assert m.explored[2, 0]
    assert not m.explored[3, 0]
    # unknown column is neither traversable nor explored
    assert not m.traversable[2, 0]


def test_projection_pure_and_idempotent():
    grid = make_grid(nx=8, ny=8)
    rng = np.random.default_rng(3)
    grid.tsdf[:] = rng.standard_normal(grid.shape).astype(np.float32)
    grid.weight[:] = (rng.random(grid.shape) > 0.5).astype(np.float32)
    cam = CameraModel()
    m1 = grid.project_to_2d(cam)
    m2 = grid.project_to_2d(cam)
    np.testing.assert_array_equal(m1.traversable, m2.traversable)
    np.testing.assert_array_equal(m1.explored, m2.explored)
    np.testing.assert_array_equal(m1.obstacle, m2.obstacle)


def test_occupancy_three_states():
    grid = make_grid(nx=2, ny=1)
    grid.weight[0, 0, 0] = 1.0
    grid.tsdf[0, 0, 0] = -0.1
    grid.weight[0, 0, 1] = 1.0
    grid.tsdf[0, 0, 1] = 0.1
    occ = grid.occupancy()
    assert occ[0, 0, 0] == OCCUPIED
    assert occ[0, 0, 1] == FREE
    assert occ[1, 0, 0] == UNKNOWN


def test_carve_free_disk_marks_explored_and_free():
    grid = make_grid(nx=20, ny=20)
    grid.carve_free_disk(np.array([1.0, 1.0]), 0.2)
    v, w = grid.tsdf_at(np.array([1.0, 1.0, 0.55]))
    assert w > 0 and v > 0
    m = grid.project_to_2d(CameraModel())
    assert m.traversable[grid.world_to_index(np.array([1.0, 1.0, 0.0]))[0][0],
                         grid.world_to_index(np.array([1.0, 1.0, 0.0]))[0][1]]
