import numpy as np
import pytest
import torch

from nerfloc.field import SceneField
from nerfloc.geometry import CameraIntrinsics, CameraPose, perturbed_pose_torch, pose_errors
from nerfloc.matcher import NerfMatcher
from nerfloc.matcher_training import matcher_config_for
from nerfloc.pose_solver import RansacConfig
from nerfloc.refinement import (
    RefineConfig,
    RefinementTrace,
    _render_pixels,
    default_mode,
    match_and_solve,
    photometric_loss_at,
    ransac_for,
    refine,
    refine_photometric,
)

from conftest import tiny_field_config
from test_matcher_training import TINY


def test_pose_tangent_gradient_matches_finite_differences():
    torch.manual_seed(0)
    f = SceneField(tiny_field_config(n_fine=0)).double()
    f.requires_grad_(False)
    K = CameraIntrinsics(20.0, 20.0, 8.0, 8.0, 16, 16)
    pose = CameraPose.look_at([0.1, -0.2, -1.0], [0, 0, 0])
    rng = np.random.default_rng(0)
    pix = rng.uniform(0, 16, (12, 2))
    target = torch.tensor(rng.uniform(size=(12, 3)))

    def loss(tau):
        R, t = perturbed_pose_torch(pose, tau)
        return ((_render_pixels(f, R, t, pix, K, 0, None) - target) ** 2).mean()

    tau = torch.tensor(rng.normal(size=6) * 0.01, requires_grad=True)
    loss(tau).backward()
    eps = 1e-6
    for k in range(6):
        e = torch.zeros(6, dtype=torch.float64)
        e[k] = eps
        with torch.no_grad():
            fd = (loss(tau + e) - loss(tau - e)).item() / (2 * eps)
        assert abs(tau.grad[k].item() - fd) <= 1e-4 * max(abs(fd), 1e-6) + 1e-9, (k, tau.grad[k].item(), fd)


def test_photometric_refinement_leaves_field_untouched(small_scene, small_field):
    ds, _ = small_scene
    q = ds.test_ids[0]
    before = {k: v.clone() for k, v in small_field.state_dict().items()}
    flags = [p.requires_grad for p in small_field.parameters()]
    start = ds.poses[q].perturbed(np.r_[np.radians([1.0, -1.0, 0.5]), 0.02, -0.01, 0.01])
    pose, losses = refine_photometric(start, ds.images[q], ds.intrinsics[q], small_field, steps=5, lr=1e-2, rays=256)
    assert len(losses) == 5 and not pose.almost_equal(start, 1e-9)
    for k, v in small_field.state_dict().items():
        assert torch.equal(v, before[k]), k
    assert [p.requires_grad for p in small_field.parameters()] == flags
    again, losses2 = refine_photometric(start, ds.images[q], ds.intrinsics[q], small_field, steps=5, lr=1e-2, rays=256)
    assert losses == losses2 and np.array_equal(again.rotation, pose.rotation)


def test_photometric_loss_at_is_deterministic_and_masked(small_scene, small_field):
    ds, _ = small_scene
    q = ds.test_ids[0]
    a = photometric_loss_at(ds.poses[q], ds.images[q], ds.intrinsics[q], small_field)
    assert a == photometric_loss_at(ds.poses[q], ds.images[q], ds.intrinsics[q], small_field)
    mask = np.zeros((32, 32), bool)
    mask[:, :16] = True
    b = photometric_loss_at(ds.poses[q], ds.images[q], ds.intrinsics[q], small_field, mask=mask)
    assert a != b


def test_config_and_modes():
    assert default_mode("full") == "iterative" and default_mode("mini") == "optimize-then-match"
    cfg = RefineConfig()
    assert cfg.lr_for("full") == 1e-5 and cfg.lr_for("mini") == 1e-3
    with pytest.raises(ValueError):
        RefineConfig(mode="bogus")
    with pytest.raises(ValueError):
        RefineConfig(lr_decay=0.0)


def test_ransac_threshold_for_coarse_only(small_field):
    mini = NerfMatcher(matcher_config_for(small_field, "mini", "f2", **TINY))
    full = NerfMatcher(matcher_config_for(small_field, "full", "f2", **TINY))
    assert ransac_for(mini, RansacConfig(3.0)).reproj_threshold_px == 8.0
    assert ransac_for(full, RansacConfig(3.0)).reproj_threshold_px == 3.0


def test_refine_off_and_failed_rounds_keep_pose(small_scene, small_field):
    ds, _ = small_scene
    q = ds.test_ids[0]
    torch.manual_seed(0)
    m = NerfMatcher(matcher_config_for(small_field, "full", "f2", threshold=0.99, **TINY)).eval()
    start = ds.poses[ds.train_ids[0]]
    pose, trace = refine(start, ds.images[q], ds.intrinsics[q], small_field, m, RefineConfig(mode="off"),
                         truth=ds.poses[q])
    assert pose is start and len(trace.poses) == 1 and trace.errors[0] == pose_errors(start, ds.poses[q])
    pose, trace = refine(start, ds.images[q], ds.intrinsics[q], small_field, m,
                         RefineConfig(mode="iterative", rounds=2))
    assert pose is start and len(trace.poses) == 3 and trace.status[1].startswith("kept")
    assert trace.errors is None
    out = match_and_solve(ds.images[q], ds.intrinsics[q], start, small_field, m)
    assert out.estimate is None and out.failure


def test_optimize_then_match_falls_back_to_optimized_pose(small_scene, small_field):
    ds, _ = small_scene
    q = ds.test_ids[0]
    m = NerfMatcher(matcher_config_for(small_field, "mini", "f2", threshold=0.99, **TINY)).eval()
    start = ds.poses[q].perturbed(np.r_[0.02, 0, 0, 0, 0.02, 0])
    cfg = RefineConfig(mode="optimize-then-match", rounds=1, opt_steps_per_round=3, lr_mini=1e-2, rays_for_photometric=128)
    pose, trace = refine(start, ds.images[q], ds.intrinsics[q], small_field, m, cfg, truth=ds.poses[q])
    assert trace.status[1].startswith("optimized only") and len(trace.losses) == 3
    assert not pose.almost_equal(start, 1e-9)


def test_trace_to_dict():
    t = RefinementTrace()
    t.record(CameraPose.identity(), "initial", CameraPose.identity())
    d = t.to_dict()
    assert d["poses"] == [[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]] and d["errors"] == [[0.0, 0.0]]
