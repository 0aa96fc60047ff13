"""Acceptance criteria A1-A8 on miniature configurations and the desk-scale synthetic scene.

Each test appends one PASS/FAIL line to the terminal summary. Set
``NERFLOC_ACCEPTANCE_CACHE=<dir>`` to reuse trained fields and matchers
between runs; without it everything is trained from scratch.
"""
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from click.testing import CliRunner

from nerfloc.cli import localize_scene, main
from nerfloc.config import load_run_config
from nerfloc.field import SceneField
from nerfloc.geometry import (CameraIntrinsics, CameraPose, perturbed_pose_torch, pose_errors, project_points,
                              so3_exp)
from nerfloc.matcher import NerfMatcher, encode_batch, gt_associations, load_matcher, pair_loss, save_matcher
from nerfloc.matcher_training import TrainingScene, matcher_config_for, train_matcher
from nerfloc.metrics import record_errors
from nerfloc.nerf_training import load_field, photometric_loss, save_field, train_scene
from nerfloc.pose_solver import RansacConfig, ransac_pnp
from nerfloc.refinement import _render_pixels, photometric_loss_at, refine_photometric
from nerfloc.rendering import composite_samples, composite_weights, render_rays, render_view, sample_deltas
from nerfloc.retrieval import build_database, describe, topk
from nerfloc.scene_data import SyntheticSceneSpec, generate_synthetic

from conftest import ACCEPTANCE_LINES, tiny_field_config
from test_matcher import tiny_matcher_config, toy_points
from test_nerf_training import central_difference

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
CACHE = os.environ.get("NERFLOC_ACCEPTANCE_CACHE")


def report(criterion: str, ok: bool, detail: str) -> None:
    line = f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def summary(records, diameter, t_frac, r_deg):
    e = np.array([record_errors(r) for r in records])
    ok = (e[:, 0] < t_frac * diameter) & (e[:, 1] < r_deg)
    return float(np.median(e[:, 0])), float(np.median(e[:, 1])), float(ok.mean())


# -- A1 ----------------------------------------------------------------------

def test_a1_rendering_oracle():
    rng = np.random.default_rng(0)
    torch.manual_seed(0)
    field_ = SceneField(tiny_field_config()).double()
    t0 = time.perf_counter()
    worst = 0.0
    for b in range(1000):
        R, N = int(rng.integers(1, 5)), int(rng.integers(2, 17))
        sigma = rng.exponential(rng.uniform(0.1, 20.0), (R, N))
        delta = rng.uniform(1e-3, 0.3, (R, N))
        if b % 2:
            delta[:, -1] = 1e10
        w = composite_weights(torch.tensor(sigma), torch.tensor(delta)).numpy()
        # independent oracle: running product of survival probabilities
        T = np.ones(R)
        ref = np.zeros((R, N))
        for i in range(N):
            survive = np.exp(-sigma[:, i] * delta[:, i])
            ref[:, i] = T * (1.0 - survive)
            T = T * survive
        worst = max(worst, float(np.max(np.abs(w - ref) / np.maximum(np.abs(ref), 1e-300))))
    # color and surface point are the weight-averaged sample quantities
    o = torch.zeros(3, 3, dtype=torch.float64)
    d = torch.nn.functional.normalize(torch.tensor(rng.normal(size=(3, 3))), dim=-1)
    t = torch.sort(torch.tensor(rng.uniform(0.1, 2.0, (3, 10))), -1)[0]
    out = composite_samples(field_, o, d, t)
    pts = o[:, None] + t[..., None] * d[:, None]
    sigma, rgb, _ = field_(pts, d[:, None].expand_as(pts))
    wts = composite_weights(sigma, sample_deltas(t))
    rel_c = float(((out.color.detach() - (wts[..., None] * rgb).sum(1)).abs() / (wts[..., None] * rgb).sum(1).abs()).max())
    rel_p = float(((out.points - (wts[..., None] * pts).sum(1)).abs().max() / pts.abs().max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and rel_c <= 1e-6 and rel_p <= 1e-6 and elapsed < 5.0
    report("A1", ok, f"max relative weight error {worst:.2e}, compositing {max(rel_c, rel_p):.2e} "
                     f"over 1000 batches in {elapsed:.2f}s (limits 1e-6, 5s)")
    assert ok


# -- A2 ----------------------------------------------------------------------

def _max_rel_error(pairs):
    # central differences with eps 1e-6 on O(1) losses carry ~1e-9 round-off, so a relative
    # tolerance of 1e-4 is only meaningful for gradients above ~1e-5; smaller ones use that floor
    return max(abs(a - f) / max(abs(f), 1e-5) for a, f in pairs)


def _randomize_batchnorm(module, gen):
    # fresh BatchNorm layers map all-padding inputs to exactly zero, which sits on the ReLU kink
    for bn in module.modules():
        if isinstance(bn, torch.nn.BatchNorm2d):
            with torch.no_grad():
                for t in (bn.weight, bn.bias, bn.running_mean):
                    t.add_(0.1 * torch.randn(t.shape, generator=gen, dtype=t.dtype))
                bn.running_var.mul_(torch.rand(bn.running_var.shape, generator=gen, dtype=bn.running_var.dtype) + 0.5)


def test_a2_gradient_checks():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    g = torch.Generator().manual_seed(0)

    # photometric loss w.r.t. field parameters (stratified midpoints so depths stay fixed)
    torch.manual_seed(0)
    f = SceneField(tiny_field_config(n_fine=0)).double()
    o = torch.tensor(rng.uniform(-0.1, 0.1, (6, 3)))
    d = torch.nn.functional.normalize(torch.tensor(rng.normal(size=(6, 3))), dim=-1)
    target = torch.tensor(rng.uniform(0, 1, (6, 3)))

    def field_loss():
        return photometric_loss(render_rays(f, o, d, appearance_id=0).color, target)

    field_loss().backward()
    field_pairs = []
    for p in f.parameters():
        for _ in range(4):
            idx = tuple(int(torch.randint(s, (1,), generator=g)) for s in p.shape)
            field_pairs.append((p.grad[idx].item(), central_difference(field_loss, p, idx)))

    # L_c + L_f w.r.t. matcher parameters
    torch.manual_seed(0)
    m = NerfMatcher(tiny_matcher_config()).double().eval()
    _randomize_batchnorm(m, g)
    K = CameraIntrinsics(20.0, 20.0, 8.0, 8.0, 16, 16)
    pts = toy_points(rng, 5)
    pts.points[:] = [[0.01, 0.02, 1.0], [-0.2, -0.2, 1.0], [0.2, -0.25, 1.0], [-0.25, 0.2, 1.0], [3, 3, 1.0]]
    gt = gt_associations(pts, CameraPose.identity(), K)
    image = torch.tensor(rng.uniform(size=(1, 3, 16, 16)))

    def matcher_loss():
        return pair_loss(m, encode_batch(m.encoder, image)[0], pts, gt, detach_variance=False)[0]

    matcher_loss().backward()
    matcher_pairs = []
    for p in m.parameters():
        if p.grad is None:
            continue
        for _ in range(2):
            idx = tuple(int(torch.randint(s, (1,), generator=g)) for s in p.shape)
            matcher_pairs.append((p.grad[idx].item(), central_difference(matcher_loss, p, idx)))

    # photometric loss w.r.t. the pose tangent
    f.requires_grad_(False)
    pose = CameraPose.look_at([0.1, -0.2, -1.0], [0, 0, 0])
    pix = rng.uniform(0, 16, (12, 2))
    tgt = torch.tensor(rng.uniform(size=(12, 3)))

    def pose_loss(tau):
        R, t = perturbed_pose_torch(pose, tau)
        return ((_render_pixels(f, R, t, pix, K, 0, None) - tgt) ** 2).mean()

    tau = torch.tensor(rng.normal(size=6) * 0.01, requires_grad=True)
    pose_loss(tau).backward()
    pose_pairs = []
    for k in range(6):
        e = torch.zeros(6, dtype=torch.float64)
        e[k] = 1e-6
        with torch.no_grad():
            pose_pairs.append((tau.grad[k].item(), (pose_loss(tau + e) - pose_loss(tau - e)).item() / 2e-6))

    errs = [_max_rel_error(x) for x in (field_pairs, matcher_pairs, pose_pairs)]
    elapsed = time.perf_counter() - t0
    ok = max(errs) <= 1e-4 and elapsed < 60
    report("A2", ok, f"max relative gradient error field {errs[0]:.1e} ({len(field_pairs)} entries), matcher "
                     f"{errs[1]:.1e} ({len(matcher_pairs)}), pose {errs[2]:.1e} (6) in {elapsed:.1f}s "
                     f"(limits 1e-4, 60s)")
    assert ok


# -- A3 ----------------------------------------------------------------------

def _pnp_problem(rng, n, K):
    """Random camera and ``n`` points back-projected from pixels spread over a 640x480 frame at 1-3 m depth."""
    pose = CameraPose.look_at(rng.uniform(-1, 1, 3) + [0, 0, 2.0], rng.uniform(-0.2, 0.2, 3))
    pix = rng.uniform([0, 0], [K.width, K.height], (n, 2))
    z = rng.uniform(1.0, 3.0, n)
    cam = np.stack([(pix[:, 0] - K.cx) / K.fx, (pix[:, 1] - K.cy) / K.fy, np.ones(n)], -1) * z[:, None]
    X = pose.transform_points(cam)
    diameter = float(np.linalg.norm(X.max(0) - X.min(0)))
    return pose, pix, X, diameter


def test_a3_pose_solver():
    t0 = time.perf_counter()
    K = CameraIntrinsics(525.0, 525.0, 320.0, 240.0, 640, 480)
    rng = np.random.default_rng(0)
    worst_clean = 0.0
    for _ in range(20):
        pose, pix, X, _ = _pnp_problem(rng, 50, K)
        est = ransac_pnp(pix, X, K)
        worst_clean = max(worst_clean, *pose_errors(est.pose, pose))
    recovered = 0
    for trial in range(100):
        rng = np.random.default_rng(1000 + trial)
        pose, pix, X, diameter = _pnp_problem(rng, 100, K)
        pix = pix + rng.normal(0, 1.0, pix.shape)
        bad = rng.choice(100, 50, replace=False)
        pix[bad] = rng.uniform([0, 0], [K.width, K.height], (50, 2))
        try:
            est = ransac_pnp(pix, X, K, RansacConfig(seed=trial))
        except Exception:
            continue
        t, r = pose_errors(est.pose, pose)
        recovered += int(r <= 0.5 and t <= 0.01 * diameter)
    elapsed = time.perf_counter() - t0
    ok = worst_clean <= 1e-6 and recovered >= 95 and elapsed < 60
    report("A3", ok, f"noise-free worst error {worst_clean:.1e}; {recovered}/100 trials with 50% outliers and 1 px "
                     f"noise within 0.5 deg and 1% diameter in {elapsed:.1f}s (limits 1e-6, 95/100, 60s)")
    assert ok


# -- desk-scale scene ---------------------------------------------------------

DESK_MINI = load_run_config(CONFIGS / "desk_mini.conf")
DESK_FULL = load_run_config(CONFIGS / "desk_full.conf")


def _cache_path(name):
    if not CACHE:
        return None
    Path(CACHE).mkdir(parents=True, exist_ok=True)
    return Path(CACHE) / name


@pytest.fixture(scope="session")
def desk():
    ds, scene = generate_synthetic(SyntheticSceneSpec(seed=0))
    assert (len(ds.train_ids), len(ds.test_ids), ds.intrinsics[ds.ids[0]].width) == (20, 10, 96)
    path = _cache_path("field")
    meta = path.with_name("field.meta.json") if path else None
    if path and meta.exists():
        field_ = load_field(path)
        info = json.loads(meta.read_text())
    else:
        t0 = time.perf_counter()
        res = train_scene(ds, DESK_MINI.nerf, seed=DESK_MINI.seed)
        info = {"psnr": res.train_psnr, "seconds": time.perf_counter() - t0}
        field_ = res.field
        if path:
            save_field(field_, path)
            meta.write_text(json.dumps(info))
    return {"ds": ds, "scene": scene, "field": field_, "info": info, "timings": {}}


def _matcher(desk, cfg, source, name):
    path = _cache_path(name)
    if path and path.with_name(name + ".json").exists():
        return load_matcher(path), json.loads(path.with_name(name + ".meta.json").read_text())["seconds"]
    field_ = desk["field"]
    opts = cfg.matcher
    mc = matcher_config_for(field_, opts.variant, source, **opts.overrides())
    t0 = time.perf_counter()
    res = train_matcher([TrainingScene("desk", desk["ds"], field_)], opts.variant, "per-scene", cfg.matcher_train,
                        seed=cfg.seed, matcher_config=mc)
    seconds = time.perf_counter() - t0
    if path:
        save_matcher(res.matcher, path)
        path.with_name(name + ".meta.json").write_text(json.dumps({"seconds": seconds}))
    return res.matcher, seconds


@pytest.fixture(scope="session")
def mini_f3(desk):
    return _matcher(desk, DESK_MINI, "f3", "mini_f3")


@pytest.fixture(scope="session")
def full_f3(desk):
    return _matcher(desk, DESK_FULL, "f3", "full_f3")


def _localize(desk, matcher, cfg, out_dir, **kw):
    ds = desk["ds"]
    return localize_scene(ds, "desk", desk["field"], matcher, cfg, ds.test_ids, Path(out_dir) / "results.jsonl", **kw)


# -- A4 ----------------------------------------------------------------------

@pytest.mark.slow
def test_a4_end_to_end(desk, mini_f3, tmp_path):
    ds = desk["ds"]
    matcher, train_s = mini_f3
    t0 = time.perf_counter()
    recs = _localize(desk, matcher, DESK_MINI, tmp_path)
    loc_s = time.perf_counter() - t0
    med_t, med_r, rec = summary(recs, ds.diameter, 0.05, 5.0)
    psnr = desk["info"]["psnr"]
    total = desk["info"]["seconds"] + train_s + loc_s
    ok = psnr >= 25 and med_t <= 0.02 * ds.diameter and med_r <= 2.0 and rec >= 0.8 and total <= 900
    report("A4", ok, f"PSNR {psnr:.2f} (>= 25); median {med_t:.4f} ({100 * med_t / ds.diameter:.2f}% diameter, "
                     f"<= 2%), {med_r:.2f} deg (<= 2); recall {100 * rec:.0f}% (>= 80%); "
                     f"{total:.0f}s total (<= 900)")
    assert ok


@pytest.mark.slow
def test_depth_agreement_invariant(desk):
    """Rendered depth of opaque rays against the analytic depth (median within 5% of diameter)."""
    ds, field_ = desk["ds"], desk["field"]
    errs = []
    for i in ds.train_ids[::4]:
        pose, K = ds.poses[i], ds.intrinsics[i]
        v = render_view(pose, K, 4, field_)
        z_axis = pose.R[:, 2]
        dirs = v.points - pose.center
        z_rendered = dirs @ z_axis
        z_true = ds.depths[i][2::4, 2::4].reshape(-1)
        keep = (v.opacity > 0.9) & np.isfinite(z_true)
        errs.append(np.abs(z_rendered[keep] - z_true[keep]))
    med = float(np.median(np.concatenate(errs)))
    assert med <= 0.05 * ds.diameter


# -- A5 ----------------------------------------------------------------------

@pytest.mark.slow
def test_a5_feature_source_ordering(desk, mini_f3, tmp_path):
    ds = desk["ds"]
    cfg = load_run_config(CONFIGS / "desk_mini.conf", ["refine.mode=off", "localize.fallback_to_retrieval=false"])
    recalls = {}
    for src in ("f3", "pt3d", "f7"):
        matcher = mini_f3[0] if src == "f3" else _matcher(desk, cfg, src, f"mini_{src}")[0]
        recs = _localize(desk, matcher, cfg, tmp_path / src)
        recalls[src] = summary(recs, ds.diameter, 0.05, 5.0)[2]
    gap = recalls["f3"] - recalls["pt3d"]
    ok = gap >= 0.2 and recalls["f7"] <= recalls["f3"]
    report("A5", ok, f"recall f3 {100 * recalls['f3']:.0f}%, pt3d {100 * recalls['pt3d']:.0f}%, "
                     f"f7 {100 * recalls['f7']:.0f}% (f3 - pt3d >= 20 points, f7 <= f3)")
    assert ok


# -- A6 ----------------------------------------------------------------------

@pytest.mark.slow
def test_a6_refinement(desk, full_f3, tmp_path):
    ds, field_ = desk["ds"], desk["field"]
    recs = _localize(desk, full_f3[0], DESK_FULL, tmp_path)
    init = np.array([r["init_t_err"] if r["init_t_err"] is not None else np.inf for r in recs])
    final = np.array([record_errors(r)[0] for r in recs])
    improved = float((final < init).mean())
    iter_ok = np.median(final) <= np.median(init) and improved >= 0.5

    rng = np.random.default_rng(0)
    reductions = []
    rc = DESK_MINI.refine
    for q in ds.test_ids:
        truth, K = ds.poses[q], ds.intrinsics[q]
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        shift = rng.normal(size=3)
        shift /= np.linalg.norm(shift)
        start = CameraPose.from_matrix(so3_exp(axis * math.radians(2.0)) @ truth.R,
                                       truth.translation + 0.02 * ds.diameter * shift)
        app = ds.sequence_index(q)
        before = photometric_loss_at(start, ds.images[q], K, field_, appearance_id=app)
        pose, _ = refine_photometric(start, ds.images[q], K, field_, 50, rc.lr_mini, rc.lr_decay,
                                     rc.rays_for_photometric, rc.seed, app)
        after = photometric_loss_at(pose, ds.images[q], K, field_, appearance_id=app)
        reductions.append(1.0 - after / before)
    med_red = float(np.median(reductions))
    photo_ok = med_red >= 0.5
    ok = iter_ok and photo_ok
    report("A6", ok, f"iterative round: median translation {np.median(init):.4f} -> {np.median(final):.4f}, "
                     f"improved on {100 * improved:.0f}% (>= 50%); photometric 50 steps from 2 deg / 2% diameter: "
                     f"median loss reduction {100 * med_red:.0f}% (min {100 * min(reductions):.0f}%, >= 50%)")
    assert ok


# -- A7 ----------------------------------------------------------------------

def test_a7_metrics(tmp_path):
    canned = [
        ("KingsCollege", 0.30, 2.0), ("KingsCollege", 0.50, 1.0), ("KingsCollege", 0.10, 6.0),
        ("ShopFacade", 0.14, 4.9), ("ShopFacade", 0.16, 1.0), ("ShopFacade", 0.02, 0.5), ("ShopFacade", 0.03, 0.4),
    ]
    path = tmp_path / "results.jsonl"
    path.write_text("".join(json.dumps({"query": f"q{k}", "scene": s, "t_err": t, "r_err": r, "localized": True})
                            + "\n" for k, (s, t, r) in enumerate(canned)))
    runner = CliRunner()
    res = runner.invoke(main, ["evaluate", "--results", str(path), "--scene-thresholds", "cambridge",
                               "--no-plots", "--out", str(tmp_path / "cam")])
    cam = (tmp_path / "cam" / "metrics.txt").read_text().splitlines()
    # hand arithmetic: Kings medians 0.30 m / 2.0 deg, recall 1/3 at 0.38 m (0.10 m fails on 6 deg);
    # Shop medians (0.03+0.14)/2 m and (0.5+1.0)/2 deg, recall 3/4 at 0.15 m (0.16 m fails)
    expect_cam = [
        "scene n median_t median_r recall t_thresh r_thresh",
        "KingsCollege 3 0.300000 2.000000 0.333333 0.380000 5.000000",
        "ShopFacade 4 0.085000 0.750000 0.750000 0.150000 5.000000",
        "average 7 0.192500 1.375000 0.541667 - -",
    ]
    res2 = runner.invoke(main, ["evaluate", "--results", str(path), "--no-plots", "--out", str(tmp_path / "std")])
    std = (tmp_path / "std" / "metrics.txt").read_text().splitlines()
    # 5 cm / 5 deg: only 0.02 m and 0.03 m pass
    expect_std = [
        "scene n median_t median_r recall t_thresh r_thresh",
        "KingsCollege 3 0.300000 2.000000 0.000000 0.050000 5.000000",
        "ShopFacade 4 0.085000 0.750000 0.500000 0.050000 5.000000",
        "average 7 0.192500 1.375000 0.250000 - -",
    ]
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    res3 = runner.invoke(main, ["evaluate", "--results", str(empty), "--out", str(tmp_path / "e")])
    ok = (res.exit_code == 0 and res2.exit_code == 0 and cam == expect_cam and std == expect_std
          and res3.exit_code != 0)
    report("A7", ok, "canned per-scene (38/22/15/35/45 cm) and 5 cm / 5 deg tables match hand arithmetic; "
                     "empty results rejected")
    assert ok


# -- A8 ----------------------------------------------------------------------

@pytest.mark.slow
def test_a8_nerf_only_retrieval(desk, mini_f3, tmp_path):
    ds, field_ = desk["ds"], desk["field"]
    matcher = mini_f3[0]
    real = build_database(ds, matcher, source="real")
    synth = build_database(ds, matcher, source="synthesized", field_=field_)
    agree = np.mean([topk(describe(ds.images[q], matcher), real, 1)[0][0].name
                     == topk(describe(ds.images[q], matcher), synth, 1)[0][0].name for q in ds.test_ids])
    recs = _localize(desk, matcher, DESK_MINI, tmp_path, retrieval_db="synthesized")
    med_t, med_r, rec = summary(recs, ds.diameter, 0.05 * 1.5, 5.0 * 1.5)
    ok = agree >= 0.8 and med_t <= 0.03 * ds.diameter and med_r <= 3.0 and rec >= 0.8
    report("A8", ok, f"top-1 agreement {100 * agree:.0f}% (>= 80%); synthesized database median {med_t:.4f} "
                     f"({100 * med_t / ds.diameter:.2f}% diameter, <= 3%), {med_r:.2f} deg (<= 3); recall at "
                     f"7.5% / 7.5 deg {100 * rec:.0f}% (>= 80%)")
    assert ok
