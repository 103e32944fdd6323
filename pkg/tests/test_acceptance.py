"""Deliverable-level gate: eight end-to-end checks, one report line each.

Each test prints a single [PASS]/[FAIL] line with the measured numbers on the
live terminal (bypassing capture), then asserts. Budgets are wall-clock on a
single laptop core.
"""

import math
import time

import numpy as np
import pytest

from conftest import (
    batch_fuse_oracle,
    epipolar_features,
    fusion_camera,
    random_twists,
    synthetic_sequence,
)

from photogeo import cli, geometry, lie, vision
from photogeo.cli import ExperimentSpec
from photogeo.errors import PipelineError
from photogeo.fusion import (
    EvidenceBlock,
    EvidencePool,
    FusedAlignment,
    FusionConfig,
    SequentialFusion,
    fuse,
    validate_candidate,
)
from photogeo.lie import Pose
from photogeo.scenesim import SCENE_KINDS, NoiseSpec, build_scene, simulate_loop
from photogeo.solver import PlaceObservations, solve_alignment_robust
from photogeo.trajectory import PlacePair
from photogeo.vision import relative_camera_pose


def _report(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def _obs(place, features=None, semidirect=None):
    return PlaceObservations(pair=place.pair, cloud_source=place.cloud_source,
                             cloud_reference=place.cloud_reference,
                             features=features or [], semidirect=semidirect)


def _spd(rng, scale):
    a = rng.normal(size=(6, 6))
    return scale * (a @ a.T / 6.0 + np.eye(6))


def _pose_err(pose, truth):
    d = lie.log(pose @ truth.inverse())
    return float(np.linalg.norm(d[:3])), float(np.linalg.norm(d[3:]))


def test_criterion_1_trend_reproduction(tmp_path, capsys):
    t0 = time.perf_counter()
    spec = ExperimentSpec(scene="room", scene_seed=7, n_pairs=4, trials=50,
                          seed_base=9000, methods=("geo-only", "photogeoseq+"),
                          regimes=("easy", "medium", "hard"),
                          out=str(tmp_path / "c1"))
    rows = cli.run_experiment(spec)
    cell = {(r["method"], r["regime"]): r for r in rows}
    geo = [cell["geo-only", g]["success_rate"] for g in spec.regimes]
    pgs = [cell["photogeoseq+", g]["success_rate"] for g in spec.regimes]
    rm_easy = cell["photogeoseq+", "easy"]["et_rmse_m"]
    rm_hard = cell["photogeoseq+", "hard"]["et_rmse_m"]
    elapsed = time.perf_counter() - t0

    ok = (geo[0] >= geo[1] >= geo[2] and geo[2] < 0.5
          and all(s >= 0.9 for s in pgs)
          and rm_hard <= 3.0 * rm_easy
          and elapsed <= 600.0)
    _report(capsys, "trend-reproduction", ok,
            f"geo-only success {geo[0]:.2f}/{geo[1]:.2f}/{geo[2]:.2f}, "
            f"photogeoseq+ {pgs[0]:.2f}/{pgs[1]:.2f}/{pgs[2]:.2f}, "
            f"rmse hard {rm_hard:.4f} m vs easy {rm_easy:.4f} m, {elapsed:.0f} s")


def test_criterion_2_corridor_advantage(corridor_scene, capsys):
    t0 = time.perf_counter()
    passed = 0
    ratios = []
    for batch in range(10):
        geo_sq, joint_sq = [], []
        for trial in range(5):
            seed = 4000 + 97 * batch + trial
            loop = simulate_loop(corridor_scene, NoiseSpec(regime="medium"),
                                 n_pairs=1, seed=seed)
            place = loop.places[0]
            truth = loop.truth.pair_alignments[0]
            ref_rot = loop.truth.trajectory_true.pose_at(
                place.pair.tau_reference).rotation
            axis = ref_rot.T @ corridor_scene.axis

            try:
                est = solve_alignment_robust(_obs(place), place.init)
                d = est.pose.translation - truth.translation
                geo_sq.append(float(d @ axis) ** 2)
            except PipelineError:
                geo_sq.append(25.0)  # unusable answer scored at 5 m

            feats, _ = vision.verify_matches(place.features, loop.camera,
                                             rng=np.random.default_rng([seed, 7]))
            est = solve_alignment_robust(_obs(place, feats), place.init,
                                         cam=loop.camera, traj=loop.trajectory,
                                         rng=np.random.default_rng([seed, 8]))
            d = est.pose.translation - truth.translation
            joint_sq.append(float(d @ axis) ** 2)
        ratio = math.sqrt(np.mean(joint_sq) / np.mean(geo_sq))
        ratios.append(ratio)
        passed += ratio <= 0.25
    elapsed = time.perf_counter() - t0

    ok = passed >= 8 and elapsed <= 300.0
    _report(capsys, "corridor-advantage", ok,
            f"{passed}/10 batches with along-axis ratio <= 0.25 "
            f"(median {np.median(ratios):.4f}), {elapsed:.0f} s")


def test_criterion_3_sequential_equals_batch(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    worst_pose = 0.0
    worst_cov = 0.0
    for _ in range(200):
        base = lie.exp(rng.normal(scale=0.6, size=6))
        poses = [lie.exp(0.01 * rng.normal(size=6)) @ base for _ in range(5)]
        covs = [_spd(rng, 10.0 ** rng.uniform(-5, -4)) for _ in range(5)]

        state = FusedAlignment(poses[0], covs[0].copy())
        for p, c in zip(poses[1:], covs[1:]):
            state = fuse(state, p, c)
        ref_pose, ref_cov = batch_fuse_oracle(poses, covs)

        worst_pose = max(worst_pose, float(np.linalg.norm(
            lie.log(state.pose @ ref_pose.inverse()))))
        worst_cov = max(worst_cov, float(
            np.linalg.norm(state.covariance - ref_cov) / np.linalg.norm(ref_cov)))
    elapsed = time.perf_counter() - t0

    ok = worst_pose < 1e-3 and worst_cov < 0.01 and elapsed <= 30.0
    _report(capsys, "sequential-equals-batch", ok,
            f"200 sets: worst pose gap {worst_pose:.2e}, "
            f"worst covariance gap {100 * worst_cov:.3f}%, {elapsed:.1f} s")


def _fast_block(align, cam, n, px_sigma, rng, pair):
    """Vectorized epipolar evidence consistent with align, pixel noise only."""
    rel = relative_camera_pose(align, cam)
    m = 8 * n
    pts = np.column_stack([rng.uniform(-2.5, 2.5, m), rng.uniform(-1.5, 1.5, m),
                           rng.uniform(2.5, 7.0, m)])
    q = rel.apply(pts)
    px_s, ok_s = cam.project(pts)
    px_r, ok_r = cam.project(q)
    keep = (ok_s & ok_r & (q[:, 2] > 0.5)
            & cam.in_image(px_s, 12.0) & cam.in_image(px_r, 12.0))
    idx = np.flatnonzero(keep)
    assert len(idx) >= n
    idx = idx[:n]
    ps = px_s[idx] + rng.normal(scale=px_sigma, size=(n, 2))
    pr = px_r[idx] + rng.normal(scale=px_sigma, size=(n, 2))
    sig2 = np.full(n, max(px_sigma, 1e-3) ** 2)
    return EvidenceBlock(pair, cam.ray(ps), cam.ray(pr), sig2,
                         Pose.identity(), Pose.identity(), cam)


def test_criterion_4_chi_square_calibration(capsys):
    t0 = time.perf_counter()
    cam = fusion_camera()
    target = lie.exp(np.array([0.3, -0.15, 0.1, 0.02, -0.03, 0.015]))
    pair = PlacePair(22.0, 2.0, index=0)

    rejections = 0
    for i in range(1000):
        rng = np.random.default_rng([404, i])
        blk = _fast_block(target, cam, 60, 0.5, rng, pair)
        ok, _, _, _ = validate_candidate(EvidencePool([blk]), target, 0.95)
        rejections += not ok
    false_rate = rejections / 1000.0

    detections = 0
    for i in range(200):
        rng = np.random.default_rng([405, i])
        blk = _fast_block(target, cam, 200, 0.5, rng, pair)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        off = Pose(target.rotation, target.translation + d)
        ok, _, _, dof = validate_candidate(EvidencePool([blk]), off, 0.95)
        assert dof >= 200
        detections += not ok
    det_rate = detections / 200.0
    elapsed = time.perf_counter() - t0

    ok = 0.02 <= false_rate <= 0.08 and det_rate >= 0.95 and elapsed <= 120.0
    _report(capsys, "chi-square-calibration", ok,
            f"false rejection {100 * false_rate:.1f}% over 1000, "
            f"1 m displacement detected {100 * det_rate:.1f}% at dof >= 200, "
            f"{elapsed:.0f} s")


def test_criterion_5_false_positive_rejection(capsys):
    t0 = time.perf_counter()
    clean_seeds = 0
    worst_gap = 0.0
    for s in range(100):
        inject_at = 2 + (s % 4)
        traj, cam, ests, _ = synthetic_sequence(n_pairs=6, seed=1000 + s,
                                                displaced=(inject_at,))
        fus = SequentialFusion(traj, cam, FusionConfig(theta_th=1e-12))
        decisions = [fus.offer(e)["decision"] for e in ests]

        ref = SequentialFusion(traj, cam, FusionConfig(theta_th=1e-12))
        for k, e in enumerate(ests):
            if k != inject_at:
                ref.offer(e)

        expected = ["seed"] + ["fuse"] * 5
        expected[inject_at] = "reject"
        gap = float(np.linalg.norm(
            lie.log(fus.state.pose @ ref.state.pose.inverse())))
        worst_gap = max(worst_gap, gap)
        clean_seeds += decisions == expected and gap < 1e-6
    elapsed = time.perf_counter() - t0

    ok = clean_seeds >= 90 and elapsed <= 120.0
    _report(capsys, "false-positive-rejection", ok,
            f"{clean_seeds}/100 seeds with exactly one reject at the injected "
            f"index, worst clean-run pose gap {worst_gap:.2e}, {elapsed:.0f} s")


def test_criterion_6_numerical_suite(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(606)
    h = 1e-6

    xi = random_twists(300, 3.0, 2.0, 607)
    worst_rt = max(float(np.linalg.norm(lie.log(lie.exp(x)) - x)) for x in xi)

    def fd_cols(resid, pose):
        cols = []
        for i in range(6):
            d = np.zeros(6)
            d[i] = h
            cols.append((resid(lie.exp(d) @ pose) - resid(lie.exp(-d) @ pose))
                        / (2 * h))
        return np.column_stack(cols)

    worst_icp = 0.0
    for _ in range(100):
        k = 6
        src = rng.normal(scale=2.0, size=(k, 3))
        ref = src + rng.normal(scale=0.3, size=(k, 3))
        nrm = rng.normal(size=(k, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        pw = rng.uniform(0.2, 1.0, k)
        pose = lie.exp(random_twists(1, 0.4, 0.5, rng.integers(1 << 31))[0])
        _, jac, _ = geometry.icp_rows(src, ref, nrm, pw, pose)
        num = fd_cols(lambda a: geometry.icp_rows(src, ref, nrm, pw, a)[0], pose)
        scale = max(float(np.linalg.norm(jac)), 1.0)
        worst_icp = max(worst_icp, float(np.linalg.norm(num - jac)) / scale)

    cam = fusion_camera()
    worst_epi = 0.0
    done = 0
    while done < 100:
        align = lie.exp(random_twists(1, 0.5, 0.5, rng.integers(1 << 31))[0])
        px_s = np.column_stack([rng.uniform(0, 959, 5), rng.uniform(0, 539, 5)])
        px_r = np.column_stack([rng.uniform(0, 959, 5), rng.uniform(0, 539, 5)])
        rays_s, rays_r = cam.ray(px_s), cam.ray(px_r)
        _, jac, n = vision.epipolar_rows_batch(rays_s, rays_r, align, cam)
        if n < 1e-3:
            continue  # normalized residual is non-smooth near zero baseline
        done += 1

        def epi_resid(a):
            rel = relative_camera_pose(a, cam)
            return vision.epipolar_residuals_batch(rays_s, rays_r, rel)[0]

        num = fd_cols(epi_resid, align)
        scale = max(float(np.linalg.norm(jac)), 1.0)
        worst_epi = max(worst_epi, float(np.linalg.norm(num - jac)) / scale)

    worst_stack = 0.0
    done = 0
    while done < 100:
        k = 5
        src = rng.normal(scale=2.0, size=(k, 3))
        ref = src + rng.normal(scale=0.3, size=(k, 3))
        nrm = rng.normal(size=(k, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        pw = rng.uniform(0.2, 1.0, k)
        px_s = np.column_stack([rng.uniform(0, 959, k), rng.uniform(0, 539, k)])
        px_r = np.column_stack([rng.uniform(0, 959, k), rng.uniform(0, 539, k)])
        rays_s, rays_r = cam.ray(px_s), cam.ray(px_r)
        pose = lie.exp(random_twists(1, 0.4, 0.5, rng.integers(1 << 31))[0])
        _, jac_g, _ = geometry.icp_rows(src, ref, nrm, pw, pose)
        _, jac_e, n = vision.epipolar_rows_batch(rays_s, rays_r, pose, cam)
        if n < 1e-3:
            continue
        done += 1
        jac = np.vstack([jac_g, jac_e])

        def stacked(a):
            eg = geometry.icp_rows(src, ref, nrm, pw, a)[0]
            rel = relative_camera_pose(a, cam)
            ee = vision.epipolar_residuals_batch(rays_s, rays_r, rel)[0]
            return np.concatenate([eg, ee])

        num = fd_cols(stacked, pose)
        scale = max(float(np.linalg.norm(jac)), 1.0)
        worst_stack = max(worst_stack, float(np.linalg.norm(num - jac)) / scale)

    monotone = True
    for s in range(5):
        traj, cam2, ests, _ = synthetic_sequence(n_pairs=4, seed=660 + s)
        fus = SequentialFusion(traj, cam2, FusionConfig(theta_th=1e-12))
        recs = [fus.offer(e) for e in ests]
        eig = [r["eig_sum"] for r in recs if r["decision"] in ("seed", "fuse")]
        monotone &= all(b < a for a, b in zip(eig, eig[1:]))
    elapsed = time.perf_counter() - t0

    ok = (worst_rt < 1e-9 and worst_icp < 1e-5 and worst_epi < 1e-5
          and worst_stack < 1e-5 and monotone and elapsed <= 60.0)
    _report(capsys, "numerical-suite", ok,
            f"round trip {worst_rt:.1e}; FD gaps icp {worst_icp:.1e}, "
            f"epipolar {worst_epi:.1e}, stacked {worst_stack:.1e} "
            f"(100 instances each); uncertainty monotone in 5/5 logged runs; "
            f"{elapsed:.0f} s")


def test_criterion_7_noise_free_exactness(capsys):
    t0 = time.perf_counter()
    worst_t = worst_r = 0.0
    details = []
    for kind in SCENE_KINDS:
        scene = build_scene(kind, 7)
        loop = simulate_loop(scene, NoiseSpec.noise_free(), n_pairs=2, seed=11)
        fus = SequentialFusion(loop.trajectory, loop.camera,
                               FusionConfig(theta_th=1e-12))
        errs = []
        for k, place in enumerate(loop.places):
            feats, _ = vision.verify_matches(place.features, loop.camera,
                                             rng=np.random.default_rng([11, k]))
            est = solve_alignment_robust(_obs(place, feats), place.init,
                                         cam=loop.camera, traj=loop.trajectory,
                                         rng=np.random.default_rng([12, k]))
            errs.append(_pose_err(est.pose, loop.truth.pair_alignments[k]))
            fus.offer(est)
        errs.append(_pose_err(fus.state.pose, loop.truth.first_alignment))
        e_t = max(e[0] for e in errs)
        e_r = max(e[1] for e in errs)
        worst_t = max(worst_t, e_t)
        worst_r = max(worst_r, e_r)
        details.append(f"{kind} {e_t:.1e}m/{e_r:.1e}rad")
    elapsed = time.perf_counter() - t0

    ok = worst_t < 1e-6 and worst_r < 1e-8 and elapsed <= 60.0
    _report(capsys, "noise-free-exactness", ok,
            "; ".join(details) + f"; {elapsed:.0f} s")


def test_criterion_8_determinism(tmp_path, capsys):
    t0 = time.perf_counter()
    outs = [str(tmp_path / n) for n in ("a", "b", "c")]
    jobs = (1, 1, 2)
    for out, j in zip(outs, jobs):
        spec = ExperimentSpec(scene="room", scene_seed=7, n_pairs=2, trials=2,
                              seed_base=500, methods=("geo-only", "photogeoseq"),
                              regimes=("easy",), out=out)
        cli.run_experiment(spec, jobs=j)

    names = ("summary.csv", "trials.jsonl", "trace_photogeoseq_easy.jsonl")
    same = all(
        open(f"{outs[0]}/{n}", "rb").read() == open(f"{outs[i]}/{n}", "rb").read()
        for n in names for i in (1, 2))
    elapsed = time.perf_counter() - t0

    _report(capsys, "determinism", same,
            f"rerun and 2-worker outputs byte-identical across "
            f"{len(names)} files, {elapsed:.0f} s")
