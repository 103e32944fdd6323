import numpy as np
import pytest

from photogeo import lie, scenesim
from photogeo.lie import Pose
from photogeo.scenesim import NoiseSpec
from photogeo.solver import AlignmentEstimate
from photogeo.trajectory import PlacePair, Trajectory, initial_alignment
from photogeo.vision import Camera, FeatureMatch, relative_camera_pose


@pytest.fixture(scope="session")
def room_scene():
    return scenesim.build_scene("room", 7)


@pytest.fixture(scope="session")
def corridor_scene():
    return scenesim.build_scene("corridor", 7)


@pytest.fixture(scope="session")
def easy_loop(room_scene):
    return scenesim.simulate_loop(room_scene, NoiseSpec(regime="easy"), n_pairs=1, seed=42)


@pytest.fixture(scope="session")
def clean_loop(room_scene):
    return scenesim.simulate_loop(room_scene, NoiseSpec.noise_free(), n_pairs=2, seed=11)


def random_twists(n, rot_cap, trans_scale, seed):
    """(n, 6) twists, rotation magnitude uniform in [0, rot_cap]."""
    rng = np.random.default_rng(seed)
    xi = np.empty((n, 6))
    ax = rng.normal(size=(n, 3))
    ax /= np.linalg.norm(ax, axis=1, keepdims=True)
    xi[:, 3:] = ax * rng.uniform(0.0, rot_cap, size=(n, 1))
    xi[:, :3] = rng.normal(scale=trans_scale, size=(n, 3))
    return xi


def fusion_camera():
    """Camera with zero extrinsic/temporal uncertainty: propagated feature
    variances reduce to the pixel term exactly."""
    mount = lie.exp(np.array([0.05, -0.02, 0.08, 0.01, -0.02, 0.015]))
    return Camera(fx=450.0, fy=450.0, cx=479.5, cy=269.5, lidar_from_camera=mount)


def epipolar_features(align, cam, n, px_sigma, rng, pair_index=0):
    """n FeatureMatch rows exactly consistent with `align` up to pixel noise."""
    rel = relative_camera_pose(align, cam)
    sig2 = max(px_sigma, 1e-3) ** 2
    feats = []
    tries = 0
    while len(feats) < n and tries < 100 * n:
        tries += 1
        p = np.array([rng.uniform(-2.5, 2.5), rng.uniform(-1.5, 1.5),
                      rng.uniform(2.5, 7.0)])
        q = rel.apply(p)
        if q[2] < 0.5:
            continue
        px_s, _ = cam.project(p)
        px_r, _ = cam.project(q)
        if not (cam.in_image(px_s, 12.0)[0] and cam.in_image(px_r, 12.0)[0]):
            continue
        px_s = px_s + rng.normal(scale=px_sigma, size=2)
        px_r = px_r + rng.normal(scale=px_sigma, size=2)
        feats.append(FeatureMatch(cam.ray(px_s), cam.ray(px_r), px_s, px_r,
                                  sig2, pair_index=pair_index))
    if len(feats) < n:
        raise RuntimeError("synthetic view frustum too tight for requested count")
    return feats


def synthetic_sequence(n_pairs=6, seed=0, displaced=(), displacement=1.0,
                       n_features=40, px_sigma=0.5, sig_t=2e-4, sig_r=1.5e-4):
    """Two-pass trajectory plus per-pair estimates with self-consistent evidence.

    The second pass is a rigid offset of the first shifted by 20 s, so pair k
    (reference 2 + 3k s, source 22 + 3k s) sees the offset conjugated by the
    local pose and every pair transports to the first one exactly. Pairs in
    `displaced` get their generating alignment shifted by `displacement`
    meters; their estimate AND evidence agree with the shifted pose, modeling
    a confidently wrong match. Returns (traj, cam, estimates, truth_first).
    """
    rng = np.random.default_rng(seed)
    cam = fusion_camera()
    times = np.arange(51.0)
    offset = lie.exp(np.array([0.32, -0.2, 0.12, 0.02, 0.015, -0.03]))

    def base(t):
        xi = np.array([0.55 * t, 0.2 * np.sin(0.23 * t), 0.04 * t,
                       0.012 * t, 0.02 * np.sin(0.17 * t), 0.05 * t])
        return lie.exp(xi)

    poses = [base(t) for t in times[:21]]
    poses += [offset @ base(t - 20.0) for t in times[21:]]
    traj = Trajectory(times, poses)

    first = PlacePair(22.0, 2.0, index=0)
    truth_first = initial_alignment(traj, first)

    ests = []
    for k in range(n_pairs):
        pair = PlacePair(22.0 + 3.0 * k, 2.0 + 3.0 * k, index=k)
        gen = initial_alignment(traj, pair)
        if k in displaced:
            d = rng.normal(size=3)
            d *= displacement / np.linalg.norm(d)
            gen = Pose(gen.rotation, gen.translation + d)
        delta = np.concatenate([rng.normal(scale=sig_t, size=3),
                                rng.normal(scale=sig_r, size=3)])
        feats = epipolar_features(gen, cam, n_features, px_sigma, rng, pair_index=k)
        cov = np.diag([sig_t ** 2] * 3 + [sig_r ** 2] * 3)
        ests.append(AlignmentEstimate(
            pose=lie.exp(delta) @ gen, covariance=cov, iterations=5,
            converged=True, n_surfel_matches=120, n_features=len(feats),
            cost=1.0, cost_geometric=0.5, cost_photometric=0.5,
            inlier_rate=1.0, sigma2=1.0, alpha=1.0, beta=1.0, pair=pair,
            inlier_features=feats))
    return traj, cam, ests, truth_first


def batch_fuse_oracle(poses, covs, iters=60, tol=1e-13):
    """All-at-once Gauss-Newton pose average with left-tangent pullbacks.

    Independent of the incremental code path: accumulates every estimate in
    one normal system per iteration and reports the information inverse at
    the converged mean.
    """
    infos = [np.linalg.inv(c) for c in covs]
    t = poses[0]
    for _ in range(iters):
        a = np.zeros((6, 6))
        b = np.zeros(6)
        for p, info in zip(poses, infos):
            xi = lie.log(p @ t.inverse())
            j = lie.inv_left_jacobian(xi)
            a += j.T @ info @ j
            b += j.T @ info @ xi
        step = np.linalg.solve(a, b)
        t = lie.exp(step) @ t
        if np.linalg.norm(step) < tol:
            break
    a = np.zeros((6, 6))
    for p, info in zip(poses, infos):
        xi = lie.log(p @ t.inverse())
        j = lie.inv_left_jacobian(xi)
        a += j.T @ info @ j
    return t, np.linalg.inv(a)
