"""Geodesic trajectory interpolation and alignment transport."""

import numpy as np
import pytest

from photogeo import lie, trajectory
from photogeo.errors import OutOfRangeError
from photogeo.lie import Pose
from photogeo.trajectory import (PlacePair, Trajectory, initial_alignment,
                                 transport_sides, transport_to_first)

from conftest import random_twists


def _smooth_pose(t):
    """Analytic path: gentle arc with a slow roll."""
    xi = np.array([0.8 * t, 0.2 * np.sin(0.3 * t), 0.05 * t,
                   0.02 * t, 0.03 * np.sin(0.2 * t), 0.1 * t])
    return lie.exp(xi)


def _make_traj(times):
    return Trajectory(times, [_smooth_pose(t) for t in times])


def test_constructor_validation():
    poses = [Pose.identity(), Pose.identity()]
    with pytest.raises(ValueError):
        Trajectory([0.0], [Pose.identity()])
    with pytest.raises(ValueError):
        Trajectory([0.0, 0.0], poses)
    with pytest.raises(ValueError):
        Trajectory([1.0, 0.5], poses)
    with pytest.raises(ValueError):
        Trajectory([0.0, 1.0], poses[:1])


def test_pose_at_hits_knots_exactly():
    times = np.linspace(0.0, 9.0, 10)
    traj = _make_traj(times)
    for k, t in enumerate(times):
        p = traj.pose_at(t)
        assert np.linalg.norm(p.rotation - traj.rotations[k]) < 1e-12
        assert np.linalg.norm(p.translation - traj.translations[k]) < 1e-12


def test_pose_at_midpoint_is_geodesic():
    a = lie.exp(random_twists(1, 0.8, 1.0, seed=30)[0])
    b = lie.exp(random_twists(1, 0.8, 1.0, seed=31)[0])
    traj = Trajectory([0.0, 2.0], [a, b])
    mid = traj.pose_at(1.0)
    expected = lie.interpolate(a, b, 0.5)
    assert np.linalg.norm(lie.log(mid.inverse() @ expected)) < 1e-12


def test_pose_at_out_of_range():
    traj = _make_traj(np.linspace(0.0, 5.0, 6))
    with pytest.raises(OutOfRangeError):
        traj.pose_at(-0.1)
    with pytest.raises(OutOfRangeError):
        traj.pose_at(5.1)


def test_pose_cache_is_transparent():
    traj = _make_traj(np.linspace(0.0, 5.0, 6))
    p1 = traj.pose_at(1.234)
    p2 = traj.pose_at(1.234)
    assert np.array_equal(p1.translation, p2.translation)
    assert np.array_equal(p1.rotation, p2.rotation)


def test_sample_matches_pose_at():
    traj = _make_traj(np.linspace(0.0, 8.0, 9))
    taus = np.array([0.0, 0.37, 2.5, 7.99, 8.0])
    rots, trans = traj.sample(taus)
    for k, tau in enumerate(taus):
        p = traj.pose_at(float(tau))
        assert np.linalg.norm(rots[k] - p.rotation) < 1e-12
        assert np.linalg.norm(trans[k] - p.translation) < 1e-12


def test_dense_vs_subsampled_agreement():
    # A 2x coarser knot set reproduces the same smooth path to 1e-3 m.
    dense = _make_traj(np.arange(0.0, 10.01, 0.25))
    coarse = _make_traj(np.arange(0.0, 10.01, 0.5))
    for tau in np.linspace(0.0, 10.0, 41):
        d = dense.pose_at(float(tau)).translation
        c = coarse.pose_at(float(tau)).translation
        assert np.linalg.norm(d - c) < 1e-3


def test_file_roundtrip(tmp_path):
    traj = _make_traj(np.linspace(0.0, 4.0, 5))
    path = tmp_path / "traj.txt"
    traj.to_file(path)
    back = Trajectory.from_file(path)
    for tau in (0.0, 1.3, 4.0):
        diff = lie.log(traj.pose_at(tau).inverse() @ back.pose_at(tau))
        assert np.linalg.norm(diff) < 1e-8


def test_file_rejects_malformed_rows(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("0.0 1 2 3 1 0 0\n")
    with pytest.raises(ValueError, match="expected 8 columns"):
        Trajectory.from_file(path)


def test_initial_alignment_definition():
    traj = _make_traj(np.linspace(0.0, 30.0, 31))
    pair = PlacePair(tau_source=25.0, tau_reference=3.0)
    got = initial_alignment(traj, pair)
    expected = traj.pose_at(3.0).inverse() @ traj.pose_at(25.0)
    assert np.linalg.norm(lie.log(got.inverse() @ expected)) < 1e-12
    assert pair.separation == 22.0


def test_transport_identity_at_first_pair():
    traj = _make_traj(np.linspace(0.0, 30.0, 31))
    first = PlacePair(25.0, 3.0, index=0)
    align = lie.exp(random_twists(1, 0.3, 0.2, seed=32)[0])
    a, b = transport_sides(traj, first, first)
    assert np.linalg.norm(lie.log(a)) < 1e-12
    assert np.linalg.norm(lie.log(b)) < 1e-12
    moved = transport_to_first(align, traj, first, first)
    assert np.linalg.norm(lie.log(moved.inverse() @ align)) < 1e-12


def test_transport_consistency_on_drift_free_path():
    # With no drift the per-place truth alignments all transport to the same
    # first-place alignment.
    times = np.linspace(0.0, 40.0, 41)
    base = _make_traj(times)
    offset = lie.exp(np.array([0.3, -0.1, 0.05, 0.02, 0.0, 0.04]))
    # second pass: same path, rigidly offset (this offset is the alignment)
    poses = [base.pose_at(t) for t in times[:21]]
    poses += [offset @ base.pose_at(t - 20.0) for t in times[21:]]
    traj = Trajectory(times, poses)
    first = PlacePair(22.0, 2.0, index=0)
    ref_align = initial_alignment(traj, first)
    for k, tau_s in enumerate((26.0, 31.5, 37.0), start=1):
        pair = PlacePair(tau_s, tau_s - 20.0, index=k)
        align = initial_alignment(traj, pair)
        moved = transport_to_first(align, traj, first, pair)
        assert np.linalg.norm(lie.log(moved.inverse() @ ref_align)) < 1e-9


def test_transport_spread_grows_with_drift():
    # Transporting trajectory-derived alignments through the same trajectory
    # telescopes exactly, drift or not. The error the local-rigidity
    # assumption actually incurs appears when the true per-place alignments
    # are transported through a drift-corrupted trajectory; that spread must
    # grow with the injected drift scale.
    times = np.linspace(0.0, 40.0, 41)
    base = _make_traj(times)
    offset = lie.exp(np.array([0.3, -0.1, 0.05, 0.0, 0.02, 0.04]))
    true_poses = [base.pose_at(t) for t in times[:21]]
    true_poses += [offset @ base.pose_at(t - 20.0) for t in times[21:]]
    truth = Trajectory(times, true_poses)
    first = PlacePair(22.0, 2.0, index=0)
    pairs = [PlacePair(tau_s, tau_s - 20.0, index=k)
             for k, tau_s in enumerate((26.0, 29.0, 33.0, 37.0), start=1)]
    ref = initial_alignment(truth, first)
    rng_steps = np.random.default_rng(33).normal(size=(len(times), 6))

    def spread(eps):
        walk = np.cumsum(eps * rng_steps, axis=0)
        drifted = Trajectory(
            times, [lie.exp(walk[k]) @ true_poses[k] for k in range(len(times))])
        devs = []
        for pair in pairs:
            align = initial_alignment(truth, pair)
            moved = transport_to_first(align, drifted, first, pair)
            devs.append(np.linalg.norm(lie.log(moved.inverse() @ ref)))
        return float(np.max(devs))

    s = [spread(e) for e in (0.0, 1e-4, 1e-3, 1e-2)]
    assert s[0] < 1e-9
    assert s[1] < s[2] < s[3]


def test_transport_telescopes_for_trajectory_alignments():
    # The cancellation itself is worth pinning: drift cannot be detected by
    # transporting alignments read off the drifted trajectory.
    times = np.linspace(0.0, 40.0, 41)
    base = _make_traj(times)
    rng_steps = np.random.default_rng(34).normal(size=(len(times), 6))
    walk = np.cumsum(1e-2 * rng_steps, axis=0)
    traj = Trajectory(times, [lie.exp(walk[k]) @ base.pose_at(t)
                              for k, t in enumerate(times)])
    first = PlacePair(22.0, 2.0, index=0)
    pair = PlacePair(33.0, 13.0, index=1)
    moved = transport_to_first(initial_alignment(traj, pair), traj, first, pair)
    ref = initial_alignment(traj, first)
    assert np.linalg.norm(lie.log(moved.inverse() @ ref)) < 1e-9


def test_min_pair_separation_constant():
    # Extraction windows are +-5 s, so trusted pairs must sit at least 10 s apart.
    assert trajectory.MIN_PAIR_SEPARATION == 10.0
