"""Continuous-time trajectory over timestamped control poses.

Poses between knots follow the on-manifold geodesic
T(tau) = T_k exp(alpha * log(T_k^-1 T_k+1)), alpha = (tau - t_k)/(t_k+1 - t_k).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lie
from .errors import OutOfRangeError
from .lie import Pose

# Source/reference separation below which a revisit pair is not trusted; the
# +-5 s cloud extraction windows must not overlap.
MIN_PAIR_SEPARATION = 10.0


@dataclass(frozen=True)
class PlacePair:
    """A revisit: source time (current pass) matched to reference time (map pass)."""

    tau_source: float
    tau_reference: float
    index: int = 0

    @property
    def separation(self):
        return abs(self.tau_source - self.tau_reference)


class Trajectory:
    """Strictly increasing knot times with one pose per knot."""

    def __init__(self, times, poses, frame: str = "world"):
        times = np.asarray(times, dtype=float)
        if times.ndim != 1 or len(times) < 2:
            raise ValueError("need at least two knots")
        if not np.all(np.diff(times) > 0):
            raise ValueError("knot times must be strictly increasing")
        if len(poses) != len(times):
            raise ValueError("times and poses length mismatch")
        self.times = times
        self.frame = frame
        self.rotations = np.stack([p.rotation for p in poses])
        self.translations = np.stack([p.translation for p in poses])
        # Per-interval relative twists, precomputed for batched sampling.
        self._rel = np.stack(
            [
                lie.log(poses[k].inverse() @ poses[k + 1])
                for k in range(len(poses) - 1)
            ]
        )
        # Variance propagation re-queries the same handful of perturbed times
        # every solver iteration; memoize per exact float argument.
        self._pose_cache: dict = {}

    def __len__(self):
        return len(self.times)

    @property
    def span(self):
        return float(self.times[0]), float(self.times[-1])

    def pose(self, k: int) -> Pose:
        return Pose(self.rotations[k], self.translations[k])

    def _locate(self, taus):
        t0, t1 = self.span
        taus = np.asarray(taus, dtype=float)
        if np.any(taus < t0) or np.any(taus > t1):
            bad = taus[(taus < t0) | (taus > t1)]
            raise OutOfRangeError(f"time {bad.flat[0]:.6f} outside [{t0:.6f}, {t1:.6f}]")
        idx = np.clip(np.searchsorted(self.times, taus, side="right") - 1, 0, len(self.times) - 2)
        alpha = (taus - self.times[idx]) / (self.times[idx + 1] - self.times[idx])
        return idx, alpha

    def pose_at(self, tau: float) -> Pose:
        tau = float(tau)
        got = self._pose_cache.get(tau)
        if got is None:
            idx, alpha = self._locate(tau)
            base = Pose(self.rotations[idx], self.translations[idx])
            got = base @ lie.exp(alpha * self._rel[idx])
            if len(self._pose_cache) < 65536:
                self._pose_cache[tau] = got
        return got

    def sample(self, taus):
        """Batched pose_at: (M,) times -> rotations (M, 3, 3), translations (M, 3)."""
        idx, alpha = self._locate(taus)
        d_rot, d_trans = lie.exp_batch(alpha[:, None] * self._rel[idx])
        rot = self.rotations[idx] @ d_rot
        trans = np.einsum("nij,nj->ni", self.rotations[idx], d_trans) + self.translations[idx]
        return rot, trans

    def to_file(self, path):
        """One knot per line: timestamp tx ty tz qw qx qy qz."""
        with open(path, "w") as fh:
            for k in range(len(self.times)):
                q = self.pose(k).to_quat()
                t = self.translations[k]
                fh.write(
                    "%.9f %.9f %.9f %.9f %.12f %.12f %.12f %.12f\n"
                    % (self.times[k], t[0], t[1], t[2], q[0], q[1], q[2], q[3])
                )

    @staticmethod
    def from_file(path, frame: str = "world"):
        times, poses = [], []
        with open(path) as fh:
            for ln, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 8:
                    raise ValueError(f"{path}:{ln}: expected 8 columns, got {len(parts)}")
                vals = [float(x) for x in parts]
                times.append(vals[0])
                poses.append(Pose.from_quat(vals[4], vals[5], vals[6], vals[7], vals[1:4]))
        return Trajectory(np.array(times), poses, frame)


def initial_alignment(traj: Trajectory, pair: PlacePair) -> Pose:
    """Source local frame expressed in the reference local frame, from the
    trajectory alone. Accumulated drift between the two passes lands here."""
    ref = traj.pose_at(pair.tau_reference)
    src = traj.pose_at(pair.tau_source)
    return ref.inverse() @ src


def transport_sides(traj: Trajectory, first: PlacePair, current: PlacePair):
    """Bracketing transforms (ref_side, src_side) moving a current-place
    alignment to the first place: T_first = ref_side @ T_current @ src_side."""
    ref_side = (
        traj.pose_at(first.tau_reference).inverse() @ traj.pose_at(current.tau_reference)
    )
    src_side = (
        traj.pose_at(current.tau_source).inverse() @ traj.pose_at(first.tau_source)
    )
    return ref_side, src_side


def transport_to_first(alignment: Pose, traj: Trajectory, first: PlacePair, current: PlacePair) -> Pose:
    """Re-express a per-place alignment at the first matched place.

    Brackets the current-place alignment with relative transforms taken from
    the trajectory, which are treated as locally rigid: short spans accumulate
    negligible drift compared to the loop gap.
    """
    ref_side, src_side = transport_sides(traj, first, current)
    return ref_side @ alignment @ src_side
