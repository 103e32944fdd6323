"""Multi-resolution surfel extraction and point-to-plane constraint rows.

Clouds are voxelized at several sizes; each populated voxel becomes a surfel
(centroid, smallest-eigenvector normal, planarity weight). Matching runs per
level through a grid hash over centroid bins and scores candidates in the
joint centroid (+) normal space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InsufficientGeometryError
from .lie import Pose, exp, skew
from .trajectory import Trajectory

DEFAULT_LEVELS = (0.3, 0.8, 1.5)
MIN_VOXEL_POINTS = 5
# Distance gate on centroids, in units of the level's voxel size.
GATE_FACTOR = 2.0
# Meters of centroid distance traded per unit of normal distance.
NORMAL_SCALE = 1.0
# Planarity weights live in (0, 1]; exact-zero weights would drop rows from
# the information matrix in a discontinuous way.
WEIGHT_FLOOR = 1e-6

EXTRACT_TIME_WINDOW = 5.0
EXTRACT_RADIUS = 10.0


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3)
    times: Optional[np.ndarray] = None  # (N,) acquisition stamps, optional
    frame: str = "world"

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class Surfel:
    centroid: np.ndarray
    normal: np.ndarray
    weight: float
    level: float
    count: int


@dataclass(frozen=True)
class SurfelMatch:
    source: Surfel
    reference: Surfel
    weight: float  # combined planarity weight of the pair


@dataclass
class SurfelArrays:
    """Column layout of a surfel set; the solver-side representation."""

    centroids: np.ndarray  # (S, 3)
    normals: np.ndarray  # (S, 3)
    weights: np.ndarray  # (S,)
    levels: np.ndarray  # (S,) voxel size per surfel

    def __len__(self):
        return len(self.weights)


def extract_cloud(world: PointCloud, traj: Trajectory, tau: float,
                  time_window: float = EXTRACT_TIME_WINDOW,
                  radius: float = EXTRACT_RADIUS) -> PointCloud:
    """Select points near the pose at tau and express them in its local frame."""
    pose = traj.pose_at(tau)
    mask = np.ones(len(world), dtype=bool)
    if world.times is not None:
        mask &= np.abs(world.times - tau) <= time_window
    d = np.linalg.norm(world.points - pose.translation, axis=1)
    mask &= d <= radius
    if not np.any(mask):
        raise InsufficientGeometryError(f"no points within {radius} m / {time_window} s of tau={tau}")
    local = (world.points[mask] - pose.translation) @ pose.rotation
    times = world.times[mask] if world.times is not None else None
    return PointCloud(local, times, frame=f"lidar@{tau:.3f}")


def _pack_keys(ijk):
    """(N, 3) integer cells -> single int64 keys (21 bits per axis)."""
    off = np.int64(1 << 20)
    return ((ijk[:, 0] + off) << 42) | ((ijk[:, 1] + off) << 21) | (ijk[:, 2] + off)


def _level_surfels(points, size, min_points, origin):
    ijk = np.floor(points / size).astype(np.int64)
    keys = _pack_keys(ijk)
    order = np.argsort(keys, kind="stable")
    keys_s = keys[order]
    pts = points[order]
    starts = np.flatnonzero(np.concatenate([[True], keys_s[1:] != keys_s[:-1]]))
    counts = np.diff(np.concatenate([starts, [len(keys_s)]]))
    keep = counts >= min_points
    if not np.any(keep):
        return None

    sums = np.add.reduceat(pts, starts, axis=0)[keep]
    outer = (pts[:, :, None] * pts[:, None, :]).reshape(len(pts), 9)
    sq = np.add.reduceat(outer, starts, axis=0)[keep].reshape(-1, 3, 3)
    n = counts[keep].astype(float)[:, None]
    cent = sums / n
    cov = sq / n[:, :, None] - cent[:, :, None] * cent[:, None, :]

    evals, evecs = np.linalg.eigh(cov)  # ascending eigenvalues
    lam3 = evals[:, 2]
    ok = lam3 > 1e-12
    if not np.any(ok):
        return None
    cent, evals, evecs, n = cent[ok], evals[ok], evecs[ok], n[ok]
    normal = evecs[:, :, 0]
    weight = np.clip((evals[:, 1] - evals[:, 0]) / evals[:, 2], WEIGHT_FLOOR, 1.0)

    # Orient normals toward the sensor so that signed matching can tell
    # opposite-facing surfaces apart.
    toward = origin - cent
    flip = np.einsum("ij,ij->i", normal, toward) < 0
    normal[flip] *= -1.0
    return cent, normal, weight, n[:, 0].astype(int)


def build_surfel_arrays(cloud: PointCloud, levels=DEFAULT_LEVELS,
                        min_points: int = MIN_VOXEL_POINTS, origin=None) -> SurfelArrays:
    if origin is None:
        origin = np.zeros(3)
    pts = np.asarray(cloud.points, dtype=float)
    cents, norms, ws, lvls = [], [], [], []
    for size in levels:
        got = _level_surfels(pts, float(size), min_points, origin)
        if got is None:
            continue
        c, nrm, w, _ = got
        cents.append(c)
        norms.append(nrm)
        ws.append(w)
        lvls.append(np.full(len(w), float(size)))
    if not cents:
        return SurfelArrays(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0))
    return SurfelArrays(
        np.concatenate(cents), np.concatenate(norms), np.concatenate(ws), np.concatenate(lvls)
    )


def build_surfels(cloud: PointCloud, levels=DEFAULT_LEVELS,
                  min_points: int = MIN_VOXEL_POINTS, origin=None) -> list[Surfel]:
    arr = build_surfel_arrays(cloud, levels, min_points, origin)
    return [
        Surfel(arr.centroids[i], arr.normals[i], float(arr.weights[i]), float(arr.levels[i]), 0)
        for i in range(len(arr))
    ]


def surfel_arrays(surfels) -> SurfelArrays:
    if not surfels:
        return SurfelArrays(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0))
    return SurfelArrays(
        np.stack([s.centroid for s in surfels]),
        np.stack([s.normal for s in surfels]),
        np.array([s.weight for s in surfels]),
        np.array([s.level for s in surfels]),
    )


_NEIGHBOR_OFFSETS = np.array(
    [[i, j, k] for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64
)


class SurfelIndex:
    """Grid hash over reference surfel centroids, one grid per level.

    Cell size equals the gate radius, so candidates always sit in the 3x3x3
    neighborhood of the query cell; lookups stay O(1) per query.
    """

    def __init__(self, ref: SurfelArrays, normal_scale: float = NORMAL_SCALE,
                 gate_factor: float = GATE_FACTOR):
        self.ref = ref
        self.normal_scale = float(normal_scale)
        self.gate_factor = float(gate_factor)
        self._grids = {}
        for size in np.unique(ref.levels):
            sel = np.flatnonzero(ref.levels == size)
            cell = gate_factor * float(size)
            keys = _pack_keys(np.floor(ref.centroids[sel] / cell).astype(np.int64))
            order = np.argsort(keys, kind="stable")
            self._grids[float(size)] = (sel[order], keys[order], cell)

    def match(self, src: SurfelArrays, guess: Pose):
        """Match transformed source surfels to reference surfels.

        Returns (src_idx, ref_idx, pair_weight) arrays. One-directional
        nearest neighbor in the joint space, gated on centroid distance.
        """
        if len(src) == 0 or len(self.ref) == 0:
            z = np.zeros(0, dtype=int)
            return z, z, np.zeros(0)
        tc = src.centroids @ guess.rotation.T + guess.translation
        tn = src.normals @ guess.rotation.T

        out_src, out_ref, out_d = [], [], []
        for size, (perm, keys_s, cell) in self._grids.items():
            qsel = np.flatnonzero(src.levels == size)
            if len(qsel) == 0:
                continue
            gate2 = (self.gate_factor * size) ** 2
            qc, qn = tc[qsel], tn[qsel]
            qcell = np.floor(qc / cell).astype(np.int64)

            # All 27 neighbor lookups at once; ranges [lo, hi) expanded into
            # flat candidate indices without a Python loop.
            nk = _pack_keys((qcell[None, :, :] + _NEIGHBOR_OFFSETS[:, None, :]).reshape(-1, 3))
            lo = np.searchsorted(keys_s, nk, side="left")
            hi = np.searchsorted(keys_s, nk, side="right")
            cnt = hi - lo
            has = cnt > 0
            if not np.any(has):
                continue
            cnts = cnt[has]
            shift = np.repeat(np.cumsum(cnts) - cnts, cnts)
            flat = np.repeat(lo[has], cnts) + np.arange(int(cnts.sum())) - shift
            qi = np.repeat(np.flatnonzero(has) % len(qsel), cnts)
            ri = perm[flat]

            dc = tc[qsel][qi] - self.ref.centroids[ri]
            d2c = np.einsum("ij,ij->i", dc, dc)
            inside = d2c < gate2
            if not np.any(inside):
                continue
            qi, ri, d2c = qi[inside], ri[inside], d2c[inside]
            dn = qn[qi] - self.ref.normals[ri]
            d2 = d2c + self.normal_scale**2 * np.einsum("ij,ij->i", dn, dn)

            # Best candidate per query; ties resolved by reference index.
            order = np.lexsort((ri, d2, qi))
            qi, ri, d2 = qi[order], ri[order], d2[order]
            first = np.concatenate([[True], qi[1:] != qi[:-1]])
            out_src.append(qsel[qi[first]])
            out_ref.append(ri[first])
            out_d.append(d2[first])
        if not out_src:
            z = np.zeros(0, dtype=int)
            return z, z, np.zeros(0)
        si = np.concatenate(out_src)
        ri = np.concatenate(out_ref)
        w = np.sqrt(src.weights[si] * self.ref.weights[ri])
        return si, ri, w


def match_surfels(src, ref, guess: Pose, normal_scale: float = NORMAL_SCALE,
                  gate_factor: float = GATE_FACTOR) -> list[SurfelMatch]:
    src_arr = src if isinstance(src, SurfelArrays) else surfel_arrays(src)
    ref_arr = ref if isinstance(ref, SurfelArrays) else surfel_arrays(ref)
    index = SurfelIndex(ref_arr, normal_scale, gate_factor)
    si, ri, w = index.match(src_arr, guess)
    src_list = src if isinstance(src, list) else None
    ref_list = ref if isinstance(ref, list) else None

    def _mk(arr, lst, i):
        if lst is not None:
            return lst[i]
        return Surfel(arr.centroids[i], arr.normals[i], float(arr.weights[i]), float(arr.levels[i]), 0)

    return [
        SurfelMatch(_mk(src_arr, src_list, a), _mk(ref_arr, ref_list, b), float(ww))
        for a, b, ww in zip(si, ri, w)
    ]


def icp_rows(src_centroids, ref_centroids, ref_normals, pair_weights, pose: Pose,
             nu: float = 5.0):
    """Point-to-plane residuals and left-perturbation Jacobians.

    e_v = n_v . (c_ref - (R c_src + t)); row information combines the pair
    planarity weight with a t-distribution weight at MAD scale.
    """
    q = src_centroids @ pose.rotation.T + pose.translation
    diff = ref_centroids - q
    e = np.einsum("ij,ij->i", ref_normals, diff)

    jac = np.empty((len(e), 6))
    jac[:, :3] = -ref_normals
    jac[:, 3:] = -np.cross(q, ref_normals)

    white = e * np.sqrt(pair_weights)
    scale = 1.4826 * np.median(np.abs(white)) if len(white) else 0.0
    scale = max(scale, 1e-12)
    w_m = (nu + 1.0) / (nu + (white / scale) ** 2)
    info = pair_weights * w_m
    return e, jac, info


def icp_residuals(matches, correction, init: Pose, nu: float = 5.0):
    """Contract form over SurfelMatch records; pose = exp(correction) @ init."""
    pose = exp(correction) @ init
    if not matches:
        return np.zeros(0), np.zeros((0, 6)), np.zeros(0)
    src_c = np.stack([m.source.centroid for m in matches])
    ref_c = np.stack([m.reference.centroid for m in matches])
    ref_n = np.stack([m.reference.normal for m in matches])
    w = np.array([m.weight for m in matches])
    return icp_rows(src_c, ref_c, ref_n, w, pose, nu)


def icp_cost(e, info):
    """r_I = 1/2 sum e^T Sigma^-1 e with per-row scalar information."""
    return 0.5 * float(np.dot(e * info, e))
