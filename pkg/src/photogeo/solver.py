"""Joint geometric-photometric refinement of a place-pair alignment.

One Gauss-Newton system stacks point-to-plane surfel rows against whitened
epipolar rows, balanced by per-modality normalization scales. The estimate is
a left-multiplicative correction to the drifted initial relative pose;
surfels are re-matched every iteration, semi-direct features re-warped on a
cadence once the estimate settles.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import geometry, lie, vision
from .errors import DegenerateAlignmentError, InsufficientConstraintsError
from .geometry import PointCloud, SurfelArrays, SurfelIndex
from .lie import Pose
from .trajectory import PlacePair, Trajectory
from .vision import Camera, DepthMap, FeatureMatch, ImageWindow

CHI2_1DOF_95 = 3.841458820694124
SCALE_TINY = 1e-12
SIGMA2_FLOOR = 1e-24


@dataclass
class SolverConfig:
    max_iterations: int = 30
    step_tol: float = 1e-9
    nu: float = 5.0  # t-distribution dof for the geometric M-estimator
    max_halvings: int = 5
    cond_limit: float = 1e12
    min_surfel_matches: int = 10
    min_features: int = 8
    scale_mode: str = "frozen"  # "frozen" | "per-iteration"
    scale_freeze_step: float = 0.05  # freeze channel scales once the step is this small
    levels: tuple = geometry.DEFAULT_LEVELS
    min_voxel_points: int = geometry.MIN_VOXEL_POINTS
    gate_factor: float = geometry.GATE_FACTOR
    normal_scale: float = geometry.NORMAL_SCALE
    semidirect_cadence: int = 4  # iterations between re-warps once enabled
    semidirect_gate: float = 0.1  # step norm below which re-warping starts
    score_reject: float = 0.8  # normalized-SSD acceptance bound

    def __post_init__(self):
        if self.step_tol <= 0 or self.max_iterations < 1:
            raise ValueError("tolerances must be positive")
        if self.scale_mode not in ("frozen", "per-iteration"):
            raise ValueError(f"unknown scale_mode {self.scale_mode!r}")


@dataclass
class SemiDirectData:
    """Reference-anchored seeds re-matched into the source image on demand."""

    seeds_px: np.ndarray  # (S, 2) reference pixels
    patches: list  # Patch per seed, normalized
    depth: DepthMap  # reference-view depth
    source_image: ImageWindow
    sigma_px2: float = 0.25


@dataclass
class PlaceObservations:
    """Everything one place pair contributes to a solve."""

    pair: PlacePair
    cloud_source: PointCloud
    cloud_reference: PointCloud
    features: list = field(default_factory=list)  # indirect FeatureMatch
    semidirect: Optional[SemiDirectData] = None


@dataclass
class AlignmentEstimate:
    pose: Pose  # corrected source-from-... source local frame in reference local frame
    covariance: np.ndarray  # (6, 6), twist order (trans, rot)
    iterations: int
    converged: bool
    n_surfel_matches: int
    n_features: int
    cost: float
    cost_geometric: float
    cost_photometric: float
    inlier_rate: float  # photometric rows inside the 1-dof 95% gate
    sigma2: float
    alpha: float
    beta: float
    pair: Optional[PlacePair] = None
    inlier_features: list = field(default_factory=list)


def mestimator_weight(r, sigma, nu: float = 5.0):
    """t-distribution weight (nu+1)/(nu + r^2/sigma) for variance sigma > 0."""
    r = np.asarray(r, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    return (nu + 1.0) / (nu + r * r / sigma)


def _scaled_solve(h, rhs, cond_limit):
    """Jacobi-preconditioned solve of h @ x = rhs; returns (x, inv(h)).

    The two normal-equation blocks can span many decades once the geometric
    residual scale collapses, so conditioning and solving happen on the
    diagonally scaled system. A structurally zero diagonal entry stays
    singular after scaling, so true nullspaces are still reported.
    """
    d = np.sqrt(np.clip(np.diag(h), 0.0, None))
    d = np.where(d > 0.0, d, 1.0)
    hs = h / np.outer(d, d)
    cond = np.linalg.cond(hs)
    if not np.isfinite(cond) or cond > cond_limit:
        raise DegenerateAlignmentError(f"normal equations condition {cond:.3e}")
    x = np.linalg.lstsq(hs, rhs / d, rcond=None)[0] / d
    return x, np.linalg.inv(hs) / np.outer(d, d)


def normalize_scales(geo_rows, photo_rows, tiny: float = SCALE_TINY):
    """Per-modality scales 1/(count * median(|r|)^2) over whitened residuals.

    Scaling one modality's residuals by a constant leaves its scaled total
    cost unchanged, so the joint minimizer is invariant to residual units.
    Empty side -> scale 0 (single-modality solve).
    """

    def one(rows):
        rows = np.asarray(rows, dtype=float)
        if rows.size == 0:
            return 0.0
        med = float(np.median(np.abs(rows)))
        return 1.0 / (rows.size * med * med + tiny)

    return one(geo_rows), one(photo_rows)


def _refresh_semidirect(sd: SemiDirectData, est: Pose, cam: Camera, cfg: SolverConfig,
                        pair_index: int, search: int = vision.SEARCH_RADIUS):
    """Warp each seed through the depth map and re-align its patch."""
    rel_sfr = vision.relative_camera_pose(est, cam).inverse()
    out = []
    for seed_px, patch in zip(np.atleast_2d(sd.seeds_px), sd.patches):
        if patch is None:
            continue
        u_sp = vision.warp_feature(seed_px, sd.depth, rel_sfr, cam)
        if u_sp is None:
            continue
        hit = vision.refine_patch(patch, sd.source_image, u_sp, search=search)
        if hit is None:
            continue
        delta, score = hit
        if score > cfg.score_reject:
            continue
        u_s = u_sp + delta
        out.append(
            FeatureMatch(
                ray_source=cam.ray(u_s),
                ray_reference=cam.ray(np.asarray(seed_px, dtype=float)),
                px_source=u_s,
                px_reference=np.asarray(seed_px, dtype=float),
                sigma_px2=sd.sigma_px2,
                kind="semidirect",
                pair_index=pair_index,
            )
        )
    return out


class _System:
    """Rows of the stacked normal equations at one linearization point."""

    def __init__(self, obs, cam, traj, cfg, src_sa, index, est, photo_matches):
        self._cam = cam
        si, ri, pw = index.match(src_sa, est) if index is not None else (
            np.zeros(0, dtype=int), np.zeros(0, dtype=int), np.zeros(0))
        self.src_c = src_sa.centroids[si] if index is not None else np.zeros((0, 3))
        self.ref_c = index.ref.centroids[ri] if index is not None else np.zeros((0, 3))
        self.ref_n = index.ref.normals[ri] if index is not None else np.zeros((0, 3))
        self.pw = pw
        self.e_i, self.jac_i, self.info_i = geometry.icp_rows(
            self.src_c, self.ref_c, self.ref_n, pw, est, nu=cfg.nu)

        self.matches = photo_matches
        self.rays_s, self.rays_r, sig = vision.feature_arrays(photo_matches)
        if len(self.rays_s):
            self.e_p, self.jac_p, _ = vision.epipolar_rows_batch(
                self.rays_s, self.rays_r, est, cam)
            self.var_p = vision.propagate_variances_batch(
                self.rays_s, self.rays_r, sig, est, cam, traj, obs.pair)
        else:
            self.e_p = np.zeros(0)
            self.jac_p = np.zeros((0, 6))
            self.var_p = np.zeros(0)

    @property
    def n_geo(self):
        return len(self.e_i)

    @property
    def n_photo(self):
        return len(self.e_p)

    def whitened(self):
        return self.e_i * np.sqrt(self.info_i), self.e_p / np.sqrt(
            np.maximum(self.var_p, SIGMA2_FLOOR))

    def costs(self, e_i=None, e_p=None):
        e_i = self.e_i if e_i is None else e_i
        e_p = self.e_p if e_p is None else e_p
        cg = float(np.sum(self.info_i * e_i**2))
        cp = float(np.sum(e_p**2 / np.maximum(self.var_p, SIGMA2_FLOOR))) if len(e_p) else 0.0
        return cg, cp

    def normal_equations(self, alpha, beta):
        h = np.zeros((6, 6))
        g = np.zeros(6)
        if self.n_geo:
            jw = self.jac_i * self.info_i[:, None]
            h += alpha * (jw.T @ self.jac_i)
            g += alpha * (self.jac_i.T @ (self.info_i * self.e_i))
        if self.n_photo:
            w = 1.0 / np.maximum(self.var_p, SIGMA2_FLOOR)
            jw = self.jac_p * w[:, None]
            h += beta * (jw.T @ self.jac_p)
            g += beta * (self.jac_p.T @ (w * self.e_p))
        return h, g

    def residuals_at(self, est: Pose):
        """Re-evaluate residuals at a trial pose with matches and weights frozen."""
        q = self.src_c @ est.rotation.T + est.translation
        e_i = np.einsum("ij,ij->i", self.ref_n, self.ref_c - q)
        if self.n_photo:
            rel = vision.relative_camera_pose(est, self._cam)
            e_p, _ = vision.epipolar_residuals_batch(self.rays_s, self.rays_r, rel)
        else:
            e_p = np.zeros(0)
        return e_i, e_p


def solve_alignment(obs: PlaceObservations, init: Pose, cfg: Optional[SolverConfig] = None,
                    cam: Optional[Camera] = None,
                    traj: Optional[Trajectory] = None) -> AlignmentEstimate:
    """Gauss-Newton refinement of the initial alignment for one place pair.

    Raises InsufficientConstraintsError when neither modality meets its row
    floor at the initial pose, DegenerateAlignmentError when the (scaled)
    normal-equation matrix is conditioned worse than cfg.cond_limit.
    """
    cfg = cfg or SolverConfig()
    est = init

    src_sa = geometry.build_surfel_arrays(obs.cloud_source, cfg.levels, cfg.min_voxel_points)
    ref_sa = geometry.build_surfel_arrays(obs.cloud_reference, cfg.levels, cfg.min_voxel_points)
    index = SurfelIndex(ref_sa, cfg.normal_scale, cfg.gate_factor) if len(ref_sa) else None

    indirect = list(obs.features) if cam is not None else []
    semi: list = []
    semi_enabled = False
    last_refresh = -1
    alpha = beta = 0.0
    scales_frozen = False
    step_norm = np.inf
    converged = False
    iterations = 0
    sysm = None

    for it in range(cfg.max_iterations):
        if (obs.semidirect is not None and cam is not None and semi_enabled
                and (last_refresh < 0 or it - last_refresh >= cfg.semidirect_cadence)):
            # Re-warps after the first start within a pixel or two; a narrow
            # integer search is enough there.
            search = vision.SEARCH_RADIUS if last_refresh < 0 else 4
            semi = _refresh_semidirect(obs.semidirect, est, cam, cfg, obs.pair.index,
                                       search=search)
            last_refresh = it

        sysm = _System(obs, cam, traj, cfg, src_sa, index, est, indirect + semi)

        if it == 0:
            if sysm.n_geo < cfg.min_surfel_matches and sysm.n_photo < cfg.min_features:
                raise InsufficientConstraintsError(
                    f"{sysm.n_geo} surfel matches and {sysm.n_photo} features "
                    f"(need {cfg.min_surfel_matches} or {cfg.min_features})")
        # Residual medians taken far from the basin misprice whichever channel
        # still disagrees, so keep rebalancing until the step says we are close.
        if it == 0 or cfg.scale_mode == "per-iteration" or not scales_frozen:
            alpha, beta = normalize_scales(*sysm.whitened())

        h, g = sysm.normal_equations(alpha, beta)
        step, _ = _scaled_solve(h, -g, cfg.cond_limit)

        cg0, cp0 = sysm.costs()
        cost0 = alpha * cg0 + beta * cp0
        lam = 1.0
        accepted = None
        for _ in range(cfg.max_halvings + 1):
            trial = lie.exp(lam * step) @ est
            e_i, e_p = sysm.residuals_at(trial)
            cg, cp = sysm.costs(e_i, e_p)
            if alpha * cg + beta * cp <= cost0:
                accepted = trial
                break
            lam *= 0.5
        if accepted is None:
            break  # stalled under the current linearization
        est = accepted
        iterations = it + 1
        step_norm = float(np.linalg.norm(lam * step))

        if step_norm < cfg.scale_freeze_step:
            scales_frozen = True
        if (not semi_enabled and obs.semidirect is not None and cam is not None
                and step_norm < cfg.semidirect_gate):
            semi_enabled = True
        if step_norm < cfg.step_tol:
            if semi_enabled and last_refresh < 0:
                continue  # pick up semi-direct rows before declaring done
            converged = True
            break

    # Final linearization at the converged pose for reporting and covariance.
    sysm = _System(obs, cam, traj, cfg, src_sa, index, est, indirect + semi)
    h, _ = sysm.normal_equations(alpha, beta)
    _, h_inv = _scaled_solve(h, np.zeros(6), cfg.cond_limit)
    cg, cp = sysm.costs()
    cost = alpha * cg + beta * cp
    n_rows = sysm.n_geo + sysm.n_photo
    sigma2 = max(cost / max(n_rows - 6, 1), SIGMA2_FLOOR)
    cov = sigma2 * h_inv
    cov = 0.5 * (cov + cov.T)

    if sysm.n_photo:
        u = sysm.e_p**2 / np.maximum(sysm.var_p, SIGMA2_FLOOR)
        keep = u < CHI2_1DOF_95
        inlier_rate = float(np.mean(keep))
        inliers = [m for m, k in zip(sysm.matches, keep) if k]
    else:
        inlier_rate = 1.0
        inliers = []

    return AlignmentEstimate(
        pose=est,
        covariance=cov,
        iterations=iterations,
        converged=converged,
        n_surfel_matches=sysm.n_geo,
        n_features=sysm.n_photo,
        cost=cost,
        cost_geometric=cg,
        cost_photometric=cp,
        inlier_rate=inlier_rate,
        sigma2=sigma2,
        alpha=alpha,
        beta=beta,
        pair=obs.pair,
        inlier_features=inliers,
    )


BOOTSTRAP_SCAN = np.geomspace(0.05, 15.0, 40)
BOOTSTRAP_CAP = 0.3  # m, residual clamp for the baseline-length scan


def bootstrap_alignment(obs: PlaceObservations, cam: Camera,
                        cfg: Optional[SolverConfig] = None, rng=None) -> Optional[Pose]:
    """Feature-derived initial alignment for when the prior one is useless.

    Epipolar RANSAC pins rotation and translation direction; the baseline
    length is the minimizer of a clamped surfel cost scanned along that
    direction. Returns None when the features cannot support a pose.
    """
    cfg = cfg or SolverConfig()
    rays_s, rays_r, _ = vision.feature_arrays(obs.features)
    if len(rays_s) < max(cfg.min_features, 8):
        return None
    mask, e = vision.essential_ransac(rays_s, rays_r, cam, rng=rng)
    if e is None or int(mask.sum()) < max(cfg.min_features, 8):
        return None
    rel = vision.pose_from_essential(e, rays_s[mask], rays_r[mask])
    if rel is None:
        return None

    y = cam.lidar_from_camera
    src_sa = geometry.build_surfel_arrays(obs.cloud_source, cfg.levels, cfg.min_voxel_points)
    ref_sa = geometry.build_surfel_arrays(obs.cloud_reference, cfg.levels, cfg.min_voxel_points)
    if len(src_sa) == 0 or len(ref_sa) == 0:
        return None
    index = SurfelIndex(ref_sa, cfg.normal_scale, cfg.gate_factor)

    cap2 = BOOTSTRAP_CAP**2
    best_score, best_pose = np.inf, None
    for s in BOOTSTRAP_SCAN:
        guess = y @ Pose(rel.rotation, s * rel.translation) @ y.inverse()
        si, ri, _ = index.match(src_sa, guess)
        if len(si) < cfg.min_surfel_matches:
            continue
        q = src_sa.centroids[si] @ guess.rotation.T + guess.translation
        r = np.einsum("ij,ij->i", ref_sa.normals[ri], ref_sa.centroids[ri] - q)
        score = float(np.sum(np.minimum(r * r, cap2)) + cap2 * (len(src_sa) - len(si)))
        if score < best_score:
            best_score, best_pose = score, guess
    return best_pose


def _estimate_rank(est: Optional[AlignmentEstimate]):
    if est is None:
        return (-1,)
    healthy = est.converged and (est.n_features == 0 or est.inlier_rate >= 0.5)
    return (int(healthy), int(est.converged), est.inlier_rate)


def solve_alignment_robust(obs: PlaceObservations, init: Pose,
                           cfg: Optional[SolverConfig] = None,
                           cam: Optional[Camera] = None,
                           traj: Optional[Trajectory] = None,
                           rng=None) -> AlignmentEstimate:
    """solve_alignment with a feature-bootstrap retry for hopeless priors.

    The retry fires when the first attempt raises, stalls short of
    convergence, or leaves most photometric rows outside their gate. The
    better-ranked attempt wins; raises only when nothing produced a pose.
    """
    cfg = cfg or SolverConfig()
    first = None
    first_exc: Optional[Exception] = None
    try:
        first = solve_alignment(obs, init, cfg, cam=cam, traj=traj)
    except (InsufficientConstraintsError, DegenerateAlignmentError) as exc:
        first_exc = exc
    if first is not None and _estimate_rank(first)[0]:
        return first

    boot = bootstrap_alignment(obs, cam, cfg, rng=rng) if cam is not None else None
    second = None
    if boot is not None:
        try:
            second = solve_alignment(obs, boot, cfg, cam=cam, traj=traj)
        except (InsufficientConstraintsError, DegenerateAlignmentError):
            second = None

    if first is None and second is None:
        assert first_exc is not None
        raise first_exc
    return second if _estimate_rank(second) > _estimate_rank(first) else first
