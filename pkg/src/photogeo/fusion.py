"""Sequential on-manifold fusion of per-place alignment estimates.

Estimates from successive place pairs are transported to the first matched
place, screened against the accumulated pool of epipolar evidence with a
chi-square test, and blended on the manifold with covariance-weighted
Gauss-Newton averaging. Fusion stops once the covariance eigenvalue sum
drops below a threshold, or aborts after a capped number of pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import chi2

from . import lie, vision
from .errors import DegenerateAlignmentError
from .lie import Pose
from .solver import AlignmentEstimate
from .trajectory import PlacePair, Trajectory, transport_sides
from .vision import Camera

CHI2_1DOF_95 = 3.841458820694124


@dataclass
class FusionConfig:
    theta_th: float = 6e-7  # termination bound on the covariance eigenvalue sum
    max_pairs: int = 10  # offers consumed before aborting
    max_fuse_iterations: int = 20
    fuse_tol: float = 1e-10
    cond_limit: float = 1e12
    confidence: float = 0.95

    def __post_init__(self):
        if self.theta_th <= 0 or self.fuse_tol <= 0:
            raise ValueError("thresholds must be positive")


@dataclass
class FusedAlignment:
    pose: Pose  # alignment at the first place pair
    covariance: np.ndarray
    count: int = 1  # estimates blended in (the seed counts)
    status: str = "collecting"  # collecting | accepted | aborted


@dataclass
class EvidenceBlock:
    """Inlier epipolar evidence of one place pair, with its transports."""

    pair: PlacePair
    rays_source: np.ndarray  # (J, 3)
    rays_reference: np.ndarray
    sigma_px2: np.ndarray
    ref_transport: Pose  # T_first = ref_transport @ T_pair @ src_transport
    src_transport: Pose
    camera: Camera
    trajectory: Optional[Trajectory] = None

    def __len__(self):
        return len(self.rays_source)

    def local_pose(self, candidate_first: Pose) -> Pose:
        """Candidate alignment at the first place, expressed back at this pair."""
        return self.ref_transport.inverse() @ candidate_first @ self.src_transport.inverse()

    def normalized_squares(self, candidate_first: Pose):
        """Per-row e^2/var at the candidate, variances re-propagated there."""
        t_l = self.local_pose(candidate_first)
        rel = vision.relative_camera_pose(t_l, self.camera)
        e, _ = vision.epipolar_residuals_batch(self.rays_source, self.rays_reference, rel)
        var = vision.propagate_variances_batch(
            self.rays_source, self.rays_reference, self.sigma_px2, t_l,
            self.camera, self.trajectory, self.pair)
        return e * e / np.maximum(var, 1e-24)


@dataclass
class EvidencePool:
    blocks: list = field(default_factory=list)

    def __len__(self):
        return sum(len(b) for b in self.blocks)


def block_from_estimate(est: AlignmentEstimate, cam: Camera,
                        ref_transport: Pose, src_transport: Pose,
                        traj: Optional[Trajectory] = None) -> EvidenceBlock:
    rays_s, rays_r, sig = vision.feature_arrays(est.inlier_features)
    return EvidenceBlock(est.pair, rays_s, rays_r, sig, ref_transport, src_transport,
                         cam, traj)


def transport_estimate(est: AlignmentEstimate, traj: Trajectory,
                       first: PlacePair, current: PlacePair):
    """Move (pose, covariance) to the first place; returns (pose, cov, A, B).

    The bracketing transforms are treated as exact (local rigidity), so the
    covariance maps through the adjoint of the left bracket only.
    """
    a, b = transport_sides(traj, first, current)
    pose = a @ est.pose @ b
    ad = a.adjoint()
    cov = ad @ est.covariance @ ad.T
    return pose, 0.5 * (cov + cov.T), a, b


def _checked_information(cov: np.ndarray, limit: float) -> np.ndarray:
    cond = np.linalg.cond(cov)
    if not np.isfinite(cond) or cond > limit:
        raise DegenerateAlignmentError(f"covariance condition {cond:.3e}")
    return np.linalg.inv(cov)


def fuse(current: FusedAlignment, pose_new: Pose, cov_new: np.ndarray,
         cfg: Optional[FusionConfig] = None) -> FusedAlignment:
    """Covariance-weighted on-manifold blend of the running and new estimate.

    Iterates the two-pose Gauss-Newton mean: residual tangents are pulled back
    through second-order inverse left Jacobians, so the fused covariance is
    the inverse of the accumulated information at the converged mean.
    """
    cfg = cfg or FusionConfig()
    info_c = _checked_information(current.covariance, cfg.cond_limit)
    info_k = _checked_information(cov_new, cfg.cond_limit)

    t_star = current.pose
    a_mat = info_c + info_k
    for _ in range(cfg.max_fuse_iterations):
        xi_c = lie.log(current.pose @ t_star.inverse())
        xi_k = lie.log(pose_new @ t_star.inverse())
        j_c = lie.inv_left_jacobian(xi_c)
        j_k = lie.inv_left_jacobian(xi_k)
        a_mat = j_c.T @ info_c @ j_c + j_k.T @ info_k @ j_k
        b_vec = j_c.T @ info_c @ xi_c + j_k.T @ info_k @ xi_k
        xi = np.linalg.solve(a_mat, b_vec)
        t_star = lie.exp(xi) @ t_star
        if float(np.linalg.norm(xi)) < cfg.fuse_tol:
            break

    # Information at the converged mean.
    xi_c = lie.log(current.pose @ t_star.inverse())
    xi_k = lie.log(pose_new @ t_star.inverse())
    j_c = lie.inv_left_jacobian(xi_c)
    j_k = lie.inv_left_jacobian(xi_k)
    a_mat = j_c.T @ info_c @ j_c + j_k.T @ info_k @ j_k
    cov = np.linalg.inv(a_mat)
    return FusedAlignment(t_star, 0.5 * (cov + cov.T), current.count + 1, current.status)


def should_terminate(f: FusedAlignment, theta_th: float) -> bool:
    """True once the covariance eigenvalue sum falls below theta_th.

    Meaningful only after at least one fusion (count >= 2); the driver does
    not consult it for a bare seed.
    """
    return float(np.sum(np.linalg.eigvalsh(f.covariance))) < theta_th


def validate_candidate(pool: EvidencePool, candidate_first: Pose,
                       confidence: float = 0.95):
    """Chi-square screen of a transported candidate against all pooled evidence.

    Every stored residual is re-evaluated at the candidate with its variance
    re-propagated there; the summed normalized square is compared to the
    chi-square quantile at the pool's total scalar count. Empty pool accepts
    trivially (bootstrap). Returns (accepted, statistic, threshold, dof).
    """
    dof = len(pool)
    if dof == 0:
        return True, 0.0, float("inf"), 0
    stat = 0.0
    for b in pool.blocks:
        if len(b):
            stat += float(np.sum(b.normalized_squares(candidate_first)))
    threshold = float(chi2.ppf(confidence, dof))
    return stat < threshold, stat, threshold, dof


def update_evidence(pool: EvidencePool, new_block: Optional[EvidenceBlock],
                    fused_pose: Pose) -> float:
    """Append a block, then re-test every stored match at the fused pose.

    Matches whose normalized square exceeds the 1-dof 95% gate are evicted
    permanently. Returns the inlier rate kept/tested of this pass.
    """
    if new_block is not None and len(new_block):
        pool.blocks.append(new_block)
    tested = 0
    kept = 0
    for b in pool.blocks:
        if not len(b):
            continue
        u = b.normalized_squares(fused_pose)
        keep = u < CHI2_1DOF_95
        tested += len(u)
        kept += int(np.sum(keep))
        if not np.all(keep):
            b.rays_source = b.rays_source[keep]
            b.rays_reference = b.rays_reference[keep]
            b.sigma_px2 = b.sigma_px2[keep]
    pool.blocks = [b for b in pool.blocks if len(b)]
    return kept / tested if tested else 1.0


class SequentialFusion:
    """Single-writer driver: seeds, screens, fuses, and logs place-pair offers.

    The first estimate seeds the state and pool provisionally. If the second
    offer fails the screen and the seed also fails against the second offer's
    own evidence, both are discarded and collection restarts.
    """

    def __init__(self, traj: Trajectory, cam: Camera, cfg: Optional[FusionConfig] = None):
        self.traj = traj
        self.cam = cam
        self.cfg = cfg or FusionConfig()
        self.state: Optional[FusedAlignment] = None
        self.pool = EvidencePool()
        self.first_pair: Optional[PlacePair] = None
        self.offers = 0
        self.log: list = []

    @property
    def done(self) -> bool:
        return self.state is not None and self.state.status in ("accepted", "aborted")

    def _record(self, decision, pose=None, stat=None, threshold=None, dof=0,
                inlier_rate=None):
        eig = (float(np.sum(np.linalg.eigvalsh(self.state.covariance)))
               if self.state is not None else None)
        rec = {
            "offer": self.offers,
            "decision": decision,
            "pose": None if pose is None else np.concatenate(
                [pose.translation, pose.to_quat()]).tolist(),
            "statistic": stat,
            "threshold": threshold,
            "dof": dof,
            "eig_sum": eig,
            "inlier_rate": inlier_rate,
            "count": self.state.count if self.state is not None else 0,
            "status": self.state.status if self.state is not None else "empty",
        }
        self.log.append(rec)
        return rec

    def offer(self, est: AlignmentEstimate) -> dict:
        """Consume one place-pair estimate; returns the decision record."""
        if self.done:
            return self._record("ignored")
        self.offers += 1

        if self.state is None:
            self.first_pair = est.pair
            self.state = FusedAlignment(est.pose, np.array(est.covariance), 1, "collecting")
            blk = block_from_estimate(est, self.cam, Pose.identity(), Pose.identity(),
                                      self.traj)
            rate = update_evidence(self.pool, blk, est.pose)
            self._maybe_abort()
            return self._record("seed", pose=est.pose, inlier_rate=rate)

        pose_t, cov_t, a, b = transport_estimate(est, self.traj, self.first_pair, est.pair)
        try:
            _checked_information(cov_t, self.cfg.cond_limit)
            _checked_information(self.state.covariance, self.cfg.cond_limit)
        except DegenerateAlignmentError:
            self._maybe_abort()
            return self._record("reject-covariance", pose=pose_t)

        ok, stat, thr, dof = validate_candidate(self.pool, pose_t, self.cfg.confidence)
        if not ok:
            if self.state.count == 1 and self._seed_rejected_by(est, a, b):
                pose = self.state.pose
                self.state = None
                self.pool = EvidencePool()
                self.first_pair = None
                return self._record("mutual-reject-restart", pose=pose_t,
                                    stat=stat, threshold=thr, dof=dof)
            self._maybe_abort()
            return self._record("reject", pose=pose_t, stat=stat, threshold=thr, dof=dof)

        fused = fuse(self.state, pose_t, cov_t, self.cfg)
        blk = block_from_estimate(est, self.cam, a, b, self.traj)
        rate = update_evidence(self.pool, blk, fused.pose)
        self.state = fused
        if self.state.count >= 2 and should_terminate(self.state, self.cfg.theta_th):
            self.state.status = "accepted"
        else:
            self._maybe_abort()
        return self._record("fuse", pose=fused.pose, stat=stat, threshold=thr,
                            dof=dof, inlier_rate=rate)

    def _seed_rejected_by(self, est: AlignmentEstimate, a: Pose, b: Pose) -> bool:
        """Mutual check: does the new pair's own evidence reject the seed?"""
        blk = block_from_estimate(est, self.cam, a, b, self.traj)
        if not len(blk):
            return False
        rival = EvidencePool([blk])
        ok, _, _, _ = validate_candidate(rival, self.state.pose, self.cfg.confidence)
        return not ok

    def _maybe_abort(self):
        if (self.state is not None and self.state.status == "collecting"
                and self.offers >= self.cfg.max_pairs):
            self.state.status = "aborted"
