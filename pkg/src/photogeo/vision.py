"""Camera model, epipolar constraints, depth warping, patch refinement.

Two-view geometry runs on normalized image rays (z = 1). The relative camera
pose derived from a LiDAR-frame alignment T is ref_from_src = C_from_L @ T
@ L_from_C; the epipolar residual is evaluated with its unit-normalized
baseline so the constraint is scale-blind by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import lie
from .errors import ConfigError
from .lie import Pose, skew
from .trajectory import PlacePair, Trajectory

PATCH_HALF = 10  # 21x21 patches
SEARCH_RADIUS = 10  # coarse integer search, +-px
TEMPORAL_FD_STEP = 1e-4  # s, central differences through the trajectory
EXTRINSIC_FD_STEP = 1e-6  # rad / m
MIN_BASELINE = 1e-9


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 960
    height: int = 540
    # Nominal camera mount in the LiDAR frame (L_from_C).
    lidar_from_camera: Pose = field(default_factory=Pose.identity)
    # Residual calibration uncertainty, twist order (trans, rot).
    extrinsic_cov: np.ndarray = field(default_factory=lambda: np.zeros((6, 6)))
    time_offset_mean: float = 0.0
    time_offset_var: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")

    def intrinsics(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def ray(self, px):
        """Pixels (N, 2) or (2,) -> normalized homogeneous rays with z = 1."""
        px = np.asarray(px, dtype=float)
        single = px.ndim == 1
        px = np.atleast_2d(px)
        out = np.column_stack(
            [(px[:, 0] - self.cx) / self.fx, (px[:, 1] - self.cy) / self.fy, np.ones(len(px))]
        )
        return out[0] if single else out

    def project(self, pts):
        """Camera-frame points -> (px (N, 2), in_front (N,) bool)."""
        pts = np.asarray(pts, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        z = pts[:, 2]
        ok = z > 1e-9
        zs = np.where(ok, z, 1.0)
        px = np.column_stack(
            [self.fx * pts[:, 0] / zs + self.cx, self.fy * pts[:, 1] / zs + self.cy]
        )
        if single:
            return px[0], bool(ok[0])
        return px, ok

    def in_image(self, px, margin: float = 0.0):
        px = np.atleast_2d(np.asarray(px, dtype=float))
        return (
            (px[:, 0] >= margin)
            & (px[:, 0] <= self.width - 1 - margin)
            & (px[:, 1] >= margin)
            & (px[:, 1] <= self.height - 1 - margin)
        )


@dataclass
class FeatureMatch:
    """One 2-D correspondence between the source and reference images."""

    ray_source: np.ndarray  # (3,) normalized, z = 1
    ray_reference: np.ndarray
    px_source: np.ndarray  # (2,) pixels, kept for RANSAC / diagnostics
    px_reference: np.ndarray
    sigma_px2: float  # per-coordinate pixel variance
    kind: str = "indirect"  # "indirect" | "semidirect"
    pair_index: int = 0


@dataclass
class Patch:
    """Normalized (zero-mean, unit-std) intensity patch around a reference pixel."""

    values: np.ndarray  # (2h+1, 2h+1)
    center_px: np.ndarray
    half: int = PATCH_HALF


@dataclass
class ImageWindow:
    """Rectangular crop of an image, addressed in full-image pixel coordinates."""

    origin: np.ndarray  # (2,) pixel coords of values[0, 0]
    values: np.ndarray  # (h, w)

    @property
    def grad(self):
        if not hasattr(self, "_grad"):
            gy, gx = np.gradient(self.values)
            self._grad = (gx, gy)
        return self._grad

    def _local(self, px):
        px = np.atleast_2d(np.asarray(px, dtype=float))
        return px - self.origin

    def contains(self, px, margin: float = 0.0):
        q = self._local(px)
        h, w = self.values.shape
        return (
            (q[:, 0] >= margin)
            & (q[:, 0] <= w - 1 - margin)
            & (q[:, 1] >= margin)
            & (q[:, 1] <= h - 1 - margin)
        )

    def sample(self, px, grid=None):
        """Bilinear interpolation; returns (values, ok). Out of range -> ok False."""
        q = self._local(px)
        arr = self.values if grid is None else grid
        h, w = arr.shape
        x, y = q[:, 0], q[:, 1]
        ok = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
        x = np.clip(x, 0, w - 1 - 1e-9)
        y = np.clip(y, 0, h - 1 - 1e-9)
        x0 = np.floor(x).astype(int)
        y0 = np.floor(y).astype(int)
        fx, fy = x - x0, y - y0
        v = (
            arr[y0, x0] * (1 - fx) * (1 - fy)
            + arr[y0, x0 + 1] * fx * (1 - fy)
            + arr[y0 + 1, x0] * (1 - fx) * fy
            + arr[y0 + 1, x0 + 1] * fx * fy
        )
        return v, ok

    def sample_grad(self, px):
        gx, gy = self.grad
        vx, okx = self.sample(px, gx)
        vy, oky = self.sample(px, gy)
        return vx, vy, okx & oky


@dataclass
class DepthMap:
    """Per-pixel depth at the reference camera with a validity mask."""

    depth: np.ndarray  # (H, W)
    valid: np.ndarray  # (H, W) bool

    @staticmethod
    def empty(width: int, height: int):
        return DepthMap(np.zeros((height, width)), np.zeros((height, width), dtype=bool))

    def set_window(self, x0: int, y0: int, depth, valid=None):
        h, w = depth.shape
        self.depth[y0 : y0 + h, x0 : x0 + w] = depth
        self.valid[y0 : y0 + h, x0 : x0 + w] = True if valid is None else valid

    def at(self, px):
        """Bilinear depth lookup; invalid if any stencil corner is invalid."""
        px = np.atleast_2d(np.asarray(px, dtype=float))
        h, w = self.depth.shape
        x, y = px[:, 0], px[:, 1]
        ok = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
        x = np.clip(x, 0, w - 1 - 1e-9)
        y = np.clip(y, 0, h - 1 - 1e-9)
        x0 = np.floor(x).astype(int)
        y0 = np.floor(y).astype(int)
        fx, fy = x - x0, y - y0
        ok &= (
            self.valid[y0, x0]
            & self.valid[y0, x0 + 1]
            & self.valid[y0 + 1, x0]
            & self.valid[y0 + 1, x0 + 1]
        )
        d = (
            self.depth[y0, x0] * (1 - fx) * (1 - fy)
            + self.depth[y0, x0 + 1] * fx * (1 - fy)
            + self.depth[y0 + 1, x0] * (1 - fx) * fy
            + self.depth[y0 + 1, x0 + 1] * fx * fy
        )
        return d, ok


def camera_pose(traj: Trajectory, cam: Camera, tau: float, dtau: float = 0.0) -> Pose:
    """World-from-camera at image time tau + dtau (trigger offset included by caller)."""
    return traj.pose_at(tau + dtau) @ cam.lidar_from_camera


def relative_camera_pose(align: Pose, cam: Camera) -> Pose:
    """ref_from_src camera transform implied by a LiDAR-frame alignment."""
    x = cam.lidar_from_camera.inverse()
    return x @ align @ cam.lidar_from_camera


def epipolar_residuals_batch(rays_s, rays_r, rel: Pose):
    """Residuals u_r . (t_hat x R u_s) for ref_from_src = (R, t), unit baseline."""
    t = rel.translation
    n = np.linalg.norm(t)
    that = t / max(n, MIN_BASELINE)
    g = rays_s @ rel.rotation.T
    return np.einsum("ij,ij->i", rays_r, np.cross(that[None, :], g)), n


def epipolar_rows_batch(rays_s, rays_r, align: Pose, cam: Camera):
    """Residuals plus analytic Jacobians w.r.t. a left perturbation of align.

    Returns (e (J,), jac (J, 6), baseline_norm).
    """
    x = cam.lidar_from_camera.inverse()
    y = cam.lidar_from_camera
    my = align @ y
    rel = x @ my
    rx = x.rotation
    tp = rel.translation
    n = float(np.linalg.norm(tp))
    nn = max(n, MIN_BASELINE)
    that = tp / nn

    g = rays_s @ rel.rotation.T
    e = np.einsum("ij,ij->i", rays_r, np.cross(that[None, :], g))

    pt = (np.eye(3) - np.outer(that, that)) / nn
    ptrx = pt @ rx
    a = my.translation  # translation of align @ L_from_C
    b = rays_s @ my.rotation.T

    w1 = np.cross(g, rays_r)  # de/dthat
    w2 = np.cross(rays_r, that)  # de/dg
    jac = np.empty((len(e), 6))
    jac[:, :3] = w1 @ ptrx
    jac[:, 3:] = -np.cross(w1 @ ptrx, a[None, :]) - np.cross(w2 @ rx, b)
    return e, jac, n


def pixel_jacobians_batch(rays_s, rays_r, rel: Pose, cam: Camera):
    """d e / d pixel for both endpoints: (J_s (J, 2), J_r (J, 2))."""
    t = rel.translation
    that = t / max(np.linalg.norm(t), MIN_BASELINE)
    ess = skew(that) @ rel.rotation
    de_dus = rays_r @ ess  # (J, 3) rows of u_r^T E
    de_dur = rays_s @ ess.T  # (J, 3) rows of (E u_s)^T
    f = np.array([cam.fx, cam.fy])
    return de_dus[:, :2] / f, de_dur[:, :2] / f


def epipolar_residual(m: FeatureMatch, correction, init: Pose, cam: Camera):
    """Contract form: residual and Jacobian row at exp(correction) @ init.

    Returns (residual, jac (6,), baseline_norm); callers should treat
    baseline_norm < MIN_BASELINE as a degenerate-baseline flag.
    """
    align = lie.exp(correction) @ init
    e, jac, n = epipolar_rows_batch(
        m.ray_source[None, :], m.ray_reference[None, :], align, cam
    )
    return float(e[0]), jac[0], n


def _perturbed_relatives(align: Pose, cam: Camera, traj: Optional[Trajectory],
                         pair: Optional[PlacePair], use_temporal: bool, use_extrinsic: bool):
    """Relative camera poses for the nominal and perturbed measurement chains."""
    y = cam.lidar_from_camera
    mu = cam.time_offset_mean

    def loc(tau, d):
        # Local platform motion between the modeled and true trigger times.
        return traj.pose_at(tau).inverse() @ traj.pose_at(tau + mu + d)

    def chain(dts, dtr, eps=None):
        ye = y if eps is None else lie.exp(eps) @ y
        if traj is None or (dts == 0.0 and dtr == 0.0 and mu == 0.0):
            left, right = ye, ye
        else:
            left = loc(pair.tau_reference, dtr) @ ye
            right = loc(pair.tau_source, dts) @ ye
        return left.inverse() @ align @ right

    out = {"nominal": chain(0.0, 0.0)}
    if use_temporal:
        h = TEMPORAL_FD_STEP
        out["ts+"] = chain(h, 0.0)
        out["ts-"] = chain(-h, 0.0)
        out["tr+"] = chain(0.0, h)
        out["tr-"] = chain(0.0, -h)
    if use_extrinsic:
        h = EXTRINSIC_FD_STEP
        for i in range(6):
            eps = np.zeros(6)
            eps[i] = h
            out[f"c{i}+"] = chain(0.0, 0.0, eps)
            eps[i] = -h
            out[f"c{i}-"] = chain(0.0, 0.0, eps)
    return out


def propagate_variances_batch(rays_s, rays_r, sigma_px2, align: Pose, cam: Camera,
                              traj: Optional[Trajectory] = None,
                              pair: Optional[PlacePair] = None):
    """Per-residual variance from pixel, trigger-time, and extrinsic noise.

    Temporal terms are finite-differenced through the trajectory for each
    image independently; the extrinsic term perturbs both occurrences of the
    mount jointly and enters with the doubled weight of the calibration chain.
    """
    sigma_px2 = np.broadcast_to(np.asarray(sigma_px2, dtype=float), (len(rays_s),))
    use_temporal = traj is not None and pair is not None and cam.time_offset_var > 0.0
    use_extrinsic = float(np.max(np.abs(cam.extrinsic_cov))) > 0.0
    rels = _perturbed_relatives(align, cam, traj, pair, use_temporal, use_extrinsic)

    rel0 = rels["nominal"]
    js, jr = pixel_jacobians_batch(rays_s, rays_r, rel0, cam)
    var = sigma_px2 * (np.einsum("ij,ij->i", js, js) + np.einsum("ij,ij->i", jr, jr))

    def resid(key):
        return epipolar_residuals_batch(rays_s, rays_r, rels[key])[0]

    if use_temporal:
        h = TEMPORAL_FD_STEP
        jt1 = (resid("ts+") - resid("ts-")) / (2 * h)
        jt2 = (resid("tr+") - resid("tr-")) / (2 * h)
        var = var + cam.time_offset_var * (jt1**2 + jt2**2)
    if use_extrinsic:
        h = EXTRINSIC_FD_STEP
        jc = np.stack(
            [(resid(f"c{i}+") - resid(f"c{i}-")) / (2 * h) for i in range(6)], axis=1
        )
        var = var + 2.0 * np.einsum("ij,jk,ik->i", jc, cam.extrinsic_cov, jc)
    return var


def propagate_covariance(m: FeatureMatch, correction, init: Pose, cam: Camera,
                         traj: Optional[Trajectory] = None,
                         pair: Optional[PlacePair] = None) -> float:
    align = lie.exp(correction) @ init
    return float(
        propagate_variances_batch(
            m.ray_source[None, :], m.ray_reference[None, :], np.array([m.sigma_px2]),
            align, cam, traj, pair,
        )[0]
    )


def warp_feature(u_px, depth: DepthMap, relpose: Pose, cam: Camera):
    """Project a reference pixel into the source image through its depth.

    relpose maps reference-camera coordinates into source-camera coordinates.
    Returns source pixels (2,) or None when depth is invalid, the point falls
    behind the camera, or the projection leaves the image.
    """
    u_px = np.asarray(u_px, dtype=float)
    d, ok = depth.at(u_px)
    if not ok[0] or d[0] <= 0:
        return None
    p_ref = cam.ray(u_px) * d[0]
    p_src = relpose.apply(p_ref)
    if p_src[2] <= 1e-9:
        return None
    px, _ = cam.project(p_src)
    if not cam.in_image(px)[0]:
        return None
    return px


def warp_points(u_px, depth: DepthMap, relpose: Pose, cam: Camera):
    """Batched warp without the image-bounds drop; returns (px (N, 2), ok (N,))."""
    u_px = np.atleast_2d(np.asarray(u_px, dtype=float))
    d, ok = depth.at(u_px)
    p_ref = cam.ray(u_px) * d[:, None]
    p_src = p_ref @ relpose.rotation.T + relpose.translation
    ok = ok & (p_src[:, 2] > 1e-9) & (d > 0)
    px, _ = cam.project(p_src)
    return px, ok


def inverse_warp(u_s_px, depth: DepthMap, relpose: Pose, cam: Camera,
                 iters: int = 12, tol: float = 1e-9):
    """Invert warp_feature: find u_r with warp(u_r) == u_s, Gauss-Newton on 2 px."""
    u_s_px = np.asarray(u_s_px, dtype=float)
    u_r = u_s_px.copy()
    h = 0.5
    for _ in range(iters):
        grid = np.array([u_r, u_r + [h, 0], u_r - [h, 0], u_r + [0, h], u_r - [0, h]])
        w, ok = warp_points(grid, depth, relpose, cam)
        if not np.all(ok):
            return None
        r = w[0] - u_s_px
        if float(np.dot(r, r)) < tol * tol:
            return u_r
        jac = np.column_stack([(w[1] - w[2]) / (2 * h), (w[3] - w[4]) / (2 * h)])
        try:
            u_r = u_r - np.linalg.solve(jac, r)
        except np.linalg.LinAlgError:
            return None
    return u_r if float(np.dot(r, r)) < 1e-6 else None


def make_patch(values, center_px, min_std: float = 1e-8) -> Optional[Patch]:
    """Normalize raw intensities to zero mean, unit std; None for flat patches."""
    v = np.asarray(values, dtype=float)
    s = float(v.std())
    if s < min_std:
        return None
    return Patch((v - v.mean()) / s, np.asarray(center_px, dtype=float), (v.shape[0] - 1) // 2)


def _patch_grid(half):
    d = np.arange(-half, half + 1, dtype=float)
    xx, yy = np.meshgrid(d, d)
    return np.column_stack([xx.ravel(), yy.ravel()])


def refine_patch(ref_patch, src_image, u_s_prime, search: int = SEARCH_RADIUS,
                 gn_iters: int = 8):
    """Two-stage patch alignment around a predicted source location.

    Stage 1 scans integer shifts in [-search, search]^2 with normalized
    cross-correlation; stage 2 polishes sub-pixel with Gauss-Newton on the
    normalized SSD using bilinear interpolation. Returns (delta, score) where
    delta is the correction to u_s_prime and score is the final normalized
    SSD (0 = perfect, ~2 = uncorrelated); None when the needed window leaves
    the available image region.
    """
    patch = ref_patch.values if isinstance(ref_patch, Patch) else np.asarray(ref_patch)
    half = (patch.shape[0] - 1) // 2
    win = src_image if hasattr(src_image, "sample_grad") else ImageWindow(np.zeros(2), np.asarray(src_image, dtype=float))
    u_s_prime = np.asarray(u_s_prime, dtype=float)

    base = np.round(u_s_prime).astype(int)
    ext = search + half
    # Stage-2 steps are clipped to 1 px each, so this covers every excursion.
    reach = ext + gn_iters + 2
    lo = base - reach
    corners = np.array([lo, base + reach], dtype=float)
    if not np.all(win.contains(corners)):
        return None
    if hasattr(win, "window"):
        # Tile-backed views assemble on every sample; crop once instead.
        win = win.window(int(lo[0]), int(lo[1]), 2 * reach + 1, 2 * reach + 1)
    lo = base - ext
    xs = np.arange(lo[0], base[0] + ext + 1)
    ys = np.arange(lo[1], base[1] + ext + 1)
    gx, gy = np.meshgrid(xs, ys)
    region, ok = win.sample(np.column_stack([gx.ravel(), gy.ravel()]).astype(float))
    if not np.all(ok):
        return None
    region = region.reshape(len(ys), len(xs))

    # Stage 1: normalized cross-correlation over integer shifts.
    from numpy.lib.stride_tricks import sliding_window_view

    wins = sliding_window_view(region, (2 * half + 1, 2 * half + 1))
    n_pix = (2 * half + 1) ** 2
    means = wins.mean(axis=(-2, -1), keepdims=True)
    centered = wins - means
    norms = np.sqrt(np.einsum("xyij,xyij->xy", centered, centered))
    pc = patch - patch.mean()
    pnorm = float(np.linalg.norm(pc))
    corr = np.einsum("xyij,ij->xy", centered, pc) / (np.maximum(norms, 1e-12) * max(pnorm, 1e-12))
    iy, ix = np.unravel_index(int(np.argmax(corr)), corr.shape)
    u0 = base + np.array([ix - search, iy - search], dtype=float)

    # Stage 2: inverse-compositional Gauss-Newton on the normalized SSD.
    # The Jacobian comes from the (fixed) reference patch, so each iteration
    # costs one bilinear sample of the source window.
    offs = _patch_grid(half)
    p_norm = (patch - patch.mean()) / max(patch.std(), 1e-12)
    p_ref = p_norm.ravel()
    gy_r, gx_r = np.gradient(p_norm)
    jac = np.column_stack([gx_r.ravel(), gy_r.ravel()])
    jtj = jac.T @ jac + 1e-9 * np.eye(2)
    u = u0.astype(float)
    for _ in range(gn_iters):
        vals, ok = win.sample(u + offs)
        if not np.all(ok):
            return None
        s = max(float(vals.std()), 1e-8)
        r = (vals - vals.mean()) / s - p_ref
        step = np.linalg.solve(jtj, jac.T @ r)
        step = np.clip(step, -1.0, 1.0)
        u = u - step
        if float(np.linalg.norm(step)) < 1e-3:
            break
    vals, ok = win.sample(u + offs)
    if not np.all(ok):
        return None
    s = max(float(vals.std()), 1e-8)
    score = float(np.mean(((vals - vals.mean()) / s - p_ref) ** 2))
    return u - u_s_prime, score


def essential_ransac(rays_s, rays_r, cam: Camera, thresh_px: float = 1.5,
                     iters: int = 200, rng=None):
    """Eight-point RANSAC over normalized rays; returns (inlier_mask, E).

    Scores with the Sampson distance converted to pixels through the mean
    focal length. Fewer than 8 correspondences: everything is rejected.
    """
    rays_s = np.asarray(rays_s, dtype=float)
    rays_r = np.asarray(rays_r, dtype=float)
    n = len(rays_s)
    if n < 8:
        return np.zeros(n, dtype=bool), None
    rng = np.random.default_rng(0) if rng is None else rng
    f = 0.5 * (cam.fx + cam.fy)

    def fit(idx):
        a = np.einsum("ni,nj->nij", rays_r[idx], rays_s[idx]).reshape(len(idx), 9)
        _, _, vt = np.linalg.svd(a)
        e = vt[-1].reshape(3, 3)
        u, s, v2 = np.linalg.svd(e)
        return u @ np.diag([s[0], s[1], 0.0]) @ v2

    def score(e):
        num = np.einsum("ni,ij,nj->n", rays_r, e, rays_s)
        es = rays_s @ e.T
        er = rays_r @ e
        den = es[:, 0] ** 2 + es[:, 1] ** 2 + er[:, 0] ** 2 + er[:, 1] ** 2
        return f * np.abs(num) / np.sqrt(np.maximum(den, 1e-18))

    best_mask = np.zeros(n, dtype=bool)
    best_e = None
    for _ in range(iters):
        idx = rng.choice(n, size=8, replace=False)
        try:
            e = fit(idx)
        except np.linalg.LinAlgError:
            continue
        mask = score(e) < thresh_px
        if mask.sum() > best_mask.sum():
            best_mask, best_e = mask, e
    if best_e is not None and best_mask.sum() >= 8:
        e = fit(np.flatnonzero(best_mask))
        mask = score(e) < thresh_px
        if mask.sum() >= best_mask.sum():
            best_mask, best_e = mask, e
    return best_mask, best_e


def pose_from_essential(e, rays_s, rays_r):
    """Camera-frame ref_from_src with unit baseline recovered from E.

    Picks the (R, t) candidate that puts the most triangulated
    correspondences in front of both cameras; None when no candidate does.
    """
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    best_front, best = 0, None
    for r in (u @ w @ vt, u @ w.T @ vt):
        g = rays_s @ r.T
        for t in (u[:, 2], -u[:, 2]):
            # per-row least squares for depths: z_s * R d_s - z_r * d_r = -t
            a11 = np.einsum("ij,ij->i", g, g)
            a12 = -np.einsum("ij,ij->i", g, rays_r)
            a22 = np.einsum("ij,ij->i", rays_r, rays_r)
            b1 = -g @ t
            b2 = rays_r @ t
            det = a11 * a22 - a12 * a12
            ok = det > 1e-12
            z_s = np.where(ok, (b1 * a22 - a12 * b2) / np.where(ok, det, 1.0), -1.0)
            z_r = np.where(ok, (a11 * b2 - a12 * b1) / np.where(ok, det, 1.0), -1.0)
            n_front = int(np.sum((z_s > 1e-6) & (z_r > 1e-6)))
            if n_front > best_front:
                best_front, best = n_front, Pose(r, t.copy())
    return best


def verify_matches(matches, cam: Camera, thresh_px: float = 1.5, iters: int = 200,
                   rng=None):
    """Epipolar RANSAC gate over candidate matches; returns (inliers, E)."""
    rays_s, rays_r, _ = feature_arrays(matches)
    mask, e = essential_ransac(rays_s, rays_r, cam, thresh_px, iters, rng)
    return [m for m, k in zip(matches, mask) if k], e


def feature_arrays(matches):
    """list[FeatureMatch] -> (rays_s (J, 3), rays_r (J, 3), sigma_px2 (J,))."""
    if not matches:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
    return (
        np.stack([m.ray_source for m in matches]),
        np.stack([m.ray_reference for m in matches]),
        np.array([m.sigma_px2 for m in matches]),
    )
