"""Synthetic worlds, trajectories, and the full measurement channel.

Scenes are rectangle soups with procedural volumetric texture and scattered
surface landmarks. A two-pass trajectory revisits the mapped region with a
small lateral offset, producing place pairs with a usable epipolar baseline.
All randomness flows through per-purpose child streams of one seed sequence,
with place-pair slots keyed by index so dropping a slot leaves every other
slot's draws untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import geometry, lie, vision
from .errors import ConfigError
from .geometry import PointCloud, extract_cloud
from .lie import Pose
from .solver import SemiDirectData
from .trajectory import PlacePair, Trajectory
from .vision import Camera, DepthMap, FeatureMatch, ImageWindow, Patch

# Initial-guess regimes: rotation scale in degrees, translation scale in
# decimeters. The hard regime is a genuinely wrong guess (10 deg, 5 m scale)
# that still keeps the clouds inside the 10 m extraction overlap.
REGIMES = {"easy": (0.1, 0.5), "medium": (1.0, 5.0), "hard": (10.0, 50.0)}

SCENE_KINDS = ("room", "corridor", "open-plane", "cluttered")

POINTS_PER_M2 = 200.0  # per pass; both passes together double it
POINT_TIME_JITTER = 8.0  # s, spread of cloud point timestamps around a knot
PIXEL_VAR_FLOOR = 1e-6  # px^2, keeps whitening finite in noise-free runs
REFINE_VAR_FLOOR = 0.01  # px^2, patch refinement interpolation accuracy budget
SEED_MARGIN = 26.0  # px, keeps patches and search windows inside the image
MAX_SEEDS = 32
FALSE_PAIR_SHIFT = 8.0  # s along the reference pass for injected pairs
_TILE = 32


@dataclass(frozen=True)
class Rect:
    """Parallelogram patch: origin plus two edge vectors."""

    origin: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray

    @property
    def normal(self):
        n = np.cross(self.edge_u, self.edge_v)
        return n / np.linalg.norm(n)

    @property
    def area(self):
        return float(np.linalg.norm(np.cross(self.edge_u, self.edge_v)))


@dataclass
class TextureField:
    """Band-limited sum of oriented 3-D sinusoids; gradient-rich everywhere."""

    dirs: np.ndarray  # (K, 3) unit directions
    freqs: np.ndarray  # (K,) rad/m
    amps: np.ndarray
    phases: np.ndarray

    @staticmethod
    def make(rng, octaves: int = 10):
        d = rng.normal(size=(octaves, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        # finest wavelength ~5 cm: several pixels at indoor viewing
        # distances, sharp enough for patch correlation to localize
        # without the aperture ambiguity of smooth gradients
        freqs = np.geomspace(2.0, 120.0, octaves)
        amps = 1.0 / np.sqrt(np.arange(1, octaves + 1))
        phases = rng.uniform(0, 2 * np.pi, octaves)
        return TextureField(d, freqs, amps, phases)

    def intensity(self, pts):
        pts = np.atleast_2d(pts)
        arg = (pts @ self.dirs.T) * self.freqs + self.phases
        return 0.5 + (np.sin(arg) @ self.amps) / (2.0 * self.amps.sum())


@dataclass
class Scene:
    kind: str
    seed: int
    rects: list
    landmarks: np.ndarray  # (L, 3)
    distinct: np.ndarray  # (L,) bool: descriptor-matchable subset
    texture: TextureField
    axis: Optional[np.ndarray] = None  # unconstrained direction, if any

    # stacked rect arrays for vectorized ray casting
    def _stacks(self):
        if not hasattr(self, "_rs"):
            o = np.stack([r.origin for r in self.rects])
            u = np.stack([r.edge_u for r in self.rects])
            v = np.stack([r.edge_v for r in self.rects])
            n = np.stack([r.normal for r in self.rects])
            self._rs = (o, u, v, n, np.einsum("ij,ij->i", u, u), np.einsum("ij,ij->i", v, v))
        return self._rs


@dataclass
class NoiseSpec:
    """Measurement-channel noise magnitudes; all non-negative."""

    point_sigma: float = 0.01  # m, range noise along the beam
    pixel_sigma: float = 0.5  # px, detector noise
    time_offset_mean: float = 0.004  # s, camera trigger bias
    time_offset_sigma: float = 0.0015  # s, trigger jitter per image
    extrinsic_sigma_t: float = 0.003  # m, mount uncertainty
    extrinsic_sigma_r: float = 0.002  # rad
    gross_mismatch_rate: float = 0.05  # fraction of indirect matches corrupted
    drift_rate_t: float = 1e-4  # m/s, odometry drift random walk
    drift_rate_r: float = 2e-5  # rad/s
    regime: str = "easy"

    def __post_init__(self):
        for name in ("point_sigma", "pixel_sigma", "time_offset_sigma",
                     "extrinsic_sigma_t", "extrinsic_sigma_r",
                     "gross_mismatch_rate", "drift_rate_t", "drift_rate_r"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; choose from {sorted(REGIMES)}")

    @staticmethod
    def noise_free(regime: str = "easy"):
        return NoiseSpec(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, regime)

    def extrinsic_cov(self):
        return np.diag([self.extrinsic_sigma_t**2] * 3 + [self.extrinsic_sigma_r**2] * 3)

    def pixel_var(self):
        return max(self.pixel_sigma**2, PIXEL_VAR_FLOOR)


@dataclass
class GroundTruthRecord:
    trajectory_true: Trajectory
    first_alignment: Pose
    pair_alignments: list
    injected: list
    extrinsic_error: np.ndarray  # realized mount perturbation, twist
    time_offsets: list  # (source, reference) realized trigger offsets per pair


@dataclass
class PlaceMeasurement:
    pair: PlacePair
    cloud_source: PointCloud
    cloud_reference: PointCloud
    features: list  # indirect FeatureMatch, pre-RANSAC
    semidirect: Optional[SemiDirectData]
    init: Pose
    n_visible: int


@dataclass
class LoopData:
    trajectory: Trajectory  # the system's (drift-corrupted) trajectory
    pairs: list
    places: list
    camera: Camera
    truth: GroundTruthRecord


def default_mount() -> Pose:
    # camera x right, y down, z forward; platform x forward, y left, z up
    rot = np.column_stack([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    return Pose(rot, np.array([0.08, 0.0, -0.05]))


def default_camera(noise: NoiseSpec) -> Camera:
    return Camera(
        fx=800.0, fy=800.0, cx=480.0, cy=270.0, width=960, height=540,
        lidar_from_camera=default_mount(),
        extrinsic_cov=noise.extrinsic_cov(),
        time_offset_mean=noise.time_offset_mean,
        time_offset_var=noise.time_offset_sigma**2,
    )


def _box_rects(lo, hi, faces=("floor", "ceiling", "y-", "y+", "x-", "x+")):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    dx, dy, dz = hi - lo
    out = []
    # interior-facing orientation is irrelevant; normals get flipped per sensor
    if "floor" in faces:
        out.append(Rect(lo.copy(), np.array([dx, 0, 0.0]), np.array([0, dy, 0.0])))
    if "ceiling" in faces:
        out.append(Rect(np.array([lo[0], lo[1], hi[2]]), np.array([dx, 0, 0.0]), np.array([0, dy, 0.0])))
    if "y-" in faces:
        out.append(Rect(lo.copy(), np.array([dx, 0, 0.0]), np.array([0, 0, dz])))
    if "y+" in faces:
        out.append(Rect(np.array([lo[0], hi[1], lo[2]]), np.array([dx, 0, 0.0]), np.array([0, 0, dz])))
    if "x-" in faces:
        out.append(Rect(lo.copy(), np.array([0, dy, 0.0]), np.array([0, 0, dz])))
    if "x+" in faces:
        out.append(Rect(np.array([hi[0], lo[1], lo[2]]), np.array([0, dy, 0.0]), np.array([0, 0, dz])))
    return out


def build_scene(kind: str, seed: int) -> Scene:
    """Deterministic scene of the requested kind.

    room: closed 8x6x3 box, all six dof well constrained.
    corridor: 20 m duct without end caps; translation along the axis is
      unobservable to plane matching.
    open-plane: a single ground plane; only z, roll, pitch are geometric.
    cluttered: the room plus boxes on the floor ring and center.
    """
    rng = np.random.default_rng(seed)
    axis = None
    if kind == "room":
        rects = _box_rects([-4, -3, 0], [4, 3, 3])
    elif kind == "corridor":
        rects = _box_rects([0, -1.5, 0], [20, 1.5, 3], faces=("floor", "ceiling", "y-", "y+"))
        axis = np.array([1.0, 0.0, 0.0])
    elif kind == "open-plane":
        rects = [Rect(np.array([-12.0, -12.0, 0.0]), np.array([24.0, 0, 0]), np.array([0, 24.0, 0]))]
    elif kind == "cluttered":
        rects = _box_rects([-4, -3, 0], [4, 3, 3])
        for _ in range(8):
            ring = rng.random() < 0.7
            if ring:
                ang = rng.uniform(0, 2 * np.pi)
                r = rng.uniform(3.0, 3.5)
                cx, cy = r * np.cos(ang) * 0.95, r * np.sin(ang) * 0.75
                h = rng.uniform(0.4, 1.0)
            else:
                # center clutter stays below the sensor height
                cx, cy = rng.uniform(-0.6, 0.6, size=2)
                h = rng.uniform(0.3, 0.7)
            sx, sy = rng.uniform(0.3, 0.9, size=2)
            lo = [np.clip(cx - sx / 2, -3.9, 3.0), np.clip(cy - sy / 2, -2.9, 2.2), 0.0]
            rects += _box_rects(lo, [lo[0] + sx, lo[1] + sy, h],
                                faces=("ceiling", "y-", "y+", "x-", "x+"))
    else:
        raise ConfigError(f"unknown scene kind {kind!r}; choose from {list(SCENE_KINDS)}")

    texture = TextureField.make(rng)
    if kind == "open-plane":
        # only the traversed strip carries usable texture detail
        n_lm = 320
        landmarks = np.column_stack([
            rng.uniform(-7.0, 10.0, n_lm),
            rng.uniform(-2.5, 3.2, n_lm),
            np.zeros(n_lm),
        ])
    else:
        areas = np.array([r.area for r in rects])
        n_lm = 1600 if kind == "cluttered" else 1200
        counts = rng.multinomial(n_lm, areas / areas.sum())
        lms = []
        for r, c in zip(rects, counts):
            uu = rng.uniform(0.03, 0.97, size=(c, 1))
            vv = rng.uniform(0.03, 0.97, size=(c, 1))
            lms.append(r.origin + uu * r.edge_u + vv * r.edge_v)
        landmarks = np.concatenate(lms) if lms else np.zeros((0, 3))
    distinct = rng.random(len(landmarks)) < 0.5
    return Scene(kind, seed, rects, landmarks, distinct, texture, axis)


def raycast(scene: Scene, origin, dirs):
    """First-hit parameter t per ray, p = origin + t*dirs; (t, hit) arrays.

    With camera-frame z=1 rays rotated to the world, t is the camera z-depth.
    """
    o_r, e_u, e_v, nrm, uu, vv = scene._stacks()
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    origin = np.asarray(origin, dtype=float)
    rel0 = o_r - origin  # (R, 3)
    num = np.einsum("rj,rj->r", rel0, nrm)
    cu = -np.einsum("rj,rj->r", rel0, e_u)
    cv = -np.einsum("rj,rj->r", rel0, e_v)
    n = len(dirs)
    tbest = np.full(n, np.inf)
    for s in range(0, n, 65536):
        d = dirs[s : s + 65536]
        denom = d @ nrm.T  # (n, R)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num[None, :] / denom
        t = np.where(np.abs(denom) > 1e-12, t, -1.0)
        a = (cu[None, :] + t * (d @ e_u.T)) / uu
        b = (cv[None, :] + t * (d @ e_v.T)) / vv
        ok = (t > 1e-6) & (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1)
        tbest[s : s + 65536] = np.where(ok, t, np.inf).min(axis=1)
    return tbest, np.isfinite(tbest)


def render_view(scene: Scene, cam: Camera, world_from_cam: Pose):
    """Full-frame ray cast: procedural intensity image plus z-depth map."""
    xs = np.arange(cam.width, dtype=float)
    ys = np.arange(cam.height, dtype=float)
    gx, gy = np.meshgrid(xs, ys)
    rays = cam.ray(np.column_stack([gx.ravel(), gy.ravel()]))
    dirs = rays @ world_from_cam.rotation.T
    t, hit = raycast(scene, world_from_cam.translation, dirs)
    pts = world_from_cam.translation + np.where(hit, t, 0.0)[:, None] * dirs
    img = np.where(hit, scene.texture.intensity(pts), 0.0).reshape(cam.height, cam.width)
    depth = np.where(hit, t, 0.0).reshape(cam.height, cam.width)
    return img, DepthMap(depth, hit.reshape(cam.height, cam.width))


class RaycastImage:
    """Lazy tile-cached view rendering; quacks like an ImageWindow."""

    def __init__(self, scene: Scene, cam: Camera, world_from_cam: Pose):
        self.scene = scene
        self.cam = cam
        self.pose = world_from_cam
        self._tiles = {}

    def _tile(self, tx, ty):
        got = self._tiles.get((tx, ty))
        if got is None:
            xs = np.arange(tx * _TILE, (tx + 1) * _TILE, dtype=float)
            ys = np.arange(ty * _TILE, (ty + 1) * _TILE, dtype=float)
            gx, gy = np.meshgrid(xs, ys)
            rays = self.cam.ray(np.column_stack([gx.ravel(), gy.ravel()]))
            dirs = rays @ self.pose.rotation.T
            t, hit = raycast(self.scene, self.pose.translation, dirs)
            pts = self.pose.translation + np.where(hit, t, 0.0)[:, None] * dirs
            vals = np.where(hit, self.scene.texture.intensity(pts), 0.0)
            got = vals.reshape(_TILE, _TILE)
            self._tiles[(tx, ty)] = got
        return got

    def window(self, x0: int, y0: int, w: int, h: int) -> ImageWindow:
        tx0, ty0 = x0 // _TILE, y0 // _TILE
        tx1, ty1 = (x0 + w - 1) // _TILE, (y0 + h - 1) // _TILE
        rows = []
        for ty in range(ty0, ty1 + 1):
            rows.append(np.concatenate([self._tile(tx, ty) for tx in range(tx0, tx1 + 1)], axis=1))
        big = np.concatenate(rows, axis=0)
        ox, oy = x0 - tx0 * _TILE, y0 - ty0 * _TILE
        return ImageWindow(np.array([float(x0), float(y0)]),
                           big[oy : oy + h, ox : ox + w].copy())

    def _bounding_window(self, px, margin: int = 2):
        px = np.atleast_2d(np.asarray(px, dtype=float))
        x0 = int(np.floor(px[:, 0].min())) - margin
        y0 = int(np.floor(px[:, 1].min())) - margin
        x1 = int(np.ceil(px[:, 0].max())) + margin
        y1 = int(np.ceil(px[:, 1].max())) + margin
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, self.cam.width - 1), min(y1, self.cam.height - 1)
        return self.window(x0, y0, x1 - x0 + 1, y1 - y0 + 1)

    def contains(self, px, margin: float = 0.0):
        return self.cam.in_image(px, margin)

    def sample(self, px):
        return self._bounding_window(px).sample(px)

    def sample_grad(self, px):
        return self._bounding_window(px).sample_grad(px)


def _pass_path(scene: Scene, s):
    """Path position/heading at parameter s in [0, 1] for each pass."""
    if scene.kind in ("room", "cluttered"):
        ang = 2 * np.pi * s
        def at(offset):
            a, b = 2.5 - offset, 1.5 - offset
            pos = np.stack([a * np.cos(ang), b * np.sin(ang), 0.9 + 0.05 * np.sin(2 * ang)], -1)
            tan = np.stack([-a * np.sin(ang), b * np.cos(ang), 0.1 * np.cos(2 * ang)], -1)
            # bias the gaze toward the room center for longer sightlines
            radial = pos.copy()
            radial[:, 2] = 0.0
            radial /= np.maximum(np.linalg.norm(radial, axis=1, keepdims=True), 1e-9)
            tan = tan / np.linalg.norm(tan, axis=1, keepdims=True) - 0.4 * radial
            return pos, tan
        return at
    if scene.kind == "corridor":
        def at(offset):
            x = 1.5 + 17.0 * s
            pos = np.stack([x, np.full_like(s, -0.25 + offset),
                            np.full_like(s, 1.0 + 0.35 * offset / 0.4)], -1)
            tan = np.stack([np.ones_like(s), np.zeros_like(s), np.zeros_like(s)], -1)
            return pos, tan
        return at
    if scene.kind == "open-plane":
        def at(offset):
            x = -5.0 + 10.0 * s
            pos = np.stack([x, np.full_like(s, offset),
                            np.full_like(s, 1.6 + 0.75 * offset / 0.4)], -1)
            tan = np.stack([np.ones_like(s), np.zeros_like(s), np.zeros_like(s)], -1)
            return pos, tan
        return at
    raise ConfigError(f"unknown scene kind {scene.kind!r}")


def _heading_pose(pos, tan, pitch_down: float) -> Pose:
    fwd = tan / np.linalg.norm(tan)
    if pitch_down:
        # rotate forward direction down in its vertical plane
        horiz = np.array([fwd[0], fwd[1], 0.0])
        horiz /= max(np.linalg.norm(horiz), 1e-9)
        fwd = np.cos(pitch_down) * horiz + np.sin(pitch_down) * np.array([0, 0, -1.0])
    left = np.cross([0.0, 0.0, 1.0], fwd)
    left /= max(np.linalg.norm(left), 1e-9)
    up = np.cross(fwd, left)
    return Pose(np.column_stack([fwd, left, up]), np.asarray(pos, dtype=float))


def make_trajectory(scene: Scene, n_knots_per_pass: int = 140, dt: float = 0.5,
                    gap: float = 6.0):
    """Two same-direction passes with a lateral revisit offset.

    Returns (trajectory, pass windows ((t0, t1), (t2, t3))). The second pass
    repeats the path geometry offset sideways and slightly higher, so true
    pair alignments carry a baseline with a vertical component.
    """
    pitch = 0.55 if scene.kind == "open-plane" else 0.12
    at = _pass_path(scene, np.linspace(0.0, 1.0, n_knots_per_pass))
    knots, poses = [], []
    t = 0.0
    for offset in (0.0, 0.4):
        pos, tan = at(offset)
        for i in range(n_knots_per_pass):
            knots.append(t)
            poses.append(_heading_pose(pos[i], tan[i], pitch))
            t += dt
        t += gap - dt  # transit between passes; no knots emitted
    span = n_knots_per_pass * dt
    windows = ((0.0, span - dt), (span - dt + gap, span - dt + gap + span - dt))
    return Trajectory(np.array(knots), poses), windows


def _apply_drift(traj: Trajectory, noise: NoiseSpec, rng) -> Trajectory:
    if noise.drift_rate_t == 0.0 and noise.drift_rate_r == 0.0:
        return traj
    drift = Pose.identity()
    out = []
    prev_t = None
    for k, t in enumerate(traj.times):
        if prev_t is not None:
            dt = t - prev_t
            step = np.concatenate([
                rng.normal(scale=noise.drift_rate_t * dt, size=3),
                rng.normal(scale=noise.drift_rate_r * dt, size=3),
            ])
            drift = drift @ lie.exp(step)
        prev_t = t
        out.append(drift @ traj.pose(k))
    return Trajectory(traj.times.copy(), out)


def _sample_world(scene: Scene, traj: Trajectory, window, rng, noise: NoiseSpec):
    """Surface point cloud for one pass with per-point times and range noise."""
    t0, t1 = window
    sel = (traj.times >= t0 - 1e-9) & (traj.times <= t1 + 1e-9)
    ktimes = traj.times[sel]
    kpos = np.stack([traj.pose(i).translation for i in np.flatnonzero(sel)])
    pts, times = [], []
    for r in scene.rects:
        n = max(int(r.area * POINTS_PER_M2), 1)
        uu = rng.uniform(size=(n, 1))
        vv = rng.uniform(size=(n, 1))
        p = r.origin + uu * r.edge_u + vv * r.edge_v
        d2 = ((p[:, None, :] - kpos[None, :, :]) ** 2).sum(-1)
        nearest = np.argmin(d2, axis=1)
        tt = ktimes[nearest] + rng.uniform(-POINT_TIME_JITTER, POINT_TIME_JITTER, n)
        tt = np.clip(tt, t0, t1)
        if noise.point_sigma > 0:
            sensor = kpos[nearest]
            ray = p - sensor
            ray /= np.maximum(np.linalg.norm(ray, axis=1, keepdims=True), 1e-9)
            p = p + rng.normal(scale=noise.point_sigma, size=(n, 1)) * ray
        pts.append(p)
        times.append(tt)
    return PointCloud(np.concatenate(pts), np.concatenate(times), frame="world")


def _regime_init(truth: Pose, regime: str, rng) -> Pose:
    """Initial guess: truth left-perturbed at the regime's magnitudes.

    Magnitudes are fixed at the regime scale with only the directions drawn:
    a hard guess is then always genuinely wrong yet always inside the
    cloud-overlap radius, neither of which a dispersed draw guarantees.
    """
    sig_deg, sig_dm = REGIMES[regime]
    rot_axis = rng.normal(size=3)
    rot_axis /= np.linalg.norm(rot_axis)
    trans_dir = rng.normal(size=3)
    trans_dir /= np.linalg.norm(trans_dir)
    xi = np.concatenate([0.1 * sig_dm * trans_dir,
                         np.deg2rad(sig_deg) * rot_axis])
    return lie.exp(xi) @ truth


def _visible(scene: Scene, cam: Camera, world_from_cam: Pose, pts, margin: float):
    local = (pts - world_from_cam.translation) @ world_from_cam.rotation
    px, infront = cam.project(local)
    ok = infront & (local[:, 2] > 0.4) & cam.in_image(px, margin)
    idx = np.flatnonzero(ok)
    if len(idx):
        # world-frame rays scaled so the cast parameter equals camera z-depth
        dirs = (pts[idx] - world_from_cam.translation) / local[idx, 2][:, None]
        t, hit = raycast(scene, world_from_cam.translation, dirs)
        occluded = hit & (t < local[idx, 2] - 1e-4)
        keep = ~occluded
        out = np.zeros(len(pts), dtype=bool)
        out[idx[keep]] = True
        ok = out
    return ok, px, local[:, 2]


def simulate_loop(scene: Scene, noise: NoiseSpec, n_pairs: int, seed: int,
                  false_slots=(), false_shift: float = FALSE_PAIR_SHIFT) -> LoopData:
    """Trajectory, place pairs, and the full measurement set for one loop.

    Slots named in false_slots become false-positive pairs: their reference
    measurements are generated from a point false_shift seconds further along
    the first pass while the pair still claims the original reference time.
    """
    if not 1 <= n_pairs <= 10:
        raise ConfigError("n_pairs must be in 1..10")
    ss = np.random.SeedSequence([seed & 0xFFFFFFFF])
    base = ss.spawn(4)  # spawn keys 0..3
    # pair slot i always lands on spawn key 4 + i, independent of n_pairs
    pair_streams = [np.random.default_rng(c) for c in ss.spawn(n_pairs)]
    rng_world = np.random.default_rng(base[0])
    rng_drift = np.random.default_rng(base[1])
    rng_cali = np.random.default_rng(base[2])

    traj_true, windows = make_trajectory(scene)
    traj_sys = _apply_drift(traj_true, noise, rng_drift)
    cam = default_camera(noise)

    xi_cali = np.concatenate([
        rng_cali.normal(scale=noise.extrinsic_sigma_t, size=3),
        rng_cali.normal(scale=noise.extrinsic_sigma_r, size=3),
    ])
    mount_true = lie.exp(xi_cali) @ cam.lidar_from_camera

    world_a = _sample_world(scene, traj_true, windows[0], rng_world, noise)
    world_b = _sample_world(scene, traj_true, windows[1], rng_world, noise)

    # place anchors spread along the middle of each pass
    t0, t1 = windows[0]
    t2, t3 = windows[1]
    frac = 0.12 + 0.5 * np.arange(n_pairs) / max(n_pairs - 1, 1)
    taus_ref = t0 + frac * (t1 - t0)
    taus_src = t2 + frac * (t3 - t2)

    pairs, places = [], []
    pair_truths, injected, time_offsets = [], [], []
    sigma_px2 = noise.pixel_var()
    for i in range(n_pairs):
        rng_i = pair_streams[i]
        is_false = i in false_slots
        tau_r = float(taus_ref[i])
        tau_s = float(taus_src[i])
        tau_r_phys = tau_r + false_shift if is_false else tau_r
        pair = PlacePair(tau_s, tau_r, index=i)

        dtau_s = noise.time_offset_mean + rng_i.normal(scale=noise.time_offset_sigma or 0.0)
        dtau_r = noise.time_offset_mean + rng_i.normal(scale=noise.time_offset_sigma or 0.0)
        if noise.time_offset_sigma == 0.0:
            dtau_s = dtau_r = noise.time_offset_mean

        cam_src = traj_true.pose_at(tau_s + dtau_s) @ mount_true
        cam_ref = traj_true.pose_at(tau_r_phys + dtau_r) @ mount_true

        # clouds are local to the extracting pose, so a false pair simply
        # presents the look-alike place's local cloud as the reference
        cloud_src = extract_cloud(world_b, traj_true, tau_s)
        cloud_ref = extract_cloud(world_a, traj_true, tau_r_phys)

        vis_s, px_s, _ = _visible(scene, cam, cam_src, scene.landmarks, 8.0)
        vis_r, px_r, depth_r = _visible(scene, cam, cam_ref, scene.landmarks, 8.0)
        both = vis_s & vis_r

        # indirect features: the descriptor-matchable subset, with detector
        # noise and a slice of gross descriptor confusions
        idx = np.flatnonzero(both & scene.distinct)
        feats = []
        n_gross = int(round(noise.gross_mismatch_rate * len(idx)))
        gross = set(idx[rng_i.permutation(len(idx))[:n_gross]].tolist())
        for j in idx:
            ps = px_s[j] + rng_i.normal(scale=noise.pixel_sigma, size=2)
            if j in gross and len(idx) > 1:
                k = j
                while k == j:
                    k = idx[rng_i.integers(len(idx))]
                pr = px_r[k] + rng_i.normal(scale=noise.pixel_sigma, size=2)
            else:
                pr = px_r[j] + rng_i.normal(scale=noise.pixel_sigma, size=2)
            feats.append(FeatureMatch(cam.ray(ps), cam.ray(pr), ps, pr,
                                      sigma_px2, "indirect", i))

        # semi-direct seeds: the rest, anchored in the reference view
        sidx = np.flatnonzero(both & ~scene.distinct & (px_r[:, 0] > SEED_MARGIN)
                              & (px_r[:, 0] < cam.width - 1 - SEED_MARGIN)
                              & (px_r[:, 1] > SEED_MARGIN)
                              & (px_r[:, 1] < cam.height - 1 - SEED_MARGIN))
        sidx = sidx[:MAX_SEEDS]
        ref_img = RaycastImage(scene, cam, cam_ref)
        depth_map = DepthMap.empty(cam.width, cam.height)
        seeds, patches = [], []
        half = vision.PATCH_HALF
        for j in sidx:
            seed_px = px_r[j] + rng_i.normal(scale=min(noise.pixel_sigma, 1.0), size=2)
            cx, cy = int(round(seed_px[0])), int(round(seed_px[1]))
            win = ref_img.window(cx - half - 2, cy - half - 2, 2 * half + 5, 2 * half + 5)
            offs = vision._patch_grid(half)
            vals, ok = win.sample(seed_px + offs)
            if not np.all(ok):
                continue
            patch = vision.make_patch(vals.reshape(2 * half + 1, 2 * half + 1), seed_px)
            if patch is None:
                continue
            # z-depth window rendered from the reference camera
            dx0, dy0 = cx - 3, cy - 3
            xs = np.arange(dx0, dx0 + 7, dtype=float)
            ys = np.arange(dy0, dy0 + 7, dtype=float)
            gx, gy = np.meshgrid(xs, ys)
            rays = cam.ray(np.column_stack([gx.ravel(), gy.ravel()]))
            dirs = rays @ cam_ref.rotation.T
            tz, hit = raycast(scene, cam_ref.translation, dirs)
            depth_map.set_window(dx0, dy0, np.where(hit, tz, 0.0).reshape(7, 7),
                                 hit.reshape(7, 7))
            seeds.append(seed_px)
            patches.append(patch)
        src_img = RaycastImage(scene, cam, cam_src)
        semid = None
        if seeds:
            # refinement never beats its interpolation accuracy, so its
            # variance budget is floored independently of detector noise
            semid = SemiDirectData(np.array(seeds), patches, depth_map, src_img,
                                   sigma_px2=max(sigma_px2, REFINE_VAR_FLOOR))

        truth_claimed = traj_true.pose_at(tau_r).inverse() @ traj_true.pose_at(tau_s)
        init = _regime_init(truth_claimed, noise.regime, rng_i)

        pairs.append(pair)
        pair_truths.append(truth_claimed)
        injected.append(is_false)
        time_offsets.append((dtau_s, dtau_r))
        places.append(PlaceMeasurement(pair, cloud_src, cloud_ref, feats, semid,
                                       init, int(np.sum(both))))

    truth = GroundTruthRecord(
        trajectory_true=traj_true,
        first_alignment=pair_truths[0],
        pair_alignments=pair_truths,
        injected=injected,
        extrinsic_error=xi_cali,
        time_offsets=time_offsets,
    )
    return LoopData(traj_sys, pairs, places, cam, truth)


def save_cloud(path, cloud: PointCloud):
    times = cloud.times if cloud.times is not None else np.zeros(len(cloud))
    with open(path, "w") as f:
        f.write("# x y z t\n")
        for p, t in zip(cloud.points, times):
            f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {t:.6f}\n")


def load_cloud(path) -> PointCloud:
    pts, times = [], []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ConfigError(f"{path}:{ln}: expected 'x y z t'")
            pts.append([float(v) for v in parts[:3]])
            times.append(float(parts[3]))
    return PointCloud(np.array(pts), np.array(times))


def save_pgm(path, img):
    """8-bit grayscale PGM; values clipped to [0, 1]."""
    arr = np.clip(np.asarray(img, dtype=float), 0.0, 1.0)
    data = (arr * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        f.write(data.tobytes())
