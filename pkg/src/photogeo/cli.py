"""Experiment runner and report generator.

`run` executes a method-by-regime trial grid from a JSON scenario config,
writing per-trial JSON-lines, per-cell fusion traces, and an aggregated CSV.
`plot` turns a fusion trace into two SVG charts. Outputs are byte-identical
for a given config and seed, independent of worker count.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import fusion as fusion_mod
from . import lie, scenesim, solver, vision
from .errors import ConfigError, PipelineError
from .fusion import FusionConfig, SequentialFusion
from .scenesim import REGIMES, SCENE_KINDS, NoiseSpec
from .solver import PlaceObservations, SolverConfig

METHODS = ("geo-only", "visual+icp", "photogeoseq", "photogeoseq+")
FUSION_METHODS = frozenset({"photogeoseq", "photogeoseq+"})
CSV_HEADER = "method,regime,trials,success_rate,et_rmse_m,er_rmse_rad,mean_time_s,mean_in"
SUCCESS_ET = 0.5  # m
SUCCESS_ER = 0.1  # rad


@dataclass
class ExperimentSpec:
    scene: str = "room"
    scene_seed: int = 7
    n_pairs: int = 5
    trials: int = 50
    seed_base: int = 1000
    methods: tuple = METHODS
    regimes: tuple = ("easy", "medium", "hard")
    out: str = "results"
    timed: bool = False
    noise: dict = field(default_factory=dict)
    fusion: dict = field(default_factory=dict)


_NOISE_FIELDS = {f.name for f in dataclasses.fields(NoiseSpec)} - {"regime"}
_FUSION_FIELDS = {f.name for f in dataclasses.fields(FusionConfig)}
_SPEC_FIELDS = {f.name for f in dataclasses.fields(ExperimentSpec)}


def validate_config(path):
    """Parse and fully validate a scenario config.

    Returns (spec, errors); spec is None when anything failed. All field
    problems are reported together rather than first-error-only.
    """
    errors = []
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        return None, [f"cannot read config: {exc}"]
    except json.JSONDecodeError as exc:
        return None, [f"{path}:{exc.lineno}: invalid JSON: {exc.msg}"]
    if not isinstance(raw, dict):
        return None, ["config root must be a JSON object"]

    for key in sorted(set(raw) - _SPEC_FIELDS):
        errors.append(f"unknown field {key!r} (valid: {', '.join(sorted(_SPEC_FIELDS))})")

    def take(name, kind, ok, why):
        val = raw.get(name, getattr(ExperimentSpec, name, None))
        if name in raw:
            if not isinstance(raw[name], kind) or isinstance(raw[name], bool) and kind is int:
                errors.append(f"{name}: expected {kind.__name__}, got {type(raw[name]).__name__}")
                return None
            if not ok(raw[name]):
                errors.append(f"{name}: {why}")
                return None
            return raw[name]
        return val

    scene = take("scene", str, lambda v: v in SCENE_KINDS,
                 f"unknown scene (valid: {', '.join(SCENE_KINDS)})")
    scene_seed = take("scene_seed", int, lambda v: v >= 0, "must be >= 0")
    n_pairs = take("n_pairs", int, lambda v: 1 <= v <= 10, "must be in 1..10")
    trials = take("trials", int, lambda v: v >= 1, "must be >= 1")
    seed_base = take("seed_base", int, lambda v: v >= 0, "must be >= 0")
    out = take("out", str, lambda v: bool(v), "must be non-empty")
    timed = raw.get("timed", False)
    if not isinstance(timed, bool):
        errors.append("timed: expected bool")

    methods = raw.get("methods", list(METHODS))
    if not isinstance(methods, list) or not methods:
        errors.append("methods: expected a non-empty list")
        methods = []
    for m in methods:
        if m not in METHODS:
            errors.append(f"methods: unknown method {m!r} (valid: {', '.join(METHODS)})")
    regimes = raw.get("regimes", ["easy", "medium", "hard"])
    if not isinstance(regimes, list) or not regimes:
        errors.append("regimes: expected a non-empty list")
        regimes = []
    for r in regimes:
        if r not in REGIMES:
            errors.append(f"regimes: unknown regime {r!r} (valid: {', '.join(REGIMES)})")

    noise = raw.get("noise", {})
    if not isinstance(noise, dict):
        errors.append("noise: expected an object of NoiseSpec fields")
        noise = {}
    else:
        for key in sorted(set(noise) - _NOISE_FIELDS):
            errors.append(f"noise.{key}: unknown field (valid: {', '.join(sorted(_NOISE_FIELDS))})")
        noise = {k: v for k, v in noise.items() if k in _NOISE_FIELDS}
        try:
            NoiseSpec(regime="easy", **noise)
        except (ConfigError, TypeError) as exc:
            errors.append(f"noise: {exc}")

    fus = raw.get("fusion", {})
    if not isinstance(fus, dict):
        errors.append("fusion: expected an object of FusionConfig fields")
        fus = {}
    else:
        for key in sorted(set(fus) - _FUSION_FIELDS):
            errors.append(f"fusion.{key}: unknown field (valid: {', '.join(sorted(_FUSION_FIELDS))})")
        fus = {k: v for k, v in fus.items() if k in _FUSION_FIELDS}
        try:
            FusionConfig(**fus)
        except (ValueError, TypeError) as exc:
            errors.append(f"fusion: {exc}")

    if errors:
        return None, errors
    return ExperimentSpec(scene=scene, scene_seed=scene_seed, n_pairs=n_pairs,
                          trials=trials, seed_base=seed_base, methods=tuple(methods),
                          regimes=tuple(regimes), out=out, timed=bool(timed),
                          noise=dict(noise), fusion=dict(fus)), []


_SCENES: dict = {}


def _scene(kind, seed):
    got = _SCENES.get((kind, seed))
    if got is None:
        got = scenesim.build_scene(kind, seed)
        _SCENES[(kind, seed)] = got
    return got


def _offerable(est) -> bool:
    """Self-consistency gate: most photometric rows must sit inside their gate.

    Without photometric rows the converged flag is all there is.
    """
    if est.n_features:
        return est.inlier_rate >= 0.5
    return est.converged


def _pose_error(pose, truth):
    err = lie.log(pose @ truth.inverse())
    return float(np.linalg.norm(err[:3])), float(np.linalg.norm(err[3:]))


def _single_pair_trial(method, loop, spec, trial):
    place = loop.places[0]
    truth = loop.truth.pair_alignments[0]
    cam = loop.camera if method != "geo-only" else None
    traj = loop.trajectory if method != "geo-only" else None
    features, rng = [], None
    if cam is not None:
        rng = np.random.default_rng([spec.seed_base, trial, 0])
        features, _ = vision.verify_matches(place.features, cam, rng=rng)
    obs = PlaceObservations(pair=place.pair, cloud_source=place.cloud_source,
                            cloud_reference=place.cloud_reference,
                            features=features, semidirect=None)
    try:
        est = solver.solve_alignment_robust(obs, place.init, SolverConfig(),
                                            cam=cam, traj=traj, rng=rng)
    except PipelineError as exc:
        return {"e_t": None, "e_r": None, "success": False, "i_n": 1,
                "status": f"raised:{type(exc).__name__}"}
    e_t, e_r = _pose_error(est.pose, truth)
    success = e_t < SUCCESS_ET and e_r < SUCCESS_ER
    return {"e_t": e_t, "e_r": e_r, "success": bool(success), "i_n": 1,
            "status": "solved" if est.converged else "stalled"}


def _fusion_trial(method, loop, spec, trial):
    fus = SequentialFusion(loop.trajectory, loop.camera, FusionConfig(**spec.fusion))
    trace = []
    for k, place in enumerate(loop.places):
        if fus.done:
            break
        rng = np.random.default_rng([spec.seed_base, trial, k])
        features, _ = vision.verify_matches(place.features, loop.camera, rng=rng)
        semid = place.semidirect if method == "photogeoseq+" else None
        obs = PlaceObservations(pair=place.pair, cloud_source=place.cloud_source,
                                cloud_reference=place.cloud_reference,
                                features=features, semidirect=semid)
        try:
            est = solver.solve_alignment_robust(obs, place.init, SolverConfig(),
                                                cam=loop.camera, traj=loop.trajectory,
                                                rng=rng)
        except PipelineError as exc:
            trace.append({"offer": k, "decision": f"skip:{type(exc).__name__}",
                          "statistic": None, "threshold": None, "dof": 0,
                          "eig_sum": None, "count": 0, "status": "skipped",
                          "e_t": None})
            continue
        if not _offerable(est):
            trace.append({"offer": k, "decision": "withheld", "statistic": None,
                          "threshold": None, "dof": 0, "eig_sum": None, "count": 0,
                          "status": "withheld", "e_t": None})
            continue
        rec = fus.offer(est)
        e_t = None
        if fus.state is not None:
            anchor = loop.truth.pair_alignments[fus.first_pair.index]
            e_t, _ = _pose_error(fus.state.pose, anchor)
        trace.append({"offer": k, "decision": rec["decision"],
                      "statistic": rec["statistic"], "threshold": rec["threshold"],
                      "dof": rec["dof"], "eig_sum": rec["eig_sum"],
                      "count": rec["count"], "status": rec["status"], "e_t": e_t})
    if fus.state is None:
        return {"e_t": None, "e_r": None, "success": False, "i_n": fus.offers,
                "status": "empty", "fusion": trace}
    anchor = loop.truth.pair_alignments[fus.first_pair.index]
    e_t, e_r = _pose_error(fus.state.pose, anchor)
    success = e_t < SUCCESS_ET and e_r < SUCCESS_ER
    return {"e_t": e_t, "e_r": e_r, "success": bool(success), "i_n": fus.offers,
            "status": fus.state.status, "fusion": trace}


def _run_cell(spec: ExperimentSpec, regime: str, trial: int):
    """All methods on one (regime, trial) cell; the loop is shared."""
    scene = _scene(spec.scene, spec.scene_seed)
    noise = NoiseSpec(regime=regime, **spec.noise)
    n_pairs = spec.n_pairs if any(m in FUSION_METHODS for m in spec.methods) else 1
    seed = spec.seed_base + trial
    loop = scenesim.simulate_loop(scene, noise, n_pairs=n_pairs, seed=seed)
    records = []
    for method in spec.methods:
        t0 = time.perf_counter()
        if method in FUSION_METHODS:
            body = _fusion_trial(method, loop, spec, trial)
        else:
            body = _single_pair_trial(method, loop, spec, trial)
        body.update({"method": method, "regime": regime, "trial": trial, "seed": seed,
                     "time_s": time.perf_counter() - t0 if spec.timed else 0.0})
        records.append(body)
    return records


def _rmse(values):
    if not values:
        return float("nan")
    return math.sqrt(sum(v * v for v in values) / len(values))


def run_experiment(spec: ExperimentSpec, jobs: int = 1):
    """Execute the grid; writes trials.jsonl, per-cell traces, summary.csv.

    Returns the list of aggregated row dicts (one per method x regime).
    """
    os.makedirs(spec.out, exist_ok=True)
    tasks = [(regime, trial) for regime in spec.regimes for trial in range(spec.trials)]
    by_key = {}
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = {pool.submit(_run_cell, spec, r, t): (r, t) for r, t in tasks}
            for fut in concurrent.futures.as_completed(futs):
                r, t = futs[fut]
                by_key[(r, t)] = fut.result()
    else:
        for r, t in tasks:
            by_key[(r, t)] = _run_cell(spec, r, t)

    # Aggregation is keyed, never order-of-completion.
    records = []
    for regime in spec.regimes:
        for trial in range(spec.trials):
            records.extend(by_key[(regime, trial)])
    records.sort(key=lambda r: (r["method"], r["regime"], r["trial"]))

    with open(os.path.join(spec.out, "trials.jsonl"), "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    for method in spec.methods:
        if method not in FUSION_METHODS:
            continue
        for regime in spec.regimes:
            first = next(r for r in records
                         if r["method"] == method and r["regime"] == regime
                         and r["trial"] == 0)
            name = f"trace_{method.replace('+', 'plus')}_{regime}.jsonl"
            with open(os.path.join(spec.out, name), "w") as fh:
                for row in first["fusion"]:
                    fh.write(json.dumps(row, sort_keys=True) + "\n")

    rows = []
    for method in spec.methods:
        for regime in spec.regimes:
            cell = [r for r in records if r["method"] == method and r["regime"] == regime]
            succ = [r for r in cell if r["success"]]
            rows.append({
                "method": method,
                "regime": regime,
                "trials": len(cell),
                "success_rate": len(succ) / len(cell) if cell else float("nan"),
                "et_rmse_m": _rmse([r["e_t"] for r in succ]),
                "er_rmse_rad": _rmse([r["e_r"] for r in succ]),
                "mean_time_s": sum(r["time_s"] for r in cell) / len(cell) if cell else 0.0,
                "mean_in": sum(r["i_n"] for r in cell) / len(cell) if cell else 0.0,
            })
    with open(os.path.join(spec.out, "summary.csv"), "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for row in rows:
            fh.write("%s,%s,%d,%.4f,%.9g,%.9g,%.4f,%.4f\n" % (
                row["method"], row["regime"], row["trials"], row["success_rate"],
                row["et_rmse_m"], row["er_rmse_rad"], row["mean_time_s"], row["mean_in"]))
    return rows


# --- SVG plotting ------------------------------------------------------------

_W, _H = 640, 360
_ML, _MR, _MT, _MB = 70, 24, 20, 46


def _log_axis(values):
    pos = [v for v in values if v is not None and v > 0]
    if not pos:
        return 0.0, 1.0
    lo, hi = math.log10(min(pos)), math.log10(max(pos))
    if hi - lo < 1e-9:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def _svg_open(title):
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.1f}" y="14" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif">{title}</text>',
    ]


def _svg_axes(parts, x_label, y_label):
    x1, y1 = _ML, _H - _MB
    parts.append(f'<line x1="{x1}" y1="{_MT}" x2="{x1}" y2="{y1}" stroke="black"/>')
    parts.append(f'<line x1="{x1}" y1="{y1}" x2="{_W - _MR}" y2="{y1}" stroke="black"/>')
    parts.append(f'<text x="{(_ML + _W - _MR) / 2:.1f}" y="{_H - 10}" text-anchor="middle" '
                 f'font-size="11" font-family="sans-serif">{x_label}</text>')
    parts.append(f'<text x="16" y="{(_MT + y1) / 2:.1f}" text-anchor="middle" font-size="11" '
                 f'font-family="sans-serif" transform="rotate(-90 16 {(_MT + y1) / 2:.1f})">'
                 f'{y_label}</text>')


def _xmap(i, n):
    if n <= 1:
        return _ML + (_W - _ML - _MR) / 2
    return _ML + (_W - _ML - _MR) * i / (n - 1)


def _ymap_log(v, lo, hi):
    frac = (math.log10(v) - lo) / (hi - lo)
    return (_H - _MB) - frac * (_H - _MB - _MT)


def _svg_log_yticks(parts, lo, hi):
    for k in range(5):
        val = lo + (hi - lo) * k / 4
        y = (_H - _MB) - (_H - _MB - _MT) * k / 4
        parts.append(f'<line x1="{_ML - 4}" y1="{y:.1f}" x2="{_ML}" y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{_ML - 7}" y="{y + 3.5:.1f}" text-anchor="end" font-size="10" '
                     f'font-family="sans-serif">{10 ** val:.2g}</text>')


def _svg_xticks(parts, n):
    for i in range(n):
        x = _xmap(i, n)
        y1 = _H - _MB
        parts.append(f'<line x1="{x:.1f}" y1="{y1}" x2="{x:.1f}" y2="{y1 + 4}" stroke="black"/>')
        parts.append(f'<text x="{x:.1f}" y="{y1 + 16}" text-anchor="middle" font-size="10" '
                     f'font-family="sans-serif">{i}</text>')


def _polyline(points, color, dash=None):
    if len(points) < 2:
        return ""
    pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in points)
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{extra}/>'


def plot_trace(log_path, out_dir=None):
    """Render a fusion trace as two SVGs; returns the written file paths.

    Raises ConfigError on an empty or malformed trace (with line number).
    """
    rows = []
    try:
        with open(log_path) as fh:
            for ln, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"{log_path}:{ln}: invalid JSON: {exc.msg}") from exc
                if not isinstance(row, dict) or "decision" not in row:
                    raise ConfigError(f"{log_path}:{ln}: not a fusion trace record")
                rows.append(row)
    except OSError as exc:
        raise ConfigError(f"cannot read trace: {exc}") from exc
    if not rows:
        raise ConfigError(f"{log_path}: empty trace, nothing to plot")

    out_dir = out_dir or (os.path.dirname(os.path.abspath(log_path)))
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(log_path))[0]
    n = len(rows)

    # Chart 1: pose error and covariance eigenvalue sum per offer.
    errs = [r.get("e_t") for r in rows]
    eigs = [r.get("eig_sum") for r in rows]
    lo, hi = _log_axis([v for v in errs + eigs if v])
    parts = _svg_open("pose error and uncertainty per fusion step")
    _svg_axes(parts, "offer index", "error [m] / eigenvalue sum")
    _svg_log_yticks(parts, lo, hi)
    _svg_xticks(parts, n)
    for series, color in ((errs, "#d62728"), (eigs, "#1f77b4")):
        pts = [(_xmap(i, n), _ymap_log(v, lo, hi))
               for i, v in enumerate(series) if v is not None and v > 0]
        parts.append(_polyline(pts, color))
    parts.append(f'<text x="{_W - _MR}" y="{_MT + 12}" text-anchor="end" font-size="10" '
                 f'fill="#d62728" font-family="sans-serif">pose error</text>')
    parts.append(f'<text x="{_W - _MR}" y="{_MT + 26}" text-anchor="end" font-size="10" '
                 f'fill="#1f77b4" font-family="sans-serif">eigenvalue sum</text>')
    parts.append("</svg>")
    p1 = os.path.join(out_dir, f"{stem}_error.svg")
    with open(p1, "w") as fh:
        fh.write("\n".join(parts) + "\n")

    # Chart 2: evidence statistic against its threshold, accept/reject marked.
    stats = [r.get("statistic") for r in rows]
    thrs = [r.get("threshold") for r in rows]
    lo, hi = _log_axis([v for v in stats + thrs
                        if v is not None and not math.isinf(v)])
    parts = _svg_open("visual evidence screen per offer")
    _svg_axes(parts, "offer index", "chi-square statistic")
    _svg_log_yticks(parts, lo, hi)
    _svg_xticks(parts, n)
    pts = [(_xmap(i, n), _ymap_log(v, lo, hi))
           for i, v in enumerate(thrs) if v is not None and not math.isinf(v) and v > 0]
    parts.append(_polyline(pts, "#999999", dash="5,3"))
    for i, r in enumerate(rows):
        v = r.get("statistic")
        if v is None or v <= 0:
            continue
        x, y = _xmap(i, n), _ymap_log(v, lo, hi)
        if r["decision"] == "fuse":
            parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="4" fill="#2ca02c"/>')
        else:
            parts.append(f'<line x1="{x - 4:.1f}" y1="{y - 4:.1f}" x2="{x + 4:.1f}" '
                         f'y2="{y + 4:.1f}" stroke="#d62728" stroke-width="2"/>')
            parts.append(f'<line x1="{x - 4:.1f}" y1="{y + 4:.1f}" x2="{x + 4:.1f}" '
                         f'y2="{y - 4:.1f}" stroke="#d62728" stroke-width="2"/>')
    parts.append(f'<text x="{_W - _MR}" y="{_MT + 12}" text-anchor="end" font-size="10" '
                 f'fill="#999999" font-family="sans-serif">threshold</text>')
    parts.append("</svg>")
    p2 = os.path.join(out_dir, f"{stem}_evidence.svg")
    with open(p2, "w") as fh:
        fh.write("\n".join(parts) + "\n")
    return [p1, p2]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="photogeo",
                                 description="synthetic place-realignment experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    ap_run = sub.add_parser("run", help="execute a scenario config")
    ap_run.add_argument("config")
    ap_run.add_argument("--check", action="store_true",
                        help="validate the config and echo the resolved spec")
    ap_run.add_argument("--seed", type=int, default=None, help="override seed_base")
    ap_run.add_argument("--jobs", type=int, default=1, help="worker processes")
    ap_run.add_argument("--out", default=None, help="override output directory")
    ap_plot = sub.add_parser("plot", help="render a fusion trace to SVG")
    ap_plot.add_argument("log")
    ap_plot.add_argument("--out", default=None, help="output directory")
    args = ap.parse_args(argv)

    if args.command == "run":
        spec, problems = validate_config(args.config)
        if problems:
            for p in problems:
                print(f"config error: {p}", file=sys.stderr)
            return 2
        if args.seed is not None:
            spec = dataclasses.replace(spec, seed_base=args.seed)
        if args.out is not None:
            spec = dataclasses.replace(spec, out=args.out)
        if args.check:
            print(json.dumps(dataclasses.asdict(spec), sort_keys=True, indent=2))
            return 0
        if args.jobs < 1:
            print("config error: --jobs must be >= 1", file=sys.stderr)
            return 2
        try:
            rows = run_experiment(spec, jobs=args.jobs)
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 3
        for row in rows:
            print(f"{row['method']:13s} {row['regime']:7s} "
                  f"success {row['success_rate']:.2f}  "
                  f"et_rmse {row['et_rmse_m']:.6g}  in {row['mean_in']:.2f}")
        return 0

    try:
        written = plot_trace(args.log, args.out)
    except ConfigError as exc:
        print(f"plot error: {exc}", file=sys.stderr)
        return 2
    for p in written:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
