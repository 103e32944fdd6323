import numpy as np
import time
from photogeo import scenesim, solver, lie, vision, fusion
from photogeo.solver import SolverConfig, PlaceObservations
from photogeo.fusion import SequentialFusion, FusionConfig

scene = scenesim.build_scene("room", seed=7)

def offer_ok(est):
    if est.n_features:
        return est.inlier_rate >= 0.5
    return est.converged

for reg in ("easy", "hard"):
    noise = scenesim.NoiseSpec(regime=reg)
    for seed in (300, 301, 302):
        loop = scenesim.simulate_loop(scene, noise, n_pairs=8, seed=seed)
        fus = SequentialFusion(loop.trajectory, loop.camera, FusionConfig(theta_th=1e-300))
        t0 = time.time()
        for k, place in enumerate(loop.places):
            rng = np.random.default_rng([seed, k])
            kept, _ = vision.verify_matches(place.features, loop.camera, rng=rng)
            obs = PlaceObservations(pair=place.pair, cloud_source=place.cloud_source,
                                    cloud_reference=place.cloud_reference, features=kept,
                                    semidirect=place.semidirect)
            try:
                est = solver.solve_alignment_robust(obs, place.init, SolverConfig(),
                                                    cam=loop.camera, traj=loop.trajectory,
                                                    rng=rng)
            except Exception as exc:
                print(f"  pair {k}: RAISE {type(exc).__name__}")
                continue
            if not offer_ok(est):
                print(f"  pair {k}: withheld (inl={est.inlier_rate:.2f})")
                continue
            fus.offer(est)
        rows = []
        for entry in fus.log:
            if entry["decision"] in ("seed", "fuse"):
                rows.append((entry["decision"][0], entry["count"],
                             f"{entry['eig_sum']:.3e}"))
            else:
                rows.append((entry["decision"][0], entry.get("count"), None))
        err = lie.log(fus.state.pose @ loop.truth.first_alignment.inverse()) \
            if fus.state is not None else None
        et = np.linalg.norm(err[:3]) if err is not None else float("nan")
        print(f"{reg} seed {seed}: et={et:.2e} rows={rows} ({time.time()-t0:.0f}s)")
