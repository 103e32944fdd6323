import numpy as np
import time
from photogeo import scenesim, solver, lie, vision
from photogeo.solver import SolverConfig, PlaceObservations

scene = scenesim.build_scene("room", seed=7)
noise = scenesim.NoiseSpec(regime="hard")

n_conv = 0
n_tot = 0
t0 = time.time()
for seed in range(12):
    loop = scenesim.simulate_loop(scene, noise, n_pairs=2, seed=100 + seed)
    for k, (place, truth) in enumerate(zip(loop.places, loop.truth.pair_alignments)):
        rng = np.random.default_rng([seed, k])
        kept, _ = vision.verify_matches(place.features, loop.camera, rng=rng)
        obs = PlaceObservations(pair=place.pair, cloud_source=place.cloud_source,
                                cloud_reference=place.cloud_reference, features=kept,
                                semidirect=place.semidirect)
        xi0 = lie.log(place.init @ truth.inverse())
        try:
            est = solver.solve_alignment_robust(obs, place.init, SolverConfig(),
                                                cam=loop.camera, traj=loop.trajectory,
                                                rng=rng)
        except Exception as e:
            print(f"seed {seed}: RAISE {type(e).__name__} init_t={np.linalg.norm(xi0[:3]):.2f}")
            n_tot += 1
            continue
        err = lie.log(est.pose @ truth.inverse())
        et, er = np.linalg.norm(err[:3]), np.linalg.norm(err[3:])
        ok = est.converged and et < 0.05
        n_conv += ok
        n_tot += 1
        flag = "" if ok else "  <-- FAIL"
        print(f"seed {seed}: init_t={np.linalg.norm(xi0[:3]):5.2f} -> et={et:.6f} "
              f"er={er:.6f} conv={est.converged} it={est.iterations} "
              f"inl={est.inlier_rate:.2f} nph={est.n_features}{flag}")
print(f"\nconverged-and-close {n_conv}/{n_tot}  ({time.time()-t0:.1f}s)")
