import numpy as np
import time
from photogeo import scenesim, solver, lie, vision
from photogeo.solver import SolverConfig, PlaceObservations

t0 = time.time()
noise = scenesim.NoiseSpec.noise_free()
for kind in ("room", "corridor", "open-plane", "cluttered"):
    scene = scenesim.build_scene(kind, seed=3)
    loop = scenesim.simulate_loop(scene, noise, n_pairs=2, seed=11)
    worst_t = worst_r = 0.0
    for place, truth in zip(loop.places, loop.truth.pair_alignments):
        obs = PlaceObservations(pair=place.pair, cloud_source=place.cloud_source,
                                cloud_reference=place.cloud_reference,
                                features=list(place.features), semidirect=None)
        est = solver.solve_alignment(obs, place.init, SolverConfig(),
                                     cam=loop.camera, traj=loop.trajectory)
        err = lie.log(est.pose @ truth.inverse())
        worst_t = max(worst_t, np.linalg.norm(err[:3]))
        worst_r = max(worst_r, np.linalg.norm(err[3:]))
    ok = worst_t < 1e-6 and worst_r < 1e-8
    print(f"{kind:11s} worst et={worst_t:.3e} er={worst_r:.3e} {'PASS' if ok else 'FAIL'}")
print(f"{time.time()-t0:.1f}s")
