import cProfile
import pstats
import numpy as np
from photogeo import scenesim, solver, vision
from photogeo.solver import SolverConfig, PlaceObservations
from photogeo.fusion import SequentialFusion, FusionConfig

scene = scenesim.build_scene("room", seed=7)
noise = scenesim.NoiseSpec(regime="medium")

def trial():
    loop = scenesim.simulate_loop(scene, noise, n_pairs=5, seed=300)
    fus = SequentialFusion(loop.trajectory, loop.camera, FusionConfig())
    for k, place in enumerate(loop.places):
        if fus.done:
            break
        rng = np.random.default_rng([300, k])
        kept, _ = vision.verify_matches(place.features, loop.camera, rng=rng)
        obs = PlaceObservations(pair=place.pair, cloud_source=place.cloud_source,
                                cloud_reference=place.cloud_reference, features=kept,
                                semidirect=place.semidirect)
        est = solver.solve_alignment_robust(obs, place.init, SolverConfig(),
                                            cam=loop.camera, traj=loop.trajectory, rng=rng)
        if est.n_features == 0 or est.inlier_rate >= 0.5:
            fus.offer(est)

cProfile.run("trial()", "/tmp/prof.out")
p = pstats.Stats("/tmp/prof.out")
p.sort_stats("cumulative").print_stats(28)
