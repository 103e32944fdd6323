import numpy as np
from photogeo import scenesim, solver, lie, vision
from photogeo.solver import SolverConfig, PlaceObservations

scene = scenesim.build_scene("room", seed=7)
noise = scenesim.NoiseSpec(regime="hard")
loop = scenesim.simulate_loop(scene, noise, n_pairs=2, seed=101)
place, truth = loop.places[0], loop.truth.pair_alignments[0]

kept, e_mat = vision.verify_matches(place.features, loop.camera,
                                    rng=np.random.default_rng(9))
print(f"matches {len(place.features)} -> verified {len(kept)}")

obs = PlaceObservations(pair=place.pair, cloud_source=place.cloud_source,
                        cloud_reference=place.cloud_reference, features=kept,
                        semidirect=place.semidirect)
for label, init in (("truth", truth), ("given", place.init)):
    est = solver.solve_alignment(obs, init, SolverConfig(),
                                 cam=loop.camera, traj=loop.trajectory)
    err = lie.log(est.pose @ truth.inverse())
    print(f"init={label:5s} -> et={np.linalg.norm(err[:3]):.6f} "
          f"er={np.linalg.norm(err[3:]):.6f} conv={est.converged} it={est.iterations} "
          f"inl={est.inlier_rate:.2f}")

rel_true = vision.relative_camera_pose(truth, loop.camera)
rays_s, rays_r, _ = vision.feature_arrays(kept)
rel_e = vision.pose_from_essential(e_mat, rays_s, rays_r)
if rel_e is not None:
    dr = lie.so3_log(rel_e.rotation @ rel_true.rotation.T)
    that_true = rel_true.translation / np.linalg.norm(rel_true.translation)
    print(f"E-pose: rot err {np.linalg.norm(dr):.5f} rad, "
          f"dir dot {rel_e.translation @ that_true:+.5f}, "
          f"true baseline {np.linalg.norm(rel_true.translation):.3f} m")
