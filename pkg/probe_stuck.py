import numpy as np
from photogeo import scenesim, solver, lie, vision, geometry
from photogeo.solver import SolverConfig, _System, normalize_scales, _scaled_solve
from photogeo.geometry import SurfelIndex

scene = scenesim.build_scene("room", seed=7)
noise = scenesim.NoiseSpec(regime="hard")
loop = scenesim.simulate_loop(scene, noise, n_pairs=2, seed=101)  # seed 1 pair 0 stuck at 0.25
place, truth = loop.places[0], loop.truth.pair_alignments[0]
cam, traj = loop.camera, loop.trajectory
cfg = SolverConfig()

src_sa = geometry.build_surfel_arrays(place.cloud_source, cfg.levels, cfg.min_voxel_points)
ref_sa = geometry.build_surfel_arrays(place.cloud_reference, cfg.levels, cfg.min_voxel_points)
index = SurfelIndex(ref_sa, cfg.normal_scale, cfg.gate_factor)

est = place.init
alpha = beta = None
for it in range(30):
    sysm = _System(place, cam, traj, cfg, src_sa, index, est, list(place.features))
    if it == 0:
        alpha, beta = normalize_scales(*sysm.whitened())
        print(f"alpha={alpha:.3e} beta={beta:.3e}")
    h, g = sysm.normal_equations(alpha, beta)
    step, _ = _scaled_solve(h, -g, cfg.cond_limit)
    cg0, cp0 = sysm.costs()
    cost0 = alpha * cg0 + beta * cp0
    lam, accepted = 1.0, None
    for _ in range(cfg.max_halvings + 1):
        trial = lie.exp(lam * step) @ est
        e_i, e_p = sysm.residuals_at(trial)
        cg, cp = sysm.costs(e_i, e_p)
        if alpha * cg + beta * cp <= cost0:
            accepted = trial
            break
        lam *= 0.5
    err = lie.log(est @ truth.inverse())
    wg, wp = sysm.whitened()
    print(f"it{it:2d} et={np.linalg.norm(err[:3]):.4f} er={np.linalg.norm(err[3:]):.4f} "
          f"ngeo={sysm.n_geo:4d} cost_g={alpha*cg0:10.3e} cost_p={beta*cp0:10.3e} "
          f"med|wg|={np.median(np.abs(wg)):8.2e} med|wp|={np.median(np.abs(wp)):8.2e} "
          f"lam={lam:.3f} |step|={np.linalg.norm(step):.2e}")
    if accepted is None:
        print("STALL")
        break
    est = accepted
