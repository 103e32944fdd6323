import numpy as np
from photogeo import vision

rng = np.random.default_rng(5)
F = rng.uniform(0.2, 1.2, (12, 2))
PH = rng.uniform(0, 2 * np.pi, 12)
A = 1.0 / np.sqrt(np.arange(1, 13))

def tex(x, y):
    v = np.zeros_like(x, dtype=float)
    for k in range(12):
        v += A[k] * np.sin(F[k, 0] * x + F[k, 1] * y + PH[k])
    return v

H = W = 120
gy, gx = np.mgrid[0:H, 0:W].astype(float)
img_ref = tex(gx, gy)
for true_shift in (np.array([0.41, -0.33]), np.array([2.37, -1.62]), np.array([-4.1, 3.8])):
    img_src = tex(gx - true_shift[0], gy - true_shift[1])
    win_src = vision.ImageWindow(np.zeros(2), img_src)
    c = np.array([60.0, 60.0])
    half = 10
    ys, xs = np.mgrid[-half:half + 1, -half:half + 1].astype(float)
    patch_vals, _ = vision.ImageWindow(np.zeros(2), img_ref).sample(
        np.column_stack([(c[0] + xs).ravel(), (c[1] + ys).ravel()]))
    patch = vision.make_patch(patch_vals.reshape(2 * half + 1, 2 * half + 1), c)
    delta, score = vision.refine_patch(patch, win_src, c)
    err = np.linalg.norm(delta - true_shift)
    print(f"true={true_shift} delta={np.round(delta, 3)} err={err:.4f} px score={score:.5f}")
