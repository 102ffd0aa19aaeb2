import numpy as np
import pytest
from scipy.ndimage import gaussian_filter


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_field(rng, dims, amp=1.0, sigma=1.5):
    """Random smooth displacement / velocity field ``(3, *dims)``."""
    u = rng.normal(size=(3,) + tuple(dims))
    u = np.stack([gaussian_filter(c, sigma, mode="nearest") for c in u])
    return amp * u / (np.abs(u).max() + 1e-12)


def trilinear_oracle(img, z, y, x):
    """Scalar trilinear sample with border clamp, written per corner."""
    D, H, W = img.shape[-3:]
    z, y, x = min(max(z, 0.0), D - 1), min(max(y, 0.0), H - 1), min(max(x, 0.0), W - 1)
    z0, y0, x0 = (min(int(np.floor(c)), max(n - 2, 0)) for c, n in ((z, D), (y, H), (x, W)))
    fz, fy, fx = z - z0, y - y0, x - x0
    out = 0.0
    for dz, wz in ((0, 1 - fz), (1, fz)):
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                zi, yi, xi = min(z0 + dz, D - 1), min(y0 + dy, H - 1), min(x0 + dx, W - 1)
                out = out + wz * wy * wx * img[..., zi, yi, xi]
    return out


def conv_oracle(x, w, b):
    """Same-size zero-padded 3-D cross-correlation by explicit loops over outputs."""
    O, C, kd, kh, kw = w.shape
    pd, ph, pw = (kd - 1) // 2, (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    D, H, W = x.shape[1:]
    out = np.zeros((O, D, H, W))
    for o in range(O):
        for z in range(D):
            for y in range(H):
                for q in range(W):
                    out[o, z, y, q] = np.sum(xp[:, z:z + kd, y:y + kh, q:q + kw] * w[o]) + b[o]
    return out


def translation_pairs(n=20, magnitude=6.0, dims=32):
    """Phantom pairs related by random pure translations of fixed length."""
    from recorr.synth import PerturbSpec, PhantomSpec, make_pair, make_phantom

    pairs = []
    for k in range(n):
        img, lab = make_phantom(PhantomSpec(seed=1000 + k, dims=(dims,) * 3))
        pairs.append(make_pair(img, lab, PerturbSpec(kind="translation", magnitude=magnitude, seed=k)))
    return pairs


def mean_epe(u, true_field):
    return float(np.mean(np.sqrt(np.sum((np.asarray(u, dtype=np.float64) - true_field) ** 2, axis=0))))


def brute_force_correlation(F_f, F_m, u, r):
    """Warp by per-voxel trilinear samples, then six nested loops over voxels and shifts."""
    C, D, H, W = F_f.shape
    wm = np.zeros_like(F_m)
    for z in range(D):
        for y in range(H):
            for x in range(W):
                wm[:, z, y, x] = trilinear_oracle(F_m, z + u[0, z, y, x], y + u[1, z, y, x], x + u[2, z, y, x])
    h = r // 2
    out = np.zeros((r**3, D, H, W))
    k = 0
    for dz in range(-h, h + 1):
        for dy in range(-h, h + 1):
            for dx in range(-h, h + 1):
                for z in range(D):
                    for y in range(H):
                        for x in range(W):
                            zz, yy, xx = z + dz, y + dy, x + dx
                            if 0 <= zz < D and 0 <= yy < H and 0 <= xx < W:
                                out[k, z, y, x] = np.dot(F_f[:, z, y, x], wm[:, zz, yy, xx]) / C
                k += 1
    return out


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def record_criterion(number, ok, detail):
    """Log one pass/fail line for the summary and echo it to stdout."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok
