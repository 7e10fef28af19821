import math

import numpy as np
import pytest


def brute_trilinear(arr, p):
    """Reference trilinear sampler: clamp, then weight the 8 neighbours explicitly."""
    n = arr.shape
    q = [min(max(float(c), 0.0), n[a] - 1.0) for a, c in enumerate(p)]
    lo = [min(int(math.floor(c)), max(n[a] - 2, 0)) for a, c in enumerate(q)]
    total = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                idx, w = [], 1.0
                for a, d in enumerate((dx, dy, dz)):
                    i = min(lo[a] + d, n[a] - 1)
                    f = q[a] - lo[a]
                    w *= f if d else (1.0 - f)
                    idx.append(i)
                total += w * arr[tuple(idx)]
    return total


def brute_warp(arr, flow):
    out = np.empty(arr.shape)
    for i, j, k in np.ndindex(arr.shape):
        out[i, j, k] = brute_trilinear(arr, (i + flow[0, i, j, k], j + flow[1, i, j, k], k + flow[2, i, j, k]))
    return out


def smooth_field(rng, shape, amp=1.0, n_modes=3):
    """Random band-limited field built from a few low-frequency cosines."""
    x = np.meshgrid(*[np.arange(s, dtype=float) for s in shape], indexing="ij")
    out = np.zeros(shape)
    for _ in range(n_modes):
        k = rng.uniform(-0.4, 0.4, 3)
        ph = rng.uniform(0, 2 * np.pi)
        out += np.cos(k[0] * x[0] + k[1] * x[1] + k[2] * x[2] + ph)
    return amp * out / n_modes


def smooth_flow(rng, shape, amp=1.0):
    return np.stack([smooth_field(rng, shape, amp) for _ in range(3)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
