"""Numba stencil kernels.

All arrays are float64, C-contiguous and indexed ``[x, y, z]``; vector
fields carry their component on a leading axis. Every kernel writes each
output voxel from its own inputs only, so the result does not depend on
how ``prange`` splits the outer loop.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, inline="always")
def _cell(c, n):
    # clamp-then-split a continuous coordinate into (lower index, upper index, fraction)
    if c < 0.0:
        c = 0.0
    elif c > n - 1.0:
        c = n - 1.0
    i0 = int(np.floor(c))
    if i0 > n - 2:
        i0 = max(n - 2, 0)
    i1 = min(i0 + 1, n - 1)
    return i0, i1, c - i0


@njit(cache=True, inline="always")
def _lerp3(f, x0, x1, fx, y0, y1, fy, z0, z1, fz):
    c00 = f[x0, y0, z0] * (1.0 - fx) + f[x1, y0, z0] * fx
    c10 = f[x0, y1, z0] * (1.0 - fx) + f[x1, y1, z0] * fx
    c01 = f[x0, y0, z1] * (1.0 - fx) + f[x1, y0, z1] * fx
    c11 = f[x0, y1, z1] * (1.0 - fx) + f[x1, y1, z1] * fx
    c0 = c00 * (1.0 - fy) + c10 * fy
    c1 = c01 * (1.0 - fy) + c11 * fy
    return c0 * (1.0 - fz) + c1 * fz


@njit(cache=True)
def sample_point(vol, px, py, pz):
    nx, ny, nz = vol.shape
    x0, x1, fx = _cell(px, nx)
    y0, y1, fy = _cell(py, ny)
    z0, z1, fz = _cell(pz, nz)
    return _lerp3(vol, x0, x1, fx, y0, y1, fy, z0, z1, fz)


@njit(parallel=True, cache=True)
def warp_fields(fields, flow):
    """out[m](x) = fields[m](x + flow(x)) for every stacked field m."""
    nf, nx, ny, nz = fields.shape
    out = np.empty_like(fields)
    for i in prange(nx):
        for j in range(ny):
            for k in range(nz):
                x0, x1, fx = _cell(i + flow[0, i, j, k], nx)
                y0, y1, fy = _cell(j + flow[1, i, j, k], ny)
                z0, z1, fz = _cell(k + flow[2, i, j, k], nz)
                for m in range(nf):
                    out[m, i, j, k] = _lerp3(fields[m], x0, x1, fx, y0, y1, fy, z0, z1, fz)
    return out


@njit(parallel=True, cache=True)
def central_gradient(vol, w):
    """3-tap per-axis convolution with replicate-edge padding; w has shape (3, 3)."""
    nx, ny, nz = vol.shape
    out = np.empty((3, nx, ny, nz))
    for i in prange(nx):
        im = max(i - 1, 0)
        ip = min(i + 1, nx - 1)
        for j in range(ny):
            jm = max(j - 1, 0)
            jp = min(j + 1, ny - 1)
            for k in range(nz):
                km = max(k - 1, 0)
                kp = min(k + 1, nz - 1)
                c = vol[i, j, k]
                out[0, i, j, k] = w[0, 0] * vol[im, j, k] + w[0, 1] * c + w[0, 2] * vol[ip, j, k]
                out[1, i, j, k] = w[1, 0] * vol[i, jm, k] + w[1, 1] * c + w[1, 2] * vol[i, jp, k]
                out[2, i, j, k] = w[2, 0] * vol[i, j, km] + w[2, 1] * c + w[2, 2] * vol[i, j, kp]
    return out


@njit(cache=True, inline="always")
def _fwd(f, w, i, j, k, nx, ny, nz):
    ip = min(i + 1, nx - 1)
    jp = min(j + 1, ny - 1)
    kp = min(k + 1, nz - 1)
    c = f[i, j, k]
    gx = w[0, 0] * c + w[0, 1] * f[ip, j, k]
    gy = w[1, 0] * c + w[1, 1] * f[i, jp, k]
    gz = w[2, 0] * c + w[2, 1] * f[i, j, kp]
    return gx, gy, gz


@njit(parallel=True, cache=True)
def forward_gradient(vol, w):
    """2-tap forward difference with replicate-edge padding; w has shape (3, 2)."""
    nx, ny, nz = vol.shape
    out = np.empty((3, nx, ny, nz))
    for i in prange(nx):
        for j in range(ny):
            for k in range(nz):
                gx, gy, gz = _fwd(vol, w, i, j, k, nx, ny, nz)
                out[0, i, j, k] = gx
                out[1, i, j, k] = gy
                out[2, i, j, k] = gz
    return out


@njit(cache=True, inline="always")
def _div(p, w, i, j, k, nx, ny, nz):
    # p(-1) = 0 and the last slice of each component counts as 0
    s = 0.0
    a = p[0, i, j, k] if i < nx - 1 else 0.0
    b = p[0, i - 1, j, k] if i > 0 else 0.0
    s += w[0, 0] * b + w[0, 1] * a
    a = p[1, i, j, k] if j < ny - 1 else 0.0
    b = p[1, i, j - 1, k] if j > 0 else 0.0
    s += w[1, 0] * b + w[1, 1] * a
    a = p[2, i, j, k] if k < nz - 1 else 0.0
    b = p[2, i, j, k - 1] if k > 0 else 0.0
    s += w[2, 0] * b + w[2, 1] * a
    return s


@njit(parallel=True, cache=True)
def divergence(p, w):
    _, nx, ny, nz = p.shape
    out = np.empty((nx, ny, nz))
    for i in prange(nx):
        for j in range(ny):
            for k in range(nz):
                out[i, j, k] = _div(p, w, i, j, k, nx, ny, nz)
    return out


@njit(parallel=True, cache=True)
def data_step(warped, grad, phi, phi_lin, fixed, lt, eps, v, abs_rho):
    """Thresholded data step.

    Writes v = phi + increment and |rho| per voxel, where rho is linearised
    around phi_lin and ``lt`` is lambda * theta.
    """
    nx, ny, nz = fixed.shape
    for i in prange(nx):
        for j in range(ny):
            for k in range(nz):
                gx = grad[0, i, j, k]
                gy = grad[1, i, j, k]
                gz = grad[2, i, j, k]
                rho = (warped[i, j, k]
                       + (phi[0, i, j, k] - phi_lin[0, i, j, k]) * gx
                       + (phi[1, i, j, k] - phi_lin[1, i, j, k]) * gy
                       + (phi[2, i, j, k] - phi_lin[2, i, j, k]) * gz
                       - fixed[i, j, k])
                g2 = gx * gx + gy * gy + gz * gz
                thr = lt * g2
                if rho < -thr:
                    s = lt
                elif rho > thr:
                    s = -lt
                else:
                    s = -rho / (g2 + eps)
                v[0, i, j, k] = phi[0, i, j, k] + s * gx
                v[1, i, j, k] = phi[1, i, j, k] + s * gy
                v[2, i, j, k] = phi[2, i, j, k] + s * gz
                abs_rho[i, j, k] = abs(rho)


@njit(parallel=True, cache=True)
def primal_step(v, p, wdiv, theta, phi):
    """phi_c = v_c + theta * div(p_c) for each flow component c; p has shape (3, 3, ...)."""
    _, nx, ny, nz = v.shape
    for i in prange(nx):
        for j in range(ny):
            for k in range(nz):
                for c in range(3):
                    phi[c, i, j, k] = v[c, i, j, k] + theta * _div(p[c], wdiv, i, j, k, nx, ny, nz)


@njit(parallel=True, cache=True)
def dual_step(phi, p, wgrad, step):
    """In-place p_c <- (p_c + step * grad phi_c) / (1 + step * |grad phi_c|)."""
    _, nx, ny, nz = phi.shape
    for i in prange(nx):
        for j in range(ny):
            for k in range(nz):
                for c in range(3):
                    gx, gy, gz = _fwd(phi[c], wgrad, i, j, k, nx, ny, nz)
                    den = 1.0 + step * np.sqrt(gx * gx + gy * gy + gz * gz)
                    p[c, 0, i, j, k] = (p[c, 0, i, j, k] + step * gx) / den
                    p[c, 1, i, j, k] = (p[c, 1, i, j, k] + step * gy) / den
                    p[c, 2, i, j, k] = (p[c, 2, i, j, k] + step * gz) / den
