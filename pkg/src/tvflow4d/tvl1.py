"""Pairwise 3D flow estimation by an unrolled TV-L1 fixed-point iteration.

Each iteration runs a thresholded data step, a primal step
``phi = v + theta * div p`` and a dual step on ``p``. The solver is
single-scale unless ``SolverParams.pyramid`` is set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import _kernels
from .errors import InvalidArgumentError, NumericalDivergenceError, ShapeError
from .volume import (INTENSITY_SCALE, FlowField, KernelSet, ScalarVolume, _check_dims,
                     gradient, normalize_intensities, warp)


@dataclass(frozen=True)
class SolverParams:
    """Hyper-parameters of the TV-L1 solver.

    ``relinearize`` re-warps the moving frame at the current flow on every
    iteration; when False the residual stays linearised around the initial
    flow. ``normalize`` rescales each input pair jointly to
    ``[0, intensity_scale]`` before solving.
    """

    lambda_: float = 0.15
    theta: float = 0.3
    tau: float = 1.0 / 12.0
    n_iters: int = 40
    epsilon: float = 1e-9
    relinearize: bool = True
    pyramid: bool = False
    normalize: bool = True
    intensity_scale: float = INTENSITY_SCALE

    def __post_init__(self):
        for name in ("lambda_", "theta", "tau", "epsilon", "intensity_scale"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val > 0):
                raise InvalidArgumentError(f"{name} must be a positive finite number, got {val}")
        if int(self.n_iters) != self.n_iters or self.n_iters < 1:
            raise InvalidArgumentError(f"n_iters must be an integer >= 1, got {self.n_iters}")


@dataclass
class DualState:
    """Dual fields ``p[c, a]``: component ``c`` of the flow, axis ``a``."""

    p: np.ndarray

    @classmethod
    def zeros(cls, dims) -> "DualState":
        return cls(np.zeros((3, 3) + tuple(dims)))


@dataclass(frozen=True, eq=False)
class FlowResult:
    flow: FlowField
    warped: ScalarVolume
    residual_history: np.ndarray = field(default_factory=lambda: np.zeros(0))


def residual(fixed: ScalarVolume, moving: ScalarVolume, flow0: FlowField, flow: FlowField,
             grad_at_flow0: np.ndarray) -> ScalarVolume:
    """Linearised residual ``moving(x+flow0) + (flow-flow0).grad - fixed``.

    ``grad_at_flow0`` is the moving-frame gradient already sampled at
    ``x + flow0``.
    """
    grad_at_flow0 = np.asarray(grad_at_flow0, dtype=np.float64)
    _check_dims(fixed.dims, moving.dims, flow0.dims, flow.dims, grad_at_flow0.shape[1:])
    rho = (warp(moving, flow0).data
           + np.einsum("c...,c...->...", flow.data - flow0.data, grad_at_flow0)
           - fixed.data)
    return ScalarVolume(rho, fixed.spacing)


def update_v(rho, grad, params: SolverParams | None = None) -> np.ndarray:
    """Per-voxel increment of the thresholded data step.

    Returns ``lambda*theta*grad`` where ``rho < -lambda*theta*|grad|^2``,
    ``-lambda*theta*grad`` where ``rho > lambda*theta*|grad|^2`` and
    ``-rho*grad/(|grad|^2 + eps)`` otherwise.
    """
    params = params or SolverParams()
    rho = np.ascontiguousarray(rho.data if isinstance(rho, ScalarVolume) else rho, dtype=np.float64)
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    if grad.shape != (3,) + rho.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match residual shape {rho.shape}")
    zeros = np.zeros_like(grad)
    v = np.empty_like(grad)
    _kernels.data_step(rho, grad, zeros, zeros, np.zeros_like(rho),
                       params.lambda_ * params.theta, params.epsilon, v, np.empty_like(rho))
    return v


def update_dual(state: DualState, flow: FlowField, kernels: KernelSet | None = None,
                params: SolverParams | None = None) -> DualState:
    """One dual step ``p <- (p + tau/theta grad phi) / (1 + tau/theta |grad phi|)``.

    The norm is taken per flow component over its three derivatives.
    """
    kernels = kernels or KernelSet()
    params = params or SolverParams()
    if state.p.shape != (3, 3) + tuple(flow.dims):
        raise ShapeError(f"dual shape {state.p.shape} does not match flow dims {flow.dims}")
    p = np.array(state.p, dtype=np.float64, order="C", copy=True)
    _kernels.dual_step(flow.data, p, kernels.flow_grad, params.tau / params.theta)
    return DualState(p)


def _solve(fixed, moving, kernels, params, init):
    dims = fixed.dims
    stack = np.empty((4,) + dims)
    stack[0] = moving.data
    stack[1:] = gradient(moving, kernels)

    phi = np.array(init.data, order="C", copy=True) if init is not None else np.zeros((3,) + dims)
    p = np.zeros((3, 3) + dims)
    v = np.empty_like(phi)
    abs_rho = np.empty(dims)
    lt = params.lambda_ * params.theta
    step = params.tau / params.theta
    energy = np.empty(params.n_iters)

    if params.relinearize:
        phi_lin = phi
    else:
        phi_lin = phi.copy()
        sampled = _kernels.warp_fields(stack, phi_lin)

    for it in range(params.n_iters):
        if params.relinearize:
            sampled = _kernels.warp_fields(stack, phi)
        _kernels.data_step(sampled[0], sampled[1:], phi, phi_lin, fixed.data, lt,
                           params.epsilon, v, abs_rho)
        energy[it] = abs_rho.sum()
        _kernels.primal_step(v, p, kernels.div, params.theta, phi)
        _kernels.dual_step(phi, p, kernels.flow_grad, step)
        if not (math.isfinite(energy[it]) and np.isfinite(phi).all() and np.isfinite(p).all()):
            raise NumericalDivergenceError(f"non-finite value in TV-L1 iteration {it}", iteration=it)
    return phi, energy


def _coarse_init(fixed, moving, kernels, params, init):
    dims = np.array(fixed.dims)
    coarse_dims = np.maximum(dims // 2, 3)
    factors = coarse_dims / dims
    if np.all(factors == 1):
        return init
    down = lambda a: ndimage.zoom(a, factors, order=1, mode="nearest", grid_mode=False)
    cfix = ScalarVolume(down(fixed.data), fixed.spacing)
    cmov = ScalarVolume(down(moving.data), moving.spacing)
    cinit = None
    if init is not None:
        cinit = FlowField(np.stack([down(init.data[c]) * factors[c] for c in range(3)]))
    cphi, _ = _solve(cfix, cmov, kernels, params, cinit)
    up = 1.0 / factors
    full = np.stack([
        ndimage.zoom(cphi[c], up, order=1, mode="nearest", grid_mode=False) * up[c] for c in range(3)
    ])
    # zoom may be off by one voxel on odd extents
    full = full[:, :dims[0], :dims[1], :dims[2]]
    if full.shape[1:] != tuple(dims):
        pad = [(0, 0)] + [(0, int(d - s)) for d, s in zip(dims, full.shape[1:])]
        full = np.pad(full, pad, mode="edge")
    return FlowField(full)


def estimate_flow(fixed: ScalarVolume, moving: ScalarVolume, kernels: KernelSet | None = None,
                  params: SolverParams | None = None, init: FlowField | None = None) -> FlowResult:
    """Estimate the flow carrying ``fixed`` voxels onto ``moving``.

    The result satisfies ``moving(x + flow(x)) ~ fixed(x)``. Without ``init``
    the flow starts at zero.

    Raises
    ------
    ShapeError
        If the frames or ``init`` disagree in dims, or frames in spacing.
    NumericalDivergenceError
        If any iterate becomes non-finite.
    """
    kernels = kernels or KernelSet()
    params = params or SolverParams()
    _check_dims(fixed.dims, moving.dims)
    if fixed.spacing != moving.spacing:
        raise ShapeError(f"spacing mismatch: {fixed.spacing} vs {moving.spacing}")
    if init is not None:
        _check_dims(fixed.dims, init.dims)

    sfix, smov = fixed, moving
    if params.normalize:
        sfix, smov = normalize_intensities([fixed, moving], params.intensity_scale)
    if params.pyramid:
        init = _coarse_init(sfix, smov, kernels, params, init)
    phi, energy = _solve(sfix, smov, kernels, params, init)
    flow = FlowField(phi)
    energy.setflags(write=False)
    return FlowResult(flow, warp(moving, flow), energy)
