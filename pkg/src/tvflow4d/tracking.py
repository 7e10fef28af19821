"""4D tracking: pairwise flow chains, reference-frame flows and point trajectories."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidArgumentError, NumericalDivergenceError
from .losses import FlowChain, LossBreakdown, LossWeights, total_loss
from .tvl1 import SolverParams, estimate_flow
from .volume import (FlowField, KernelSet, VolumeSequence, compose_flow,
                     normalize_intensities, trilinear_sample)

PAIRWISE = "pairwise-integration"
REFERENCE = "reference-direct"


@dataclass(frozen=True, eq=False)
class TrackingResult:
    """Output of :func:`track_sequence`.

    ``losses[w]`` is the objective on the window starting at frame
    ``window_starts[w]``; ``timing[i]`` is the wall time spent on frame i.
    """

    ref_flows: tuple[FlowField, ...]
    forward: tuple[FlowField, ...]
    backward: tuple[FlowField, ...]
    losses: tuple[LossBreakdown, ...]
    window_starts: tuple[int, ...]
    timing: tuple[float, ...]

    @property
    def chain(self) -> FlowChain:
        return FlowChain(self.forward, self.backward)


def _solve(fixed, moving, kernels, params, init, frame):
    try:
        return estimate_flow(fixed, moving, kernels, params, init).flow
    except NumericalDivergenceError as exc:
        raise NumericalDivergenceError(f"frame {frame}: {exc}", iteration=exc.iteration,
                                       frame=frame) from exc


def track_sequence(seq: VolumeSequence, kernels: KernelSet | None = None,
                   params: SolverParams | None = None, window: int = 4,
                   warm_start: bool = True, weights: LossWeights | None = None,
                   loss_kernels: KernelSet | None = None) -> TrackingResult:
    """Estimate forward, backward and reference flows and evaluate windowed losses.

    Intensities are normalised once over the whole sequence. With
    ``warm_start`` each pairwise estimate starts from the previous pair's
    flow, and each reference flow from the previous reference flow composed
    with the latest forward flow.
    ``loss_kernels`` defaults to ``kernels``. A sequence shorter than
    ``window`` is evaluated as one window.
    """
    kernels = kernels or KernelSet()
    params = params or SolverParams()
    loss_kernels = loss_kernels or kernels
    n = len(seq)
    if n < 2:
        raise InvalidArgumentError(f"tracking needs at least 2 frames, got {n}")
    if window < 2:
        raise InvalidArgumentError(f"window must be >= 2, got {window}")
    window = min(window, n)

    wall0 = time.perf_counter()
    if params.normalize:
        vols = normalize_intensities([seq.reference, *seq.frames], params.intensity_scale)
        seq = VolumeSequence(vols[0], tuple(vols[1:]))
        params = replace(params, normalize=False)

    ref_flows, forward, backward, losses, starts, timing = [], [], [], [], [], []
    for i in range(n):
        t0 = time.perf_counter() if i else wall0
        if i:
            f_init = forward[-1] if (warm_start and forward) else None
            b_init = backward[-1] if (warm_start and backward) else None
            forward.append(_solve(seq.frames[i - 1], seq.frames[i], kernels, params, f_init, i))
            backward.append(_solve(seq.frames[i], seq.frames[i - 1], kernels, params, b_init, i))
        init = None
        if warm_start and ref_flows:
            # integrated estimate, refined below against the reference itself
            init = compose_flow(ref_flows[-1], forward[-1])
        ref_flows.append(_solve(seq.reference, seq.frames[i], kernels, params, init, i))
        start = i - window + 1
        if start >= 0:
            chain = FlowChain(tuple(forward[start:i]), tuple(backward[start:i]))
            losses.append(total_loss(seq.window(start, window), chain,
                                     ref_flows[start:i + 1], weights, loss_kernels))
            starts.append(start)
        timing.append(time.perf_counter() - t0)

    return TrackingResult(tuple(ref_flows), tuple(forward), tuple(backward), tuple(losses),
                          tuple(starts), tuple(timing))


def _clamp(point, dims):
    return np.clip(point, 0.0, np.asarray(dims, dtype=np.float64) - 1.0)


def lagrangian_trajectory(start, result: TrackingResult, mode: str = REFERENCE) -> np.ndarray:
    """Positions ``(n_frames, 3)`` of a material point through the sequence.

    ``reference-direct`` maps the start through each reference flow;
    ``pairwise-integration`` chains the forward flows frame by frame, which
    accumulates their errors. Positions are clamped to the grid box.
    """
    dims = result.ref_flows[0].dims
    start = np.asarray(start, dtype=np.float64)
    if start.shape != (3,) or not np.all(np.isfinite(start)):
        raise InvalidArgumentError(f"start must be a finite 3-point, got {start!r}")
    lo = np.zeros(3)
    hi = np.asarray(dims, dtype=np.float64) - 1.0
    if np.any(start < lo) or np.any(start > hi):
        raise InvalidArgumentError(f"start {start} lies outside the grid box {tuple(hi)}")

    def sample(flow, point):
        return np.array([trilinear_sample(flow.data[c], point) for c in range(3)])

    if mode == REFERENCE:
        return np.stack([_clamp(start + sample(f, start), dims) for f in result.ref_flows])
    if mode == PAIRWISE:
        points = [start]
        for f in result.forward:
            points.append(_clamp(points[-1] + sample(f, points[-1]), dims))
        return np.stack(points)
    raise InvalidArgumentError(f"unknown trajectory mode {mode!r}; expected {REFERENCE!r} or {PAIRWISE!r}")
