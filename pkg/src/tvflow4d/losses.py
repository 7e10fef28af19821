"""Spatiotemporal losses: reconstruction, cycle, single-cycle and the combined objective.

Every penalty on a vector quantity is the per-voxel Euclidean norm averaged
over voxels, so weights transfer across grid sizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import InvalidArgumentError, ShapeError
from .volume import (FlowField, KernelSet, ScalarVolume, VolumeSequence, _check_dims,
                     compose_flow, warp)


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 1.0
    omega: float = 1.0
    beta: float = 0.5
    lambda_: float = 0.15

    def __post_init__(self):
        for name in ("gamma", "omega", "beta", "lambda_"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0:
                raise InvalidArgumentError(f"loss weight {name} must be finite and >= 0, got {val}")


@dataclass(frozen=True, eq=False)
class FlowChain:
    """``forward[i]`` maps frame i to i+1, ``backward[i]`` maps frame i+1 to i."""

    forward: tuple[FlowField, ...]
    backward: tuple[FlowField, ...]

    def __post_init__(self):
        fwd, bwd = tuple(self.forward), tuple(self.backward)
        if len(fwd) != len(bwd):
            raise InvalidArgumentError(
                f"forward and backward chains differ in length ({len(fwd)} vs {len(bwd)})")
        if fwd:
            _check_dims(*(f.dims for f in fwd + bwd))
        object.__setattr__(self, "forward", fwd)
        object.__setattr__(self, "backward", bwd)

    def __len__(self):
        return len(self.forward)

    def slice(self, start: int, stop: int) -> "FlowChain":
        return FlowChain(self.forward[start:stop], self.backward[start:stop])


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    temporal: float
    single_cycle: float
    cycle: float
    reconstruction: float

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "temporal": self.temporal,
            "single_cycle": self.single_cycle,
            "cycle": self.cycle,
            "reconstruction": self.reconstruction,
        }


def _mean_norm(vec: np.ndarray) -> float:
    return float(np.sqrt((vec * vec).sum(axis=0)).mean())


def _require(chain: FlowChain):
    if len(chain) == 0:
        raise InvalidArgumentError("flow chain is empty")


def total_variation(flow: FlowField, kernels: KernelSet | None = None) -> float:
    """Mean over voxels of the summed per-component gradient norms."""
    kernels = kernels or KernelSet()
    tv = np.zeros(flow.dims)
    for c in range(3):
        g = _kernels.forward_gradient(flow.data[c], kernels.flow_grad)
        tv += np.sqrt((g * g).sum(axis=0))
    return float(tv.mean())


def reconstruction_loss(fixed: ScalarVolume, moving: ScalarVolume, flow: FlowField,
                        kernels: KernelSet | None = None, lambda_: float = 0.15) -> float:
    """``lambda * mean|fixed - moving(x+flow)| + mean TV(flow)``, exact (non-linearised) residual."""
    _check_dims(fixed.dims, moving.dims, flow.dims)
    data = float(np.abs(fixed.data - warp(moving, flow).data).mean())
    return lambda_ * data + total_variation(flow, kernels)


def forward_cycle(chain: FlowChain) -> FlowField:
    """Displacement carrying frame-1 points to the last frame."""
    _require(chain)
    return reduce(compose_flow, chain.forward)


def backward_cycle(chain: FlowChain) -> FlowField:
    """Displacement carrying last-frame points back to frame 1."""
    _require(chain)
    return reduce(compose_flow, reversed(chain.backward))


def round_trip(chain: FlowChain) -> FlowField:
    """Net displacement of a frame-1 point sent to the last frame and back."""
    return compose_flow(forward_cycle(chain), backward_cycle(chain))


def cycle_loss(chain: FlowChain) -> float:
    """Mean norm of the whole-window round-trip displacement.

    Zero exactly when every point returns to where it started.
    """
    return _mean_norm(round_trip(chain).data)


def single_cycle_loss(chain: FlowChain) -> float:
    """Mean over adjacent pairs of the forward-backward consistency residual.

    Per pair the residual is ``fwd(x) + bwd(x + fwd(x))``.
    """
    _require(chain)
    terms = [_mean_norm(compose_flow(f, b).data) for f, b in zip(chain.forward, chain.backward)]
    return float(np.mean(terms))


def temporal_consistency_loss(chain: FlowChain, omega: float = 1.0) -> float:
    return single_cycle_loss(chain) + omega * cycle_loss(chain)


def total_loss(seq: VolumeSequence, chain: FlowChain, ref_flows: Sequence[FlowField],
               weights: LossWeights | None = None, kernels: KernelSet | None = None) -> LossBreakdown:
    """Combined objective ``gamma * L_temporal + beta * mean_i L_rec(I_0, I_i, phi_i)``.

    ``chain`` must hold one flow pair per adjacent frame pair of ``seq`` and
    ``ref_flows`` one reference-to-frame flow per frame.
    """
    weights = weights or LossWeights()
    if len(chain) != len(seq) - 1:
        raise ShapeError(f"chain has {len(chain)} pairs for a sequence of {len(seq)} frames")
    if len(ref_flows) != len(seq):
        raise ShapeError(f"{len(ref_flows)} reference flows for a sequence of {len(seq)} frames")
    if len(chain):
        sig = single_cycle_loss(chain)
        cyc = cycle_loss(chain)
    else:
        sig = cyc = 0.0
    temporal = sig + weights.omega * cyc
    rec = float(np.mean([
        reconstruction_loss(seq.reference, frame, flow, kernels, weights.lambda_)
        for frame, flow in zip(seq.frames, ref_flows)
    ]))
    total = weights.gamma * temporal + weights.beta * rec
    return LossBreakdown(total=total, temporal=temporal, single_cycle=sig, cycle=cyc,
                         reconstruction=rec)
