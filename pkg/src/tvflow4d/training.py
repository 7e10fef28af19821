"""Finite-difference training of the 21 stencil weights against the spatiotemporal objective."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgumentError, NumericalDivergenceError, TrainingError
from .losses import LossWeights
from .tracking import track_sequence
from .tvl1 import SolverParams
from .volume import INTENSITY_SCALE, KernelSet, VolumeSequence, normalize_intensities

logger = logging.getLogger(__name__)

WEIGHT_NAMES = tuple(
    [f"grad.{a}[{t}]" for a in "xyz" for t in range(3)]
    + [f"flow_grad.{a}[{t}]" for a in "xyz" for t in range(2)]
    + [f"div.{a}[{t}]" for a in "xyz" for t in range(2)]
)


def init_kernels() -> KernelSet:
    """Central difference for the image gradient, forward difference for flow gradient and divergence."""
    return KernelSet(
        grad=np.tile([-0.5, 0.0, 0.5], (3, 1)),
        flow_grad=np.tile([-1.0, 1.0], (3, 1)),
        div=np.tile([-1.0, 1.0], (3, 1)),
    )


@dataclass(frozen=True)
class TrainConfig:
    """Settings for :func:`train_kernels`.

    The objective is always measured with ``loss_kernels`` (the initial
    stencils unless given), so training cannot lower it by rescaling the
    stencils that measure flow smoothness. The default ``batch_size=1``
    takes one descent step per training window; ``None`` means full-batch
    descent.
    """

    learning_rate: float = 0.01
    epochs: int = 20
    fd_step: float = 1e-3
    window: int = 4
    weights: LossWeights = field(default_factory=LossWeights)
    solver: SolverParams = field(default_factory=SolverParams)
    warm_start: bool = True
    batch_size: int | None = 1
    seed: int = 0
    loss_kernels: KernelSet | None = None

    def __post_init__(self):
        if not (math.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise InvalidArgumentError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise InvalidArgumentError(f"epochs must be an integer >= 1, got {self.epochs}")
        if not (math.isfinite(self.fd_step) and self.fd_step > 0):
            raise InvalidArgumentError(f"fd_step must be > 0, got {self.fd_step}")
        if self.window < 2:
            raise InvalidArgumentError(f"window must be >= 2, got {self.window}")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidArgumentError(f"batch_size must be >= 1, got {self.batch_size}")


def make_windows(train_set: Sequence[VolumeSequence], window: int,
                 scale: float = INTENSITY_SCALE) -> list[VolumeSequence]:
    """Cut each sequence into non-overlapping windows (a short tail is dropped).

    Intensities are normalised per whole sequence first; each window keeps
    its sequence's reference frame.
    """
    out = []
    for seq in train_set:
        vols = normalize_intensities([seq.reference, *seq.frames], scale)
        seq = VolumeSequence(vols[0], tuple(vols[1:]))
        n = len(seq)
        if n < window:
            out.append(seq)
            continue
        for start in range(0, n - window + 1, window):
            out.append(seq.window(start, window))
    return out


def batch_loss(kernels: KernelSet, batch: Sequence[VolumeSequence], config: TrainConfig) -> float:
    """Mean objective over pre-normalised windows, flows re-estimated with ``kernels``."""
    solver = SolverParams(**{**config.solver.__dict__, "normalize": False})
    loss_kernels = config.loss_kernels or init_kernels()
    total = 0.0
    for win in batch:
        res = track_sequence(win, kernels, solver, window=len(win), warm_start=config.warm_start,
                             weights=config.weights, loss_kernels=loss_kernels)
        total += res.losses[0].total
    return total / len(batch)


def loss_gradient_fd(kernels: KernelSet, batch: Sequence[VolumeSequence], config: TrainConfig,
                     loss_fn: Callable[[KernelSet], float] | None = None) -> np.ndarray:
    """Central-difference gradient of the batch objective w.r.t. all 21 weights.

    ``loss_fn`` replaces the objective (used to check the harness against a
    function with a known derivative).
    """
    if loss_fn is None:
        if not batch:
            raise InvalidArgumentError("training batch is empty")
        loss_fn = lambda k: batch_loss(k, batch, config)
    x0 = kernels.to_vector()
    h = config.fd_step
    grad = np.zeros_like(x0)
    for j in range(x0.size):
        vals = []
        for sign in (1.0, -1.0):
            x = x0.copy()
            x[j] += sign * h
            try:
                val = loss_fn(KernelSet.from_vector(x))
            except NumericalDivergenceError as exc:
                raise TrainingError(f"solver diverged probing weight {WEIGHT_NAMES[j]}: {exc}",
                                    weight=WEIGHT_NAMES[j]) from exc
            if not math.isfinite(val):
                raise TrainingError(f"non-finite loss probing weight {WEIGHT_NAMES[j]}",
                                    weight=WEIGHT_NAMES[j])
            vals.append(val)
        grad[j] = (vals[0] - vals[1]) / (2.0 * h)
    return grad


def train_kernels(train_set: Sequence[VolumeSequence],
                  config: TrainConfig | None = None) -> tuple[KernelSet, list[float]]:
    """Plain gradient descent from :func:`init_kernels`.

    Returns the best kernels seen and the loss history: ``history[0]`` is
    the objective of the initial kernels and ``history[k]`` the objective
    after epoch ``k`` (full-batch value).
    """
    config = config or TrainConfig()
    if not train_set:
        raise InvalidArgumentError("training set is empty")
    windows = make_windows(train_set, config.window, config.solver.intensity_scale)
    rng = np.random.default_rng(config.seed)

    def evaluate(k, epoch):
        try:
            val = batch_loss(k, windows, config)
        except NumericalDivergenceError as exc:
            raise TrainingError(f"solver diverged in epoch {epoch}: {exc}", epoch=epoch) from exc
        if not math.isfinite(val):
            raise TrainingError(f"training loss became non-finite in epoch {epoch}", epoch=epoch)
        return val

    kernels = init_kernels()
    history = [evaluate(kernels, 0)]
    best, best_loss = kernels, history[0]
    bs = config.batch_size or len(windows)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(windows))
        for start in range(0, len(windows), bs):
            batch = [windows[i] for i in order[start:start + bs]]
            try:
                g = loss_gradient_fd(kernels, batch, config)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}", epoch=epoch, weight=exc.weight) from exc
            kernels = KernelSet.from_vector(kernels.to_vector() - config.learning_rate * g)
        history.append(evaluate(kernels, epoch))
        logger.info("epoch %d loss %.6g", epoch, history[-1])
        if history[-1] < best_loss:
            best, best_loss = kernels, history[-1]
    return best, history
