"""Volumetric TV-L1 optical flow, spatiotemporal losses and 4D motion tracking."""

from .errors import (DataError, Flow4DError, FormatError, InvalidArgumentError, LengthError,
                     NumericalDivergenceError, ShapeError, TrainingError)
from .losses import (FlowChain, LossBreakdown, LossWeights, backward_cycle, cycle_loss,
                     forward_cycle, reconstruction_loss, single_cycle_loss,
                     temporal_consistency_loss, total_loss)
from .phantom import (GroundTruth, PhantomSpec, analytic_flow, epe, make_phantom,
                      mse_displacement, true_trajectory)
from .tracking import TrackingResult, lagrangian_trajectory, track_sequence
from .training import TrainConfig, init_kernels, loss_gradient_fd, train_kernels
from .tvl1 import (DualState, FlowResult, SolverParams, estimate_flow, residual, update_dual,
                   update_v)
from .volume import (FlowField, KernelSet, ScalarVolume, VolumeSequence, compose_flow,
                     divergence, gradient, trilinear_sample, warp)

__version__ = "0.1.0"


def set_threads(n: int) -> None:
    """Number of threads used by the parallel voxel loops (bounded by NUMBA_NUM_THREADS)."""
    import numba

    numba.set_num_threads(n)
