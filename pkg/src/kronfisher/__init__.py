"""kronfisher: Fisher-preconditioned training toolkit.

A self-contained numpy implementation of diagonal Kronecker-factored Fisher
preconditioning for small networks, with the curvature diagnostics, simulated
data-parallel aggregation, and convergence checks that motivate the method.
"""

from .data_io import Dataset, batch_iter, load_csv, load_mnist_idx, synth_quadratic
from .diagnostics import (
    fisher_mae, fim_histogram, gershgorin_report, landscape_export, pca2,
    perturb_offdiag, snr_offdiag, true_fisher_diag_mc, write_fisher_mae_csv,
)
from .distsim import DistributedExecutor, aggregate_kfs
from .kfactor import (
    KFState, assemble_efim_diag, ema_update, layer_kf_diag, minmax_normalize, precondition,
)
from .nn import Network, build_network, im2col, nll_softmax_loss
from .optim import (
    AdaFisherState, AdamState, Constant, Cosine, SgdState, StepLR,
    adafisher_step, adam_step, adamw_step, convex_preconditioned_descent,
    schedule_lr, sgd_momentum_step,
)
from .runner import OptimizerSpec, Trainer, train_run
from .tensor import SeededRng, dft2_magnitude, gaussian_fill, matmul, sym_eig

__version__ = "0.1.0"

__all__ = [
    "AdaFisherState", "AdamState", "Constant", "Cosine", "Dataset",
    "DistributedExecutor", "KFState", "Network", "OptimizerSpec", "SeededRng",
    "SgdState", "StepLR", "Trainer", "adafisher_step", "adam_step", "adamw_step",
    "aggregate_kfs", "assemble_efim_diag", "batch_iter",
    "convex_preconditioned_descent", "dft2_magnitude", "ema_update", "fim_histogram",
    "fisher_mae", "gaussian_fill", "gershgorin_report", "im2col", "landscape_export",
    "layer_kf_diag", "load_csv", "load_mnist_idx", "matmul", "minmax_normalize",
    "nll_softmax_loss", "pca2", "perturb_offdiag", "precondition", "schedule_lr",
    "sgd_momentum_step", "snr_offdiag", "sym_eig", "synth_quadratic",
    "train_run", "true_fisher_diag_mc", "build_network", "write_fisher_mae_csv",
]
