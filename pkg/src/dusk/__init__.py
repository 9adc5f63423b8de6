"""Dual structure-preserving kernels for supervised tensor learning."""
from .cp import CpFitReport, CpModel, CpOptions, cp_als, factorize_dataset, reconstruct
from .dataio import TensorDataset, load_dataset, save_dataset, synth_lowrank
from .errors import (
    ArgumentError,
    DataError,
    DegenerateInputError,
    DuskError,
    FormatError,
    NumericalError,
    RankError,
    ShapeError,
)
from .kernels import GramMatrix, KernelSpec, dusk, gram, gram_cross
from .modelsel import EvalReport, GridConfig, KernelBank, grid_search, repeated_holdout
from .svm import SvmModel, TrainConfig, predict, train
from .tensor import DenseTensor

__version__ = "0.1.0"
