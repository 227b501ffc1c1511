"""Fair representation learning by implicit path alignment.

A representation is trained so that the optimal per-group linear heads on
top of it agree, with the outer gradient obtained by implicit
differentiation through the two inner head fits.
"""

__version__ = "0.1.0"

from .autodiff import ParamVector, Tape, grad, hvp, value_and_grad
from .bilevel import BilevelConfig, outer_gradient, train
from .data_io import GroupedDataset, SyntheticSpec, gen_synthetic, load_csv
from .metrics import PredictionSet, suf_gap
from .models import Head, ReprNet

__all__ = [
    "BilevelConfig",
    "GroupedDataset",
    "Head",
    "ParamVector",
    "PredictionSet",
    "ReprNet",
    "SyntheticSpec",
    "Tape",
    "gen_synthetic",
    "grad",
    "hvp",
    "load_csv",
    "outer_gradient",
    "suf_gap",
    "train",
    "value_and_grad",
]
