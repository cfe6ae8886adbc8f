"""Dense/sparse linear algebra and reverse-mode differentiation substrate.

Dense tensors are plain ``numpy.float64`` arrays. Differentiable values are
:class:`Var` objects recorded on a :class:`Tape`.
"""

from . import autodiff as ad
from .autodiff import Tape, Var, backward
from .kernels import BACKEND
from .optim import AdamState, adam_step
from .sparse import SparseMatrix, spmm_t

matmul = ad.matmul
spmm = ad.spmm

__all__ = [
    "BACKEND",
    "AdamState",
    "SparseMatrix",
    "Tape",
    "Var",
    "ad",
    "adam_step",
    "backward",
    "matmul",
    "spmm",
    "spmm_t",
]
