"""Dense float64 kernels: SVD, gradient tape, finite-difference checks and Adam."""
from . import tape
from .adam import AdamState, adam_step
from .gradcheck import GradCheckReport, finite_diff_check
from .svd import BACKEND, SvdResult, svd, truncate_rank
from .tape import GradTape, Tensor

__all__ = [
    "AdamState",
    "BACKEND",
    "GradCheckReport",
    "GradTape",
    "SvdResult",
    "Tensor",
    "adam_step",
    "finite_diff_check",
    "svd",
    "tape",
    "truncate_rank",
]
