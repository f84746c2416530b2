from viewacq.numerics import autodiff as ops
from viewacq.numerics.autodiff import Tape, Tensor, backward, masked_softmax, matmul
from viewacq.numerics.gaussian import (
    bvn_cdf,
    bvn_grid_probs,
    bvn_rect_prob,
    bvn_upper,
    check_covariance,
    norm_cdf,
    std_normal_cdf,
)

__all__ = [
    "ops",
    "Tape",
    "Tensor",
    "backward",
    "masked_softmax",
    "matmul",
    "bvn_cdf",
    "bvn_grid_probs",
    "bvn_rect_prob",
    "bvn_upper",
    "check_covariance",
    "norm_cdf",
    "std_normal_cdf",
]
