"""Array arithmetic, reverse-mode differentiation, seeded randomness."""

from .engine import (
    Array,
    FlopTally,
    Tape,
    add,
    as_array,
    bmm,
    broadcast_to,
    concat,
    constant,
    cos,
    cummax,
    cumsum,
    div,
    exp,
    flop_tally,
    gelu,
    linear_scan,
    log,
    matmul,
    max_pair,
    mean,
    moveaxis,
    mul,
    neg,
    recip,
    reshape,
    sin,
    slice_axis,
    softplus,
    sqrt,
    stop_gradient,
    sub,
    sum_,
)
from .gradcheck import grad_check
from .rng import Rng

__all__ = [
    "Array",
    "FlopTally",
    "Tape",
    "Rng",
    "add",
    "as_array",
    "bmm",
    "broadcast_to",
    "concat",
    "constant",
    "cos",
    "cummax",
    "cumsum",
    "div",
    "exp",
    "flop_tally",
    "gelu",
    "grad_check",
    "linear_scan",
    "log",
    "matmul",
    "max_pair",
    "mean",
    "moveaxis",
    "mul",
    "neg",
    "recip",
    "reshape",
    "sin",
    "slice_axis",
    "softplus",
    "sqrt",
    "stop_gradient",
    "sub",
    "sum_",
]
