"""Tensor-train step-truncation solver for high-dimensional CDF equations."""

from .tt_core import (
    TTVector,
    flatten_h,
    flatten_v,
    load_tt,
    save_tt,
    tt_add,
    tt_entry,
    tt_inner,
    tt_norm,
    tt_random,
    tt_rank1,
    tt_scale,
    tt_to_dense,
    tt_zeros,
)
from .tt_round import left_orthogonalize, right_orthogonalize, truncate

__version__ = "0.1.0"
