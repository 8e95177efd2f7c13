"""SVFit: adapt a frozen matrix by training only its top singular values."""

from .adapt import (
    AdapterLayer,
    LayerGradients,
    init_frozen,
    init_full,
    init_lora,
    init_pissa,
    init_svfit,
    make_adapter,
    trainable_count,
)
from .linalg import (
    FundamentalSubspaces,
    SvdFactors,
    energy_ratio,
    rank_r_approx,
    split_subspaces,
    svd,
)

__version__ = "0.1.0"

__all__ = [
    "AdapterLayer",
    "FundamentalSubspaces",
    "LayerGradients",
    "SvdFactors",
    "energy_ratio",
    "init_frozen",
    "init_full",
    "init_lora",
    "init_pissa",
    "init_svfit",
    "make_adapter",
    "rank_r_approx",
    "split_subspaces",
    "svd",
    "trainable_count",
]
