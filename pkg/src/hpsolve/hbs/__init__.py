"""Hierarchically block-separable matrix format and fast algebra."""

from .inverse import HbsInverseFactors, hbs_invert, inverse_apply
from .matrix import (
    HbsMatrix,
    compress_dense,
    hbs_add,
    hbs_apply,
    hbs_block_diag,
    low_rank_to_hbs,
    lowrank_from_dense,
    lowrank_recompress,
    recompress,
)
from .tree import IndexTree, build_index_tree, join_trees

__all__ = [
    "IndexTree",
    "build_index_tree",
    "join_trees",
    "HbsMatrix",
    "compress_dense",
    "hbs_apply",
    "hbs_add",
    "hbs_block_diag",
    "low_rank_to_hbs",
    "lowrank_from_dense",
    "lowrank_recompress",
    "recompress",
    "HbsInverseFactors",
    "hbs_invert",
    "inverse_apply",
]
