"""Merging two sibling Dirichlet-to-Neumann maps.

Given the child matrices T_a, T_b sharing one full edge, the parent solution
operator and DtN matrix follow from eliminating the shared-edge unknowns:

    u3 = (T33_a - T33_b)^{-1} (-T31_a u1 + T32_b u2)
    [v1; v2] = blockdiag(T11_a, T22_b) [u1; u2] + [T13_a; T23_b] u3

Because the tabulated flux is the coordinate derivative (not the outward
normal), the two children see the same v3 on the shared edge and no sign
flips are needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import instrumentation
from .errors import MergeResonanceError

__all__ = ["MergeIndexSplit", "split_indices", "merge_dtn"]


@dataclass
class MergeIndexSplit:
    """Index bookkeeping for one merge.

    j1_in_a / j2_in_b are positions of the parent-exterior nodes within each
    child's boundary list (child order preserved); j3_in_a / j3_in_b locate
    the shared nodes, both following the same geometric order along the
    shared edge.  Parent-local numbering is [J1; J2] for the exterior and
    the shared list for the interior.
    """

    j1_in_a: np.ndarray
    j2_in_b: np.ndarray
    j3_in_a: np.ndarray
    j3_in_b: np.ndarray

    @property
    def n1(self):
        return self.j1_in_a.size

    @property
    def n2(self):
        return self.j2_in_b.size

    @property
    def n3(self):
        return self.j3_in_a.size

    @property
    def j1(self):
        return np.arange(self.n1)

    @property
    def j2(self):
        return self.n1 + np.arange(self.n2)

    @property
    def j3(self):
        return np.arange(self.n3)


def split_indices(parent, child_a, child_b):
    """Split the children's boundary lists into J1, J2 and the shared J3.

    The shared nodes are taken from the parent's interior list (already
    ordered by increasing coordinate along the shared edge); their positions
    are located in each child's boundary ordering.
    """
    shared = parent.I_i
    pos_a = {int(g): i for i, g in enumerate(child_a.I_e)}
    pos_b = {int(g): i for i, g in enumerate(child_b.I_e)}
    try:
        j3a = np.array([pos_a[int(g)] for g in shared], dtype=np.intp)
        j3b = np.array([pos_b[int(g)] for g in shared], dtype=np.intp)
    except KeyError as exc:
        raise ValueError("children are not edge-adjacent: shared node "
                         f"{exc} missing from a child boundary") from exc
    in3a = np.zeros(child_a.I_e.size, dtype=bool)
    in3a[j3a] = True
    in3b = np.zeros(child_b.I_e.size, dtype=bool)
    in3b[j3b] = True
    return MergeIndexSplit(np.flatnonzero(~in3a), np.flatnonzero(~in3b),
                           j3a, j3b)


def merge_dtn(T_a, T_b, split):
    """Dense merge of two child DtN matrices.

    Returns (S, T): the solution operator u3 = S [u1; u2] of shape n3 x
    (n1+n2) and the parent DtN of shape (n1+n2) x (n1+n2).  Raises
    MergeResonanceError when the interface operator is singular.
    """
    instrumentation.bump("merge")
    T_a = np.asarray(T_a)
    T_b = np.asarray(T_b)
    i1, i2 = split.j1_in_a, split.j2_in_b
    i3a, i3b = split.j3_in_a, split.j3_in_b
    X = T_a[np.ix_(i3a, i3a)] - T_b[np.ix_(i3b, i3b)]
    rhs = np.concatenate([-T_a[np.ix_(i3a, i1)], T_b[np.ix_(i3b, i2)]], axis=1)
    try:
        lu, piv = sla.lu_factor(X)
        S = sla.lu_solve((lu, piv), rhs)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise MergeResonanceError(detail=str(exc)) from exc
    if not np.all(np.isfinite(S)):
        raise MergeResonanceError(detail="non-finite solution operator")
    n1, n2 = i1.size, i2.size
    T = np.zeros((n1 + n2, n1 + n2))
    T[:n1, :n1] = T_a[np.ix_(i1, i1)]
    T[n1:, n1:] = T_b[np.ix_(i2, i2)]
    coupling = np.concatenate([T_a[np.ix_(i1, i3a)], T_b[np.ix_(i2, i3b)]])
    T += coupling @ S
    return S, T
