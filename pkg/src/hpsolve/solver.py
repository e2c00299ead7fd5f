"""Build and solve stages of the hierarchical direct solver.

The build stage sweeps the box tree bottom-up: leaf DtN matrices come from
the spectral leaf machinery, parents from merging their children.  Above a
boundary-size threshold the merge operands are compressed and all algebra
runs in structured (HBS / low-rank) form; below it everything is dense.
After the build, each solve is a fast top-down sweep applying the stored
solution operators; the root DtN is retained so the global
Dirichlet-to-Neumann action remains available.

Congruent leaves with bitwise-identical coefficient samples share one set
of leaf operators, so constant-coefficient problems pay the leaf cost once.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import instrumentation
from .errors import HbsInversionError, LeafResonanceError, MergeResonanceError
from .grid import interp_matrix
from .hbs import (
    build_index_tree,
    compress_dense,
    hbs_add,
    hbs_block_diag,
    hbs_invert,
    inverse_apply,
    low_rank_to_hbs,
    lowrank_from_dense,
    lowrank_recompress,
)
from .leafops import RESONANCE_COND, LeafGeometry, assemble_operator, interior_solve_batch
from .merge import merge_dtn, split_indices

__all__ = [
    "DtnOperator",
    "SolutionOperator",
    "SolverState",
    "build",
    "solve",
    "apply_global_dtn",
    "post_process",
    "boundary_flux_at",
    "memory_report",
]


class DtnOperator:
    """A box DtN map, either dense or in HBS form."""

    def __init__(self, dense=None, hbs=None):
        if (dense is None) == (hbs is None):
            raise ValueError("exactly one of dense/hbs required")
        self.dense = dense
        self.hbs = hbs

    @property
    def is_dense(self):
        return self.dense is not None

    @property
    def dim(self):
        return self.dense.shape[0] if self.is_dense else self.hbs.shape[0]

    def apply(self, x):
        return self.dense @ x if self.is_dense else self.hbs.apply(x)

    def to_dense(self):
        return self.dense if self.is_dense else self.hbs.to_dense()

    def n_stored_entries(self):
        return self.dense.size if self.is_dense else self.hbs.n_stored_entries()


class SolutionOperator:
    """Map from a parent's exterior values to its shared-edge values."""

    def __init__(self, dense=None, factors=None):
        if (dense is None) == (factors is None):
            raise ValueError("exactly one of dense/factors required")
        self.dense = dense
        self.factors = factors  # (left, right) with u_i = left @ (right @ u_e)

    @property
    def is_dense(self):
        return self.dense is not None

    def apply(self, u_e):
        if self.is_dense:
            return self.dense @ u_e
        left, right = self.factors
        return left @ (right @ u_e)

    def n_stored_entries(self):
        if self.is_dense:
            return self.dense.size
        return self.factors[0].size + self.factors[1].size


@dataclass
class SolverState:
    tree: object
    nodes: object  # GlobalNodeSet
    coeffs: object
    q: int
    eps: float
    switch_threshold: float
    hbs_leaf_size: int
    geometry: LeafGeometry
    psi: dict  # leaf box index -> interior solve operator
    S: dict  # parent box index -> SolutionOperator
    root_T: DtnOperator
    rank_stats: dict = field(default_factory=dict)
    n_leaf_groups: int = 0


def _note_ranks(stats, hbs_mat, level):
    ranks = list(hbs_mat.node_ranks().values())
    if not ranks:
        return
    stats["n_hbs_matrices"] += 1
    stats["max_rank"] = max(stats["max_rank"], max(ranks))
    lo = min(ranks)
    stats["min_rank"] = lo if stats["min_rank"] is None else min(stats["min_rank"], lo)
    stats["per_level"][level] = max(stats["per_level"].get(level, 0), max(ranks))


def _merge_structured(Ta, Tb, split, eps, m, box, stats):
    """Structured merge: HBS interface algebra plus low-rank updates.

    Operand blocks are materialized densely from the child operators and
    compressed by brute force; the parent operators are then formed entirely
    in structured arithmetic (HBS add of the T33 blocks, HBS inversion,
    inverse applied to low-rank factors, block-diagonal plus low-rank update
    with recompression).
    """
    A = Ta.to_dense()
    Bm = Tb.to_dense()
    i1, i2 = split.j1_in_a, split.j2_in_b
    i3a, i3b = split.j3_in_a, split.j3_in_b
    n1, n2, n3 = i1.size, i2.size, i3a.size

    tree3 = build_index_tree(n3, m)
    h33 = hbs_add(compress_dense(A[np.ix_(i3a, i3a)], tree3, eps),
                  compress_dense(Bm[np.ix_(i3b, i3b)], tree3, eps).scaled(-1.0),
                  eps)
    _note_ranks(stats, h33, box.level)
    try:
        interface = hbs_invert(h33)
    except HbsInversionError as exc:
        raise MergeResonanceError(box=box.index, detail=str(exc)) from exc

    La, Ra = lowrank_from_dense(A[np.ix_(i3a, i1)], eps)
    Lb, Rb = lowrank_from_dense(Bm[np.ix_(i3b, i2)], eps)
    ka, kb = La.shape[1], Lb.shape[1]
    left = inverse_apply(interface, np.concatenate([La, Lb], axis=1))
    right = np.zeros((ka + kb, n1 + n2))
    right[:ka, :n1] = -Ra
    right[ka:, n1:] = Rb
    SL, SR = lowrank_recompress(left, right, eps)

    L13, R13 = lowrank_from_dense(A[np.ix_(i1, i3a)], eps)
    L23, R23 = lowrank_from_dense(Bm[np.ix_(i2, i3b)], eps)
    upleft = np.zeros((n1 + n2, L13.shape[1] + L23.shape[1]))
    upleft[:n1, :L13.shape[1]] = L13
    upleft[n1:, L13.shape[1]:] = L23
    mid = np.concatenate([R13, R23], axis=0) @ SL
    update_left, update_right = lowrank_recompress(upleft @ mid, SR, eps)

    h11 = compress_dense(A[np.ix_(i1, i1)], build_index_tree(n1, m), eps)
    h22 = compress_dense(Bm[np.ix_(i2, i2)], build_index_tree(n2, m), eps)
    base, joined = hbs_block_diag(h11, h22)
    update = low_rank_to_hbs(update_left, update_right, joined, eps)
    Tnew = hbs_add(base, update, eps)
    _note_ranks(stats, Tnew, box.level)
    return SolutionOperator(factors=(SL, SR)), DtnOperator(hbs=Tnew)


def _leaf_stage(tree, nodeset, coeffs, geom):
    """Interior solve operators and DtN matrices for all leaves.

    Leaves whose coefficient samples agree bitwise share one operator set;
    the interior solves for the distinct groups run through one batched
    LAPACK sweep per chunk.
    """
    leaves = tree.leaves()
    nl = len(leaves)
    p2 = geom.p ** 2
    names = coeffs._NAMES
    fields = {}
    xs = np.array([b.rect.x_lo for b in leaves])[:, None] + geom.grid_x[None, :]
    ys = np.array([b.rect.y_lo for b in leaves])[:, None] + geom.grid_y[None, :]
    for name in names:
        f = getattr(coeffs, name)
        fields[name] = f(xs, ys) if callable(f) else float(f)
        vals = np.atleast_1d(fields[name])
        if not np.all(np.isfinite(vals)):
            bad = np.argwhere(~np.isfinite(np.broadcast_to(fields[name], xs.shape)))
            i, k = (bad[0] if bad.size else (0, 0))
            raise ValueError(f"coefficient {name} is not finite at node "
                             f"({xs[i, k]}, {ys[i, k]})")

    def leaf_key(i):
        parts = []
        for name in names:
            v = fields[name]
            parts.append(v if np.isscalar(v) else v[i].tobytes())
        return tuple(parts)

    groups = {}
    members = defaultdict(list)
    for i in range(nl):
        key = leaf_key(i)
        if key not in groups:
            groups[key] = i
        members[key].append(i)
    reps = list(groups.items())

    psi_by_leaf = {}
    T_by_leaf = {}
    chunk = max(1, int(2e8 / (8 * p2 * p2)))  # cap the stacked-A footprint
    for lo in range(0, len(reps), chunk):
        part = reps[lo:lo + chunk]
        A_stack = np.empty((len(part), p2, p2))
        for j, (key, i) in enumerate(part):
            vals = {name: (fields[name] if np.isscalar(fields[name])
                           else fields[name][i]) for name in names}
            A_stack[j] = assemble_operator(geom, vals)
        Psi_stack, conds = interior_solve_batch(geom, A_stack)
        bad = np.flatnonzero(conds > RESONANCE_COND)
        if bad.size:
            j = int(bad[0])
            raise LeafResonanceError(box=leaves[groups[part[j][0]]].index,
                                     cond=float(conds[j]))
        instrumentation.bump("leaf_dtn")
        L43L2 = geom.L43[:, geom.J_e][None, :, :] + geom.L43[:, geom.J_i] @ Psi_stack
        T_stack = L43L2 @ geom.L1
        for j, (key, _) in enumerate(part):
            for i in members[key]:
                psi_by_leaf[leaves[i].index] = Psi_stack[j]
                T_by_leaf[leaves[i].index] = T_stack[j]
    return psi_by_leaf, T_by_leaf, len(reps)


def build(tree, nodeset, coeffs, eps=1e-10, switch_threshold=2000,
          hbs_leaf_size=64):
    """One bottom-up sweep producing every operator needed for solves.

    ``switch_threshold`` is the boundary node count above which a box's
    merge runs in structured arithmetic (math.inf: never, 0: always).
    """
    if switch_threshold is None:
        switch_threshold = math.inf
    geom = LeafGeometry.get(tree.q, tree.leaf_width, tree.leaf_height)
    psi, T_store, n_groups = _leaf_stage(tree, nodeset, coeffs, geom)
    for box in tree.leaves():
        T_store[box.index] = DtnOperator(dense=T_store[box.index])

    stats = {"max_rank": 0, "min_rank": None, "per_level": {}, "n_hbs_matrices": 0}
    S = {}
    for box in reversed(tree.boxes):
        if box.is_leaf:
            continue
        child_a = tree.boxes[box.child_a]
        child_b = tree.boxes[box.child_b]
        split = split_indices(box, child_a, child_b)
        Ta = T_store.pop(child_a.index)
        Tb = T_store.pop(child_b.index)
        if len(box.I_e) > switch_threshold:
            S_op, T_op = _merge_structured(Ta, Tb, split, eps, hbs_leaf_size,
                                           box, stats)
        else:
            try:
                S_mat, T_mat = merge_dtn(Ta.to_dense(), Tb.to_dense(), split)
            except MergeResonanceError as exc:
                raise MergeResonanceError(box=box.index, detail=str(exc)) from exc
            S_op = SolutionOperator(dense=S_mat)
            T_op = DtnOperator(dense=T_mat)
        S[box.index] = S_op
        T_store[box.index] = T_op
    root_T = T_store[tree.root.index]
    return SolverState(tree, nodeset, coeffs, tree.q, eps, switch_threshold,
                       hbs_leaf_size, geom, psi, S, root_T,
                       rank_stats=stats, n_leaf_groups=n_groups)


def _boundary_values(state, f):
    ids = state.tree.root.I_e
    if callable(f):
        pts = state.nodes.points[ids]
        return np.asarray(f(pts[:, 0], pts[:, 1]), dtype=float)
    vals = np.asarray(f, dtype=float)
    if vals.shape != (ids.size,):
        raise ValueError(f"boundary data must have length {ids.size}")
    return vals


def solve(state, f):
    """Solution values at every tabulation node for boundary data ``f``.

    ``f`` is a callable f(x1, x2) or a vector of values ordered like the
    root's exterior index list.  Repeated solves reuse the built state.
    """
    instrumentation.bump("solve")
    u = np.zeros(state.nodes.N)
    u[state.tree.root.I_e] = _boundary_values(state, f)
    for box in state.tree.boxes:
        if box.is_leaf:
            continue
        u[box.I_i] = state.S[box.index].apply(u[box.I_e])
    return u


def apply_global_dtn(state, f):
    """Tabulated boundary derivative T1 f on the outer boundary.

    Returns values ordered like the root's exterior index list, in the
    coordinate-derivative convention (d/dx1 on vertical edges, d/dx2 on
    horizontal ones).
    """
    instrumentation.bump("apply_dtn")
    return state.root_T.apply(_boundary_values(state, f))


def _owning_leaf(state, x, y):
    tree = state.tree
    dom = tree.domain
    if not dom.contains(x, y):
        raise ValueError(f"target ({x}, {y}) lies outside the domain")
    n = 1 << tree.levels

    def cell(t, extent):
        s = (t / extent) * n
        i = int(np.floor(s))
        if i == s and i > 0:  # on a grid line: lexicographically first owner
            i -= 1
        return min(max(i, 0), n - 1)

    ix = cell(x - dom.x_lo, dom.width)
    iy = cell(y - dom.y_lo, dom.height)
    return tree.leaf_at(ix, iy)


def _leaf_field(state, u, leaf):
    geom = state.geometry
    w_e = geom.L1 @ u[leaf.I_e]
    w_i = state.psi[leaf.index] @ w_e
    w = np.zeros(geom.p ** 2)
    w[geom.J_e] = w_e
    w[geom.J_i] = w_i
    return w.reshape(geom.p, geom.p)


def post_process(state, u, targets):
    """Evaluate the solution at arbitrary interior points.

    Each target's leaf field is rebuilt from the stored interior solve
    operator and evaluated by barycentric tensor interpolation.
    """
    geom = state.geometry
    out = np.empty(len(targets))
    fields = {}
    for t, (x, y) in enumerate(targets):
        leaf = _owning_leaf(state, x, y)
        W = fields.get(leaf.index)
        if W is None:
            W = _leaf_field(state, u, leaf)
            fields[leaf.index] = W
        rx = interp_matrix(geom.cheb_x, [x - leaf.rect.x_lo])
        ry = interp_matrix(geom.cheb_y, [y - leaf.rect.y_lo])
        out[t] = float(rx @ W @ ry.T)
    return out


def boundary_flux_at(state, u, targets):
    """Coordinate-derivative flux at points on the outer boundary.

    d/dx1 on the vertical sides, d/dx2 on the horizontal ones, evaluated
    from the spectrally differentiated leaf field.
    """
    geom = state.geometry
    dom = state.tree.domain
    out = np.empty(len(targets))
    for t, (x, y) in enumerate(targets):
        on_v = x in (dom.x_lo, dom.x_hi)
        on_h = y in (dom.y_lo, dom.y_hi)
        if not (on_v or on_h):
            raise ValueError(f"target ({x}, {y}) is not on the outer boundary")
        leaf = _owning_leaf(state, x, y)
        W = _leaf_field(state, u, leaf)
        dW = geom.Dx @ W if (on_v and not on_h) else W @ geom.Dy.T
        rx = interp_matrix(geom.cheb_x, [x - leaf.rect.x_lo])
        ry = interp_matrix(geom.cheb_y, [y - leaf.rect.y_lo])
        out[t] = float(rx @ dW @ ry.T)
    return out


def memory_report(state):
    """Deterministic accounting of the stored operators, 8 bytes a scalar."""
    per_level = defaultdict(int)
    for idx, op in state.S.items():
        per_level[state.tree.boxes[idx].level] += op.n_stored_entries()
    seen = set()
    leaf_entries = 0
    for arr in state.psi.values():
        if id(arr) not in seen:
            seen.add(id(arr))
            leaf_entries += arr.size
    geom = state.geometry
    leaf_entries += geom.L1.size + geom.L4.size
    root_entries = state.root_T.n_stored_entries()
    total = root_entries + leaf_entries + sum(per_level.values())
    return {
        "R_mb": total * 8 / 1e6,
        "total_entries": int(total),
        "root_dtn_mb": root_entries * 8 / 1e6,
        "leaf_ops_mb": leaf_entries * 8 / 1e6,
        "solution_ops_mb_per_level": {int(k): v * 8 / 1e6
                                      for k, v in sorted(per_level.items())},
        "rank_stats": {
            "max_rank": state.rank_stats.get("max_rank", 0),
            "min_rank": state.rank_stats.get("min_rank"),
            "n_hbs_matrices": state.rank_stats.get("n_hbs_matrices", 0),
            "per_level": {int(k): int(v) for k, v in
                          sorted(state.rank_stats.get("per_level", {}).items())},
        },
    }
