"""Hierarchically block-separable matrices and their fast algebra.

An HBS matrix over a binary index tree stores, per leaf, the diagonal block
D and basis matrices U, V for the off-diagonal row/column blocks; per
parent, the sibling interaction blocks B and reduced bases U, V.  The full
matrix is recovered through the telescoping factorization
H = U~ (B-structure) V~* + D applied level by level.

Ranks are chosen adaptively per node by column-pivoted QR with relative
truncation; basis matrices are kept orthonormal after every operation.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from .tree import IndexTree, build_index_tree, join_trees

__all__ = [
    "HbsMatrix",
    "compress_dense",
    "hbs_apply",
    "hbs_add",
    "low_rank_to_hbs",
    "recompress",
    "hbs_block_diag",
    "lowrank_from_dense",
    "lowrank_recompress",
]


def _col_basis(block, eps):
    """Orthonormal basis Q of the column space and its eps-rank.

    Q carries the full economy factorization so callers can pad beyond the
    truncation rank when equalizing row/column ranks.
    """
    rows, cols = block.shape
    if rows == 0 or cols == 0:
        return np.zeros((rows, 0)), 0
    Q, R, _ = sla.qr(block, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if d.size == 0 or d[0] == 0.0:
        return Q, 0
    return Q, int(np.sum(d > eps * d[0]))


def _orth_extend(Q, k, rows):
    """First k columns of Q, extended orthonormally when Q is too thin."""
    if k <= Q.shape[1]:
        return Q[:, :k].copy()
    rng = np.random.default_rng(rows * 7919 + k)
    extra = rng.standard_normal((rows, k - Q.shape[1]))
    extra -= Q @ (Q.T @ extra)
    extra, _ = np.linalg.qr(extra)
    return np.concatenate([Q, extra], axis=1)


class HbsMatrix:
    def __init__(self, tree, U, V, D, B):
        self.tree = tree
        self.U = U  # node id -> (rows x k) basis
        self.V = V
        self.D = D  # leaf id -> diagonal block
        self.B = B  # parent id -> (B12, B21) sibling interaction

    @property
    def shape(self):
        return (self.tree.size, self.tree.size)

    def rank(self, node_id):
        u = self.U.get(node_id)
        return 0 if u is None else u.shape[1]

    def node_ranks(self):
        """Ranks of every non-root node carrying basis factors."""
        return {nid: u.shape[1] for nid, u in self.U.items()}

    def max_rank(self):
        ranks = self.node_ranks()
        return max(ranks.values()) if ranks else 0

    def n_stored_entries(self):
        total = 0
        for group in (self.U, self.V, self.D):
            total += sum(a.size for a in group.values())
        total += sum(b12.size + b21.size for b12, b21 in self.B.values())
        return total

    def copy(self):
        return HbsMatrix(self.tree,
                         {k: v.copy() for k, v in self.U.items()},
                         {k: v.copy() for k, v in self.V.items()},
                         {k: v.copy() for k, v in self.D.items()},
                         {k: (a.copy(), b.copy()) for k, (a, b) in self.B.items()})

    def scaled(self, alpha):
        """alpha * H; only the D and B factors carry the scale."""
        return HbsMatrix(self.tree, self.U, self.V,
                         {k: alpha * v for k, v in self.D.items()},
                         {k: (alpha * a, alpha * b) for k, (a, b) in self.B.items()})

    def apply(self, x):
        return hbs_apply(self, x)

    def to_dense(self):
        """Explicit reconstruction through the telescoping identities."""
        tree = self.tree
        out = np.zeros(self.shape)
        for leaf in tree.leaves():
            out[leaf.start:leaf.stop, leaf.start:leaf.stop] = self.D[leaf.id]
        uexp, vexp = {}, {}
        for nd in tree.topo_up():
            if nd.id not in self.U:
                continue
            if nd.is_leaf:
                uexp[nd.id] = self.U[nd.id]
                vexp[nd.id] = self.V[nd.id]
            else:
                c1, c2 = self.tree.children(nd)
                k1 = self.rank(c1.id)
                ublk = np.zeros((nd.size, k1 + self.rank(c2.id)))
                ublk[:c1.size, :k1] = uexp[c1.id]
                ublk[c1.size:, k1:] = uexp[c2.id]
                vblk = np.zeros_like(ublk)
                vblk[:c1.size, :k1] = vexp[c1.id]
                vblk[c1.size:, k1:] = vexp[c2.id]
                uexp[nd.id] = ublk @ self.U[nd.id]
                vexp[nd.id] = vblk @ self.V[nd.id]
        for parent in tree.topo_down():
            if parent.is_leaf:
                continue
            c1, c2 = tree.children(parent)
            B12, B21 = self.B[parent.id]
            u1 = uexp[c1.id] if c1.id in uexp else np.zeros((c1.size, B12.shape[0]))
            v2 = vexp[c2.id] if c2.id in vexp else np.zeros((c2.size, B12.shape[1]))
            u2 = uexp[c2.id] if c2.id in uexp else np.zeros((c2.size, B21.shape[0]))
            v1 = vexp[c1.id] if c1.id in vexp else np.zeros((c1.size, B21.shape[1]))
            out[c1.start:c1.stop, c2.start:c2.stop] = u1 @ B12 @ v2.T
            out[c2.start:c2.stop, c1.start:c1.stop] = u2 @ B21 @ v1.T
        return out


def compress_dense(H, tree, eps):
    """Adaptive-rank HBS compression of a dense matrix.

    Per node, the off-diagonal row (column) block is factored by
    column-pivoted QR truncated at relative eps; row and column ranks are
    equalized by padding the thinner basis.
    """
    H = np.asarray(H, dtype=float)
    M = tree.size
    if H.shape != (M, M):
        raise ValueError(f"matrix shape {H.shape} does not match tree size {M}")
    U, V, D, B = {}, {}, {}, {}
    if tree.L == 0:
        D[tree.root.id] = H.copy()
        return HbsMatrix(tree, U, V, D, B)

    cur = H
    spans = None
    for level in range(tree.L, 0, -1):
        nodes = tree.level_nodes(level)
        if level == tree.L:
            spans = {nd.id: (nd.start, nd.stop) for nd in nodes}
        Mcur = cur.shape[0]
        ranks = {}
        for nd in nodes:
            s, e = spans[nd.id]
            row_blk = np.concatenate([cur[s:e, :s], cur[s:e, e:]], axis=1)
            col_blk = np.concatenate([cur[:s, s:e], cur[e:, s:e]], axis=0)
            Qr, kr = _col_basis(row_blk, eps)
            Qc, kc = _col_basis(col_blk.T, eps)
            k = max(kr, kc)
            U[nd.id] = _orth_extend(Qr, k, e - s)
            V[nd.id] = _orth_extend(Qc, k, e - s)
            if nd.is_leaf:
                D[nd.id] = cur[s:e, s:e].copy()
            ranks[nd.id] = k
        offs = {}
        pos = 0
        for nd in nodes:
            offs[nd.id] = pos
            pos += ranks[nd.id]
        K = pos
        rows = np.zeros((K, Mcur))
        for nd in nodes:
            s, e = spans[nd.id]
            o = offs[nd.id]
            rows[o:o + ranks[nd.id]] = U[nd.id].T @ cur[s:e]
        red = np.zeros((K, K))
        for nd in nodes:
            s, e = spans[nd.id]
            o = offs[nd.id]
            red[:, o:o + ranks[nd.id]] = rows[:, s:e] @ V[nd.id]
        parents = [n for n in tree.level_nodes(level - 1) if not n.is_leaf]
        new_spans = {}
        for pa in parents:
            c1, c2 = tree.children(pa)
            s1, e1 = offs[c1.id], offs[c1.id] + ranks[c1.id]
            s2, e2 = offs[c2.id], offs[c2.id] + ranks[c2.id]
            B[pa.id] = (red[s1:e1, s2:e2].copy(), red[s2:e2, s1:e1].copy())
            new_spans[pa.id] = (s1, e2)
        cur = red
        spans = new_spans
    return HbsMatrix(tree, U, V, D, B)


def hbs_apply(h, x):
    """H @ x through the telescoping factorization (upward V* sweep,
    sibling B products, downward U expansion, leaf D terms)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if x.shape[0] != h.tree.size:
        raise ValueError(f"dimension mismatch: {x.shape[0]} != {h.tree.size}")
    X = x[:, None] if single else x
    tree = h.tree
    xhat = {}
    for nd in tree.topo_up():
        if nd.id not in h.V:
            continue
        if nd.is_leaf:
            xhat[nd.id] = h.V[nd.id].T @ X[nd.start:nd.stop]
        else:
            c1, c2 = tree.children(nd)
            xhat[nd.id] = h.V[nd.id].T @ np.concatenate([xhat[c1.id], xhat[c2.id]])
    Y = np.zeros_like(X)
    yhat = {}
    for nd in tree.topo_down():
        if nd.is_leaf:
            blk = h.D[nd.id] @ X[nd.start:nd.stop]
            if nd.id in yhat:
                blk = blk + h.U[nd.id] @ yhat[nd.id]
            Y[nd.start:nd.stop] = blk
            continue
        c1, c2 = tree.children(nd)
        B12, B21 = h.B[nd.id]
        y1 = B12 @ xhat[c2.id]
        y2 = B21 @ xhat[c1.id]
        if nd.id in yhat:  # expand own reduced output into the children
            up = h.U[nd.id] @ yhat[nd.id]
            k1 = h.rank(c1.id)
            y1 = y1 + up[:k1]
            y2 = y2 + up[k1:]
        yhat[c1.id] = y1
        yhat[c2.id] = y2
    return Y[:, 0] if single else Y


def _check_same_tree(a, b):
    if a.tree is not b.tree and not a.tree.same_structure(b.tree):
        raise ValueError("HBS operands must share the same index tree")


def hbs_add(ha, hb, eps):
    """H_a + H_b by stacking per-node bases, then recompressing."""
    _check_same_tree(ha, hb)
    tree = ha.tree
    U, V, D, B = {}, {}, {}, {}
    for nd in tree.nodes:
        if nd.is_leaf:
            D[nd.id] = ha.D[nd.id] + hb.D[nd.id]
        else:
            c1, c2 = tree.children(nd)
            ka1, ka2 = ha.rank(c1.id), ha.rank(c2.id)
            kb1, kb2 = hb.rank(c1.id), hb.rank(c2.id)
            Ba12, Ba21 = ha.B[nd.id]
            Bb12, Bb21 = hb.B[nd.id]
            B12 = np.zeros((ka1 + kb1, ka2 + kb2))
            B12[:ka1, :ka2] = Ba12
            B12[ka1:, ka2:] = Bb12
            B21 = np.zeros((ka2 + kb2, ka1 + kb1))
            B21[:ka2, :ka1] = Ba21
            B21[ka2:, ka1:] = Bb21
            B[nd.id] = (B12, B21)
        if nd.id in ha.U or nd.id in hb.U:
            ua, ub = ha.U.get(nd.id), hb.U.get(nd.id)
            va, vb = ha.V.get(nd.id), hb.V.get(nd.id)
            if nd.is_leaf:
                U[nd.id] = np.concatenate([x for x in (ua, ub) if x is not None], axis=1) \
                    if ua is not None and ub is not None else (ua if ub is None else ub)
                V[nd.id] = np.concatenate([x for x in (va, vb) if x is not None], axis=1) \
                    if va is not None and vb is not None else (va if vb is None else vb)
            else:
                c1, c2 = tree.children(nd)
                ka1, ka2 = ha.rank(c1.id), ha.rank(c2.id)
                kb1, kb2 = hb.rank(c1.id), hb.rank(c2.id)
                ka, kb = ha.rank(nd.id), hb.rank(nd.id)
                Un = np.zeros((ka1 + kb1 + ka2 + kb2, ka + kb))
                Vn = np.zeros_like(Un)
                if ua is not None:
                    Un[:ka1, :ka] = ua[:ka1]
                    Un[ka1 + kb1:ka1 + kb1 + ka2, :ka] = ua[ka1:]
                    Vn[:ka1, :ka] = va[:ka1]
                    Vn[ka1 + kb1:ka1 + kb1 + ka2, :ka] = va[ka1:]
                if ub is not None:
                    Un[ka1:ka1 + kb1, ka:] = ub[:kb1]
                    Un[ka1 + kb1 + ka2:, ka:] = ub[kb1:]
                    Vn[ka1:ka1 + kb1, ka:] = vb[:kb1]
                    Vn[ka1 + kb1 + ka2:, ka:] = vb[kb1:]
                U[nd.id] = Un
                V[nd.id] = Vn
    return recompress(HbsMatrix(tree, U, V, D, B), eps)


def low_rank_to_hbs(Q, R, tree, eps):
    """Rewrite the rank-k product Q @ R in HBS form over the given tree.

    Q is orthonormalized internally when needed.  Leaf U blocks come from
    the partitioned Q, diagonal blocks are Q_t R_t, and V blocks from an
    orthogonal factorization of the partitioned R.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    M = tree.size
    if Q.shape[0] != M or R.shape[1] != M or Q.shape[1] != R.shape[0]:
        raise ValueError("factor shapes do not match the tree")
    k = Q.shape[1]
    U, V, D, B = {}, {}, {}, {}
    if k > 0:
        Qo, Rq = np.linalg.qr(Q)
        Q, R = Qo, Rq @ R
    qred, rred = {}, {}
    for nd in tree.topo_up():
        if nd.is_leaf:
            D[nd.id] = Q[nd.start:nd.stop] @ R[:, nd.start:nd.stop]
            if nd.id == tree.root.id:
                continue
            Qb, kq = _col_basis(Q[nd.start:nd.stop], eps)
            Vb, kv = _col_basis(R[:, nd.start:nd.stop].T, eps)
            kn = max(kq, kv)
            U[nd.id] = _orth_extend(Qb, kn, nd.size)
            V[nd.id] = _orth_extend(Vb, kn, nd.size)
            qred[nd.id] = U[nd.id].T @ Q[nd.start:nd.stop]
            rred[nd.id] = R[:, nd.start:nd.stop] @ V[nd.id]
        else:
            c1, c2 = tree.children(nd)
            B[nd.id] = (qred[c1.id] @ rred[c2.id], qred[c2.id] @ rred[c1.id])
            if nd.id == tree.root.id:
                continue
            qstack = np.concatenate([qred[c1.id], qred[c2.id]])
            rstack = np.concatenate([rred[c1.id], rred[c2.id]], axis=1)
            Qb, kq = _col_basis(qstack, eps)
            Vb, kv = _col_basis(rstack.T, eps)
            kn = max(kq, kv)
            U[nd.id] = _orth_extend(Qb, kn, qstack.shape[0])
            V[nd.id] = _orth_extend(Vb, kn, qstack.shape[0])
            qred[nd.id] = U[nd.id].T @ qstack
            rred[nd.id] = rstack @ V[nd.id]
    return HbsMatrix(tree, U, V, D, B)


def _orthonormalize(h):
    """Re-orthonormalize all bases, pushing triangular factors upward."""
    tree = h.tree
    U = {k: v for k, v in h.U.items()}
    V = {k: v for k, v in h.V.items()}
    B = {k: (a, b) for k, (a, b) in h.B.items()}
    D = dict(h.D)
    ru, rv = {}, {}
    for nd in tree.topo_up():
        if not nd.is_leaf:
            c1, c2 = tree.children(nd)
            B12, B21 = B[nd.id]
            B[nd.id] = (ru[c1.id] @ B12 @ rv[c2.id].T,
                        ru[c2.id] @ B21 @ rv[c1.id].T)
            if nd.id in U:
                k1 = ru[c1.id].shape[1]
                U[nd.id] = np.concatenate([ru[c1.id] @ U[nd.id][:k1],
                                           ru[c2.id] @ U[nd.id][k1:]])
                V[nd.id] = np.concatenate([rv[c1.id] @ V[nd.id][:k1],
                                           rv[c2.id] @ V[nd.id][k1:]])
        if nd.id in U:
            qu, ruu = np.linalg.qr(U[nd.id])
            qv, rvv = np.linalg.qr(V[nd.id])
            U[nd.id], ru[nd.id] = qu, ruu
            V[nd.id], rv[nd.id] = qv, rvv
    return HbsMatrix(tree, U, V, D, B)


def _truncate(h, eps):
    """Downward rank truncation; assumes orthonormal bases."""
    tree = h.tree
    wrow, wcol = {}, {}
    for nd in tree.topo_down():
        if nd.is_leaf:
            continue
        c1, c2 = tree.children(nd)
        B12, B21 = h.B[nd.id]
        k1 = h.rank(c1.id)
        zs = {}
        for me, bm_row, bm_col, rows in ((c1, B12, B21, slice(0, k1)),
                                         (c2, B21, B12, slice(k1, None))):
            parts_r = [bm_row]
            parts_c = [bm_col.T]
            if nd.id in wrow:
                parts_r.append(h.U[nd.id][rows] @ wrow[nd.id])
                parts_c.append(h.V[nd.id][rows] @ wcol[nd.id])
            wr = np.concatenate(parts_r, axis=1)
            wc = np.concatenate(parts_c, axis=1)
            Qr, kr = _col_basis(wr, eps)
            Qc, kc = _col_basis(wc, eps)
            kn = max(kr, kc)
            zr = _orth_extend(Qr, kn, wr.shape[0])
            zc = _orth_extend(Qc, kn, wc.shape[0])
            zs[me.id] = (zr, zc)
            wrow[me.id] = zr.T @ wr
            wcol[me.id] = zc.T @ wc
        zr1, zc1 = zs[c1.id]
        zr2, zc2 = zs[c2.id]
        h.B[nd.id] = (zr1.T @ B12 @ zc2, zr2.T @ B21 @ zc1)
        for me, (zr, zc) in zs.items():
            h.U[me] = h.U[me] @ zr
            h.V[me] = h.V[me] @ zc
        if nd.id in h.U:  # re-express this node's rows in the new child coords
            h.U[nd.id] = np.concatenate([zr1.T @ h.U[nd.id][:k1],
                                         zr2.T @ h.U[nd.id][k1:]])
            h.V[nd.id] = np.concatenate([zc1.T @ h.V[nd.id][:k1],
                                         zc2.T @ h.V[nd.id][k1:]])


def recompress(h, eps):
    """Reduce every node rank to its adaptive eps-rank.

    Re-orthonormalizes the bases (upward QR pass) and then truncates each
    node against its actual off-diagonal content (downward pass).
    """
    if h.tree.L == 0:
        return h.copy()
    out = _orthonormalize(h)
    _truncate(out, eps)
    return out


def hbs_block_diag(h1, h2):
    """Block-diagonal HBS matrix [[H1, 0], [0, H2]] over a joined tree."""
    tree, map1, map2 = join_trees(h1.tree, h2.tree)
    U, V, D, B = {}, {}, {}, {}
    for src, mapping in ((h1, map1), (h2, map2)):
        for old, new in mapping.items():
            if old in src.U:
                U[new] = src.U[old]
                V[new] = src.V[old]
            if old in src.D:
                D[new] = src.D[old]
            if old in src.B:
                B[new] = src.B[old]
    # the two halves do not interact: the joined root couples with rank 0
    for src, mapping in ((h1, map1), (h2, map2)):
        old_root = src.tree.root
        new_id = mapping[old_root.id]
        if old_root.is_leaf:
            rows = old_root.size
        else:
            rows = src.rank(src.tree.children(old_root)[0].id) \
                + src.rank(src.tree.children(old_root)[1].id)
        U[new_id] = np.zeros((rows, 0))
        V[new_id] = np.zeros((rows, 0))
    B[0] = (np.zeros((0, 0)), np.zeros((0, 0)))
    return HbsMatrix(tree, U, V, D, B), tree


def lowrank_from_dense(A, eps):
    """(L, R) with orthonormal L such that L @ R approximates A to eps."""
    A = np.asarray(A, dtype=float)
    Q, rank = _col_basis(A, eps)
    L = Q[:, :rank]
    return L, L.T @ A


def lowrank_recompress(L, R, eps):
    """Re-orthonormalize and truncate a low-rank product L @ R."""
    if L.shape[1] == 0:
        return L, R
    Ql, Rl = np.linalg.qr(L)
    mid = Rl @ R
    Qm, rank = _col_basis(mid, eps)
    Qm = Qm[:, :rank]
    return Ql @ Qm, Qm.T @ mid
