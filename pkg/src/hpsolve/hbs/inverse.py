"""Inversion of an HBS matrix and application of the inverse.

The inversion sweeps the tree from the finest level to the coarsest.  At
each node the diagonal block D~ (the leaf D, or the children's reduced
blocks [[Dhat1, B12], [B21, Dhat2]]) is inverted and folded through a
Woodbury-style identity into factors

    Dhat = (V* D~^{-1} U)^{-1}
    E    = D~^{-1} U Dhat
    F*   = Dhat V* D~^{-1}
    G    = D~^{-1} - D~^{-1} U Dhat V* D~^{-1}

with the root contributing G_1 = [[Dhat_2, B_23], [B_32, Dhat_3]]^{-1}.
Applying the inverse is one upward F* sweep, the root solve, and one
downward sweep expanding through E and G.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from ..errors import HbsInversionError

__all__ = ["HbsInverseFactors", "hbs_invert", "inverse_apply"]


class HbsInverseFactors:
    def __init__(self, tree, E, F, G, root_G):
        self.tree = tree
        self.E = E  # node id -> (dim x k)
        self.F = F  # node id -> (dim x k)
        self.G = G  # node id -> (dim x dim)
        self.root_G = root_G

    @property
    def shape(self):
        return (self.tree.size, self.tree.size)

    def n_stored_entries(self):
        total = self.root_G.size
        for group in (self.E, self.F, self.G):
            total += sum(a.size for a in group.values())
        return total


def _guarded_inv(M, node, level, what):
    if M.shape[0] == 0:
        return M.copy()
    try:
        lu, piv = sla.lu_factor(M)
        out = sla.lu_solve((lu, piv), np.eye(M.shape[0]))
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise HbsInversionError(node, level, what) from exc
    if not np.all(np.isfinite(out)):
        raise HbsInversionError(node, level, what)
    return out


def hbs_invert(h):
    """Factors {E, F, G} representing H^{-1}, built finest level first."""
    tree = h.tree
    if tree.root.is_leaf:
        root_G = _guarded_inv(h.D[tree.root.id], tree.root.id, 0, "root block")
        return HbsInverseFactors(tree, {}, {}, {}, root_G)
    E, F, G, dhat = {}, {}, {}, {}
    for nd in tree.topo_up():
        if nd.id == tree.root.id:
            continue
        if nd.is_leaf:
            Dt = h.D[nd.id]
        else:
            c1, c2 = tree.children(nd)
            B12, B21 = h.B[nd.id]
            k1 = dhat[c1.id].shape[0]
            k2 = dhat[c2.id].shape[0]
            Dt = np.zeros((k1 + k2, k1 + k2))
            Dt[:k1, :k1] = dhat[c1.id]
            Dt[:k1, k1:] = B12
            Dt[k1:, :k1] = B21
            Dt[k1:, k1:] = dhat[c2.id]
        Dti = _guarded_inv(Dt, nd.id, nd.level, "diagonal block")
        U, V = h.U[nd.id], h.V[nd.id]
        k = U.shape[1]
        if k == 0:
            # no off-diagonal coupling: the Woodbury update degenerates
            dhat[nd.id] = np.zeros((0, 0))
            E[nd.id] = np.zeros((Dt.shape[0], 0))
            F[nd.id] = np.zeros((Dt.shape[0], 0))
            G[nd.id] = Dti
            continue
        DtiU = Dti @ U
        dh = _guarded_inv(V.T @ DtiU, nd.id, nd.level, "reduced interface")
        VtDti = V.T @ Dti
        E[nd.id] = DtiU @ dh
        F[nd.id] = (dh @ VtDti).T
        G[nd.id] = Dti - DtiU @ dh @ VtDti
        dhat[nd.id] = dh
    c1, c2 = tree.children(tree.root)
    B12, B21 = h.B[tree.root.id]
    k1 = dhat[c1.id].shape[0]
    k2 = dhat[c2.id].shape[0]
    top = np.zeros((k1 + k2, k1 + k2))
    top[:k1, :k1] = dhat[c1.id]
    top[:k1, k1:] = B12
    top[k1:, :k1] = B21
    top[k1:, k1:] = dhat[c2.id]
    root_G = _guarded_inv(top, tree.root.id, 0, "root block")
    return HbsInverseFactors(tree, E, F, G, root_G)


def inverse_apply(f, x, _trace=None):
    """H^{-1} @ x from the inverse factors.

    Upward sweep: xhat = F* x per node; root solve through G_1; downward
    sweep producing the solved reduced values yhat, expanded by E and G.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if x.shape[0] != f.tree.size:
        raise ValueError(f"dimension mismatch: {x.shape[0]} != {f.tree.size}")
    X = x[:, None] if single else x
    tree = f.tree
    if tree.root.is_leaf:
        Y = f.root_G @ X
        return Y[:, 0] if single else Y
    xhat = {}
    for nd in tree.topo_up():
        if nd.id == tree.root.id:
            continue
        if nd.is_leaf:
            xhat[nd.id] = f.F[nd.id].T @ X[nd.start:nd.stop]
        else:
            c1, c2 = tree.children(nd)
            xhat[nd.id] = f.F[nd.id].T @ np.concatenate([xhat[c1.id], xhat[c2.id]])
        if _trace is not None:
            _trace.append(("F", nd.id))
    c1, c2 = tree.children(tree.root)
    z = f.root_G @ np.concatenate([xhat[c1.id], xhat[c2.id]])
    yhat = {c1.id: z[:xhat[c1.id].shape[0]], c2.id: z[xhat[c1.id].shape[0]:]}
    Y = np.zeros_like(X)
    for nd in tree.topo_down():
        if nd.id == tree.root.id:
            continue
        if _trace is not None:
            _trace.append(("EG", nd.id))
        if nd.is_leaf:
            Y[nd.start:nd.stop] = f.E[nd.id] @ yhat[nd.id] + f.G[nd.id] @ X[nd.start:nd.stop]
        else:
            c1, c2 = tree.children(nd)
            stacked = np.concatenate([xhat[c1.id], xhat[c2.id]])
            z = f.E[nd.id] @ yhat[nd.id] + f.G[nd.id] @ stacked
            yhat[c1.id] = z[:xhat[c1.id].shape[0]]
            yhat[c2.id] = z[xhat[c1.id].shape[0]:]
    return Y[:, 0] if single else Y
