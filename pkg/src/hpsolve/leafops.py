"""Per-leaf spectral operators.

Each leaf gets a p x p Chebyshev tensor grid (p equal to the edge tabulation
order q).  The discrete Dirichlet-to-Neumann matrix is the product of four
maps: Gauss->Chebyshev boundary interpolation (corner conflicts averaged),
interior spectral solve, spectral differentiation onto the boundary
Chebyshev nodes (d/dx2 on horizontal sides, d/dx1 on vertical sides), and
Chebyshev->Gauss re-tabulation per side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import instrumentation
from .errors import LeafResonanceError
from .grid import Rectangle, cheb_nodes, gauss_nodes, interp_matrix

__all__ = [
    "CoefficientField",
    "LeafOperators",
    "LeafGeometry",
    "cheb_diff_matrix",
    "build_local_operator",
    "leaf_solve_operator",
    "build_leaf_dtn",
]

#: condition estimate beyond which the interior operator counts as resonant
RESONANCE_COND = 1e13


@dataclass
class CoefficientField:
    """Coefficients of A = -c11 d11 - 2 c12 d12 - c22 d22 + c1 d1 + c2 d2 + c.

    Each entry is a scalar or a callable f(x1, x2) accepting numpy arrays.
    The default is the Laplace operator.
    """

    c11: object = 1.0
    c12: object = 0.0
    c22: object = 1.0
    c1: object = 0.0
    c2: object = 0.0
    c: object = 0.0

    _NAMES = ("c11", "c12", "c22", "c1", "c2", "c")

    def evaluate_all(self, x, y):
        """Each coefficient at the given points; scalars stay scalar."""
        out = {}
        for name in self._NAMES:
            f = getattr(self, name)
            out[name] = f(x, y) if callable(f) else float(f)
        return out


@dataclass
class LeafOperators:
    T: np.ndarray  # 4q x 4q DtN matrix
    Psi: np.ndarray  # (q-2)^2 x 4(q-1) interior solve operator
    L1: np.ndarray  # 4(q-1) x 4q Gauss -> boundary-Chebyshev interpolation
    L4: np.ndarray  # 4q x 4q per-side Chebyshev -> Gauss flux re-tabulation


def cheb_diff_matrix(p, interval=(-1.0, 1.0)):
    """Spectral differentiation matrix on the Chebyshev extreme points.

    Exact (to round-off) for polynomials of degree <= p-1; built from
    barycentric weights with the negative-sum trick on the diagonal.
    """
    x = cheb_nodes(p, interval)
    w = np.power(-1.0, np.arange(p))
    w[0] *= 0.5
    w[-1] *= 0.5
    D = np.zeros((p, p))
    for i in range(p):
        off = [j for j in range(p) if j != i]
        D[i, off] = (w[off] / w[i]) / (x[i] - x[off])
        D[i, i] = -np.sum(D[i, off])
    return D


class LeafGeometry:
    """Size-dependent leaf machinery shared by all congruent leaves.

    Holds the Chebyshev grid (x1-major flattening: index i*p + j for node
    (x_i, y_j)), the tensorized differentiation matrices, the interior/
    boundary index partition, and the DtN factors L1, L4 and L4 @ L3 that do
    not depend on the PDE coefficients.
    """

    _cache: dict = {}

    def __init__(self, p, width, height):
        self.p = p
        self.width = width
        self.height = height
        self.cheb_x = cheb_nodes(p, (0.0, width))
        self.cheb_y = cheb_nodes(p, (0.0, height))
        self.gauss_x = (gauss_nodes(p) + 1.0) * 0.5 * width
        self.gauss_y = (gauss_nodes(p) + 1.0) * 0.5 * height
        Dx = cheb_diff_matrix(p, (0.0, width))
        Dy = cheb_diff_matrix(p, (0.0, height))
        I = np.eye(p)
        self.Dx, self.Dy = Dx, Dy
        self.D1 = np.kron(Dx, I)
        self.D2 = np.kron(I, Dy)
        self.D1sq = np.kron(Dx @ Dx, I)
        self.D12 = np.kron(Dx, Dy)
        self.D2sq = np.kron(I, Dy @ Dy)
        self.grid_x = np.repeat(self.cheb_x, p)
        self.grid_y = np.tile(self.cheb_y, p)

        g = lambda i, j: i * p + j
        self.J_i = np.array([g(i, j) for i in range(1, p - 1)
                             for j in range(1, p - 1)], dtype=np.intp)
        # Boundary Chebyshev points, each corner counted once.  Side blocks:
        # S owns the SW corner, E owns SE, N owns NE, W owns NW.
        side_entries = ([g(i, 0) for i in range(p - 1)]
                        + [g(p - 1, j) for j in range(p - 1)]
                        + [g(i, p - 1) for i in range(1, p)]
                        + [g(0, j) for j in range(1, p)])
        self.J_e = np.array(side_entries, dtype=np.intp)

        self.L1 = self._build_l1()
        self.L4 = self._build_l4()
        self.L43 = self.L4 @ self._build_l3()

    @classmethod
    def get(cls, p, width, height):
        key = (p, width, height)
        geom = cls._cache.get(key)
        if geom is None:
            geom = cls(p, width, height)
            cls._cache[key] = geom
        return geom

    def _build_l1(self):
        p = self.p
        PS = interp_matrix(self.gauss_x, self.cheb_x)  # south/north direction
        PE = interp_matrix(self.gauss_y, self.cheb_y)  # east/west direction
        cols = {"S": slice(0, p), "E": slice(p, 2 * p),
                "N": slice(2 * p, 3 * p), "W": slice(3 * p, 4 * p)}
        L1 = np.zeros((4 * (p - 1), 4 * p))
        r = 0
        for i in range(p - 1):  # south block, i=0 is the SW corner
            if i == 0:
                L1[r, cols["S"]] = 0.5 * PS[0]
                L1[r, cols["W"]] = 0.5 * PE[0]
            else:
                L1[r, cols["S"]] = PS[i]
            r += 1
        for j in range(p - 1):  # east block, j=0 is the SE corner
            if j == 0:
                L1[r, cols["E"]] = 0.5 * PE[0]
                L1[r, cols["S"]] = 0.5 * PS[p - 1]
            else:
                L1[r, cols["E"]] = PE[j]
            r += 1
        for i in range(1, p):  # north block, i=p-1 is the NE corner
            if i == p - 1:
                L1[r, cols["N"]] = 0.5 * PS[p - 1]
                L1[r, cols["E"]] = 0.5 * PE[p - 1]
            else:
                L1[r, cols["N"]] = PS[i]
            r += 1
        for j in range(1, p):  # west block, j=p-1 is the NW corner
            if j == p - 1:
                L1[r, cols["W"]] = 0.5 * PE[p - 1]
                L1[r, cols["N"]] = 0.5 * PS[0]
            else:
                L1[r, cols["W"]] = PE[j]
            r += 1
        return L1

    def _build_l3(self):
        p = self.p
        g = lambda i, j: i * p + j
        rows = []
        rows += [self.D2[g(i, 0)] for i in range(p)]  # south: d/dx2
        rows += [self.D1[g(p - 1, j)] for j in range(p)]  # east: d/dx1
        rows += [self.D2[g(i, p - 1)] for i in range(p)]  # north
        rows += [self.D1[g(0, j)] for j in range(p)]  # west
        return np.array(rows)

    def _build_l4(self):
        p = self.p
        Qx = interp_matrix(self.cheb_x, self.gauss_x)
        Qy = interp_matrix(self.cheb_y, self.gauss_y)
        L4 = np.zeros((4 * p, 4 * p))
        for s, Q in enumerate((Qx, Qy, Qx, Qy)):
            L4[s * p:(s + 1) * p, s * p:(s + 1) * p] = Q
        return L4

    def leaf_points(self, rect):
        """Chebyshev grid coordinates of this geometry placed on ``rect``."""
        return rect.x_lo + self.grid_x, rect.y_lo + self.grid_y

    def gauss_boundary_points(self, rect):
        """Coordinates of the 4q edge tabulation nodes in S,E,N,W order."""
        q = self.p
        xs = rect.x_lo + self.gauss_x
        ys = rect.y_lo + self.gauss_y
        pts = np.empty((4 * q, 2))
        pts[0:q] = np.column_stack([xs, np.full(q, rect.y_lo)])
        pts[q:2 * q] = np.column_stack([np.full(q, rect.x_hi), ys])
        pts[2 * q:3 * q] = np.column_stack([xs, np.full(q, rect.y_hi)])
        pts[3 * q:4 * q] = np.column_stack([np.full(q, rect.x_lo), ys])
        return pts


def assemble_operator(geom, vals):
    """Collocated PDE operator on the tensor grid from evaluated coefficients."""
    def rs(cv, M):  # row-scale by a coefficient (scalar or per-node array)
        if np.isscalar(cv):
            return cv * M if cv != 0.0 else None
        return cv[:, None] * M
    terms = [rs(vals["c11"], -geom.D1sq), rs(vals["c12"], -2.0 * geom.D12),
             rs(vals["c22"], -geom.D2sq), rs(vals["c1"], geom.D1),
             rs(vals["c2"], geom.D2)]
    A = np.zeros((geom.p ** 2, geom.p ** 2))
    for t in terms:
        if t is not None:
            A += t
    cv = vals["c"]
    idx = np.arange(geom.p ** 2)
    A[idx, idx] += cv
    return A


def build_local_operator(coeffs, leaf, p):
    """Spectral collocation matrix for the PDE restricted to one leaf."""
    if not isinstance(leaf, Rectangle):
        leaf = Rectangle(*leaf)
    if p < 3:
        raise ValueError("p must be >= 3 (need an interior node)")
    geom = LeafGeometry.get(p, leaf.width, leaf.height)
    x, y = geom.leaf_points(leaf)
    vals = coeffs.evaluate_all(x, y)
    for name, v in vals.items():
        bad = ~np.isfinite(np.atleast_1d(v))
        if bad.any():
            k = int(np.argmax(bad)) if not np.isscalar(v) else 0
            raise ValueError(
                f"coefficient {name} is not finite at node ({x[k]}, {y[k]})")
    return assemble_operator(geom, vals)


def leaf_solve_operator(A, J_i, J_e):
    """Interior solve operator Psi = -A_ii^{-1} A_ie.

    Raises LeafResonanceError when A_ii is singular or its 1-norm condition
    estimate exceeds RESONANCE_COND.
    """
    A_ii = np.ascontiguousarray(A[np.ix_(J_i, J_i)])
    A_ie = A[np.ix_(J_i, J_e)]
    try:
        lu, piv = sla.lu_factor(A_ii)
    except np.linalg.LinAlgError as exc:
        raise LeafResonanceError(cond=np.inf) from exc
    gecon = sla.get_lapack_funcs("gecon", (A_ii,))
    rcond, _ = gecon(lu, np.linalg.norm(A_ii, 1))
    if not np.isfinite(rcond) or rcond == 0 or 1.0 / rcond > RESONANCE_COND:
        raise LeafResonanceError(cond=np.inf if rcond == 0 else 1.0 / rcond)
    return -sla.lu_solve((lu, piv), A_ie)


def interior_solve_batch(geom, A_stack):
    """Psi for a stack of leaf operators, plus crude condition estimates.

    One LAPACK sweep over the stacked interior blocks; the condition
    estimate uses a fixed probe vector (resonant leaves blow up by many
    orders of magnitude, so a one-probe estimate is enough to flag them).
    """
    ii = np.ix_(geom.J_i, geom.J_i)
    ie = np.ix_(geom.J_i, geom.J_e)
    A_ii = A_stack[:, ii[0], ii[1]]
    A_ie = A_stack[:, ie[0], ie[1]]
    ni = A_ii.shape[1]
    rng = np.random.default_rng(1234)
    probe = rng.standard_normal((ni, 1))
    rhs = np.concatenate([A_ie, np.broadcast_to(probe, (A_stack.shape[0], ni, 1))],
                         axis=2)
    try:
        sol = np.linalg.solve(A_ii, rhs)
    except np.linalg.LinAlgError as exc:
        raise LeafResonanceError(cond=np.inf) from exc
    anorm = np.abs(A_ii).sum(axis=2).max(axis=1)
    conds = anorm * np.abs(sol[:, :, -1]).max(axis=1) / np.abs(probe).max()
    return -sol[:, :, :-1], conds


def dtn_from_psi(geom, Psi):
    """DtN matrix T = L4 L3 L2 L1 given the interior solve operator."""
    instrumentation.bump("leaf_dtn")
    L43L2 = geom.L43[:, geom.J_e] + geom.L43[:, geom.J_i] @ Psi
    return L43L2 @ geom.L1


def build_leaf_dtn(coeffs, leaf, q):
    """All leaf operators (T, Psi, L1, L4) for one leaf rectangle."""
    if not isinstance(leaf, Rectangle):
        leaf = Rectangle(*leaf)
    geom = LeafGeometry.get(q, leaf.width, leaf.height)
    A = build_local_operator(coeffs, leaf, q)
    try:
        Psi = leaf_solve_operator(A, geom.J_i, geom.J_e)
    except LeafResonanceError as exc:
        raise LeafResonanceError(box=leaf, cond=exc.cond) from exc
    return LeafOperators(dtn_from_psi(geom, Psi), Psi, geom.L1, geom.L4)
