"""Hierarchical box tessellation and 1-D interpolation primitives.

The rectangular domain is cut into 4**L congruent leaf boxes organized as a
binary tree: cuts alternate vertical/horizontal, vertical first, so every
tree level is uniform.  Leaf edges carry q Gauss-Legendre tabulation nodes
(corners are never tabulated); nodes shared by two leaves are identified
through integer edge coordinates rather than floating-point comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Rectangle",
    "BoxNode",
    "BoxTree",
    "GlobalNodeSet",
    "gauss_nodes",
    "cheb_nodes",
    "interp_matrix",
    "build_tree",
]


@dataclass(frozen=True)
class Rectangle:
    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float

    def __post_init__(self):
        if not (self.x_lo < self.x_hi and self.y_lo < self.y_hi):
            raise ValueError(f"degenerate rectangle {self}")

    @property
    def width(self):
        return self.x_hi - self.x_lo

    @property
    def height(self):
        return self.y_hi - self.y_lo

    def contains(self, x, y):
        return (self.x_lo <= x <= self.x_hi) and (self.y_lo <= y <= self.y_hi)


@dataclass
class BoxNode:
    """One box of the tessellation.

    ``cells`` holds the box footprint in integer leaf-cell units
    (ix, iy, nx, ny); all geometric identities are resolved through these
    integers.  ``I_e`` lists global ids of the tabulation nodes on the box
    boundary; ``I_i`` lists the nodes interior to the box that are shared by
    its two children (empty for leaves).
    """

    index: int
    rect: Rectangle
    level: int
    parent: int | None = None
    child_a: int | None = None
    child_b: int | None = None
    split_axis: str = "none"  # 'v' | 'h' | 'none'
    cells: tuple[int, int, int, int] = (0, 0, 1, 1)
    I_e: np.ndarray = field(default=None, repr=False)
    I_i: np.ndarray = field(default=None, repr=False)

    @property
    def is_leaf(self):
        return self.child_a is None


@dataclass
class BoxTree:
    boxes: list[BoxNode]
    levels: int  # L: number of quad-refinement levels
    q: int
    domain: Rectangle
    _leaf_map: dict = field(default=None, repr=False)

    @property
    def n_boxes(self):
        return len(self.boxes)

    def leaf_at(self, ix, iy):
        """Leaf box whose cell coordinates are (ix, iy)."""
        if self._leaf_map is None:
            self._leaf_map = {b.cells[:2]: b.index for b in self.boxes
                              if b.is_leaf}
        return self.boxes[self._leaf_map[(ix, iy)]]

    def leaves(self):
        return [b for b in self.boxes if b.is_leaf]

    def parents(self):
        return [b for b in self.boxes if not b.is_leaf]

    @property
    def root(self):
        return self.boxes[0]

    @property
    def leaf_width(self):
        return self.domain.width / (1 << self.levels)

    @property
    def leaf_height(self):
        return self.domain.height / (1 << self.levels)


@dataclass
class GlobalNodeSet:
    """All Gauss tabulation nodes on leaf edges, deduplicated across edges.

    ``on_vertical[k]`` is True when node k lies on a vertical edge; the flux
    convention tabulates d/dx1 there and d/dx2 on horizontal edges.
    """

    points: np.ndarray  # (N, 2)
    on_vertical: np.ndarray  # (N,) bool
    n_gamma: int  # nodes on the outer boundary (listed first)

    @property
    def N(self):
        return self.points.shape[0]


def gauss_nodes(q):
    """Gauss-Legendre points on (-1, 1) in increasing order.

    Roots of the degree-q Legendre polynomial, found by Newton iteration on
    the three-term recurrence starting from the Chebyshev-based guess.
    """
    if q < 1:
        raise ValueError("q must be >= 1")
    if q == 1:
        return np.zeros(1)
    k = np.arange(q)
    x = -np.cos(np.pi * (4 * k + 3) / (4 * q + 2))  # ascending initial guess
    for _ in range(100):
        p_prev, p = np.zeros_like(x), np.ones_like(x)
        for n in range(q):
            p_prev, p = p, ((2 * n + 1) * x * p - n * p_prev) / (n + 1)
        dp = q * (x * p - p_prev) / (x * x - 1.0)
        dx = p / dp
        x = x - dx
        if np.max(np.abs(dx)) < 1e-15:
            break
    return np.sort(x)


def cheb_nodes(p, interval=(-1.0, 1.0)):
    """Chebyshev extreme points (second kind) on [a, b], increasing order."""
    a, b = interval
    if p < 2:
        raise ValueError("p must be >= 2")
    if not a < b:
        raise ValueError("empty interval")
    t = np.cos(np.pi * np.arange(p) / (p - 1))[::-1]
    x = 0.5 * (a + b) + 0.5 * (b - a) * t
    x[0], x[-1] = a, b  # endpoints exactly
    return x


def _bary_weights(src):
    # scaled to avoid under/overflow for larger node counts
    scale = 4.0 / max(src.max() - src.min(), np.finfo(float).tiny)
    diff = (src[:, None] - src[None, :]) * scale
    np.fill_diagonal(diff, 1.0)
    return 1.0 / np.prod(diff, axis=1)


def interp_matrix(src, dst):
    """Dense |dst| x |src| matrix of barycentric Lagrange weights.

    Row r evaluates at dst[r] the unique polynomial interpolating data given
    on the src nodes.
    """
    src = np.atleast_1d(np.asarray(src, dtype=float))
    dst = np.atleast_1d(np.asarray(dst, dtype=float))
    if src.ndim != 1 or src.size < 1:
        raise ValueError("src must be a nonempty 1-D node list")
    if np.unique(src).size != src.size:
        raise ValueError("duplicate source nodes")
    if src.size == 1:
        return np.ones((dst.size, 1))
    w = _bary_weights(src)
    d = dst[:, None] - src[None, :]
    hit_rows, hit_cols = np.nonzero(d == 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = w[None, :] / d
        M = ratios / np.sum(ratios, axis=1)[:, None]
    for r, c in zip(hit_rows, hit_cols):
        M[r, :] = 0.0
        M[r, c] = 1.0
    return M


def build_tree(domain, L, q):
    """Build the box tree and the deduplicated global Gauss node set.

    Returns (BoxTree, GlobalNodeSet).  Global node ordering: outer-boundary
    nodes first (south, east, north, west edges, each by increasing
    coordinate), then the interior nodes of each parent box in box order,
    sorted along the parent's cut line.
    """
    if not isinstance(domain, Rectangle):
        domain = Rectangle(*domain)
    if L < 0:
        raise ValueError("L must be >= 0")
    if q < 2:
        raise ValueError("q must be >= 2")

    n = 1 << L  # leaf cells per direction
    xline = domain.x_lo + np.arange(n + 1) * (domain.width / n)
    yline = domain.y_lo + np.arange(n + 1) * (domain.height / n)
    gx = domain.x_lo + (gauss_nodes(q) + 1.0) * 0.5 * (domain.width / n)
    gx = gx - domain.x_lo  # offsets within one cell
    gy = (gauss_nodes(q) + 1.0) * 0.5 * (domain.height / n)

    def cell_rect(ix, iy, nx, ny):
        return Rectangle(xline[ix], xline[ix + nx], yline[iy], yline[iy + ny])

    boxes = [BoxNode(0, cell_rect(0, 0, n, n), 0, cells=(0, 0, n, n))]
    for depth in range(2 * L):
        axis = "v" if depth % 2 == 0 else "h"
        for b in [bx for bx in boxes if bx.level == depth]:
            ix, iy, nx, ny = b.cells
            if axis == "v":
                ca = (ix, iy, nx // 2, ny)
                cb = (ix + nx // 2, iy, nx - nx // 2, ny)
            else:
                ca = (ix, iy, nx, ny // 2)
                cb = (ix, iy + ny // 2, nx, ny - ny // 2)
            for tag, cc in (("a", ca), ("b", cb)):
                child = BoxNode(len(boxes), cell_rect(*cc), depth + 1,
                                parent=b.index, cells=cc)
                boxes.append(child)
                if tag == "a":
                    b.child_a = child.index
                else:
                    b.child_b = child.index
            b.split_axis = axis

    # Node keys: ('h', line_j, seg_i, g) on horizontal edges, ('v', line_i,
    # seg_j, g) on vertical ones.  Assign ids: outer boundary first.
    ids: dict[tuple, int] = {}
    points = []
    vertical = []

    def register(key):
        node_id = ids.get(key)
        if node_id is None:
            node_id = len(points)
            ids[key] = node_id
            orient, line, seg, g = key
            if orient == "h":
                points.append((xline[seg] + gx[g], yline[line]))
                vertical.append(False)
            else:
                points.append((xline[line], yline[seg] + gy[g]))
                vertical.append(True)
        return node_id

    for i in range(n):  # south
        for g in range(q):
            register(("h", 0, i, g))
    for j in range(n):  # east
        for g in range(q):
            register(("v", n, j, g))
    for i in range(n):  # north
        for g in range(q):
            register(("h", n, i, g))
    for j in range(n):  # west
        for g in range(q):
            register(("v", 0, j, g))
    n_gamma = len(points)

    for b in boxes:
        if b.is_leaf:
            continue
        ix, iy, nx, ny = b.cells
        keys = []
        if b.split_axis == "v":
            line = ix + nx // 2
            keys = [("v", line, j, g) for j in range(iy, iy + ny) for g in range(q)]
        else:
            line = iy + ny // 2
            keys = [("h", line, i, g) for i in range(ix, ix + nx) for g in range(q)]
        b.I_i = np.array([register(k) for k in keys], dtype=np.intp)

    nodeset = GlobalNodeSet(np.array(points, dtype=float),
                            np.array(vertical, dtype=bool), n_gamma)
    expected = (1 << (2 * L + 1)) * q + (1 << (L + 1)) * q
    assert nodeset.N == expected, (nodeset.N, expected)

    # Exterior index sets.  Leaves: sides S,E,N,W each by increasing
    # coordinate.  Parents: child-a remainder followed by child-b remainder,
    # each preserving the child's own ordering.
    for b in reversed(boxes):
        if b.is_leaf:
            ix, iy, _, _ = b.cells
            keys = ([("h", iy, ix, g) for g in range(q)]
                    + [("v", ix + 1, iy, g) for g in range(q)]
                    + [("h", iy + 1, ix, g) for g in range(q)]
                    + [("v", ix, iy, g) for g in range(q)])
            b.I_e = np.array([ids[k] for k in keys], dtype=np.intp)
        else:
            a = boxes[b.child_a]
            c = boxes[b.child_b]
            shared = set(b.I_i.tolist())
            keep_a = a.I_e[[g not in shared for g in a.I_e.tolist()]]
            keep_b = c.I_e[[g not in shared for g in c.I_e.tolist()]]
            b.I_e = np.concatenate([keep_a, keep_b])

    tree = BoxTree(boxes, L, q, domain)
    return tree, nodeset
