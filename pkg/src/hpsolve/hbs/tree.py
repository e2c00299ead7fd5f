"""Binary index trees underlying the block-separable matrix format."""

from __future__ import annotations

from dataclasses import dataclass

__all__ = ["TreeNode", "IndexTree", "build_index_tree", "join_trees"]


@dataclass
class TreeNode:
    id: int
    level: int
    start: int
    stop: int
    parent: int | None = None
    left: int | None = None
    right: int | None = None

    @property
    def is_leaf(self):
        return self.left is None

    @property
    def size(self):
        return self.stop - self.start


class IndexTree:
    """Partition of [0, M) into a binary tree; level 0 is the root."""

    def __init__(self, nodes):
        self.nodes = nodes

    @property
    def root(self):
        return self.nodes[0]

    @property
    def size(self):
        return self.root.size

    @property
    def L(self):
        return max(n.level for n in self.nodes)

    def leaves(self):
        return [n for n in self.nodes if n.is_leaf]

    def level_nodes(self, level):
        return sorted((n for n in self.nodes if n.level == level),
                      key=lambda n: n.start)

    def children(self, node):
        return self.nodes[node.left], self.nodes[node.right]

    def topo_up(self):
        """Nodes ordered so every child precedes its parent."""
        return sorted(self.nodes, key=lambda n: -n.level)

    def topo_down(self):
        return sorted(self.nodes, key=lambda n: n.level)

    def same_structure(self, other):
        if len(self.nodes) != len(other.nodes):
            return False
        for a, b in zip(self.nodes, other.nodes):
            if (a.start, a.stop, a.left, a.right) != (b.start, b.stop, b.left, b.right):
                return False
        return True


def build_index_tree(M, m):
    """Balanced binary tree over [0, M); leaves hold at most m indices.

    Splits are into halves with the left child taking the extra index when
    the count is odd; all leaves sit at the same depth.
    """
    if M < 1 or m < 1:
        raise ValueError("need M >= 1 and m >= 1")
    L = 0
    while -(-M >> L) > m:  # ceil(M / 2**L)
        L += 1
    nodes = [TreeNode(0, 0, 0, M)]
    frontier = [nodes[0]]
    for level in range(1, L + 1):
        nxt = []
        for nd in frontier:
            mid = nd.start + (nd.size + 1) // 2
            left = TreeNode(len(nodes), level, nd.start, mid, parent=nd.id)
            nodes.append(left)
            right = TreeNode(len(nodes), level, mid, nd.stop, parent=nd.id)
            nodes.append(right)
            nd.left, nd.right = left.id, right.id
            nxt += [left, right]
        frontier = nxt
    return IndexTree(nodes)


def _clone(nodes_out, src, node, offset, level_shift, parent_id, mapping):
    nd = TreeNode(len(nodes_out), node.level + level_shift,
                  node.start + offset, node.stop + offset, parent=parent_id)
    nodes_out.append(nd)
    mapping[node.id] = nd.id
    if not node.is_leaf:
        nd.left = _clone(nodes_out, src, src.nodes[node.left], offset,
                         level_shift, nd.id, mapping)
        nd.right = _clone(nodes_out, src, src.nodes[node.right], offset,
                          level_shift, nd.id, mapping)
    return nd.id


def join_trees(t1, t2):
    """New tree whose root's children are the roots of t1 and t2 (shifted).

    Returns (tree, map1, map2) with old-id -> new-id mappings.
    """
    n1 = t1.size
    nodes = [TreeNode(0, 0, 0, n1 + t2.size)]
    map1, map2 = {}, {}
    nodes[0].left = _clone(nodes, t1, t1.root, 0, 1, 0, map1)
    nodes[0].right = _clone(nodes, t2, t2.root, n1, 1, 0, map2)
    return IndexTree(nodes), map1, map2
