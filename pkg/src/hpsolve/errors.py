"""Error taxonomy shared by the solver stack."""

from __future__ import annotations


class SolverError(Exception):
    """Base class for failures during building or applying operators."""


class ConfigError(SolverError):
    """Invalid user-facing configuration (unknown problem, bad parameters)."""


class LeafResonanceError(SolverError):
    """Singular or near-singular interior operator on a leaf.

    Occurs when the PDE on one leaf hits an interior eigenvalue (Helmholtz
    at special wavenumbers).  Remedy: change the level count or q.
    """

    def __init__(self, box=None, cond=None):
        self.box = box
        self.cond = cond
        where = f" (box {box})" if box is not None else ""
        detail = f", condition estimate {cond:.2e}" if cond else ""
        super().__init__(f"leaf resonance{where}{detail}")


class MergeResonanceError(SolverError):
    """Singular interface operator T33_a - T33_b while merging two boxes."""

    def __init__(self, box=None, detail=""):
        self.box = box
        where = f" (box {box})" if box is not None else ""
        suffix = f": {detail}" if detail else ""
        super().__init__(f"merge resonance{where}{suffix}")


class HbsInversionError(SolverError):
    """Singular reduced block during HBS inversion (Algorithm stage)."""

    def __init__(self, node, level, what):
        self.node = node
        self.level = level
        super().__init__(f"singular {what} at HBS node {node} (level {level})")
