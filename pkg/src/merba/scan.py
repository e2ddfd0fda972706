"""Window scan orders: build, apply, invert and compare token permutations.

Grid tokens are indexed row-major, ``idx = row * width + col``.  All four
production directions start at the top-left token:

* ``a`` horizontal raster: row by row, each row left to right
* ``b`` vertical raster: column by column, each column top to bottom
* ``c`` horizontal zigzag: row by row, alternating left-right / right-left
* ``d`` vertical zigzag: column by column, alternating down / up

``Reversed`` and ``MirroredColumns`` wrappers give the bidirectional and
left-right symmetric counterparts used only for ablations.
"""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError
from .tensor import functional as F

BASE_KINDS = ("a", "b", "c", "d")


@dataclass(frozen=True)
class ScanDirection:
    kind: str                       # a | b | c | d | reversed | mirrored
    of: "ScanDirection | None" = None

    def __post_init__(self):
        if self.kind in BASE_KINDS:
            if self.of is not None:
                raise ValueError(f"base direction {self.kind!r} takes no operand")
        elif self.kind in ("reversed", "mirrored"):
            if self.of is None:
                raise ValueError(f"{self.kind} needs an operand direction")
        else:
            raise ValueError(f"unknown scan kind {self.kind!r}")

    @property
    def label(self):
        if self.of is None:
            return self.kind
        suffix = "bi" if self.kind == "reversed" else "sy"
        return f"{self.of.label}_{suffix}"

    @classmethod
    def parse(cls, text):
        """``"a"``, ``"b_bi"`` (reversed b), ``"a_sy"`` (column-mirrored a), ..."""
        parts = text.strip().split("_")
        d = cls(parts[0])
        for p in parts[1:]:
            if p == "bi":
                d = cls("reversed", d)
            elif p == "sy":
                d = cls("mirrored", d)
            else:
                raise ValueError(f"unknown scan modifier {p!r} in {text!r}")
        return d


HORIZONTAL_RASTER = ScanDirection("a")
VERTICAL_RASTER = ScanDirection("b")
HORIZONTAL_ZIGZAG = ScanDirection("c")
VERTICAL_ZIGZAG = ScanDirection("d")
PRODUCTION_DIRECTIONS = (HORIZONTAL_RASTER, VERTICAL_RASTER, HORIZONTAL_ZIGZAG, VERTICAL_ZIGZAG)


@dataclass(frozen=True)
class Permutation:
    order: tuple
    height: int
    width: int

    def __post_init__(self):
        n = self.height * self.width
        if len(self.order) != n or sorted(self.order) != list(range(n)):
            raise ValueError(f"order is not a permutation of 0..{n - 1}")

    @property
    def length(self):
        return len(self.order)

    @functools.cached_property
    def array(self):
        a = np.asarray(self.order, dtype=np.int64)
        a.setflags(write=False)
        return a

    @functools.cached_property
    def inverse(self):
        inv = np.argsort(self.array)
        inv.setflags(write=False)
        return inv


def _grid_order(kind, h, w):
    grid = np.arange(h * w).reshape(h, w)
    if kind == "a":
        return grid.reshape(-1)
    if kind == "b":
        return grid.T.reshape(-1)
    if kind == "c":
        rows = [grid[r] if r % 2 == 0 else grid[r, ::-1] for r in range(h)]
        return np.concatenate(rows)
    if kind == "d":
        cols = [grid[:, c] if c % 2 == 0 else grid[::-1, c] for c in range(w)]
        return np.concatenate(cols)
    raise AssertionError(kind)


def _mirror_columns(order, width):
    order = np.asarray(order)
    return order - order % width + (width - 1 - order % width)


@functools.lru_cache(maxsize=None)
def build_permutation(direction, height, width):
    if isinstance(direction, str):
        direction = ScanDirection.parse(direction)
    if height < 1 or width < 1:
        raise ValueError(f"window extents must be >= 1, got {height}x{width}")
    if direction.of is None:
        order = _grid_order(direction.kind, height, width)
    else:
        inner = np.asarray(build_permutation(direction.of, height, width).order)
        order = inner[::-1] if direction.kind == "reversed" else _mirror_columns(inner, width)
    return Permutation(tuple(int(i) for i in order), height, width)


def apply_scan(window, perm):
    """Flatten ``(..., h, w, D)`` into ``(..., T, D)`` following ``perm``."""
    *lead, h, w, d = window.shape
    if (h, w) != (perm.height, perm.width):
        raise ShapeError(f"window {h}x{w} does not match permutation {perm.height}x{perm.width}")
    seq = F.reshape(window, (*lead, h * w, d))
    return F.take(seq, perm.array, axis=-2)


def invert_scan(sequence, perm):
    """Inverse of :func:`apply_scan`: ``(..., T, D)`` back to ``(..., h, w, D)``."""
    *lead, t, d = sequence.shape
    if t != perm.length:
        raise ShapeError(f"sequence length {t} does not match permutation length {perm.length}")
    grid = F.take(sequence, perm.inverse, axis=-2)
    return F.reshape(grid, (*lead, perm.height, perm.width, d))


class Relation(enum.Enum):
    IDENTICAL = "Identical"
    REVERSAL = "Reversal"
    COLUMN_MIRROR = "ColumnMirror"
    UNRELATED = "Unrelated"


def classify_relation(p, q):
    if (p.height, p.width) != (q.height, q.width):
        raise ShapeError(f"extent mismatch: {p.height}x{p.width} vs {q.height}x{q.width}")
    if p.order == q.order:
        return Relation.IDENTICAL
    if p.order[::-1] == q.order:
        return Relation.REVERSAL
    if tuple(int(i) for i in _mirror_columns(p.order, p.width)) == q.order:
        return Relation.COLUMN_MIRROR
    return Relation.UNRELATED


def are_neighbors(i, j, width):
    ri, ci = divmod(i, width)
    rj, cj = divmod(j, width)
    return abs(ri - rj) + abs(ci - cj) == 1


def jumps(perm):
    """Number of consecutive pairs in the order that are not 4-neighbours."""
    o = perm.order
    return sum(not are_neighbors(o[t], o[t + 1], perm.width) for t in range(len(o) - 1))


def step_grid(perm):
    """Step number at which each grid cell is visited, shaped ``(h, w)``."""
    steps = np.empty(perm.length, dtype=np.int64)
    steps[perm.array] = np.arange(perm.length)
    return steps.reshape(perm.height, perm.width)
