"""Dyadic cubes, sparse cell sets, dyadic Hausdorff content and shifted grids.

Cells are stored as integer coordinate rows.  A cell with coordinates ``c`` at
level ``k`` is the half-open cube ``prod [c_i 2^-k, (c_i + 1) 2^-k)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, ParameterError, ResolutionError

DEPTH_CAP = {1: 20, 2: 14, 3: 9}


@dataclass(frozen=True)
class DyadicCube:
    dim: int
    level: int
    coords: tuple

    def __post_init__(self):
        if len(self.coords) != self.dim:
            raise ParameterError("coords length must equal dim")
        object.__setattr__(self, "coords", tuple(int(c) for c in self.coords))

    @property
    def side(self) -> float:
        return 2.0 ** (-self.level)

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.coords, dtype=float) * self.side

    def parent(self) -> "DyadicCube":
        return DyadicCube(self.dim, self.level - 1, tuple(c >> 1 for c in self.coords))

    def children(self) -> list:
        out = []
        for bits in range(2 ** self.dim):
            off = [(bits >> (self.dim - 1 - i)) & 1 for i in range(self.dim)]
            out.append(DyadicCube(self.dim, self.level + 1,
                                  tuple(2 * c + o for c, o in zip(self.coords, off))))
        return out

    def ancestor(self, level: int) -> "DyadicCube":
        if level > self.level:
            raise ParameterError("ancestor level must not exceed cube level")
        sh = self.level - level
        return DyadicCube(self.dim, level, tuple(c >> sh for c in self.coords))

    def contains_cell(self, cell_coords: np.ndarray, depth: int) -> np.ndarray:
        """Mask of depth-level cells lying inside this cube."""
        sh = depth - self.level
        if sh < 0:
            raise ResolutionError("cube is finer than the cells")
        anc = np.asarray(cell_coords, dtype=np.int64) >> sh
        return np.all(anc == np.asarray(self.coords, dtype=np.int64), axis=1)


# ---------------------------------------------------------------------------
# integer row helpers

def lexsort_rows(coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords)
    if coords.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.lexsort(coords.T[::-1])


def row_keys(*arrays: np.ndarray) -> np.ndarray:
    """Order-preserving int64 keys for integer rows (concatenated columns).

    Works for negative entries; rows are compared lexicographically.
    """
    cols = []
    for a in arrays:
        a = np.asarray(a, dtype=np.int64)
        if a.ndim == 1:
            a = a[:, None]
        cols.extend(a.T)
    if not cols or cols[0].shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    key = np.zeros(cols[0].shape[0], dtype=np.int64)
    total_bits = 0
    for c in cols:
        lo = int(c.min())
        span = int(c.max()) - lo + 1
        bits = max(1, span.bit_length())
        total_bits += bits
        if total_bits > 62:
            raise ResolutionError("row key overflow; coordinate range too large")
        key = (key << bits) | (c - lo)
    return key


def unique_rows(coords: np.ndarray, return_inverse: bool = False):
    """Unique integer rows in lexicographic order."""
    coords = np.asarray(coords, dtype=np.int64)
    if coords.shape[0] == 0:
        return (coords, np.zeros(0, dtype=np.int64)) if return_inverse else coords
    keys = row_keys(coords)
    _, first, inv = np.unique(keys, return_index=True, return_inverse=True)
    out = coords[first]
    return (out, inv) if return_inverse else out


def rows_isin(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Mask of rows of ``a`` present in ``b``."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    if b.shape[0] == 0:
        return np.zeros(a.shape[0], dtype=bool)
    k = row_keys(np.concatenate([a, b]))
    return np.isin(k[: a.shape[0]], k[a.shape[0]:])


# ---------------------------------------------------------------------------
# Morton codes

def morton_encode(coords: np.ndarray, depth: int) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.uint64)
    if coords.ndim == 1:
        coords = coords[:, None]
    d = coords.shape[1]
    if d * depth > 63:
        raise ResolutionError("Morton code does not fit in 63 bits")
    code = np.zeros(coords.shape[0], dtype=np.uint64)
    one = np.uint64(1)
    for b in range(depth):
        for i in range(d):
            bit = (coords[:, i] >> np.uint64(b)) & one
            code |= bit << np.uint64(b * d + (d - 1 - i))
    return code.astype(np.int64)


def morton_decode(codes: np.ndarray, dim: int, depth: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64).astype(np.uint64)
    out = np.zeros((codes.shape[0], dim), dtype=np.uint64)
    one = np.uint64(1)
    for b in range(depth):
        for i in range(dim):
            bit = (codes >> np.uint64(b * dim + (dim - 1 - i))) & one
            out[:, i] |= bit << np.uint64(b)
    return out.astype(np.int64)


# ---------------------------------------------------------------------------
# cell sets

@dataclass(frozen=True, eq=False)
class DyadicSet:
    """Occupied cells of one depth inside ``[0,1)^dim``, lexicographically sorted."""

    dim: int
    depth: int
    coords: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.dim not in DEPTH_CAP:
            raise ParameterError(f"dim must be 1, 2 or 3, got {self.dim}")
        if self.depth < 0 or self.depth > DEPTH_CAP[self.dim]:
            raise ResolutionError(
                f"depth {self.depth} outside [0, {DEPTH_CAP[self.dim]}] for d={self.dim}")
        c = np.asarray(self.coords, dtype=np.int64).reshape(-1, self.dim)
        if c.size and (c.min() < 0 or c.max() >= 2 ** self.depth):
            raise DomainError("cell coordinates must lie in [0, 2^depth)")
        c = unique_rows(c)
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    @classmethod
    def empty(cls, dim: int, depth: int) -> "DyadicSet":
        return cls(dim, depth, np.zeros((0, dim), dtype=np.int64))

    @classmethod
    def full(cls, dim: int, depth: int) -> "DyadicSet":
        n = 2 ** depth
        grids = np.meshgrid(*[np.arange(n)] * dim, indexing="ij")
        return cls(dim, depth, np.stack([g.ravel() for g in grids], axis=1))

    @classmethod
    def from_points(cls, points: np.ndarray, depth: int) -> "DyadicSet":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        idx = np.floor(pts * 2 ** depth).astype(np.int64)
        keep = np.all((idx >= 0) & (idx < 2 ** depth), axis=1)
        return cls(pts.shape[1], depth, idx[keep])

    def __len__(self) -> int:
        return int(self.coords.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, DyadicSet):
            return NotImplemented
        return (self.dim == other.dim and self.depth == other.depth
                and np.array_equal(self.coords, other.coords))

    def __hash__(self):
        return hash((self.dim, self.depth, self.coords.tobytes()))

    @property
    def cell_size(self) -> float:
        return 2.0 ** (-self.depth)

    def centers(self) -> np.ndarray:
        return (self.coords + 0.5) * self.cell_size

    def morton(self) -> np.ndarray:
        return morton_encode(self.coords, self.depth)

    def ancestors(self, level: int) -> np.ndarray:
        if level > self.depth:
            raise ResolutionError(f"level {level} finer than depth {self.depth}")
        return unique_rows(self.coords >> (self.depth - level))

    def coarsen(self, level: int) -> "DyadicSet":
        return DyadicSet(self.dim, level, self.ancestors(level))

    def refine(self, depth: int) -> "DyadicSet":
        """All descendants at a finer depth (union of children)."""
        k = depth - self.depth
        if k < 0:
            raise ResolutionError("refine depth must not be coarser")
        sub = DyadicSet.full(self.dim, k).coords
        out = (self.coords[:, None, :] << k) + sub[None, :, :]
        return DyadicSet(self.dim, depth, out.reshape(-1, self.dim))

    def subset(self, mask: np.ndarray) -> "DyadicSet":
        return DyadicSet(self.dim, self.depth, self.coords[np.asarray(mask, dtype=bool)])

    def contains(self, coords: np.ndarray) -> np.ndarray:
        return rows_isin(np.atleast_2d(coords), self.coords)

    def _check(self, other: "DyadicSet"):
        if self.dim != other.dim or self.depth != other.depth:
            raise ParameterError("sets must share dim and depth")

    def union(self, other: "DyadicSet") -> "DyadicSet":
        self._check(other)
        return DyadicSet(self.dim, self.depth, np.concatenate([self.coords, other.coords]))

    def intersection(self, other: "DyadicSet") -> "DyadicSet":
        self._check(other)
        return self.subset(rows_isin(self.coords, other.coords))

    def difference(self, other: "DyadicSet") -> "DyadicSet":
        self._check(other)
        return self.subset(~rows_isin(self.coords, other.coords))

    def issubset(self, other: "DyadicSet") -> bool:
        self._check(other)
        return bool(np.all(rows_isin(self.coords, other.coords)))

    # -- io ---------------------------------------------------------------
    def to_text(self) -> str:
        lines = [f"DYSET1 d={self.dim} depth={self.depth} count={len(self)}"]
        lines.extend(" ".join(str(int(v)) for v in row) for row in self.coords)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DyadicSet":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("DYSET1"):
            raise DomainError("missing DYSET1 header")
        head = dict(tok.split("=") for tok in lines[0].split()[1:])
        d, depth, count = int(head["d"]), int(head["depth"]), int(head["count"])
        if len(lines) - 1 != count:
            raise DomainError(f"header says {count} cells, found {len(lines) - 1}")
        arr = np.array([[int(v) for v in ln.split()] for ln in lines[1:]],
                       dtype=np.int64).reshape(-1, d)
        return cls(d, depth, arr)

    def raster(self) -> np.ndarray:
        """Boolean image for d=2; row 0 is the top (largest y)."""
        if self.dim != 2:
            raise ParameterError("raster export is only defined for d=2")
        n = 2 ** self.depth
        img = np.zeros((n, n), dtype=bool)
        img[n - 1 - self.coords[:, 1], self.coords[:, 0]] = True
        return img

    def to_pgm(self) -> bytes:
        img = self.raster().astype(np.uint8) * 255
        n = img.shape[0]
        return f"P5\n{n} {n}\n255\n".encode() + img.tobytes()


def write_dyset(s: DyadicSet, path) -> None:
    Path(path).write_text(s.to_text())


def read_dyset(path) -> DyadicSet:
    return DyadicSet.from_text(Path(path).read_text())


# ---------------------------------------------------------------------------
# covering numbers and content

def covering_number(s: DyadicSet, level: int) -> int:
    """Number of level-``level`` dyadic cubes containing a cell of the set."""
    if level < 0:
        raise ParameterError("level must be >= 0")
    if level > s.depth:
        raise ResolutionError(f"scale 2^-{level} is finer than depth {s.depth}")
    return int(len(s.ancestors(level)))


@dataclass
class TreeLevel:
    level: int
    coords: np.ndarray      # unique node coordinates at this level
    parent: np.ndarray      # index into the next coarser level (empty at the top)
    value: np.ndarray = None  # content DP value per node


def content_tree(coords: np.ndarray, depth: int, s: float, stop_level: int = 0) -> list:
    """Bottom-up content DP over the dyadic tree of an integer cell array.

    Returns levels ordered from ``stop_level`` (index 0) to ``depth``.  Each
    node value is ``min(side**s, sum of children)``.  Coordinates may be
    negative; ancestors use arithmetic shifts.
    """
    if not s > 0:
        raise ParameterError(f"content exponent must be positive, got {s}")
    coords = unique_rows(np.asarray(coords, dtype=np.int64))
    levels = []
    cur = coords
    val = np.full(len(cur), 2.0 ** (-depth * s))
    lev = depth
    levels.append(TreeLevel(lev, cur, np.zeros(0, dtype=np.int64), val))
    while lev > stop_level:
        par, inv = unique_rows(cur >> 1, return_inverse=True)
        sums = np.bincount(inv, weights=levels[-1].value, minlength=len(par))
        own = 2.0 ** (-(lev - 1) * s)
        levels[-1].parent = inv
        lev -= 1
        levels.append(TreeLevel(lev, par, np.zeros(0, dtype=np.int64), np.minimum(own, sums)))
        cur = par
    levels.reverse()
    return levels


def dyadic_content(s: DyadicSet, exponent: float, stop_level: int = 0) -> float:
    """Minimal sum of side^exponent over coverings by dyadic cubes."""
    if not exponent > 0:
        raise ParameterError(f"content exponent must be positive, got {exponent}")
    if len(s) == 0:
        return 0.0
    tree = content_tree(s.coords, s.depth, exponent, stop_level)
    return float(tree[0].value.sum())


def content_of_cells(coords: np.ndarray, depth: int, exponent: float, stop_level: int = 0) -> float:
    """Dyadic content of arbitrary integer cells (negative coordinates allowed)."""
    if not exponent > 0:
        raise ParameterError(f"content exponent must be positive, got {exponent}")
    coords = np.asarray(coords, dtype=np.int64)
    if coords.shape[0] == 0:
        return 0.0
    return float(content_tree(coords, depth, exponent, stop_level)[0].value.sum())


def optimal_cover(coords: np.ndarray, depth: int, exponent: float, stop_level: int = 0,
                  rtol: float = 1e-12) -> list:
    """Cubes of an optimal dyadic cover as ``(level, coords)`` pairs.

    Ties between a node and its children resolve to the node (coarser cube).
    """
    coords = np.asarray(coords, dtype=np.int64)
    if coords.shape[0] == 0:
        return []
    tree = content_tree(coords, depth, exponent, stop_level)
    out = []
    # active[i] is True when node i of the current level is not yet covered
    active = np.ones(len(tree[0].coords), dtype=bool)
    for li, node in enumerate(tree):
        own = 2.0 ** (-node.level * exponent)
        if li + 1 < len(tree):
            take = active & (own <= node.value * (1 + rtol))
        else:
            take = active
        for c in node.coords[take]:
            out.append((node.level, tuple(int(v) for v in c)))
        if li + 1 < len(tree):
            child = tree[li + 1]
            active = (active & ~take)[child.parent]
    return out


# ---------------------------------------------------------------------------
# box dimension

@dataclass
class BoxFit:
    slope: float
    intercept: float
    residual: float
    npoints: int


def box_dimension_fit(counts: Sequence, dim: int | None = None) -> BoxFit:
    """Least-squares slope of log N against log(1/scale)."""
    pts = [(float(a), float(b)) for a, b in counts]
    scales = {p[0] for p in pts}
    if len(scales) < 2:
        raise ParameterError("box_dimension_fit needs at least two distinct scales")
    if any(a <= 0 or b <= 0 for a, b in pts):
        raise ParameterError("scales and counts must be positive")
    x = np.log([1.0 / a for a, _ in pts])
    y = np.log([b for _, b in pts])
    (slope, intercept), res, *_ = np.polyfit(x, y, 1, full=True)
    resid = float(np.sqrt(res[0] / len(x))) if len(res) else 0.0
    if dim is not None and not (-1e-9 <= slope <= dim + 1e-9):
        raise ParameterError(f"fitted slope {slope:.4f} outside [0, {dim}]")
    return BoxFit(float(slope), float(intercept), resid, len(x))


def box_counts(s: DyadicSet, levels: Iterable[int]) -> list:
    return [(2.0 ** -j, covering_number(s, j)) for j in levels]


# ---------------------------------------------------------------------------
# one-third trick

@dataclass(frozen=True)
class ShiftedGrid:
    dim: int
    e: tuple

    def __post_init__(self):
        if len(self.e) != self.dim or any(v not in (0, 1) for v in self.e):
            raise ParameterError("grid label e must be a 0/1 vector of length dim")
        object.__setattr__(self, "e", tuple(int(v) for v in self.e))

    @property
    def shift(self) -> np.ndarray:
        return np.asarray(self.e, dtype=float) / 3.0

    def cube_index(self, points: np.ndarray, level: int) -> np.ndarray:
        """Integer index of the level cube containing each point."""
        side = 2.0 ** (-level)
        return np.floor((np.asarray(points, dtype=float) - self.shift) / side).astype(np.int64)

    def cube_lower(self, coords: np.ndarray, level: int) -> np.ndarray:
        return self.shift + np.asarray(coords, dtype=float) * 2.0 ** (-level)


def all_grids(n: int) -> list:
    return [ShiftedGrid(n, tuple((b >> (n - 1 - i)) & 1 for i in range(n)))
            for b in range(2 ** n)]


@dataclass(frozen=True)
class CoveringCube:
    grid: ShiftedGrid
    level: int
    coords: tuple

    @property
    def side(self) -> float:
        return 2.0 ** (-self.level)

    @property
    def lower(self) -> np.ndarray:
        return self.grid.cube_lower(self.coords, self.level)


def _ball_in_cube(x: np.ndarray, r: float, grid: ShiftedGrid, level: int):
    side = 2.0 ** (-level)
    idx = np.floor((x - r - grid.shift) / side)
    a = grid.shift + idx * side
    if np.all(a <= x - r) and np.all(x + r <= a + side):
        return tuple(int(v) for v in idx)
    return None


def find_covering_cube(x, r: float, c: float = math.inf):
    """Smallest cube of some shifted grid containing the open ball B(x, r).

    Returns a :class:`CoveringCube` or ``None`` when no cube with side at most
    ``c * r`` exists.  Ties on the side length are broken by ``e`` in
    lexicographic order.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = x.shape[0]
    if n not in (1, 2):
        raise ParameterError("find_covering_cube supports n = 1 or 2")
    if not r > 0:
        raise ParameterError("radius must be positive")
    if r >= 1.0 / 3.0:
        raise DomainError("radius must be below 1/3")
    grids = all_grids(n)
    level = math.floor(math.log2(1.0 / (2.0 * r)))
    # any side above 12 r works for r < 1/6; the loop bound guards r in [1/6, 1/3)
    while True:
        side = 2.0 ** (-level)
        if side > c * r or side > 64.0:
            return None
        if side >= 2 * r:
            for g in grids:
                idx = _ball_in_cube(x, r, g, level)
                if idx is not None:
                    return CoveringCube(g, level, idx)
        level -= 1


@dataclass
class Calibration:
    n: int
    trials: int
    c_star: float
    worst_x: tuple
    worst_r: float
    uncovered: int
    ratios: np.ndarray = field(repr=False)


def calibrate_grid_constant(n: int, trials: int, seed: int = 0, samples=None,
                            r_max: float = 1.0 / 6.0) -> Calibration:
    """Largest needed ratio side/r over sampled balls.

    Centres are uniform in ``[0,1)^n`` and radii uniform in ``(0, r_max)``.
    Explicit ``samples`` (pairs ``(x, r)``) replace the random draw.
    """
    if n not in (1, 2):
        raise ParameterError("n must be 1 or 2")
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    if samples is None:
        rng = np.random.default_rng(seed)
        xs = rng.random((trials, n))
        rs = rng.random(trials) * r_max
        rs = np.where(rs > 0, rs, r_max / 2)
        samples = list(zip(xs, rs))
    ratios = np.empty(len(samples))
    uncovered = 0
    for i, (x, r) in enumerate(samples):
        cube = find_covering_cube(x, float(r))
        if cube is None:
            uncovered += 1
            ratios[i] = np.inf
        else:
            ratios[i] = cube.side / float(r)
    finite = np.where(np.isfinite(ratios), ratios, -np.inf)
    w = int(np.argmax(finite))
    x_w = tuple(float(v) for v in np.atleast_1d(samples[w][0]))
    return Calibration(n, len(samples), float(finite[w]), x_w, float(samples[w][1]),
                       uncovered, ratios)
