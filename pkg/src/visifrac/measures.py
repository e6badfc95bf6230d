"""Discrete measures on dyadic sets: Frostman constructions, projections,
maximal functions and Riesz energies."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import roots_legendre

from .dyadic import (DyadicCube, DyadicSet, ShiftedGrid, content_tree, unique_rows)
from .errors import DomainError, ParameterError, ResolutionError
from .geometry import Direction, as_frame


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """One atom per occupied cell.  Cells with zero weight are dropped."""

    support: DyadicSet
    weights: np.ndarray = field(repr=False)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        if w.shape[0] != len(self.support):
            raise ParameterError("one weight per support cell is required")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ParameterError("weights must be finite and nonnegative")
        if np.any(w == 0):
            keep = w > 0
            object.__setattr__(self, "support", self.support.subset(keep))
            w = w[keep]
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    @property
    def dim(self) -> int:
        return self.support.dim

    @property
    def depth(self) -> int:
        return self.support.depth

    def scaled(self, factor: float) -> "DiscreteMeasure":
        return DiscreteMeasure(self.support, self.weights * factor, dict(self.meta))

    def to_text(self) -> str:
        s = self.support
        lines = [f"DMEAS1 d={s.dim} depth={s.depth} count={len(s)} mass={self.total_mass!r}"]
        for row, w in zip(s.coords, self.weights):
            lines.append(" ".join(str(int(v)) for v in row) + f" {float(w)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DiscreteMeasure":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("DMEAS1"):
            raise DomainError("missing DMEAS1 header")
        head = dict(tok.split("=") for tok in lines[0].split()[1:])
        d, depth = int(head["d"]), int(head["depth"])
        rows = [ln.split() for ln in lines[1:]]
        coords = np.array([[int(v) for v in r[:d]] for r in rows], dtype=np.int64).reshape(-1, d)
        w = np.array([float(r[d]) for r in rows])
        order = np.lexsort(coords.T[::-1]) if len(rows) else np.zeros(0, dtype=int)
        return cls(DyadicSet(d, depth, coords), w[order])


def write_measure(m: DiscreteMeasure, path) -> None:
    Path(path).write_text(m.to_text())


def read_measure(path) -> DiscreteMeasure:
    return DiscreteMeasure.from_text(Path(path).read_text())


def natural_measure(s: DyadicSet, exponent: float, normalize: bool = False) -> DiscreteMeasure:
    """Weight 2^(-depth * exponent) on every cell."""
    if len(s) == 0:
        raise DomainError("natural measure of an empty set")
    w = np.full(len(s), 2.0 ** (-s.depth * exponent))
    meta = {"kind": "natural", "s": exponent, "normalized": normalize}
    if normalize:
        meta["scale"] = 1.0 / w.sum()
        w = w / w.sum()
    return DiscreteMeasure(s, w, meta)


def _check_t(t: float, d: int):
    if not 0 < t <= d:
        raise ParameterError(f"Frostman exponent must lie in (0, {d}], got {t}")


def _frostman_from_tree(s: DyadicSet, t: float):
    tree = content_tree(s.coords, s.depth, t, 0)
    mass = tree[0].value.copy()
    masses = [mass]
    for li in range(1, len(tree)):
        child = tree[li]
        cont = child.value
        sums = np.bincount(child.parent, weights=cont, minlength=len(tree[li - 1].coords))
        share = cont / sums[child.parent]
        mass = masses[-1][child.parent] * share
        masses.append(mass)
    return tree, masses


def frostman_dyadic(s: DyadicSet, t: float) -> DiscreteMeasure:
    """Top-down split of the root content in proportion to child contents.

    Every dyadic cube Q receives at most min(content(Q), side(Q)^t) and the
    total mass equals the dyadic t-content of the set.
    """
    _check_t(t, s.dim)
    if len(s) == 0:
        return DiscreteMeasure(s, np.zeros(0), {"kind": "frostman", "t": t})
    tree, masses = _frostman_from_tree(s, t)
    return DiscreteMeasure(s, masses[-1], {"kind": "frostman", "t": t, "c_upper": 1.0})


@dataclass
class FrostmanReport:
    measure: DiscreteMeasure
    lower_constant: float
    upper_constant: float
    worst_node: tuple


def frostman_with_lower_bound(s: DyadicSet, t: float) -> FrostmanReport:
    """Frostman measure plus the achieved lower constant

    c = min over tree nodes Q of nu(Q) / min(content(Q n K, t), side(Q)^d),
    and the upper constant max nu(Q) / side(Q)^t.
    """
    _check_t(t, s.dim)
    if len(s) == 0:
        return FrostmanReport(DiscreteMeasure(s, np.zeros(0)), 1.0, 0.0, ())
    tree, masses = _frostman_from_tree(s, t)
    lower, upper, worst = math.inf, 0.0, ()
    for node, m in zip(tree, masses):
        side = 2.0 ** (-node.level)
        ref = np.minimum(node.value, side ** s.dim)
        ratio = m / ref
        i = int(np.argmin(ratio))
        if ratio[i] < lower:
            lower, worst = float(ratio[i]), (node.level, tuple(int(v) for v in node.coords[i]))
        upper = max(upper, float((m / side ** t).max()))
    meas = DiscreteMeasure(s, masses[-1], {"kind": "frostman", "t": t, "c_lower": lower})
    return FrostmanReport(meas, lower, upper, worst)


def restrict(m: DiscreteMeasure, cube: DyadicCube, halo: int = 1) -> DiscreteMeasure:
    """Restriction to the cube (halo 1) or to 3Q clipped to the unit cube (halo 3)."""
    if halo not in (1, 3):
        raise ParameterError("halo must be 1 or 3")
    if cube.level > m.depth:
        raise ResolutionError("cube is finer than the measure resolution")
    anc = m.support.coords >> (m.depth - cube.level)
    diff = np.abs(anc - np.asarray(cube.coords, dtype=np.int64))
    keep = np.all(diff <= (halo // 2), axis=1)
    return DiscreteMeasure(m.support.subset(keep), m.weights[keep], dict(m.meta, restricted=True))


# ---------------------------------------------------------------------------
# projections

@dataclass(frozen=True, eq=False)
class ProjectedMeasure:
    """Push-forward onto a subspace spanned by orthonormal frame rows.

    Bins are the standard dyadic grid of width ``bin_width`` in frame
    coordinates (anchored at ``offset``).  The exact projected atoms are kept
    for Fourier sums.
    """

    frame: np.ndarray
    bin_width: float
    bins: np.ndarray = field(repr=False)         # (k, n) integer bin indices, sorted
    weights: np.ndarray = field(repr=False)      # (k,)
    atoms: np.ndarray = field(repr=False)        # (m, n) exact projected cell centres
    atom_weights: np.ndarray = field(repr=False)
    offset: np.ndarray = None

    def __post_init__(self):
        if self.offset is None:
            object.__setattr__(self, "offset", np.zeros(self.frame.shape[0]))

    @property
    def n(self) -> int:
        return self.frame.shape[0]

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    @property
    def depth(self) -> int:
        return int(round(-math.log2(self.bin_width)))

    def bin_centers(self) -> np.ndarray:
        return self.offset + (self.bins + 0.5) * self.bin_width

    def to_csv(self) -> str:
        n = self.n
        head = ",".join([f"bin{i}" for i in range(n)] + [f"center{i}" for i in range(n)] + ["weight"])
        rows = [head]
        for b, c, w in zip(self.bins, self.bin_centers(), self.weights):
            rows.append(",".join([str(int(v)) for v in b] + [repr(float(v)) for v in c] + [repr(float(w))]))
        return "\n".join(rows) + "\n"


def project_points(points: np.ndarray, weights: np.ndarray, frame: np.ndarray,
                   bin_width: float) -> ProjectedMeasure:
    frame = np.atleast_2d(np.asarray(frame, dtype=float))
    pos = np.asarray(points, dtype=float) @ frame.T
    idx = np.floor(pos / bin_width).astype(np.int64)
    if idx.shape[0]:
        bins, inv = unique_rows(idx, return_inverse=True)
        bw = np.bincount(inv, weights=weights, minlength=len(bins))
    else:
        bins, bw = idx, np.zeros(0)
    return ProjectedMeasure(frame, bin_width, bins, bw, pos, np.asarray(weights, dtype=float))


def project(m: DiscreteMeasure, direction) -> ProjectedMeasure:
    """Deposit each cell weight in the bin containing its projected centre."""
    frame = as_frame(direction)
    if frame.shape[1] != m.dim:
        raise DomainError("frame dimension does not match the measure")
    return project_points(m.support.centers(), m.weights, frame, m.support.cell_size)


def project_raw(positions: np.ndarray, weights: np.ndarray, bin_width: float) -> ProjectedMeasure:
    """Projected measure from explicit positions in R^n (identity frame)."""
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    if pos.shape[0] == 1 and pos.shape[1] != 1 and np.asarray(positions).ndim == 1:
        pos = pos.T
    n = pos.shape[1]
    return project_points(pos, np.asarray(weights, dtype=float), np.eye(n), bin_width)


# ---------------------------------------------------------------------------
# maximal functions

class _BinGrid:
    """Dense raster of bin masses with per-row prefix sums."""

    def __init__(self, proj: ProjectedMeasure, pad: int):
        self.n = proj.n
        self.lo = proj.bins.min(axis=0) - pad
        shape = tuple(proj.bins.max(axis=0) - self.lo + 1 + pad)
        grid = np.zeros(shape)
        np.add.at(grid, tuple((proj.bins - self.lo).T), proj.weights)
        self.shape = shape
        # prefix along the last axis, with a leading zero column
        self.pref = np.concatenate([np.zeros(shape[:-1] + (1,)), np.cumsum(grid, axis=-1)], axis=-1)

    def ball_sum(self, q: np.ndarray, R: int) -> np.ndarray:
        """Mass of bins with integer offset |o| <= R around query bins q."""
        q = q - self.lo
        last = self.shape[-1]
        if self.n == 1:
            a = np.clip(q[:, 0] - R, 0, last)
            b = np.clip(q[:, 0] + R + 1, 0, last)
            return self.pref[b] - self.pref[a]
        out = np.zeros(q.shape[0])
        for dy in range(-R, R + 1):
            w = math.isqrt(R * R - dy * dy)
            row = q[:, 0] + dy
            ok = (row >= 0) & (row < self.shape[0])
            a = np.clip(q[ok, 1] - w, 0, last)
            b = np.clip(q[ok, 1] + w + 1, 0, last)
            out[ok] += self.pref[row[ok], b] - self.pref[row[ok], a]
        return out


def _query_bins(proj: ProjectedMeasure, query) -> np.ndarray:
    if query is None:
        return proj.bins
    q = np.asarray(query, dtype=float)
    if q.ndim == 1:
        q = q[:, None] if proj.n == 1 else q[None, :]
    return np.floor((q - proj.offset) / proj.bin_width).astype(np.int64)


def maximal_function(proj: ProjectedMeasure, query=None, max_radius: float = 2.0) -> np.ndarray:
    """sup over r in {binWidth 2^j <= max_radius} of nu(B(x, r)) / r^n.

    Atoms sit at bin centres and balls are closed.  Queries are bin centres:
    by default the occupied bins, otherwise the bins containing the given
    points.  Points farther than ``max_radius`` from all mass get 0.
    """
    n = proj.n
    if n not in (1, 2):
        raise ParameterError("maximal function supports n = 1 or 2")
    q = _query_bins(proj, query)
    out = np.zeros(q.shape[0])
    if proj.bins.shape[0] == 0 or q.shape[0] == 0:
        return out
    jmax = int(math.floor(math.log2(max_radius / proj.bin_width) + 1e-12))
    grid = _BinGrid(proj, pad=0)
    for j in range(0, jmax + 1):
        R = 2 ** j
        r = proj.bin_width * R
        out = np.maximum(out, grid.ball_sum(q, R) / r ** n)
    return out


def dyadic_maximal(proj: ProjectedMeasure, grid: ShiftedGrid, query=None,
                   top_level: int = -2) -> np.ndarray:
    """max over cubes Q of the grid containing x of nu(Q) / side(Q)^n.

    Levels run from side 2^-top_level down to the bin width; atoms sit at bin
    centres.
    """
    n = proj.n
    if grid.dim != n:
        raise ParameterError("grid dimension must match the projection")
    q = _query_bins(proj, query)
    out = np.zeros(q.shape[0])
    if proj.bins.shape[0] == 0:
        return out
    centers = proj.offset + (proj.bins + 0.5) * proj.bin_width
    qc = proj.offset + (q + 0.5) * proj.bin_width
    for level in range(top_level, proj.depth + 1):
        side = 2.0 ** (-level)
        ci = grid.cube_index(centers, level)
        qi = grid.cube_index(qc, level)
        allidx = np.concatenate([ci, qi])
        u, inv = unique_rows(allidx, return_inverse=True)
        mass = np.bincount(inv[: len(ci)], weights=proj.weights, minlength=len(u))
        out = np.maximum(out, mass[inv[len(ci):]] / side ** n)
    return out


# ---------------------------------------------------------------------------
# Riesz energy

def _unit_cube_self_energy(d: int, s: float, nodes: int = 48) -> float:
    """int int over [0,1]^d x [0,1]^d of |x - y|^-s.

    The difference density prod(1 - |z_i|) is split into 2^d orthants and d
    sectors by the largest coordinate; z = z1 (1, u) turns the radial part
    into exact monomial integrals and leaves a smooth integral over u.
    """
    if d == 1:
        return 2.0 / ((1.0 - s) * (2.0 - s))
    x, w = roots_legendre(nodes)
    u1 = 0.5 * (x + 1.0)
    w1 = 0.5 * w
    grids = np.meshgrid(*([u1] * (d - 1)), indexing="ij")
    U = np.stack([g.ravel() for g in grids], axis=1)
    W = np.prod(np.meshgrid(*([w1] * (d - 1)), indexing="ij"), axis=0).ravel()
    total = 0.0
    for u, wt in zip(U, W):
        # polynomial in z1: (1 - z1) prod (1 - z1 u_i)
        poly = np.array([1.0, -1.0])
        for ui in u:
            poly = np.convolve(poly, [1.0, -ui])
        k = np.arange(poly.shape[0])
        radial = np.sum(poly / (d - s + k))
        total += wt * radial * (1.0 + u @ u) ** (-s / 2.0)
    return float(2 ** d * d * total)


def riesz_energy_atoms(points: np.ndarray, weights: np.ndarray, s: float,
                       chunk: int = 2048) -> float:
    """Sum over distinct atom pairs of w_i w_j |x_i - x_j|^-s."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    w = np.asarray(weights, dtype=float)
    total = 0.0
    for a in range(0, len(w), chunk):
        pa, wa = pts[a:a + chunk], w[a:a + chunk]
        for b in range(a, len(w), chunk):
            pb, wb = pts[b:b + chunk], w[b:b + chunk]
            dist = cdist(pa, pb)
            if a == b:
                np.fill_diagonal(dist, np.inf)
                total += float(wa @ (dist ** -s) @ wb)
            else:
                total += 2.0 * float(wa @ (dist ** -s) @ wb)
    return total


def riesz_energy(m: DiscreteMeasure, s: float, self_energy: bool = True) -> float:
    """I_s of the measure treated as uniform density on each cell.

    Cross terms use cell centres; each cell adds w^2 kappa_s h^-s with kappa_s
    the s-energy of the uniform unit-cube pair.
    """
    d = m.dim
    if not 0 < s < d:
        raise ParameterError(f"Riesz exponent must lie in (0, {d}) for cell densities, got {s}")
    if len(m.support) == 0:
        return 0.0
    total = riesz_energy_atoms(m.support.centers(), m.weights, s)
    if self_energy:
        h = m.support.cell_size
        total += float(np.sum(m.weights ** 2)) * _unit_cube_self_energy(d, s) * h ** (-s)
    return total
