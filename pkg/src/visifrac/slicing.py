"""Slices F n V_{x,L}, heavy dyadic cubes, cover regularization and the heavy set F_M."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from .dyadic import (DyadicSet, ShiftedGrid, all_grids, content_of_cells, dyadic_content,
                     optimal_cover, row_keys, rows_isin, unique_rows)
from .errors import DomainError, ParameterError
from .geometry import check_frame
from .measures import (DiscreteMeasure, ProjectedMeasure, dyadic_maximal, maximal_function, project)
from .spectral import nyquist_cutoff, sobolev_norm, transform


@dataclass(frozen=True, eq=False)
class SliceSpec:
    """V = anchor + L^perp for L spanned by the frame rows."""

    frame: np.ndarray
    anchor: np.ndarray
    thickness: float

    def __post_init__(self):
        f = check_frame(self.frame)
        a = np.asarray(self.anchor, dtype=float).ravel()
        if f.shape[1] != a.shape[0]:
            raise DomainError("anchor and frame dimensions differ")
        if f.shape[0] >= f.shape[1]:
            raise DomainError("L must be a proper subspace")
        object.__setattr__(self, "frame", f)
        object.__setattr__(self, "anchor", a)


def _line_meets_boxes(anchor, direction, lo, hi) -> np.ndarray:
    """Slab test: does the line anchor + t*direction meet each closed box?"""
    tmin = np.full(lo.shape[0], -np.inf)
    tmax = np.full(lo.shape[0], np.inf)
    ok = np.ones(lo.shape[0], dtype=bool)
    for i in range(lo.shape[1]):
        v = direction[i]
        if abs(v) < 1e-15:
            ok &= (lo[:, i] <= anchor[i]) & (anchor[i] <= hi[:, i])
        else:
            t1 = (lo[:, i] - anchor[i]) / v
            t2 = (hi[:, i] - anchor[i]) / v
            tmin = np.maximum(tmin, np.minimum(t1, t2))
            tmax = np.minimum(tmax, np.maximum(t1, t2))
    return ok & (tmin <= tmax)


def slice_set(s: DyadicSet, spec: SliceSpec) -> DyadicSet:
    """Cells of the set whose closed cube meets the affine plane V_{x,L}."""
    if np.any(spec.anchor < 0) or np.any(spec.anchor >= 1):
        raise DomainError("anchor must lie in [0,1)^d")
    if len(s) == 0:
        return s
    f = spec.frame
    h = s.cell_size
    c = s.centers()
    n, d = f.shape
    if n == 1:
        u = f[0]
        keep = np.abs((c - spec.anchor) @ u) <= 0.5 * h * np.abs(u).sum()
    elif n == 2 and d == 3:
        v = np.cross(f[0], f[1])
        keep = _line_meets_boxes(spec.anchor, v, c - 0.5 * h, c + 0.5 * h)
    else:
        raise ParameterError("slices support n = 1 (any d) or n = 2 with d = 3")
    return s.subset(keep)


# ---------------------------------------------------------------------------
# slice spectrum

@dataclass
class SliceRow:
    scale: float
    threshold_exponent: float
    fraction_heavy: float
    count_p50: float
    count_max: int


def slice_counts(s: DyadicSet, frame: np.ndarray, level: int) -> tuple:
    """Covering counts N(F n V, 2^-level) for every position bin of width 2^-level.

    The slice of bin k is the plane through the bin centre (k + 1/2) 2^-level;
    a level cell counts when its closed cube meets it.  Returns (bin indices,
    counts) over bins whose slice is nonempty.
    """
    f = check_frame(frame)
    cells = s.ancestors(level)
    delta = 2.0 ** (-level)
    c = (cells + 0.5) * delta
    p = c @ f.T
    hw = 0.5 * delta * np.abs(f).sum(axis=1)
    lo = np.ceil((p - hw) / delta - 0.5).astype(np.int64)
    hi = np.floor((p + hw) / delta - 0.5).astype(np.int64)
    n = f.shape[0]
    if n == 1:
        base = lo.min()
        size = int(hi.max() - base + 2)
        diff = np.zeros(size, dtype=np.int64)
        np.add.at(diff, lo[:, 0] - base, 1)
        np.add.at(diff, hi[:, 0] - base + 1, -1)
        cnt = np.cumsum(diff)[:-1]
        idx = np.nonzero(cnt)[0]
        return (idx + base)[:, None], cnt[idx]
    # n = 2: the projected cube is a hexagon; keep candidate bins whose centre lies in it
    corners = np.array(np.meshgrid(*[[-0.5, 0.5]] * f.shape[1], indexing="ij")).reshape(f.shape[1], -1).T
    hull = ConvexHull(corners * delta @ f.T)
    span = int((hi - lo).max()) + 1
    ka, kb = np.meshgrid(np.arange(span), np.arange(span), indexing="ij")
    off = np.stack([ka.ravel(), kb.ravel()], axis=1)
    keys = []
    for start in range(0, len(cells), 65536):
        sl = slice(start, start + 65536)
        k = lo[sl, None, :] + off[None, :, :]
        ok = np.all(k <= hi[sl, None, :], axis=2)
        rel = (k + 0.5) * delta - p[sl, None, :]
        inside = np.all(rel @ hull.equations[:, :2].T + hull.equations[:, 2] <= 1e-12 * delta, axis=2)
        keys.append(k[ok & inside])
    u, cnt = np.unique(np.concatenate(keys), axis=0, return_counts=True)
    return u, cnt


def slice_spectrum(s: DyadicSet, frame: np.ndarray, exponent: float, beta: float,
                   levels=None) -> list:
    """Fraction of occupied position bins whose slice count exceeds delta^-(s-n)-beta."""
    if not beta > 0:
        raise ParameterError("beta must be positive")
    f = check_frame(frame)
    n = f.shape[0]
    levels = list(levels) if levels is not None else list(range(1, s.depth + 1))
    rows = []
    for j in levels:
        delta = 2.0 ** (-j)
        expo = (exponent - n) + beta
        if len(s) == 0:
            rows.append(SliceRow(delta, expo, 0.0, 0.0, 0))
            continue
        _, cnt = slice_counts(s, f, j)
        thr = delta ** (-expo)
        rows.append(SliceRow(delta, expo, float(np.mean(cnt > thr)),
                             float(np.median(cnt)), int(cnt.max())))
    return rows


def slice_spectrum_csv(rows: list) -> str:
    out = ["scale,thresholdExponent,fractionHeavy,sliceCountP50,sliceCountMax"]
    for r in rows:
        out.append(f"{r.scale!r},{r.threshold_exponent!r},{r.fraction_heavy!r},{r.count_p50!r},{r.count_max}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# heavy dyadic cubes

@dataclass
class HeavyFamily:
    grid: ShiftedGrid
    M: float
    threshold: float
    cubes: list                      # (level, coords) of maximal heavy cubes
    degenerate: bool = False

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        hit = np.zeros(pts.shape[0], dtype=bool)
        by_level = {}
        for lev, c in self.cubes:
            by_level.setdefault(lev, []).append(c)
        for lev, cs in by_level.items():
            idx = self.grid.cube_index(pts, lev)
            hit |= rows_isin(idx, np.array(cs, dtype=np.int64))
        return hit


def _cube_masses(proj: ProjectedMeasure, grid: ShiftedGrid, level: int):
    centers = proj.offset + (proj.bins + 0.5) * proj.bin_width
    idx = grid.cube_index(centers, level)
    u, inv = unique_rows(idx, return_inverse=True)
    return u, np.bincount(inv, weights=proj.weights, minlength=len(u))


def dyadic_heavy_cubes(proj: ProjectedMeasure, M: float, grid: ShiftedGrid,
                       constant: float = 3.0, top_level: int = -2) -> HeavyFamily:
    """Maximal cubes Q of the grid with nu(Q)/side^n >= constant^-n M.

    Levels run from side 2^-top_level down to the bin width.
    """
    if not M > 0:
        raise ParameterError("M must be positive")
    n = proj.n
    thr = constant ** (-n) * M
    degenerate = not M > 3 ** n * proj.total_mass
    if degenerate:
        warnings.warn("M does not exceed 3^n times the total mass")
    cubes = []
    heavy_prev = np.zeros((0, n), dtype=np.int64)   # all heavy cubes above, mapped down a level
    for level in range(top_level, proj.depth + 1):
        u, mass = _cube_masses(proj, grid, level)
        side = 2.0 ** (-level)
        q = mass / side ** n >= thr
        cand = u[q]
        covered = rows_isin(cand >> 1, heavy_prev) if level > top_level else np.zeros(len(cand), bool)
        for c in cand[~covered]:
            cubes.append((level, tuple(int(v) for v in c)))
        # a cube is shadowed if it or an ancestor is heavy
        shadow = np.concatenate([cand, u[rows_isin(u >> 1, heavy_prev)]]) if level > top_level else cand
        heavy_prev = unique_rows(shadow) if len(shadow) else shadow
    return HeavyFamily(grid, M, thr, cubes, degenerate)


# ---------------------------------------------------------------------------
# cover regularization

@dataclass
class Regularized:
    cubes: list
    ratio: float                  # sum over P of side^t / sum over cover of side^t
    degenerate: bool


def regularize_cover(cover: list, hprime: np.ndarray, depth: int, t: float | None = None,
                     universe_level: int = 0) -> Regularized:
    """Replace each cover cube by its smallest ancestor meeting the complement of H'.

    ``cover`` holds (level, coords) standard dyadic cubes, ``hprime`` the
    integer bin indices of H' at ``depth``.  Cubes not meeting H' are dropped
    first.  When no ancestor up to ``universe_level`` meets the complement the
    universe cube is used and the result is flagged degenerate.
    """
    hp = unique_rows(np.asarray(hprime, dtype=np.int64).reshape(len(hprime), -1)) \
        if len(hprime) else np.zeros((0, 1), dtype=np.int64)
    if not cover or hp.shape[0] == 0:
        return Regularized([], 0.0, False)
    n = hp.shape[1]
    # disjointness
    levels = sorted({lev for lev, _ in cover})
    for a in levels:
        ca = np.array([c for lev, c in cover if lev == a], dtype=np.int64)
        if len(unique_rows(ca)) != len(ca):
            raise ParameterError("cover cubes are not disjoint")
        for b in levels:
            if b > a:
                cb = np.array([c for lev, c in cover if lev == b], dtype=np.int64)
                if rows_isin(cb >> (b - a), ca).any():
                    raise ParameterError("cover cubes are not disjoint")
    counts = {}
    def hp_count(level):
        if level not in counts:
            u, inv = unique_rows(hp >> (depth - level), return_inverse=True)
            counts[level] = (u, np.bincount(inv, minlength=len(u)))
        return counts[level]
    chosen = []
    degenerate = False
    for lev, c in cover:
        c = np.array(c, dtype=np.int64)
        u, cnt = hp_count(lev)
        if not rows_isin(c[None], u)[0]:
            continue
        L, cc = lev, c
        while True:
            u, cnt = hp_count(L)
            k = cnt[np.nonzero(rows_isin(u, cc[None]))[0][0]]
            if k < 2 ** (n * (depth - L)):
                break
            if L <= universe_level:
                degenerate = True
                break
            L, cc = L - 1, cc >> 1
        chosen.append((L, tuple(int(v) for v in cc)))
    chosen = sorted(set(chosen))
    # keep maximal cubes
    P = []
    for lev, c in chosen:
        inside = False
        for lev2, c2 in chosen:
            if lev2 < lev and tuple(v >> (lev - lev2) for v in c) == c2:
                inside = True
                break
        if not inside:
            P.append((lev, c))
    ratio = math.nan
    if t is not None:
        num = sum(2.0 ** (-lev * t) for lev, _ in P)
        den = sum(2.0 ** (-lev * t) for lev, c in cover)
        ratio = num / den if den > 0 else math.nan
    return Regularized(P, ratio, degenerate)


# ---------------------------------------------------------------------------
# heavy set

def heavy_bins(proj: ProjectedMeasure, M: float, max_radius: float = 2.0) -> np.ndarray:
    """Bins of the projection where the maximal function is at least M."""
    mf = maximal_function(proj, max_radius=max_radius)
    return proj.bins[mf >= M]


def heavy_containment(proj: ProjectedMeasure, M: float, c_star: float) -> tuple:
    """Check H' within the union over e of H^e at threshold c*^-n M, bin by bin.

    Returns (all contained, number of H' bins, number of violations).
    """
    n = proj.n
    mf = maximal_function(proj)
    inH = mf >= M
    best = np.zeros(len(mf))
    for g in all_grids(n):
        best = np.maximum(best, dyadic_maximal(proj, g))
    ok = best >= c_star ** (-n) * M
    bad = int(np.sum(inH & ~ok))
    return bad == 0, int(inH.sum()), bad


@dataclass
class HeavyCover:
    M: float
    families: list                  # HeavyFamily per grid
    hprime: np.ndarray = field(repr=False)
    cover: list = field(default_factory=list)
    regularized: Regularized = None
    t: float = 0.0
    content_H: float = 0.0
    content_P: float = 0.0


def heavy_cover(proj: ProjectedMeasure, M: float, s: float, epsilon: float,
                constant: float = 3.0) -> HeavyCover:
    """Families B^e, the thresholded set H', an optimal cover Q of H' and its regularization P."""
    n = proj.n
    t = 2 * n - s + 2 * epsilon
    fams = [dyadic_heavy_cubes(proj, M, g, constant) for g in all_grids(n)]
    hp = heavy_bins(proj, M)
    cover = optimal_cover(hp, proj.depth, t) if len(hp) else []
    reg = regularize_cover(cover, hp, proj.depth, t)
    content_h = content_of_cells(hp, proj.depth, t) if len(hp) else 0.0
    content_p = sum(2.0 ** (-lev * t) for lev, _ in reg.cubes)
    return HeavyCover(M, fams, hp, cover, reg, t, content_h, content_p)


@dataclass
class HeavySetResult:
    F_M: DyadicSet
    content: float
    rhs: float
    ratio: float
    sobolev: float
    sigma: float
    flags: list


def heavy_set(s: DyadicSet, m: DiscreteMeasure, frame, M: float, epsilon: float,
              exponent: float, max_radius: float = 2.0, cutoff: int | None = None) -> HeavySetResult:
    """F_M = cells whose projected bin has maximal function >= M, with its content bound.

    Returns content(F_M, n + 2 eps), M^-1 ||nu_L||^2_{H^sigma} with
    sigma = (s - n - eps)/2, and their ratio.  Parameter violations are
    flagged and the computation still runs.
    """
    f = check_frame(frame)
    n = f.shape[0]
    flags = []
    if not (n < exponent <= min(2 * n, s.dim) + 1e-12):
        flags.append("s outside (n, min(2n, d)]")
    if not (0 < epsilon < (exponent - n) / 2):
        flags.append("epsilon outside (0, (s-n)/2)")
    if not M > 3 ** n * m.total_mass:
        flags.append("M <= 3^n total mass")
    proj = project(m, f)
    mf = maximal_function(proj, max_radius=max_radius)
    heavy = proj.bins[mf >= M]
    cell_bins = np.floor(m.support.centers() @ f.T / proj.bin_width).astype(np.int64)
    keep = rows_isin(cell_bins, heavy)
    FM = m.support.subset(keep)
    content = dyadic_content(FM, n + 2 * epsilon)
    sigma = (exponent - n - epsilon) / 2.0
    K = cutoff if cutoff is not None else nyquist_cutoff(proj)
    sob = sobolev_norm(transform(proj, K), sigma)
    rhs = sob / M
    return HeavySetResult(FM, content, rhs, content / rhs if rhs > 0 else math.nan, sob, sigma, flags)
