"""Visible parts, tube families and the heavy/light/bad/good decomposition."""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, cKDTree

from .dyadic import DyadicCube, DyadicSet, box_dimension_fit, dyadic_content, row_keys, unique_rows
from .errors import ParameterError, ResolutionError
from .geometry import Direction, sample_direction
from .measures import (DiscreteMeasure, frostman_with_lower_bound, maximal_function,
                       natural_measure, project, restrict)
from .rng import job_rng
from .spectral import nyquist_cutoff, sobolev_norm, transform

ALPHA = 1.0 - math.sqrt(6.0) / 3.0


# ---------------------------------------------------------------------------
# parameters

@dataclass(frozen=True)
class Params:
    s: float
    d: int
    epsilon: float
    mode: str
    alpha: float
    kappa: float
    tau: float
    sigma: float
    delta: float | None = None
    Delta: float | None = None

    @property
    def level(self) -> int:
        return int(round(-math.log2(self.delta)))

    @property
    def big_level(self) -> int:
        return int(round(-math.log2(self.Delta)))

    @property
    def excess(self) -> float:
        """s - d + 1, the tube exponent of an s-regular set."""
        return self.s - self.d + 1

    @property
    def content_exponent(self) -> float:
        return (self.s if self.mode == "regular" else self.d) - self.tau

    def at(self, delta: float) -> "Params":
        j = _dyadic_level(delta)
        m = _big_level(self.kappa, j)
        return Params(self.s, self.d, self.epsilon, self.mode, self.alpha, self.kappa,
                      self.tau, self.sigma, 2.0 ** -j, 2.0 ** -m)

    # thresholds, all at the working scale delta
    def heavy_threshold(self, gamma: float) -> float:
        return self.delta ** (-2 * self.epsilon) * gamma ** (-self.excess)

    def light_threshold(self) -> float:
        if self.mode == "regular":
            return self.delta ** (-self.excess + self.tau + self.epsilon)
        return self.delta ** (-1 + self.tau + self.epsilon)

    def heavy_in_q_threshold(self) -> float:
        k, e = self.kappa, self.epsilon
        return self.delta ** ((k - 1) * self.excess - k * self.tau - 4 * e)

    def substantial_threshold(self) -> float:
        k, e = self.kappa, self.epsilon
        if self.mode == "regular":
            return self.delta ** ((k - 1) * self.excess + self.tau + 4 * e)
        return self.delta ** (self.tau + k - 1 + 2 * e)

    def good_bound_terms(self) -> tuple:
        a, k, e, x = self.alpha, self.kappa, self.epsilon, self.excess
        if self.mode == "regular":
            return (self.delta ** ((a - 1) * x - 3 * e), self.delta ** ((k - 1 - k * a) * x - 4 * e))
        return (self.delta ** (self.tau - 1 + 2 * e), self.delta ** (k - 1))

    def to_dict(self) -> dict:
        return {"s": self.s, "d": self.d, "epsilon": self.epsilon, "mode": self.mode,
                "alpha": self.alpha, "kappa": self.kappa, "tau": self.tau, "sigma": self.sigma,
                "delta": self.delta, "Delta": self.Delta}


def _dyadic_level(delta: float) -> int:
    j = -math.log2(delta)
    if not (delta > 0 and abs(j - round(j)) < 1e-12 and round(j) >= 1):
        raise ParameterError(f"delta must be 2^-j with j >= 1, got {delta}")
    return int(round(j))


def _big_level(kappa: float, j: int) -> int:
    # delta^kappa < Delta <= 2 delta^kappa with Delta = 2^-m
    return max(0, math.ceil(kappa * j - 1e-12) - 1)


def solve_parameters(s: float, d: int, epsilon: float, mode: str = "regular",
                     delta: float | None = None, strict: bool = True) -> Params:
    """Exponent bundle at the optimum alpha = 1 - sqrt(6)/3.

    ``strict`` enforces d-1 < s (regular mode) and tau > 0.  With
    ``strict=False`` violations only warn, so experiments may run outside
    the range where the estimates are meaningful.
    """
    if d not in (2, 3):
        raise ParameterError("d must be 2 or 3")
    if not 0 < s <= d + 1e-12:
        raise ParameterError(f"s must lie in (0, {d}]")
    if epsilon < 0:
        raise ParameterError("epsilon must be nonnegative")
    if mode == "regular":
        if not s > d - 1:
            msg = f"regular mode needs d-1 < s <= d, got s={s}"
            if strict:
                raise ParameterError(msg)
            warnings.warn(msg)
        alpha = ALPHA
        kappa = alpha / (1 - alpha)
        if 2 * kappa + 3 * alpha > 1 + 1e-12:
            raise ParameterError("2 kappa + 3 alpha exceeds 1")
        tau = alpha * (s - d + 1) - 5 * epsilon
        sigma = (s - d + 1 - epsilon) / 2.0
    elif mode == "general":
        alpha = ALPHA
        kappa = 1.0 / 6.0
        tau = 1.0 / 6.0 - 5 * epsilon
        sigma = (1 - tau - epsilon) / 2.0
    else:
        raise ParameterError(f"unknown mode {mode!r}")
    if not tau > 0:
        msg = f"epsilon={epsilon} too large: tau={tau:.6g} <= 0"
        if strict:
            raise ParameterError(msg)
        warnings.warn(msg)
    p = Params(float(s), int(d), float(epsilon), mode, alpha, kappa, tau, sigma)
    if delta is not None:
        p = p.at(delta)
        if p.delta ** epsilon > 0.5:
            warnings.warn(f"delta^epsilon = {p.delta ** epsilon:.3f} > 1/2; delta is not small for this epsilon")
    return p


# ---------------------------------------------------------------------------
# tubes

@dataclass(frozen=True, eq=False)
class Tube:
    """pi_theta^-1 of the dyadic cube 2^-level * (base + [0,1)^n) in frame coordinates."""

    direction: Direction
    level: int
    base: tuple

    @property
    def width(self) -> float:
        return 2.0 ** (-self.level)


def tube_family(direction: Direction, gamma: float) -> list:
    """Tubes of width gamma whose base cube overlaps the shadow of [0,1]^d in positive measure."""
    L = _dyadic_level(gamma) if gamma < 1 else 0
    if gamma > 1 or (gamma < 1 and 2.0 ** -L != gamma):
        raise ParameterError("gamma must be dyadic and <= 1")
    d = direction.dim
    F = direction.frame
    corners = np.array(np.meshgrid(*([[0.0, 1.0]] * d), indexing="ij")).reshape(d, -1).T
    pc = corners @ F.T
    lo, hi = pc.min(axis=0), pc.max(axis=0)
    klo = np.floor(lo / gamma).astype(int)
    khi = np.ceil(hi / gamma).astype(int) - 1
    ranges = [np.arange(a, b + 1) for a, b in zip(klo, khi)]
    ks = np.array(np.meshgrid(*ranges, indexing="ij")).reshape(len(ranges), -1).T
    tol = 1e-12
    keep = np.ones(len(ks), dtype=bool)
    for a in range(F.shape[0]):
        keep &= (ks[:, a] * gamma < hi[a] - tol) & ((ks[:, a] + 1) * gamma > lo[a] + tol)
    if F.shape[0] == 2:
        hull = pc[ConvexHull(pc).vertices]
        sq = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=float)
        for i in range(len(hull)):
            e = hull[(i + 1) % len(hull)] - hull[i]
            nrm = np.array([e[1], -e[0]])
            proj_h = hull @ nrm
            a, b = proj_h.min(), proj_h.max()
            proj_s = ((ks[:, None, :] + sq[None]) * gamma) @ nrm
            keep &= (proj_s.max(axis=1) > a + tol) & (proj_s.min(axis=1) < b - tol)
    return [Tube(direction, L, tuple(int(v) for v in k)) for k in ks[keep]]


def _incidence(P: np.ndarray, w: np.ndarray, delta: float) -> tuple:
    """(cell index, delta-tube index) pairs: per frame axis k delta - w < p < (k+1) delta + w."""
    lo = np.floor((P - w) / delta).astype(np.int64)
    hi = np.ceil((P + w) / delta).astype(np.int64) - 1
    span = hi - lo + 1
    tot = np.prod(span, axis=1)
    cell = np.repeat(np.arange(P.shape[0]), tot)
    r = np.arange(int(tot.sum())) - np.repeat(np.cumsum(tot) - tot, tot)
    if P.shape[1] == 1:
        k = lo[cell] + r[:, None]
    else:
        s1 = span[cell, 1]
        k = lo[cell] + np.stack([r // s1, r % s1], axis=1)
    return cell, k


def _count_by(keys: np.ndarray) -> tuple:
    u, first, cnt = np.unique(keys, return_index=True, return_counts=True)
    return u, first, cnt


def _join(a: np.ndarray, b: np.ndarray) -> tuple:
    """All index pairs (i, j) with a[i] == b[j]."""
    order = np.argsort(b, kind="stable")
    bs = b[order]
    lo = np.searchsorted(bs, a, "left")
    hi = np.searchsorted(bs, a, "right")
    n = hi - lo
    ia = np.repeat(np.arange(len(a)), n)
    jb = order[np.repeat(lo, n) + (np.arange(int(n.sum())) - np.repeat(np.cumsum(n) - n, n))]
    return ia, jb


# ---------------------------------------------------------------------------
# visible parts

def _pdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] == 1:
        return np.abs(a[..., 0] - b[..., 0])
    return np.sqrt(np.sum((a - b) ** 2, axis=-1))


def _vis_geometry(s: DyadicSet, direction: Direction) -> tuple:
    c = s.centers()
    P = c @ direction.frame.T
    h = c @ direction.unit
    delta = s.cell_size
    rise = delta * float(np.abs(direction.unit).sum()) - 1e-9 * delta
    return P, h, 0.5 * delta, rise


def _sparse_table_max(v: np.ndarray) -> list:
    table = [v]
    k = 1
    while 2 * k <= len(v):
        prev = table[-1]
        table.append(np.maximum(prev[:-k], prev[k:]))
        k *= 2
    return table


def visible_mask(s: DyadicSet, direction: Direction) -> np.ndarray:
    """Cell Q is hidden iff some Q' lies entirely higher along theta (height gap at least
    the cell extent delta |theta|_1) with |pi(Q') - pi(Q)| <= delta/2."""
    if direction.dim != s.dim:
        raise ParameterError("direction and set dimensions differ")
    N = len(s)
    if N == 0:
        return np.zeros(0, dtype=bool)
    P, h, half, rise = _vis_geometry(s, direction)
    hidden = np.zeros(N, dtype=bool)
    if P.shape[1] == 1:
        order = np.argsort(P[:, 0], kind="stable")
        ps, hs = P[order, 0], h[order]
        lo = np.searchsorted(ps, ps - half, "left")
        hi = np.searchsorted(ps, ps + half, "right")
        idx = np.arange(N)
        # align the window with the exact |p' - p| <= half test
        while True:
            m = (lo > 0) & (np.abs(ps[np.maximum(lo - 1, 0)] - ps) <= half)
            m2 = (lo < idx) & (np.abs(ps[np.minimum(lo, N - 1)] - ps) > half)
            if not (m.any() or m2.any()):
                break
            lo = lo - m + m2
        while True:
            m = (hi < N) & (np.abs(ps[np.minimum(hi, N - 1)] - ps) <= half)
            m2 = (hi > idx + 1) & (np.abs(ps[hi - 1] - ps) > half)
            if not (m.any() or m2.any()):
                break
            hi = hi + m - m2
        table = _sparse_table_max(hs)
        length = hi - lo
        k = np.floor(np.log2(length)).astype(int)
        best = np.empty(N)
        for kk in np.unique(k):
            sel = k == kk
            t = table[kk]
            best[sel] = np.maximum(t[lo[sel]], t[hi[sel] - (1 << kk)])
        hidden[order] = best - hs >= rise
    else:
        tree = cKDTree(P)
        pairs = tree.query_pairs(half * (1 + 1e-9) + 1e-15, output_type="ndarray")
        if len(pairs):
            a, b = pairs[:, 0], pairs[:, 1]
            ok = _pdist(P[a], P[b]) <= half
            a, b = a[ok], b[ok]
            hidden[a[h[b] - h[a] >= rise]] = True
            hidden[b[h[a] - h[b] >= rise]] = True
    return ~hidden


def visible_cells(s: DyadicSet, direction: Direction) -> DyadicSet:
    """Discrete visible part of the set seen along +theta."""
    return s.subset(visible_mask(s, direction))


def visible_cells_bruteforce(s: DyadicSet, direction: Direction, chunk: int = 1024) -> DyadicSet:
    """O(N^2) pairwise occlusion test with the same expressions as visible_mask."""
    N = len(s)
    if N == 0:
        return s
    P, h, half, rise = _vis_geometry(s, direction)
    hidden = np.zeros(N, dtype=bool)
    for a in range(0, N, chunk):
        near = _pdist(P[a:a + chunk, None, :], P[None, :, :]) <= half
        above = (h[None, :] - h[a:a + chunk, None]) >= rise
        hidden[a:a + chunk] = np.any(near & above, axis=1)
    return s.subset(~hidden)


# ---------------------------------------------------------------------------
# decomposition state

class _Analysis:
    """Cell/tube incidences at scale delta for one direction."""

    def __init__(self, s: DyadicSet, direction: Direction, params: Params):
        if params.delta is None:
            raise ParameterError("params need a scale delta (use solve_parameters(..., delta=...))")
        if params.d != s.dim or direction.dim != s.dim:
            raise ParameterError("dimension mismatch between set, direction and params")
        j, m = params.level, params.big_level
        if j > s.depth:
            raise ResolutionError(f"delta = 2^-{j} is finer than the set depth {s.depth}")
        self.params, self.direction = params, direction
        self.E = s.coarsen(j) if s.depth > j else s
        self.j, self.m = j, m
        self.delta = params.delta
        F = direction.frame
        self.F = F
        c = self.E.centers()
        self.P = c @ F.T
        self.h = c @ direction.unit
        self.w = 0.5 * self.delta * np.abs(F).sum(axis=1)
        self.cell, self.tube = _incidence(self.P, self.w, self.delta)
        self.Q = self.E.coords >> (j - m)                     # Delta-ancestor per cell
        # delta-tubes
        self.tkey_all = row_keys(self.tube)
        self.tubes, inv = unique_rows(self.tube, return_inverse=True)
        self.pair_tube = inv                                   # pair -> tube index
        self.nt = len(self.tubes)

    def counts_at_width(self, i: int) -> tuple:
        """Coarse tube coords and N(T n E, gamma) for gamma = delta 2^i."""
        K = self.tube >> i
        anc = self.E.coords[self.cell] >> i
        keys = row_keys(K, anc)
        _, first = np.unique(keys, return_index=True)
        tubes, inv = unique_rows(K[first], return_inverse=True)
        return tubes, np.bincount(inv, minlength=len(tubes))

    def tube_of(self, coarse: np.ndarray, i: int) -> np.ndarray:
        """Index of each delta-tube's width-i ancestor in ``coarse`` (or -1)."""
        K = self.tubes >> i
        keys = row_keys(np.concatenate([K, coarse]))
        a, b = keys[: len(K)], keys[len(K):]
        order = np.argsort(b)
        pos = np.searchsorted(b[order], a)
        pos = np.minimum(pos, len(b) - 1)
        hit = b[order][pos] == a if len(b) else np.zeros(len(a), bool)
        return np.where(hit, order[pos], -1)


def _weights_on(E: DyadicSet, mu: DiscreteMeasure) -> np.ndarray:
    """Weights of ``mu`` aligned with the cells of E (zero off the support)."""
    keys = row_keys(np.concatenate([E.coords, mu.support.coords]))
    w = np.zeros(len(E))
    w[np.searchsorted(keys[:len(E)], keys[len(E):])] = mu.weights
    return w


def _general_measure(E: DyadicSet, params: Params):
    t = params.d - params.tau
    if not 0 < t <= params.d:
        raise ParameterError(f"general mode needs tau > 0, got tau={params.tau}")
    rep = frostman_with_lower_bound(E, t)
    w = _weights_on(E, rep.measure)
    light = w <= params.delta ** (params.d + params.epsilon) * (1 + 1e-12)
    return rep, w, light


def _box_heights(lower: np.ndarray, upper: np.ndarray, theta: np.ndarray) -> tuple:
    lo = np.minimum(lower * theta, upper * theta).sum(axis=-1)
    hi = np.maximum(lower * theta, upper * theta).sum(axis=-1)
    return lo, hi


@dataclass
class DecompositionReport:
    params: Params
    direction: Direction
    parts: dict                                   # name -> DyadicSet at level delta
    contents: dict
    tube_stats: dict
    lemma_check: dict
    d_families: dict
    sobolev: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    visible: DyadicSet | None = None

    def partition_ok(self, s: DyadicSet) -> bool:
        E = s.coarsen(self.params.level) if s.depth > self.params.level else s
        parts = list(self.parts.values())
        tot = sum(len(p) for p in parts)
        u = parts[0]
        for p in parts[1:]:
            u = u.union(p)
        return tot == len(E) and u == E

    def to_json(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "direction": [float(v) for v in self.direction.unit],
            "sizes": {k: len(v) for k, v in self.parts.items()},
            "contents": self.contents,
            "tube_stats": self.tube_stats,
            "lemma_check": self.lemma_check,
            "d_families": self.d_families,
            "sobolev": self.sobolev,
            "flags": self.flags,
        }

    def overlay_pgm(self) -> bytes:
        """Part-coloured raster (d = 2): H 255, L 190, B 125, G 60, empty 0."""
        E = self.parts["E_H"]
        if E.dim != 2:
            raise ParameterError("overlays need d = 2")
        n = 2 ** E.depth
        img = np.zeros((n, n), dtype=np.uint8)
        for name, val in (("E_G", 60), ("E_B", 125), ("E_L", 190), ("E_H", 255)):
            c = self.parts[name].coords
            img[n - 1 - c[:, 1], c[:, 0]] = val
        return f"P5\n{n} {n}\n255\n".encode() + img.tobytes()


class _Decomposer:
    def __init__(self, s: DyadicSet, direction: Direction, params: Params):
        self.A = A = _Analysis(s, direction, params)
        self.params = params
        N = len(A.E)
        p = params
        self.flags = []
        if p.mode == "regular":
            self._regular()
        else:
            self._general()
        self.N = N

    # -- shared pieces
    def _tq_counts(self, pair_mask=None):
        """Distinct (delta-tube, Delta-cube) incidences with cell counts."""
        A = self.A
        sel = np.arange(len(A.cell)) if pair_mask is None else np.nonzero(pair_mask)[0]
        t = A.pair_tube[sel]
        q = A.Q[A.cell[sel]]
        keys = row_keys(t, q)
        _, first, cnt = _count_by(keys)
        return t[first], q[first], cnt

    def _centre_hits(self, cells_mask, halo: int):
        """Keys of (tube index, Delta cube) such that some cell with centre in the tube
        lies in the halo neighbourhood of the cube."""
        A = self.A
        ct = np.floor(A.P / A.delta).astype(np.int64)
        ct, q = ct[cells_mask], A.Q[cells_mask]
        both = unique_rows(np.concatenate([ct, q], axis=1))
        n = A.tubes.shape[1]
        ct, q = both[:, :n], both[:, n:]
        offs = np.array(np.meshgrid(*([np.arange(-halo, halo + 1)] * q.shape[1]),
                                    indexing="ij")).reshape(q.shape[1], -1).T
        ct = np.repeat(ct, len(offs), axis=0)
        q = (q[:, None, :] + offs[None]).reshape(-1, q.shape[1])
        return ct, q

    def _bad(self, t_idx, q, subst, halo, cells_mask):
        A = self.A
        ct, cq = self._centre_hits(cells_mask, halo)
        cand_t, cand_q = A.tubes[t_idx[subst]], q[subst]
        n = cand_t.shape[0]
        if n == 0:
            return np.zeros(0, dtype=np.int64), np.zeros((0, A.Q.shape[1]), dtype=np.int64)
        keys = row_keys(np.concatenate([cand_t, ct]), np.concatenate([cand_q, cq]))
        hit = np.isin(keys[:n], keys[n:])
        return t_idx[subst][~hit], q[subst][~hit]

    def _qt_families(self, active_tubes, t_idx, q, subst, three: bool):
        """Q_T and the D^<, D^=, D^> split for each active delta-tube."""
        A, p = self.A, self.params
        Delta = p.Delta
        theta = A.direction.unit
        cubes = unique_rows(A.Q)
        lo_box = cubes * Delta
        hi_box = (cubes + 1) * Delta
        if three:
            lo_box = np.maximum(0.0, lo_box - Delta)
            hi_box = np.minimum(1.0, hi_box + Delta)
        inf_h, sup_h = _box_heights(lo_box, hi_box, theta)
        cube_idx = {tuple(c): i for i, c in enumerate(cubes.tolist())}
        # Q_T per tube
        st, sq = t_idx[subst], q[subst]
        qi = np.array([cube_idx[tuple(c)] for c in sq.tolist()], dtype=np.int64)
        best = np.full(A.nt, -1, dtype=np.int64)
        if len(st):
            # order: by tube, then descending inf height, then lexicographic coords
            order = np.lexsort(tuple(cubes[qi].T[::-1]) + (-inf_h[qi], st))
            st_o, qi_o = st[order], qi[order]
            first = np.r_[True, st_o[1:] != st_o[:-1]]
            best[st_o[first]] = qi_o[first]
        tubes = np.nonzero(active_tubes & (best >= 0))[0]
        out = {"tubes": int(len(tubes)), "missing_QT": int(np.sum(active_tubes & (best < 0))),
               "max_equal": 0, "max_lower": 0, "max_upper": 0, "partition_ok": True}
        if len(tubes) == 0:
            return out, best
        pc = (cubes + 0.5) * Delta @ A.F.T
        wD = 0.5 * Delta * np.abs(A.F).sum(axis=1)
        base = A.tubes[tubes] * A.delta
        near = np.ones((len(tubes), len(cubes)), dtype=bool)
        for a in range(A.F.shape[0]):
            near &= (pc[None, :, a] >= base[:, None, a] - wD[a]) & \
                    (pc[None, :, a] <= base[:, None, a] + A.delta + wD[a])
        qt = best[tubes]
        ref = inf_h[qt][:, None]
        lower = near & (sup_h[None, :] < ref)
        upper = near & (inf_h[None, :] > ref)
        equal = near & (sup_h[None, :] >= ref) & (ref >= inf_h[None, :])
        total = lower.sum(1) + upper.sum(1) + equal.sum(1)
        out.update(max_equal=int(equal.sum(1).max()), max_lower=int(lower.sum(1).max()),
                   max_upper=int(upper.sum(1).max()),
                   partition_ok=bool(np.all(total == near.sum(1)) and near[np.arange(len(tubes)), qt].all()))
        return out, best

    # -- regular mode
    def _regular(self):
        A, p = self.A, self.params
        N = len(A.E)
        widths = list(range(0, A.j - A.m + 1))
        heavy_anc = np.zeros(A.nt, dtype=bool)
        EHp = np.zeros(N, dtype=bool)
        heavy_counts = {}
        for i in widths:
            gamma = A.delta * 2 ** i
            tubes, cnt = A.counts_at_width(i)
            heavy = cnt >= p.heavy_threshold(gamma) * (1 - 1e-12)
            heavy_counts[f"{gamma!r}"] = int(heavy.sum())
            if heavy.any():
                idx = A.tube_of(tubes[heavy], i)
                hit = idx >= 0
                heavy_anc |= hit
                EHp[A.cell[hit[A.pair_tube]]] = True
        Nd = np.bincount(A.pair_tube, minlength=A.nt)
        light = Nd <= p.light_threshold() * (1 + 1e-12)
        t_idx, q, cnt = self._tq_counts()
        hq = cnt >= p.heavy_in_q_threshold() * (1 - 1e-12)
        subst = cnt >= p.substantial_threshold() * (1 - 1e-12)
        # Q_H: cells of 3Q incident to a tube heavy inside Q
        QH = np.zeros(N, dtype=bool)
        self.qh_pairs = (t_idx[hq], q[hq])
        if hq.any():
            ia, jb = _join(A.pair_tube, t_idx[hq])
            near = np.all(np.abs(A.Q[A.cell[ia]] - q[hq][jb]) <= 1, axis=1)
            QH[A.cell[ia[near]]] = True
            self.qh_cells = (A.cell[ia[near]], q[hq][jb[near]])
        else:
            self.qh_cells = (np.zeros(0, np.int64), np.zeros((0, A.Q.shape[1]), np.int64))
        bt, bq = self._bad(t_idx, q, subst, 1, np.ones(N, dtype=bool))
        bad_tubes = np.zeros(A.nt, dtype=bool)
        bad_tubes[bt] = True
        LB = np.zeros(N, dtype=bool)
        LB[A.cell[bad_tubes[A.pair_tube]]] = True
        light_cell = np.zeros(N, dtype=bool)
        light_cell[A.cell[light[A.pair_tube]]] = True
        EH = EHp | QH
        EL = light_cell & ~EH
        EB = LB & ~EH & ~EL
        EG = ~(EH | EL | EB)
        self.masks = {"E_H": EH, "E_L": EL, "E_B": EB, "E_G": EG}
        self.EHp, self.QH = EHp, QH
        has_subst = np.zeros(A.nt, dtype=bool)
        has_subst[t_idx[subst]] = True
        active = ~light & ~heavy_anc
        self.lemma = {"checked": int(active.sum()), "violations": int(np.sum(active & ~has_subst))}
        self.stats = {"delta_tubes": int(A.nt), "heavy_by_width": heavy_counts,
                      "heavy_ancestor": int(heavy_anc.sum()), "light": int(light.sum()),
                      "heavy_in_Q_pairs": int(hq.sum()), "substantial_pairs": int(subst.sum()),
                      "substantial_tubes": int(has_subst.sum()), "bad_pairs": int(len(bt)),
                      "bad_tubes": int(bad_tubes.sum()),
                      "light_heavy_exclusive": bool(p.light_threshold() < p.heavy_threshold(p.delta))}
        self.families, self.QT = self._qt_families(active, t_idx, q, subst, three=True)
        self.bad = (bt, bq)
        self.light_tubes = light
        self.active = active

    # -- general mode
    def _general(self):
        A, p = self.A, self.params
        N = len(A.E)
        rep, weights, light_cell = _general_measure(A.E, p)
        self.mu = rep.measure
        nonlight_pair = ~light_cell[A.cell]
        Nd = np.bincount(A.pair_tube[nonlight_pair], minlength=A.nt)
        light = Nd <= p.light_threshold() * (1 + 1e-12)
        t_idx, q, cnt = self._tq_counts(nonlight_pair)
        subst = cnt >= p.substantial_threshold() * (1 - 1e-12)
        bt, bq = self._bad(t_idx, q, subst, 0, np.ones(N, dtype=bool))
        bad_tubes = np.zeros(A.nt, dtype=bool)
        bad_tubes[bt] = True
        LB = np.zeros(N, dtype=bool)
        LB[A.cell[bad_tubes[A.pair_tube]]] = True
        in_light_tube = np.zeros(N, dtype=bool)
        in_light_tube[A.cell[light[A.pair_tube]]] = True
        EL = light_cell | (~light_cell & in_light_tube)
        EH = np.zeros(N, dtype=bool)
        EB = LB & ~EL
        EG = ~(EL | EB)
        self.masks = {"E_H": EH, "E_L": EL, "E_B": EB, "E_G": EG}
        has_subst = np.zeros(A.nt, dtype=bool)
        has_subst[t_idx[subst]] = True
        active = ~light
        self.lemma = {"checked": int(active.sum()), "violations": int(np.sum(active & ~has_subst))}
        self.stats = {"delta_tubes": int(A.nt), "light": int(light.sum()),
                      "light_cells": int(light_cell.sum()), "substantial_pairs": int(subst.sum()),
                      "substantial_tubes": int(has_subst.sum()), "bad_pairs": int(len(bt)),
                      "bad_tubes": int(bad_tubes.sum()),
                      "frostman_lower_constant": rep.lower_constant}
        self.families, self.QT = self._qt_families(active, t_idx, q, subst, three=False)
        self.bad = (bt, bq)
        self.light_tubes = light
        self.active = active


def decompose(s: DyadicSet, direction: Direction, params: Params, mode: str | None = None,
              with_visible: bool = True, with_sobolev: bool = False) -> DecompositionReport:
    """Four-way cell partition E_H, E_L, E_B, E_G at scale params.delta (precedence H > L > B > G)."""
    if mode is not None and mode != params.mode:
        raise ParameterError(f"params were solved in {params.mode!r} mode, not {mode!r}")
    D = _Decomposer(s, direction, params)
    A = D.A
    parts = {k: A.E.subset(v) for k, v in D.masks.items()}
    ex = params.content_exponent
    contents = {k: dyadic_content(v, ex) for k, v in parts.items()}
    vis = None
    if with_visible:
        vmask = visible_mask(A.E, direction)
        vis = A.E.subset(vmask)
        contents["vis"] = dyadic_content(vis, ex)
        contents["E_G_vis"] = dyadic_content(A.E.subset(vmask & D.masks["E_G"]), ex)
    sob = {}
    if with_sobolev:
        mu = natural_measure(A.E, params.s) if params.mode == "regular" else D.mu
        pr = project(mu, direction)
        sob["mu_theta"] = sobolev_norm(transform(pr, nyquist_cutoff(pr)), params.sigma)
    flags = []
    if not D.stats.get("light_heavy_exclusive", True):
        flags.append("light and heavy thresholds overlap at this delta")
    if params.delta ** params.epsilon > 0.5:
        flags.append("delta^epsilon > 1/2")
    return DecompositionReport(params, direction, parts, contents, D.stats, D.lemma, D.families,
                               sob, flags, vis)


# ---------------------------------------------------------------------------
# single-tube queries

def tube_count(tube: Tube, s: DyadicSet, params: Params, Q=None, nonlight_only: bool = False) -> int:
    """N(T n E, gamma) (or N(T n E n Q, delta) when Q is given) by band incidence."""
    A = _Analysis(s, tube.direction, params)
    i = A.j - tube.level
    if i < 0:
        raise ParameterError("tube is finer than delta")
    K = A.tube >> i
    hit = np.all(K == np.asarray(tube.base, dtype=np.int64), axis=1)
    cells = A.cell[hit]
    if Q is not None:
        qc = np.asarray(Q.coords if hasattr(Q, "coords") else Q, dtype=np.int64)
        cells = cells[np.all(A.Q[cells] == qc, axis=1)]
    if nonlight_only:
        _, _, light = _general_measure(A.E, params)
        cells = cells[~light[cells]]
    if i == 0:
        return int(len(np.unique(cells)))
    return int(len(unique_rows(A.E.coords[cells] >> i)))


def classify_tube(tube: Tube, s: DyadicSet, params: Params, kind: str, Q=None) -> bool:
    """Evaluate one of light, heavy, heavyInQ, substantial for a tube."""
    if kind in ("heavyInQ", "substantial") and Q is None:
        raise ParameterError(f"kind {kind!r} needs a cube Q")
    if kind == "heavy":
        i = params.level - tube.level
        if not 0 <= i <= params.level - params.big_level:
            raise ParameterError("heavy tubes have widths between delta and Delta")
        return tube_count(tube, s, params) >= params.heavy_threshold(tube.width) * (1 - 1e-12)
    if tube.level != params.level:
        raise ParameterError(f"kind {kind!r} needs a delta-tube")
    general = params.mode == "general"
    if kind == "light":
        return tube_count(tube, s, params, nonlight_only=general) <= params.light_threshold() * (1 + 1e-12)
    if kind == "heavyInQ":
        return tube_count(tube, s, params, Q) >= params.heavy_in_q_threshold() * (1 - 1e-12)
    if kind == "substantial":
        return tube_count(tube, s, params, Q, nonlight_only=general) >= \
            params.substantial_threshold() * (1 - 1e-12)
    raise ParameterError(f"unknown tube kind {kind!r}")


def bad_lines(s: DyadicSet, direction: Direction, params: Params, Q) -> list:
    """delta-tubes substantial for Q whose centre lines miss E n 3Q (E n Q in general mode)."""
    D = _Decomposer(s, direction, params)
    qc = np.asarray(Q.coords if hasattr(Q, "coords") else Q, dtype=np.int64)
    bt, bq = D.bad
    sel = np.all(bq == qc, axis=1)
    return [Tube(direction, params.level, tuple(int(v) for v in D.A.tubes[t])) for t in bt[sel]]


# ---------------------------------------------------------------------------
# good part and heavy parts

@dataclass
class GoodPartCheck:
    max_count: int
    bound_terms: tuple
    ratio: float
    counts: np.ndarray = field(repr=False)


def good_part_covering_check(report: DecompositionReport, s: DyadicSet, direction: Direction,
                             params: Params) -> GoodPartCheck:
    """max over delta-tubes of N(vis n E_G n T, delta) against the dominant bound term."""
    A = _Analysis(s, direction, params)
    vis = report.visible if report.visible is not None else visible_cells(A.E, direction)
    good = report.parts["E_G"].intersection(vis)
    mask = good.contains(A.E.coords)
    counts = np.bincount(A.pair_tube[mask[A.cell]], minlength=A.nt)
    terms = params.good_bound_terms()
    mx = int(counts.max()) if len(counts) else 0
    return GoodPartCheck(mx, terms, mx / max(terms), counts)


@dataclass
class HeavyParts:
    E_Hp: DyadicSet
    Q_H: DyadicSet
    E_Hp_tilde: DyadicSet
    Q_H_tilde: DyadicSet
    literal_E_Hp_tilde: int
    literal_Q_H_tilde: int
    slack: float
    slack_Q: float
    contained: bool
    contained_Q: bool
    contents: dict
    sobolev: float
    ratio: float


def maximal_heavy_parts(s: DyadicSet, direction: Direction, params: Params,
                        measure: DiscreteMeasure | None = None, max_radius: float = 8.0) -> HeavyParts:
    """Tube-count heavy parts against their maximal-function counterparts.

    The maximal-function thresholds are divided by explicit lattice slack
    factors: S for E_H' uses the measured lower regularity constant of the
    measure on gamma-cubes, S_Q only geometry.
    """
    if params.mode != "regular":
        raise ParameterError("maximal_heavy_parts needs regular mode")
    D = _Decomposer(s, direction, params)
    A = D.A
    d, n = params.d, params.d - 1
    mu = measure if measure is not None else natural_measure(A.E, params.s)
    if mu.depth != A.j:
        raise ParameterError("measure must live at the delta level")
    w = _weights_on(A.E, mu)
    # lower regularity of mu on gamma-cubes, gamma = delta .. Delta
    c_low = math.inf
    for i in range(0, A.j - A.m + 1):
        u, inv = unique_rows(A.E.coords >> i, return_inverse=True)
        mass = np.bincount(inv, weights=w, minlength=len(u))
        c_low = min(c_low, float(mass.min() / (A.delta * 2 ** i) ** params.s))
    geo = 2 * math.sqrt(n) * (2 + 2 * math.sqrt(d))
    S = geo ** n / c_low
    S_Q = (2 * (2 + math.sqrt(d)) * math.sqrt(n)) ** n
    proj = project(mu, direction)
    Mf = maximal_function(proj, query=A.P, max_radius=max_radius)
    thr = A.delta ** (-params.epsilon)
    tilde = Mf >= thr / S
    literal = int(np.sum(Mf >= thr))
    thr_q = A.delta ** (params.kappa * params.excess - params.kappa * params.tau - 3 * params.epsilon)
    QHt = np.zeros(len(A.E), dtype=bool)
    lit_q = 0
    contained_q = True
    qh_cells, qh_cubes = D.qh_cells
    for qc in unique_rows(A.Q):
        in3 = np.all(np.abs(A.Q - qc) <= 1, axis=1)
        muq = restrict(mu, DyadicCube(d, A.m, tuple(int(v) for v in qc)), halo=3)
        if muq.total_mass == 0:
            continue
        pq = project(muq, direction)
        Mq = maximal_function(pq, query=A.P[in3], max_radius=max_radius)
        ok = np.zeros(len(A.E), dtype=bool)
        ok[np.nonzero(in3)[0][Mq >= thr_q / S_Q]] = True
        lit_q += int(np.sum(Mq >= thr_q))
        QHt |= ok
        mine = qh_cells[np.all(qh_cubes == qc, axis=1)]
        contained_q &= bool(ok[mine].all())
    ex = params.content_exponent
    EHp = A.E.subset(D.EHp)
    QH = A.E.subset(D.QH)
    sob = sobolev_norm(transform(proj, nyquist_cutoff(proj)), params.sigma)
    c_low_exp = dyadic_content(EHp, n + 2 * params.epsilon)
    contents = {"E_Hp_lowdim": c_low_exp, "E_Hp": dyadic_content(EHp, ex), "Q_H": dyadic_content(QH, ex),
                "c_low": c_low}
    ratio = c_low_exp * A.delta ** (-params.epsilon) / sob if sob > 0 else math.nan
    return HeavyParts(EHp, QH, A.E.subset(tilde), A.E.subset(QHt), literal, lit_q, S, S_Q,
                      bool(np.all(tilde[D.EHp])), contained_q, contents, sob, ratio)


# ---------------------------------------------------------------------------
# direction-averaged experiment

@dataclass
class ExperimentRow:
    delta: float
    direction: int
    vis_content: float
    EH: float
    EL: float
    EB: float
    EG_vis: float
    vis_count: int


@dataclass
class ExperimentTable:
    rows: list
    averages: dict          # delta -> mean visible content
    box_fit: object = None

    def to_csv(self) -> str:
        out = ["delta,direction,visContent,EH,EL,EB,EGvis"]
        for r in self.rows:
            out.append(f"{r.delta!r},{r.direction},{r.vis_content!r},{r.EH!r},{r.EL!r},{r.EB!r},{r.EG_vis!r}")
        return "\n".join(out) + "\n"

    def strictly_decreasing(self) -> bool:
        keys = sorted(self.averages, reverse=True)            # coarse to fine
        vals = [self.averages[k] for k in keys]
        return all(b < a for a, b in zip(vals, vals[1:]))


def _experiment_job(s, base: Params, delta: float, seed: int, index: int) -> ExperimentRow:
    p = base.at(delta)
    theta = sample_direction(job_rng(seed, index), s.dim)
    rep = decompose(s, theta, p)
    c = rep.contents
    return ExperimentRow(delta, index, c["vis"], c["E_H"], c["E_L"], c["E_B"], c["E_G_vis"],
                         len(rep.visible))


def direction_average_experiment(s: DyadicSet, params: Params, directions: int, scales,
                                 seed: int = 0, jobs: int = 1) -> ExperimentTable:
    """Average visible-part content over sampled directions at each scale.

    Direction i uses the random stream of job index i, the same at every scale.
    """
    rows = []
    counts = []
    for delta in scales:
        _dyadic_level(delta)
        with ThreadPoolExecutor(max_workers=max(1, jobs)) as ex:
            res = list(ex.map(lambda i: _experiment_job(s, params, delta, seed, i), range(directions)))
        rows.extend(res)
        counts.append((delta, float(np.mean([r.vis_count for r in res]))))
    averages = {}
    for r in rows:
        averages.setdefault(r.delta, []).append(r.vis_content)
    averages = {k: float(np.mean(v)) for k, v in averages.items()}
    fit = box_dimension_fit(counts) if len(counts) >= 2 else None
    return ExperimentTable(rows, averages, fit)
