"""Slow, independent reference implementations used by the tests."""
from __future__ import annotations

import itertools
import math

import numpy as np

from visifrac.dyadic import DyadicSet
from visifrac.fractals import attractor_points


def _children(node, d):
    level, c = node
    return [(level + 1, tuple(2 * v + b for v, b in zip(c, bits)))
            for bits in itertools.product((0, 1), repeat=d)]


def all_cover_sums(coords, depth: int, s: float, d: int) -> list:
    """Sum of side^s for every covering of the cells by disjoint dyadic cubes.

    Enumerates each covering explicitly: a cube is either used whole or split
    into the covers of its occupied children.
    """
    cells = {tuple(int(v) for v in c) for c in np.asarray(coords).reshape(-1, d)}
    occupied = set()
    for c in cells:
        for lv in range(depth + 1):
            occupied.add((lv, tuple(v >> (depth - lv) for v in c)))

    def covers(node):
        own = [(2.0 ** -node[0]) ** s]
        if node[0] == depth:
            return own
        kids = [covers(ch) for ch in _children(node, d) if ch in occupied]
        return own + [sum(combo) for combo in itertools.product(*kids)]

    if not cells:
        return [0.0]
    return covers((0, (0,) * d))


def content_exhaustive(coords, depth: int, s: float, d: int) -> float:
    return min(all_cover_sums(coords, depth, s, d))


def content_recursive(coords, depth: int, s: float, d: int) -> float:
    """Pure-python recursion over the occupied tree (no enumeration)."""
    cells = {tuple(int(v) for v in c) for c in np.asarray(coords).reshape(-1, d)}
    if not cells:
        return 0.0
    occupied = set()
    for c in cells:
        for lv in range(depth + 1):
            occupied.add((lv, tuple(v >> (depth - lv) for v in c)))

    def best(node):
        own = (2.0 ** -node[0]) ** s
        if node[0] == depth:
            return own
        return min(own, sum(best(ch) for ch in _children(node, d) if ch in occupied))

    return best((0, (0,) * d))


def sampled_raster(spec, depth: int, budget: float = 3e5) -> DyadicSet:
    """Cells containing images of the fixed points under all words of one length."""
    L = 1
    while len(spec.maps) ** (L + 1) <= budget:
        L += 1
    pts = attractor_points(spec, L)
    return DyadicSet.from_points(np.clip(pts, 0.0, np.nextafter(1.0, 0.0)), depth)


def covering_cube_scan(x, r, c, levels=range(-2, 30)):
    """Smallest side over every grid e/3 + 2^-k Z^n cube containing the open ball."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = len(x)
    best = None
    for k in levels:
        side = 2.0 ** -k
        if side > c * r or side < 2 * r:
            continue
        for e in itertools.product((0, 1), repeat=n):
            sh = np.asarray(e) / 3.0
            a = sh + np.floor((x - r - sh) / side) * side
            if np.all(a <= x - r) and np.all(x + r <= a + side):
                if best is None or side < best[0]:
                    best = (side, e, a)
    return best


def ray_hidden(P, h, delta, unit):
    """Per-cell occlusion: another cell fully higher within half a cell across."""
    N = len(h)
    hidden = np.zeros(N, dtype=bool)
    rise = delta * float(np.abs(unit).sum())
    for i in range(N):
        for k in range(N):
            if k == i:
                continue
            if math.dist(P[i], P[k]) <= delta / 2 and h[k] - h[i] >= rise * (1 - 1e-9):
                hidden[i] = True
                break
    return hidden


def ball_maximal_1d(centres, weights, x, radii):
    """max_r nu([x-r, x+r]) / r by direct summation."""
    best = 0.0
    for r in radii:
        m = weights[np.abs(centres - x) <= r + 1e-15].sum()
        best = max(best, m / r)
    return best


def cube_corners(lo, side):
    d = len(lo)
    return np.array([np.asarray(lo) + side * np.array(b) for b in itertools.product((0, 1), repeat=d)])


def line_meets_cube(point, vec, lo, side) -> bool:
    """Feasibility of lo <= point + t vec <= lo + side via scipy's LP solver."""
    from scipy.optimize import linprog
    A = np.concatenate([vec[:, None], -vec[:, None]])
    b = np.concatenate([lo + side - point, point - lo])
    res = linprog([0.0], A_ub=A, b_ub=b, bounds=[(None, None)], method="highs")
    return res.status == 0


def slice_cells_brute(cells, depth, frame, anchor):
    """Cells whose closed cube meets anchor + L^perp, by corner signs or an LP."""
    side = 2.0 ** -depth
    frame = np.atleast_2d(frame)
    out = []
    for c in np.asarray(cells):
        lo = c * side
        if frame.shape[0] == 1:
            v = (cube_corners(lo, side) - anchor) @ frame[0]
            if v.min() <= 1e-12 and v.max() >= -1e-12:
                out.append(c)
        else:
            vec = np.cross(frame[0], frame[1])
            if line_meets_cube(np.asarray(anchor, float), vec, lo, side):
                out.append(c)
    return np.array(out, dtype=np.int64).reshape(-1, len(anchor))


def slice_counts_brute(cells, depth, frame, level):
    """{bin: count} with the slice of bin k through (k + 1/2) delta in frame coordinates."""
    delta = 2.0 ** -level
    anc = np.unique(np.asarray(cells) >> (depth - level), axis=0)
    frame = np.atleast_2d(frame)
    counts = {}
    for c in anc:
        pr = cube_corners(c * delta, delta) @ frame.T
        lo = np.ceil(pr.min(axis=0) / delta - 0.5 - 1e-9).astype(int)
        hi = np.floor(pr.max(axis=0) / delta - 0.5 + 1e-9).astype(int)
        for k in itertools.product(*[range(a, b + 1) for a, b in zip(lo, hi)]):
            p = (np.asarray(k) + 0.5) * delta
            if frame.shape[0] == 1:
                hit = True
            else:
                # a point of the plane: p along the frame; the line runs along the normal
                point = frame.T @ p
                hit = line_meets_cube(point, np.cross(frame[0], frame[1]), c * delta, delta)
            if hit:
                counts[k] = counts.get(k, 0) + 1
    return counts


def heavy_cubes_scan(centres, weights, shift, M, constant, levels):
    """Maximal grid cubes with mass / side^n >= constant^-n M, by scanning every level."""
    centres = np.atleast_2d(centres)
    n = centres.shape[1]
    thr = constant ** (-n) * M
    heavy = set()
    for lv in levels:
        side = 2.0 ** -lv
        idx = np.floor((centres - shift) / side).astype(int)
        for key in {tuple(r) for r in idx}:
            mass = weights[np.all(idx == key, axis=1)].sum()
            if mass / side ** n >= thr:
                heavy.add((lv, key))
    maximal = set()
    for lv, key in heavy:
        up = [(lv - k, tuple(v >> k for v in key)) for k in range(1, lv - levels[0] + 1)]
        if not any(u in heavy for u in up):
            maximal.add((lv, key))
    return maximal
