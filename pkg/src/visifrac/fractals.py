"""Self-similar attractors on dyadic grids and Ahlfors-regularity diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .dyadic import DEPTH_CAP, DyadicSet, unique_rows
from .errors import DomainError, ParameterError, ResolutionError


@dataclass(frozen=True)
class SimilarityMap:
    """x -> ratio * R x + translation, with R a rotation (planar angle in d=2)."""

    ratio: float
    translation: tuple
    angle: float = 0.0

    def linear(self, d: int) -> np.ndarray:
        if d == 2 and self.angle:
            c, s = math.cos(self.angle), math.sin(self.angle)
            rot = np.array([[c, -s], [s, c]])
            rot[np.abs(rot) < 1e-15] = 0.0
            return self.ratio * rot
        return self.ratio * np.eye(d)


@dataclass(frozen=True)
class IFSSpec:
    dim: int
    maps: tuple
    name: str = "ifs"

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ParameterError("IFS dimension must be 1, 2 or 3")
        if len(self.maps) < 1:
            raise ParameterError("an IFS needs at least one map")
        for m in self.maps:
            if not 0 < m.ratio < 1:
                raise ParameterError(f"ratio {m.ratio} not in (0,1)")
            if len(m.translation) != self.dim:
                raise ParameterError("translation length must equal dim")
            if m.angle and self.dim != 2:
                raise ParameterError("rotation angles are only supported for d=2")
        object.__setattr__(self, "maps", tuple(self.maps))

    def linear_parts(self) -> np.ndarray:
        return np.stack([m.linear(self.dim) for m in self.maps])

    def translations(self) -> np.ndarray:
        return np.array([m.translation for m in self.maps], dtype=float)

    def axis_aligned(self) -> bool:
        """True when every linear part is a scaled signed permutation."""
        for A in self.linear_parts():
            nz = np.abs(A) > 1e-14
            if not (np.all(nz.sum(axis=0) == 1) and np.all(nz.sum(axis=1) == 1)):
                return False
        return True


def similarity_dimension(spec: IFSSpec, tol: float = 1e-12) -> float:
    """Root of sum r_i^s = 1 by bisection."""
    r = np.array([m.ratio for m in spec.maps])
    if len(r) == 1:
        return 0.0
    lo, hi = 0.0, 1.0
    while np.sum(r ** hi) > 1.0:
        hi *= 2.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if np.sum(r ** mid) > 1.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def hull_box(spec: IFSSpec, iterations: int = 200) -> np.ndarray:
    """Axis box containing the attractor, shape (2, d): lower and upper corners.

    Starts from the unit cube when every map sends it into itself (then the
    iteration stays exact for axis-aligned maps), otherwise from a ball bound.
    """
    d = spec.dim
    A = spec.linear_parts()
    t = spec.translations()

    def image(box):
        corners = np.array(np.meshgrid(*box.T, indexing="ij")).reshape(d, -1).T
        pts = np.einsum("mij,kj->mki", A, corners) + t[:, None, :]
        return np.stack([pts.min(axis=(0, 1)), pts.max(axis=(0, 1))])

    box = np.stack([np.zeros(d), np.ones(d)])
    img = image(box)
    if not (np.all(img[0] >= -1e-12) and np.all(img[1] <= 1 + 1e-12)):
        rmax = max(m.ratio for m in spec.maps)
        R = np.abs(t).sum(axis=1).max() / (1 - rmax) + 1.0
        box = np.stack([-R * np.ones(d), R * np.ones(d)])
    for _ in range(iterations):
        new = image(box)
        if np.allclose(new, box, atol=0, rtol=0):
            break
        box = new
    return box


def _words(A: np.ndarray, t: np.ndarray, length: int):
    """All compositions f_w1 o ... o f_wL as (linear, translation) arrays."""
    d = A.shape[1]
    LA = np.eye(d)[None]
    Lt = np.zeros((1, d))
    for _ in range(length):
        # left-compose: f_i o g
        LA = np.einsum("mij,kjl->mkil", A, LA).reshape(-1, d, d)
        Lt = (np.einsum("mij,kj->mki", A, Lt) + t[:, None, :]).reshape(-1, d)
    return LA, Lt


def _box_images(A: np.ndarray, t: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Images of boxes [lo, hi] under maps with signed-permutation linear parts."""
    c = 0.5 * (lo + hi)
    h = 0.5 * (hi - lo)
    nc = np.einsum("mij,kj->mki", A, c) + t[:, None, :]
    nh = np.einsum("mij,kj->mki", np.abs(A), h)
    d = lo.shape[1]
    return (nc - nh).reshape(-1, d), (nc + nh).reshape(-1, d)


def _mark_boxes(lo: np.ndarray, hi: np.ndarray, depth: int) -> np.ndarray:
    """Cells (half-open) met by closed boxes of side below one cell."""
    n = 2 ** depth
    a = np.floor(lo * n).astype(np.int64)
    b = np.floor(hi * n).astype(np.int64)
    d = lo.shape[1]
    out = []
    for bits in range(2 ** d):
        off = np.array([(bits >> i) & 1 for i in range(d)])
        idx = a + off
        ok = np.all(idx <= b, axis=1) & np.all((idx >= 0) & (idx < n), axis=1)
        out.append(idx[ok])
    return np.concatenate(out)


def rasterize_ifs(spec: IFSSpec, depth: int, chunk: int = 200_000) -> DyadicSet:
    """Cells of the given depth that meet the attractor.

    Pieces are images of the hull box under compositions of maps.  A piece
    strictly inside one cell marks that cell and stops; other pieces are
    refined until their diameter drops below the cell size, then mark every
    cell their closed box meets.  Maps with non-axis rotations are rasterized
    from attractor points (fixed-point images) at four extra levels.
    """
    d = spec.dim
    if depth < 0 or depth > DEPTH_CAP[d]:
        raise ResolutionError(f"depth {depth} outside [0, {DEPTH_CAP[d]}] for d={d}")
    box = hull_box(spec)
    if np.any(box[0] < -1e-9) or np.any(box[1] > 1 + 1e-9):
        raise DomainError("attractor escapes the unit cube")
    if not spec.axis_aligned():
        return _rasterize_points(spec, depth)
    box = np.clip(box, 0.0, 1.0)
    A = spec.linear_parts()
    t = spec.translations()
    n = 2 ** depth
    cell = 1.0 / n
    marked = []
    stack = [(box[0][None, :], box[1][None, :])]
    while stack:
        lo, hi = stack.pop()
        a = np.floor(lo * n)
        b = np.floor(hi * n)
        inside = np.all(a == b, axis=1)
        if inside.any():
            idx = a[inside].astype(np.int64)
            ok = np.all((idx >= 0) & (idx < n), axis=1)
            marked.append(unique_rows(idx[ok]))
        lo, hi = lo[~inside], hi[~inside]
        if lo.shape[0] == 0:
            continue
        diam = np.sqrt(((hi - lo) ** 2).sum(axis=1))
        small = diam < cell
        if small.any():
            marked.append(unique_rows(_mark_boxes(lo[small], hi[small], depth)))
        lo, hi = lo[~small], hi[~small]
        if lo.shape[0] == 0:
            continue
        for s in range(0, lo.shape[0], max(1, chunk // len(A))):
            stack.append(_box_images(A, t, lo[s:s + chunk // len(A)], hi[s:s + chunk // len(A)]))
        if len(marked) > 64:
            marked = [unique_rows(np.concatenate(marked))]
    if not marked:
        return DyadicSet.empty(d, depth)
    return DyadicSet(d, depth, np.concatenate(marked))


def attractor_points(spec: IFSSpec, level: int) -> np.ndarray:
    """Images of the maps' fixed points under all words of the given length."""
    d = spec.dim
    A = spec.linear_parts()
    t = spec.translations()
    fixed = np.stack([np.linalg.solve(np.eye(d) - A[i], t[i]) for i in range(len(A))])
    LA, Lt = _words(A, t, level)
    return (np.einsum("mij,kj->mki", LA, fixed) + Lt[:, None, :]).reshape(-1, d)


def _rasterize_points(spec: IFSSpec, depth: int, extra: int = 4) -> DyadicSet:
    rmax = max(m.ratio for m in spec.maps)
    level = max(1, math.ceil((depth + extra) * math.log(2) / math.log(1 / rmax)))
    if len(spec.maps) ** level > 5e7:
        raise ResolutionError("point rasterization would exceed the size budget")
    pts = attractor_points(spec, level)
    return DyadicSet.from_points(np.clip(pts, 0.0, np.nextafter(1.0, 0.0)), depth)


# ---------------------------------------------------------------------------
# builtins

def _grid_maps(d: int, m: int, keep) -> tuple:
    out = []
    for idx in np.ndindex(*([m] * d)):
        if keep(idx):
            out.append(SimilarityMap(1.0 / m, tuple(i / m for i in idx)))
    return tuple(out)


def carpet() -> IFSSpec:
    return IFSSpec(2, _grid_maps(2, 3, lambda i: i != (1, 1)), "carpet")


def four_corner() -> IFSSpec:
    return IFSSpec(2, tuple(SimilarityMap(0.25, (x, y)) for x in (0.0, 0.75) for y in (0.0, 0.75)),
                   "four-corner")


def triangle() -> IFSSpec:
    return IFSSpec(2, (SimilarityMap(0.5, (0.0, 0.0)), SimilarityMap(0.5, (0.5, 0.0)),
                       SimilarityMap(0.5, (0.0, 0.5))), "triangle")


def sponge() -> IFSSpec:
    return IFSSpec(3, _grid_maps(3, 3, lambda i: sum(v == 1 for v in i) < 2), "sponge")


def square() -> IFSSpec:
    return IFSSpec(2, _grid_maps(2, 2, lambda i: True), "square")


def segment() -> IFSSpec:
    """Vertical segment {1/2} x [0,1]."""
    return IFSSpec(2, (SimilarityMap(0.5, (0.25, 0.0)), SimilarityMap(0.5, (0.25, 0.5))), "segment")


def cantor_product() -> IFSSpec:
    """C x [0,1] with C the middle-half Cantor set (dimension 1/2 + 1)."""
    maps = []
    for x in (0.0, 0.75):
        for y in (0.0, 0.25, 0.5, 0.75):
            maps.append(SimilarityMap(0.25, (x, y)))
    return IFSSpec(2, tuple(maps), "cantor-product")


BUILTINS = {
    "carpet": carpet,
    "four-corner": four_corner,
    "triangle": triangle,
    "sponge": sponge,
    "square": square,
    "segment": segment,
    "cantor-product": cantor_product,
}


def builtin(name: str) -> IFSSpec:
    try:
        return BUILTINS[name]()
    except KeyError:
        raise DomainError(f"unknown builtin {name!r}; available: {', '.join(sorted(BUILTINS))}")


def parse_ifs(text: str) -> IFSSpec:
    """key=value lines: dim=, repeated map=r,tx,ty[,tz][,angle], name=."""
    dim, name, raw = None, "ifs", []
    for ln in text.splitlines():
        ln = ln.split("#", 1)[0].strip()
        if not ln:
            continue
        if "=" not in ln:
            raise DomainError(f"malformed IFS line {ln!r}")
        k, v = (p.strip() for p in ln.split("=", 1))
        if k == "dim":
            dim = int(v)
        elif k == "name":
            name = v
        elif k == "map":
            raw.append([float(x) for x in v.split(",")])
        else:
            raise DomainError(f"unknown IFS key {k!r}")
    if dim is None:
        raise DomainError("IFS file lacks dim=")
    maps = []
    for vals in raw:
        if len(vals) == dim + 1:
            maps.append(SimilarityMap(vals[0], tuple(vals[1:])))
        elif len(vals) == dim + 2 and dim == 2:
            maps.append(SimilarityMap(vals[0], tuple(vals[1:3]), math.radians(vals[3])))
        else:
            raise DomainError(f"map entry {vals} has the wrong length for dim={dim}")
    return IFSSpec(dim, tuple(maps), name)


def load_ifs(source: str) -> IFSSpec:
    if source in BUILTINS:
        return builtin(source)
    p = Path(source)
    if p.exists():
        return parse_ifs(p.read_text())
    raise DomainError(f"unknown builtin {source!r}; available: {', '.join(sorted(BUILTINS))}")


# ---------------------------------------------------------------------------
# Ahlfors regularity

@dataclass
class RegularityReport:
    s: float
    c_low: float
    c_high: float
    radii: tuple
    ratios: np.ndarray = field(repr=False, default=None)


def ahlfors_constants(s: DyadicSet, exponent: float, sample_centers: int = 64, seed: int = 0,
                      radii=None) -> RegularityReport:
    """Extreme values of cellCount(B(x,r)) 2^(-depth s) / r^s over sampled cells.

    Radii default to 2^-j for cell size <= r <= 1/2.
    """
    if len(s) == 0:
        raise DomainError("empty set")
    rng = np.random.default_rng(seed)
    centers = s.centers()
    k = min(sample_centers, len(s))
    pick = np.sort(rng.choice(len(s), size=k, replace=False))
    if radii is None:
        radii = tuple(2.0 ** -j for j in range(1, s.depth + 1))
    tree = cKDTree(centers)
    ratios = np.empty((k, len(radii)))
    w = 2.0 ** (-s.depth * exponent)
    for j, r in enumerate(radii):
        cnt = tree.query_ball_point(centers[pick], r, return_length=True)
        ratios[:, j] = cnt * w / r ** exponent
    return RegularityReport(exponent, float(ratios.min()), float(ratios.max()), tuple(radii), ratios)
