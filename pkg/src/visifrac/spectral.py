"""Fourier transforms of discrete measures, Sobolev norms and energy checks.

Convention: nu_hat(xi) = sum_j w_j exp(-2 pi i xi . x_j).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gamma

from .errors import ParameterError
from .geometry import Direction, sample_direction
from .measures import DiscreteMeasure, ProjectedMeasure, project, riesz_energy
from .rng import job_rng


@dataclass
class SpectralProfile:
    frequencies: np.ndarray = field(repr=False)   # (F, n) integers
    amplitudes: np.ndarray = field(repr=False)    # |nu_hat|^2 per frequency
    cutoff: int = 0
    nyquist: float = math.inf

    @property
    def n(self) -> int:
        return self.frequencies.shape[1]

    def zero_amplitude(self) -> float:
        z = np.all(self.frequencies == 0, axis=1)
        return float(self.amplitudes[z].sum())

    def tail(self) -> float:
        """Mass of |nu_hat|^2 beyond the Nyquist frequency of the binning."""
        far = np.abs(self.frequencies).max(axis=1) > self.nyquist
        return float(self.amplitudes[far].sum())

    def to_csv(self) -> str:
        head = ",".join([f"xi{i}" for i in range(self.n)] + ["amplitude"])
        rows = [head]
        for f, a in zip(self.frequencies, self.amplitudes):
            rows.append(",".join([str(int(v)) for v in f] + [repr(float(a))]))
        return "\n".join(rows) + "\n"


def _phase_matrix(freqs: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.exp(-2j * np.pi * np.outer(freqs, x))


def fourier_coefficients(points: np.ndarray, weights: np.ndarray, cutoff: int,
                         spacing: float = 1.0, chunk: int = 4096) -> np.ndarray:
    """nu_hat on the grid spacing * {-K..K}^n as a dense n-dimensional array."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    w = np.asarray(weights, dtype=float)
    n = pts.shape[1]
    xi = spacing * np.arange(-cutoff, cutoff + 1)
    size = xi.shape[0]
    out = np.zeros((size,) * n, dtype=complex)
    for a in range(0, w.shape[0], chunk):
        p, ww = pts[a:a + chunk], w[a:a + chunk]
        if n == 1:
            out += _phase_matrix(xi, p[:, 0]) @ ww
        elif n == 2:
            E1 = _phase_matrix(xi, p[:, 0]) * ww
            E2 = _phase_matrix(xi, p[:, 1])
            out += E1 @ E2.T
        elif n == 3:
            E1 = _phase_matrix(xi, p[:, 0]) * ww
            E2 = _phase_matrix(xi, p[:, 1])
            E3 = _phase_matrix(xi, p[:, 2])
            out += np.einsum("aj,bj,cj->abc", E1, E2, E3)
        else:
            raise ParameterError("transform supports n <= 3")
    return out


def transform(proj: ProjectedMeasure, cutoff: int, use_bins: bool = False) -> SpectralProfile:
    """Exact sum over atoms at all integer frequencies with |xi|_inf <= cutoff.

    By default the exact projected cell centres are used; ``use_bins`` sums
    over bin centres instead.
    """
    if cutoff < 1:
        raise ParameterError("cutoff must be >= 1")
    if use_bins:
        pts, w = proj.bin_centers(), proj.weights
    else:
        pts, w = proj.atoms, proj.atom_weights
    n = proj.n
    coef = fourier_coefficients(pts, w, cutoff)
    grids = np.meshgrid(*([np.arange(-cutoff, cutoff + 1)] * n), indexing="ij")
    freqs = np.stack([g.ravel() for g in grids], axis=1)
    return SpectralProfile(freqs, np.abs(coef.ravel()) ** 2, cutoff, 0.5 / proj.bin_width)


def nyquist_cutoff(proj: ProjectedMeasure) -> int:
    return max(1, int(round(0.5 / proj.bin_width)))


def sobolev_norm(profile: SpectralProfile, sigma: float, kind: str = "inhomogeneous") -> float:
    """Lattice sum of |nu_hat|^2 (1+|xi|^2)^sigma, or |xi|^(2 sigma) without xi = 0."""
    r2 = np.sum(profile.frequencies.astype(float) ** 2, axis=1)
    if kind == "inhomogeneous":
        return float(np.sum(profile.amplitudes * (1.0 + r2) ** sigma))
    if kind == "homogeneous":
        nz = r2 > 0
        return float(np.sum(profile.amplitudes[nz] * r2[nz] ** sigma))
    raise ParameterError(f"unknown Sobolev kind {kind!r}")


# ---------------------------------------------------------------------------
# energy identity

def riesz_constant(d: int, s: float) -> float:
    """C with I_s = C int |mu_hat|^2 |xi|^(s-d) for the exp(-2 pi i) convention."""
    return float(math.pi ** (s - d / 2.0) * gamma((d - s) / 2.0) / gamma(s / 2.0))


def _origin_cell_integral(d: int, s: float, half: float, nodes: int = 64) -> float:
    """int over [-half, half]^d of |xi|^(s-d), via the same sector split."""
    a = s - d
    if d == 1:
        return 2.0 * half ** (a + 1) / (a + 1)
    x, w = np.polynomial.legendre.leggauss(nodes)
    u = 0.5 * (x + 1.0)
    wu = 0.5 * w
    grids = np.meshgrid(*([u] * (d - 1)), indexing="ij")
    U = np.stack([g.ravel() for g in grids], axis=1)
    W = np.prod(np.meshgrid(*([wu] * (d - 1)), indexing="ij"), axis=0).ravel()
    ang = float(np.sum(W * (1.0 + np.sum(U ** 2, axis=1)) ** (a / 2.0)))
    radial = half ** (a + d) / (a + d)
    return 2 ** d * d * ang * radial


def _grid_coefficients(m: DiscreteMeasure, cutoff: float, spacing: float) -> tuple:
    """|mu_hat|^2 of cell-uniform densities on the lattice spacing * Z^d, |xi|_inf <= cutoff.

    Cell centres lie on a regular grid, so a zero-padded FFT evaluates the
    exact atom sum; each coefficient is then multiplied by the cell sinc.
    """
    d = m.dim
    h = m.support.cell_size
    N = 2 ** m.depth
    P = int(round(1.0 / (spacing * h)))
    if P < N or abs(P * spacing * h - 1.0) > 1e-12:
        raise ParameterError("spacing must be 2^-k with spacing * cell <= 1/2^depth")
    grid = np.zeros((P,) * d)
    grid[tuple(m.support.coords.T)] = m.weights
    F = np.fft.fftn(grid)
    K = int(math.floor(cutoff / spacing))
    k = np.arange(-K, K + 1)
    xi = k * spacing
    sel = np.ix_(*([np.mod(k, P)] * d))
    coef = F[sel]
    # phase of the half-cell offset of the centres
    phase = np.exp(-2j * np.pi * xi * 0.5 * h)
    for ax in range(d):
        shape = [1] * d
        shape[ax] = -1
        coef = coef * phase.reshape(shape) * np.sinc(xi * h).reshape(shape)
    grids = np.meshgrid(*([xi] * d), indexing="ij")
    r = np.sqrt(sum(g ** 2 for g in grids))
    return np.abs(coef) ** 2, r


@dataclass
class EnergyCheck:
    energy: float
    fourier_integral: float
    ratio: float
    theoretical: float
    flagged: bool
    note: str = ""


def energy_fourier_check(m: DiscreteMeasure, s: float, cutoff: float, spacing: float = 0.25) -> EnergyCheck:
    """Riesz energy divided by the Riemann sum of |mu_hat|^2 |xi|^(s-d).

    The sum runs over the lattice spacing * Z^d inside |xi|_inf <= cutoff with
    cell weight spacing^d; the origin cell is integrated analytically against
    |mu_hat(0)|^2.  The measure is read as a uniform density on each cell,
    the same model used for the energy self terms.
    """
    d = m.dim
    if not 0 < s < d:
        raise ParameterError(f"s must lie in (0, {d})")
    energy = riesz_energy(m, s)
    amp, r = _grid_coefficients(m, cutoff, spacing)
    nz = r > 0
    integral = spacing ** d * float(np.sum(amp[nz] * r[nz] ** (s - d)))
    integral += m.total_mass ** 2 * _origin_cell_integral(d, s, spacing / 2.0)
    flagged = len(m.support) < 2
    note = "single cell: self term dominates" if flagged else ""
    ratio = energy / integral if integral > 0 else math.inf
    return EnergyCheck(energy, integral, ratio, riesz_constant(d, s), flagged, note)


# ---------------------------------------------------------------------------
# direction averages

@dataclass
class DirectionAverage:
    mean: float
    per_direction: np.ndarray
    directions: list
    flag_divergent: bool


def direction_average_sobolev(m: DiscreteMeasure, sigma: float, directions: int, seed: int = 0,
                              cutoff: int | None = None, kind: str = "inhomogeneous",
                              t: float | None = None) -> DirectionAverage:
    """Mean over sampled directions of the Sobolev norm of the projection onto theta-perp.

    Direction i is drawn from the stream of job index i, so results do not
    depend on evaluation order.
    """
    d = m.dim
    n = d - 1
    t = t if t is not None else m.meta.get("t", m.meta.get("s"))
    divergent = t is not None and sigma >= (t - n) / 2.0
    if divergent:
        warnings.warn(f"sigma={sigma} is not below (t-n)/2; the sum may grow with the cutoff")
    dirs = [sample_direction(job_rng(seed, i), d) for i in range(directions)]
    vals = np.zeros(directions)
    if m.total_mass == 0:
        return DirectionAverage(0.0, vals, dirs, divergent)
    for i, th in enumerate(dirs):
        proj = project(m, th)
        K = cutoff if cutoff is not None else nyquist_cutoff(proj)
        vals[i] = sobolev_norm(transform(proj, K), sigma, kind)
    return DirectionAverage(float(vals.mean()), vals, dirs, divergent)
