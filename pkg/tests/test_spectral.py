import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from visifrac.dyadic import DyadicSet
from visifrac.errors import ParameterError
from visifrac.fractals import carpet, rasterize_ifs
from visifrac.measures import DiscreteMeasure, natural_measure, project, project_raw
from visifrac.spectral import (direction_average_sobolev, energy_fourier_check, fourier_coefficients,
                               riesz_constant, sobolev_norm, transform)

CARPET_S = math.log(8) / math.log(3)


def test_coefficient_examples():
    assert np.allclose(np.abs(fourier_coefficients(np.array([0.0]), np.ones(1), 5)), 1.0)
    N = 64
    c = (np.arange(N) + 0.5) / N
    f = fourier_coefficients(c, np.ones(N) / N, N)
    assert abs(f[N]) == pytest.approx(1.0) and abs(f[2 * N]) == pytest.approx(1.0)
    assert abs(f[N + 1]) < 1e-12
    two = fourier_coefficients(np.array([0.0, 0.5]), np.array([0.5, 0.5]), 1)
    assert abs(two[2]) < 1e-12


@pytest.mark.parametrize("K", [1, 4, 17])
def test_unit_atom_sum(K):
    prof = transform(project_raw(np.array([0.3]), np.ones(1), 2 ** -6), K)
    assert sobolev_norm(prof, 0.0) == pytest.approx(2 * K + 1)


def test_plancherel_uniform():
    u = project(natural_measure(DyadicSet.full(1, 10), 1), np.array([[1.0]]))
    for K in (512, 2048):
        prof = transform(u, K)
        assert sobolev_norm(prof, 0.0) == pytest.approx(1.0 + prof.tail(), rel=0.05)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.floats(0, 3), st.floats(-0.5, 1.5))
def test_inhomogeneous_minus_homogeneous_is_mass_squared(xs, sigma, shift):
    w = np.linspace(0.2, 1.0, len(xs))
    p = project_raw(np.asarray(xs), w, 2 ** -5)
    prof = transform(p, 8)
    diff = sobolev_norm(prof, 0.0) - sobolev_norm(prof, 0.0, "homogeneous")
    assert diff == pytest.approx(w.sum() ** 2, rel=1e-9)
    assert sobolev_norm(prof, sigma) >= sobolev_norm(prof, sigma, "homogeneous") - 1e-9


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=10),
       st.tuples(st.floats(-2, 2), st.floats(-2, 2)))
def test_spectral_sums_translation_invariant(pts, t):
    pts = np.asarray(pts)
    w = np.ones(len(pts))
    a = transform(project_raw(pts, w, 2 ** -4), 6)
    b = transform(project_raw(pts + np.asarray(t), w, 2 ** -4), 6)
    assert np.allclose(a.amplitudes, b.amplitudes, rtol=0, atol=1e-9)
    for sigma in (0.0, 0.3):
        assert sobolev_norm(a, sigma) == pytest.approx(sobolev_norm(b, sigma), abs=1e-9)


def test_energy_fourier_examples():
    sq = natural_measure(DyadicSet.full(2, 6), 2, normalize=True)
    ca = natural_measure(rasterize_ifs(carpet(), 6), CARPET_S, normalize=True)
    a = energy_fourier_check(sq, 1.5, 64)
    b = energy_fourier_check(ca, 1.5, 64)
    assert abs(a.ratio / b.ratio - 1) < 0.10
    assert energy_fourier_check(sq.scaled(2.0), 1.5, 64).ratio == pytest.approx(a.ratio, rel=1e-12)
    one = natural_measure(DyadicSet(2, 4, np.array([[3, 3]])), 2)
    assert energy_fourier_check(one, 1.5, 16).flagged
    with pytest.raises(ParameterError):
        energy_fourier_check(sq, 2.0, 16)
    assert riesz_constant(2, 1.5) == pytest.approx(math.pi ** 0.5 * math.gamma(0.25) / math.gamma(0.75))


def test_direction_average_examples():
    L = natural_measure(DyadicSet.full(2, 6), 2, normalize=True)
    m16 = direction_average_sobolev(L, 0.2, 16).mean
    m32 = direction_average_sobolev(L, 0.2, 32).mean
    assert np.isfinite(m16) and abs(m16 / m32 - 1) < 0.2
    zero = DiscreteMeasure(DyadicSet(2, 3, np.array([[1, 1]])), np.zeros(1))
    assert direction_average_sobolev(zero, 0.2, 4).mean == 0.0


def test_carpet_average_stable_under_refinement():
    vals = [direction_average_sobolev(natural_measure(rasterize_ifs(carpet(), k), CARPET_S, normalize=True),
                                      0.3, 8, seed=0).mean for k in (6, 7)]
    assert abs(vals[1] / vals[0] - 1) < 0.25


def test_direction_average_is_seed_deterministic():
    m = natural_measure(rasterize_ifs(carpet(), 5), CARPET_S, normalize=True)
    a = direction_average_sobolev(m, 0.2, 6, seed=3)
    b = direction_average_sobolev(m, 0.2, 6, seed=3)
    assert np.array_equal(a.per_direction, b.per_direction)
