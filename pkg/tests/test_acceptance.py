"""The thirteen acceptance criteria, each at its stated tolerance and time budget."""
import math
import time
import warnings

import numpy as np
import pytest

from conftest import ACCEPTANCE
from oracles import content_exhaustive
from visifrac import cli
from visifrac.dyadic import DyadicSet, box_counts, box_dimension_fit, calibrate_grid_constant, dyadic_content
from visifrac.fractals import BUILTINS, builtin, carpet, rasterize_ifs, similarity_dimension
from visifrac.geometry import Direction, sample_direction
from visifrac.measures import natural_measure, project, project_raw, riesz_energy
from visifrac.rng import job_rng
from visifrac.slicing import heavy_containment, heavy_set, slice_spectrum
from visifrac.spectral import energy_fourier_check, sobolev_norm, transform
from visifrac.visibility import (decompose, direction_average_experiment, solve_parameters,
                                 visible_cells, visible_cells_bruteforce)

CARPET_S = math.log(8) / math.log(3)


def report(num, ok, detail):
    line = f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[f"{num:02d}"] = line
    print(line)
    assert ok, line


@pytest.fixture(autouse=True)
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


def test_01_parameter_optimum():
    solve_parameters(2, 2, 0.0)
    t0 = time.perf_counter()
    p = solve_parameters(2, 2, 0.0)
    dt = time.perf_counter() - t0
    ok = (abs(p.alpha - 0.1835034190722738) < 1e-9 and abs(p.alpha - (1 - math.sqrt(6) / 3)) < 1e-9
          and abs(2 * p.kappa + 3 * p.alpha - 1) < 1e-12 and dt < 1e-3)
    report(1, ok, f"alpha={p.alpha:.16f} 2k+3a-1={2 * p.kappa + 3 * p.alpha - 1:.1e} time={dt * 1e3:.3f}ms")


def test_02_content_oracle():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst, checked = 0.0, 0
    for _ in range(200):
        depth = int(rng.integers(1, 5))
        n = 2 ** depth
        cap = {1: 4, 2: 16, 3: 10, 4: 6}[depth]
        k = int(rng.integers(1, cap + 1))
        flat = rng.choice(n * n, size=k, replace=False)
        s = DyadicSet(2, depth, np.stack([flat // n, flat % n], axis=1))
        for ex in (0.5, 1.0, 1.5, 2.0):
            worst = max(worst, abs(dyadic_content(s, ex) - content_exhaustive(s.coords, depth, ex, 2)))
            checked += 1
    dt = time.perf_counter() - t0
    report(2, worst <= 1e-12 and dt < 10, f"{checked} comparisons max|diff|={worst:.1e} time={dt:.2f}s")


def test_03_riesz_closed_form():
    t0 = time.perf_counter()
    u = natural_measure(DyadicSet.full(1, 12), 1)
    e = riesz_energy(u, 0.5)
    dt = time.perf_counter() - t0
    rel = abs(e - 8 / 3) / (8 / 3)
    report(3, rel < 0.01 and dt < 30, f"I={e:.6f} vs 8/3 rel={rel:.2e} time={dt:.2f}s")


def test_04_energy_fourier_proportionality():
    sq = natural_measure(DyadicSet.full(2, 7), 2, normalize=True)
    ca = natural_measure(rasterize_ifs(carpet(), 7), CARPET_S, normalize=True)
    a = energy_fourier_check(sq, 1.5, 128).ratio
    b = energy_fourier_check(ca, 1.5, 128).ratio
    rel = abs(a / b - 1)
    report(4, rel < 0.10, f"C_square={a:.4f} C_carpet={b:.4f} rel={rel:.3%}")


def test_05_visibility_oracle():
    t0 = time.perf_counter()
    planar = [Direction.from_angle(a) for a in
              (0.0, math.pi / 2, math.pi, 3 * math.pi / 2, math.pi / 4, math.atan(0.5), 2.0, 4.4)]
    spatial = [Direction(np.array([0.0, 0.0, 1.0])), Direction(np.array([1.0, 0.0, 0.0]))] + \
              [sample_direction(job_rng(0, i), 3) for i in range(6)]
    bad = []
    for name in sorted(BUILTINS):
        spec = builtin(name)
        s = rasterize_ifs(spec, 6 if spec.dim == 2 else 4)
        for th in (planar if spec.dim == 2 else spatial):
            if visible_cells(s, th) != visible_cells_bruteforce(s, th):
                bad.append((name, th.unit.tolist()))
    dt = time.perf_counter() - t0
    report(5, not bad and dt < 60, f"{len(BUILTINS)} sets x 8 directions mismatches={len(bad)} time={dt:.1f}s")


def test_06_trivial_visibility():
    up = Direction(np.array([0.0, 1.0]))
    v = visible_cells(DyadicSet.full(2, 6), up)
    top = len(v) == 64 and bool(np.all(v.coords[:, 1] == 63))
    rows = DyadicSet(2, 4, np.array([[i, 0] for i in range(16)] + [[i, 15] for i in range(16)]))
    w = visible_cells(rows, up)
    upper = np.array_equal(w.coords, np.array([[i, 15] for i in range(16)]))
    report(6, top and upper, f"top row={top} upper row={upper}")


def test_07_heavy_set_behaviour():
    c = rasterize_ifs(carpet(), 8)
    m = natural_measure(c, CARPET_S)
    ok = True
    sizes = {}
    for name, frame in (("axis", np.array([[1.0, 0.0]])), ("oblique", Direction.from_angle(0.7).frame)):
        prev = None
        for j in range(7):
            F = heavy_set(c, m, frame, 2 ** j * 3 * m.total_mass, 0.05, CARPET_S).F_M
            if prev is not None and not F.issubset(prev):
                ok = False
            sizes.setdefault(name, []).append(len(F))
            prev = F
    full = DyadicSet.full(2, 8)
    empty = len(heavy_set(full, natural_measure(full, 2), np.array([[1.0, 0.0]]), 8.0, 0.05, 2.0).F_M) == 0
    report(7, ok and empty, f"nested={ok} |F_M|={sizes} full-square empty={empty}")


def test_08_one_third_trick():
    t0 = time.perf_counter()
    cal = {n: calibrate_grid_constant(n, 10 ** 4, seed=0) for n in (1, 2)}
    rng = np.random.default_rng(8)
    contained = 0
    for i in range(20):
        n = 1 + i % 2
        k = int(rng.integers(5, 60))
        pts = rng.random((k, n)) ** (1 + 3 * rng.random())
        p = project_raw(pts, rng.random(k), 2.0 ** -int(rng.integers(6, 10)))
        M = p.total_mass * (3 ** n + 1) * 2 ** rng.random()
        ok, _, _ = heavy_containment(p, M, cal[n].c_star)
        contained += bool(ok)
    dt = time.perf_counter() - t0
    below = all(c.c_star <= 8 for c in cal.values())
    report(8, below and contained == 20 and dt < 60,
           f"c*(n=1)={cal[1].c_star:.3f} c*(n=2)={cal[2].c_star:.3f} (need <= 8) "
           f"containment {contained}/20 time={dt:.1f}s")


CORPUS = [("carpet", 8, 2 ** -8, 0.05, "regular"), ("square", 8, 2 ** -8, 0.05, "regular"),
          ("triangle", 8, 2 ** -8, 0.05, "regular"), ("cantor-product", 8, 2 ** -8, 0.05, "regular"),
          ("four-corner", 8, 2 ** -8, 0.01, "general"), ("segment", 8, 2 ** -8, 0.01, "general"),
          ("sponge", 6, 2 ** -6, 0.05, "regular")]


def test_09_decomposition_partition():
    failures = []
    for name, depth, delta, eps, mode in CORPUS:
        spec = builtin(name)
        s = rasterize_ifs(spec, depth)
        p = solve_parameters(similarity_dimension(spec), spec.dim, eps, mode, delta=delta, strict=False)
        for i in range(8):
            th = sample_direction(job_rng(0, i), spec.dim)
            rep = decompose(s, th, p, with_visible=False)
            if not rep.partition_ok(s) or rep.lemma_check["violations"]:
                failures.append((name, i))
    report(9, not failures, f"{len(CORPUS)} sets x 8 directions failures={failures}")


def test_10_visible_content_trend():
    t0 = time.perf_counter()
    s = rasterize_ifs(carpet(), 10)
    p = solve_parameters(CARPET_S, 2, 0.05, strict=False)
    tab = direction_average_experiment(s, p, 16, [2 ** -6, 2 ** -8, 2 ** -10], seed=0)
    dt = time.perf_counter() - t0
    A = [tab.averages[d] for d in (2 ** -6, 2 ** -8, 2 ** -10)]
    slope = tab.box_fit.slope
    ok = tab.strictly_decreasing() and 1.0 <= slope <= CARPET_S and dt < 300
    report(10, ok, f"A={[round(a, 5) for a in A]} vis box slope={slope:.4f} time={dt:.1f}s")


def test_11_slice_trend():
    t0 = time.perf_counter()
    s = rasterize_ifs(carpet(), 10)
    good = 0
    for i in range(8):
        frame = sample_direction(job_rng(7, i), 2).unit[None, :]
        fr = [r.fraction_heavy for r in slice_spectrum(s, frame, CARPET_S, 0.1, levels=range(6, 11))]
        good += all(b <= a for a, b in zip(fr, fr[1:]))
    dt = time.perf_counter() - t0
    report(11, good >= 7 and dt < 180, f"non-increasing in {good}/8 directions time={dt:.1f}s")


def test_12_spectral_sanity():
    u = project(natural_measure(DyadicSet.full(1, 10), 1), np.array([[1.0]]))
    rels = []
    for K in (512, 2048):
        prof = transform(u, K)
        rels.append(abs(sobolev_norm(prof, 0.0) - (1 + prof.tail())) / (1 + prof.tail()))
    rng = np.random.default_rng(12)
    worst = 0.0
    for n in (1, 2):
        pts, w = rng.random((30, n)), rng.random(30)
        a = transform(project_raw(pts, w, 2 ** -5), 8)
        b = transform(project_raw(pts + rng.normal(size=n) * 3, w, 2 ** -5), 8)
        worst = max(worst, float(np.abs(a.amplitudes - b.amplitudes).max()))
        for sigma in (0.0, 0.4):
            for kind in ("inhomogeneous", "homogeneous"):
                worst = max(worst, abs(sobolev_norm(a, sigma, kind) - sobolev_norm(b, sigma, kind)))
    ok = max(rels) < 0.05 and worst < 1e-9
    report(12, ok, f"Plancherel rel={max(rels):.1e} translation max|diff|={worst:.1e}")


def test_13_reproducibility(tmp_path):
    runs = [["experiment", "--kind", "vis-average", "--set", "carpet", "--depth", "8",
             "--deltas", "2^-6,2^-8", "--directions", "4", "--seed", "11"],
            ["experiment", "--kind", "slice-spectrum", "--set", "carpet", "--depth", "8", "--seed", "7"],
            ["experiment", "--kind", "calibrate", "--n", "2", "--trials", "500", "--seed", "1"],
            ["experiment", "--kind", "heavy-set", "--set", "carpet", "--depth", "6", "--seed", "3"],
            ["experiment", "--kind", "sobolev-average", "--set", "carpet", "--depth", "5", "--directions", "3"],
            ["experiment", "--kind", "decompose", "--set", "carpet", "--depth", "8", "--angle", "0.9"]]
    same = 0
    for i, argv in enumerate(runs):
        a, b = tmp_path / f"{i}a", tmp_path / f"{i}b"
        assert cli.main(argv + ["--out", str(a)]) == 0
        assert cli.main(argv + ["--out", str(b)]) == 0
        names = sorted(p.name for p in a.iterdir() if p.name != "runs.jsonl")
        same += all((a / n).read_bytes() == (b / n).read_bytes() for n in names)
    report(13, same == len(runs), f"{same}/{len(runs)} experiments byte-identical")
