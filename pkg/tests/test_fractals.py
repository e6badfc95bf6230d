import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import sampled_raster
from visifrac.dyadic import DyadicSet
from visifrac.errors import DomainError
from visifrac.fractals import (BUILTINS, IFSSpec, SimilarityMap, ahlfors_constants, builtin, carpet,
                               four_corner, load_ifs, parse_ifs, rasterize_ifs, similarity_dimension,
                               sponge, square)

# cell counts at depth 4 (d = 2) and depth 3 (d = 3), checked against point sampling
FROZEN_COUNTS = {"carpet": 236, "four-corner": 49, "triangle": 121, "sponge": 432,
                 "square": 256, "segment": 16, "cantor-product": 112}


@pytest.mark.parametrize("name", sorted(BUILTINS))
def test_raster_matches_point_sampling(name):
    spec = builtin(name)
    depth = 4 if spec.dim == 2 else 3
    r = rasterize_ifs(spec, depth)
    assert r == sampled_raster(spec, depth)
    assert len(r) == FROZEN_COUNTS[name]


@pytest.mark.parametrize("k", [0, 1, 3, 6])
def test_square_raster_is_full(k):
    assert rasterize_ifs(square(), k) == DyadicSet.full(2, k)


def test_similarity_dimensions():
    assert similarity_dimension(carpet()) == pytest.approx(math.log(8) / math.log(3), abs=1e-12)
    assert similarity_dimension(square()) == pytest.approx(2.0, abs=1e-12)
    assert similarity_dimension(four_corner()) == pytest.approx(1.0, abs=1e-12)
    assert similarity_dimension(sponge()) == pytest.approx(2.726833, abs=1e-6)


@given(st.lists(st.floats(0.05, 0.45), min_size=2, max_size=6))
def test_moran_equation_holds(ratios):
    maps = tuple(SimilarityMap(r, (0.0, 0.0)) for r in ratios)
    s = similarity_dimension(IFSSpec(2, maps))
    assert sum(r ** s for r in ratios) == pytest.approx(1.0, abs=1e-9)


def test_ifs_file_roundtrip(tmp_path):
    p = tmp_path / "c.ifs"
    p.write_text("dim=2\nname=quarter\n" + "".join(
        f"map=0.5,{x},{y}\n" for x, y in [(0, 0), (0.5, 0), (0, 0.5), (0.5, 0.5)]))
    spec = load_ifs(str(p))
    assert spec.name == "quarter"
    assert rasterize_ifs(spec, 3) == DyadicSet.full(2, 3)


def test_ifs_errors():
    with pytest.raises(DomainError, match="carpet"):
        load_ifs("no-such-set")
    with pytest.raises(DomainError):
        parse_ifs("map=0.5,0,0\n")
    with pytest.raises(DomainError):
        parse_ifs("dim=2\nmap=0.5,0\n")


def test_rotated_maps_rasterize_from_points():
    text = "dim=2\nmap=0.5,0.5,0,90\nmap=0.5,0.5,0.5,90\n"
    s = rasterize_ifs(parse_ifs(text), 5)
    assert len(s) > 0


def test_ahlfors_constants():
    rep = ahlfors_constants(DyadicSet.full(2, 5), 2)
    assert 1 / 8 <= rep.c_low <= rep.c_high <= 8
    one = DyadicSet(2, 4, np.array([[3, 3]]))
    assert ahlfors_constants(one, 2, radii=[1 / 16]).c_high == pytest.approx(1.0)
    c = ahlfors_constants(rasterize_ifs(carpet(), 8), math.log(8) / math.log(3))
    assert c.c_high / c.c_low <= 100
