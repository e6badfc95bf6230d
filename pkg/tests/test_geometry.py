import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from visifrac.errors import DomainError, ParameterError
from visifrac.geometry import Direction, check_frame, complement_frame, sample_direction
from visifrac.rng import job_rng


@given(st.floats(0, 2 * math.pi))
def test_direction_frame_is_orthonormal_complement(a):
    th = Direction.from_angle(a)
    M = np.vstack([th.unit, th.frame])
    assert np.allclose(M @ M.T, np.eye(2), atol=1e-12)


@given(st.integers(0, 2 ** 32), st.integers(0, 50), st.sampled_from([2, 3]))
def test_sampled_directions(seed, index, d):
    th = sample_direction(job_rng(seed, index), d)
    assert th.dim == d and abs(np.linalg.norm(th.unit) - 1) < 1e-12
    M = np.vstack([th.unit, th.frame])
    assert np.allclose(M @ M.T, np.eye(d), atol=1e-12)
    assert np.array_equal(th.unit, sample_direction(job_rng(seed, index), d).unit)


def test_complement_frame_3d():
    f = complement_frame(np.array([[0.0, 0.0, 1.0]]))
    assert f.shape == (2, 3) and np.allclose(f @ [0, 0, 1], 0)


def test_projection_and_height():
    th = Direction(np.array([0.0, 1.0]))
    pts = np.array([[0.25, 0.75]])
    assert th.height(pts)[0] == pytest.approx(0.75)
    assert abs(th.project(pts)[0, 0]) == pytest.approx(0.25)


def test_streams_differ_by_job():
    a = job_rng(0, 0).random(4)
    b = job_rng(0, 1).random(4)
    assert not np.allclose(a, b)


def test_bad_frames_rejected():
    with pytest.raises((DomainError, ParameterError)):
        check_frame(np.array([[1.0, 1.0]]))
