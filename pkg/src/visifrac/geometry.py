"""Directions on the sphere and orthonormal frames for projections."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ParameterError

_SNAP = 1e-15


def _snap(v: np.ndarray) -> np.ndarray:
    v = np.where(np.abs(v) < _SNAP, 0.0, v)
    return v / np.linalg.norm(v)


def check_frame(frame: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    f = np.atleast_2d(np.asarray(frame, dtype=float))
    if f.shape[0] > f.shape[1]:
        raise DomainError("frame has more rows than the ambient dimension")
    err = np.abs(f @ f.T - np.eye(f.shape[0])).max() if f.size else 0.0
    if err > tol:
        raise DomainError(f"frame rows are not orthonormal (error {err:.2e})")
    return f


def complement_frame(rows: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement, by Gram-Schmidt over the axes."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    d = rows.shape[1]
    basis = [r for r in rows]
    out = []
    for i in range(d):
        v = np.zeros(d)
        v[i] = 1.0
        for b in basis + out:
            v = v - (v @ b) * b
        nv = np.linalg.norm(v)
        if nv > 1e-6:
            out.append(_snap(v / nv))
        if len(out) == d - rows.shape[0]:
            break
    return np.array(out).reshape(-1, d)


@dataclass(frozen=True, eq=False)
class Direction:
    """Unit vector theta with an orthonormal frame of its orthogonal complement."""

    unit: np.ndarray
    frame: np.ndarray = field(default=None)

    def __post_init__(self):
        u = np.asarray(self.unit, dtype=float).ravel()
        if u.shape[0] not in (1, 2, 3):
            raise ParameterError("directions live in dimension 1, 2 or 3")
        nrm = np.linalg.norm(u)
        if nrm == 0:
            raise DomainError("zero vector is not a direction")
        u = _snap(u / nrm)
        if self.frame is None:
            if u.shape[0] == 1:
                fr = np.zeros((0, 1))
            elif u.shape[0] == 2:
                fr = np.array([[u[1], -u[0]]])
            else:
                fr = complement_frame(u[None, :])
        else:
            fr = check_frame(self.frame)
            if np.abs(fr @ u).max() > 1e-12:
                raise DomainError("frame is not orthogonal to the direction")
        object.__setattr__(self, "unit", u)
        object.__setattr__(self, "frame", fr)

    @property
    def dim(self) -> int:
        return self.unit.shape[0]

    @classmethod
    def from_angle(cls, angle: float) -> "Direction":
        return cls(np.array([math.cos(angle), math.sin(angle)]))

    @classmethod
    def from_spherical(cls, polar: float, azimuth: float) -> "Direction":
        return cls(np.array([math.sin(polar) * math.cos(azimuth),
                             math.sin(polar) * math.sin(azimuth),
                             math.cos(polar)]))

    def project(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.frame.T

    def height(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.unit

    def angles(self) -> tuple:
        if self.dim == 2:
            return (math.atan2(self.unit[1], self.unit[0]),)
        if self.dim == 3:
            return (math.acos(max(-1.0, min(1.0, self.unit[2]))),
                    math.atan2(self.unit[1], self.unit[0]))
        return ()


def sample_direction(rng: np.random.Generator, d: int) -> Direction:
    """Uniform direction: uniform angle for d=2, area-uniform for d=3."""
    if d == 2:
        return Direction.from_angle(rng.uniform(0.0, 2 * math.pi))
    if d == 3:
        v = rng.standard_normal(3)
        while np.linalg.norm(v) < 1e-9:
            v = rng.standard_normal(3)
        return Direction(v)
    raise ParameterError("direction sampling needs d = 2 or 3")


def as_frame(obj) -> np.ndarray:
    """Frame rows from a Direction (its complement frame) or an explicit array."""
    if isinstance(obj, Direction):
        return obj.frame
    return check_frame(obj)
