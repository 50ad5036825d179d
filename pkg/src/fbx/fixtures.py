"""Closed-form solutions and model functions used as oracles.

Provides quadratic global solutions p(x) = x.A x / 2 (A symmetric nonnegative
definite with unit trace), the half-space solution max(e.x, 0)^2 / 2,
homogeneous harmonic polynomials normalized in L^2 of the unit sphere, the
admissible frequency sets, and a registry of named boundary-data fixtures for
the experiment harness.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "QuadraticBlowup",
    "KernelStratum",
    "AdmissibleFrequencySet",
    "polynomial_solution",
    "halfspace_solution",
    "homogeneous_harmonic",
    "admissible_set_distance",
    "Fixture",
    "get_fixture",
    "TAU_EIG",
]

# Eigenvalues of a (fitted) unit-trace matrix below this threshold count as
# kernel directions.  Discretization noise stays well below it while true
# kernel eigenvalues are exactly zero.
TAU_EIG = 0.05


class FixtureError(ValueError):
    pass


@dataclass(frozen=True)
class QuadraticBlowup:
    """Symmetric n x n matrix A with A >= 0 and tr A = 1."""

    matrix: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.matrix, dtype=float)
        object.__setattr__(self, "matrix", A)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise FixtureError("matrix must be square")
        if np.max(np.abs(A - A.T)) > 1e-12:
            raise FixtureError("matrix must be symmetric")
        if abs(np.trace(A) - 1.0) > 1e-12:
            raise FixtureError(f"trace must be 1, got {np.trace(A)}")
        if np.min(np.linalg.eigvalsh(A)) < -1e-12:
            raise FixtureError("matrix must be nonnegative definite")
        A.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", x, self.matrix, x)

    def kernel_stratum(self, tau: float = TAU_EIG) -> "KernelStratum":
        w, v = np.linalg.eigh(self.matrix)
        small = w < tau
        return KernelStratum(
            m=int(np.count_nonzero(small)),
            kernel_basis=np.ascontiguousarray(v[:, small].T),
            complement_basis=np.ascontiguousarray(v[:, ~small].T),
            eigenvalues=w,
        )


@dataclass(frozen=True)
class KernelStratum:
    """Kernel L of the blow-up matrix and its orthogonal complement."""

    m: int
    kernel_basis: np.ndarray      # shape (m, n), orthonormal rows
    complement_basis: np.ndarray  # shape (n - m, n)
    eigenvalues: np.ndarray

    def __post_init__(self):
        for b in (self.kernel_basis, self.complement_basis):
            if b.size:
                g = b @ b.T
                if np.max(np.abs(g - np.eye(b.shape[0]))) > 1e-10:
                    raise FixtureError("basis not orthonormal")


def polynomial_solution(A: QuadraticBlowup | np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """p(x) = x.Ax/2; solves the obstacle problem globally (Laplacian 1, p >= 0)."""
    if not isinstance(A, QuadraticBlowup):
        A = QuadraticBlowup(np.asarray(A, dtype=float))
    return A


def halfspace_solution(e: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """u(x) = max(e.x, 0)^2 / 2 for a unit vector e; contact set {e.x <= 0}."""
    e = np.asarray(e, dtype=float)
    if abs(np.dot(e, e) - 1.0) > 1e-12:
        raise FixtureError("direction must be a unit vector")

    def u(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        t = np.maximum(x @ e, 0.0)
        return 0.5 * t * t

    return u


# ---------------------------------------------------------------------------
# Homogeneous harmonic polynomials, unit L^2 norm on the unit sphere.
# ---------------------------------------------------------------------------


def _sphere_monomial_integral(dim: int, exponents) -> float:
    """Exact integral of x^alpha over the unit sphere S^{dim-1}."""
    if any(a % 2 for a in exponents):
        return 0.0
    if dim == 2:
        a, b = exponents
        return 2.0 * math.pi * _dfac(a - 1) * _dfac(b - 1) / _dfac(a + b)
    a, b, c = exponents
    return 4.0 * math.pi * _dfac(a - 1) * _dfac(b - 1) * _dfac(c - 1) / _dfac(a + b + c + 1)


def _dfac(k: int) -> float:
    if k <= 0:
        return 1.0
    out = 1.0
    while k > 1:
        out *= k
        k -= 2
    return out


class _Poly:
    """Polynomial as a monomial dict {exponent tuple: coefficient}."""

    def __init__(self, dim: int, terms: dict):
        self.dim = dim
        self.terms = dict(terms)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1], dtype=float)
        for exps, c in self.terms.items():
            t = np.full(x.shape[:-1], c)
            for a, p in enumerate(exps):
                if p:
                    t = t * x[..., a] ** p
            out = out + t
        return out

    def sphere_norm(self) -> float:
        s = 0.0
        items = list(self.terms.items())
        for e1, c1 in items:
            for e2, c2 in items:
                s += c1 * c2 * _sphere_monomial_integral(
                    self.dim, tuple(a + b for a, b in zip(e1, e2)))
        return math.sqrt(s)

    def scaled(self, factor: float) -> "_Poly":
        return _Poly(self.dim, {e: c * factor for e, c in self.terms.items()})


def _complex_power_terms(k: int, kind: int) -> dict:
    """Monomials of Re (x+iy)^k (kind 0) or Im (x+iy)^k (kind 1)."""
    terms = {}
    for j in range(k + 1):
        coef = math.comb(k, j)
        r = j % 4
        if kind == 0:
            c = coef if r == 0 else (-coef if r == 2 else 0)
        else:
            c = coef if r == 1 else (-coef if r == 3 else 0)
        if c:
            terms[(k - j, j)] = float(c)
    return terms


_SOLID_3D = {
    2: [
        {(1, 1, 0): 1.0},                                  # xy
        {(0, 1, 1): 1.0},                                  # yz
        {(1, 0, 1): 1.0},                                  # zx
        {(2, 0, 0): 1.0, (0, 2, 0): -1.0},                 # x^2 - y^2
        {(0, 0, 2): 2.0, (2, 0, 0): -1.0, (0, 2, 0): -1.0},  # 2z^2 - x^2 - y^2
    ],
    3: [
        {(0, 0, 3): 2.0, (2, 0, 1): -3.0, (0, 2, 1): -3.0},  # z(2z^2-3x^2-3y^2)
        {(1, 0, 2): 4.0, (3, 0, 0): -1.0, (1, 2, 0): -1.0},  # x(4z^2-x^2-y^2)
        {(0, 1, 2): 4.0, (0, 3, 0): -1.0, (2, 1, 0): -1.0},  # y(4z^2-x^2-y^2)
        {(2, 0, 1): 1.0, (0, 2, 1): -1.0},                   # z(x^2-y^2)
        {(1, 1, 1): 1.0},                                    # xyz
        {(3, 0, 0): 1.0, (1, 2, 0): -3.0},                   # x(x^2-3y^2)
        {(0, 3, 0): -1.0, (2, 1, 0): 3.0},                   # y(3x^2-y^2)
    ],
}


def homogeneous_harmonic(dim: int, degree: int, index: int = 0) -> Callable[[np.ndarray], np.ndarray]:
    """Harmonic polynomial of exact homogeneity ``degree``, unit L^2 norm on
    the unit sphere.

    2D: index 0 is the cos-type Re (x+iy)^k / sqrt(pi), index 1 the sin type,
    any k >= 1.  3D: degrees 2 and 3 only (5 and 7 basis elements).
    """
    if degree < 1:
        raise FixtureError("degree must be >= 1")
    if dim == 2:
        if index not in (0, 1):
            raise FixtureError("2D index must be 0 (cos) or 1 (sin)")
        poly = _Poly(2, _complex_power_terms(degree, index))
    elif dim == 3:
        if degree not in _SOLID_3D:
            raise FixtureError(f"3D harmonics provided for degrees 2 and 3 only, got {degree}")
        basis = _SOLID_3D[degree]
        if not 0 <= index < len(basis):
            raise FixtureError(f"index out of range for (dim 3, degree {degree}): {index}")
        poly = _Poly(3, basis[index])
    else:
        raise FixtureError(f"unsupported dimension {dim}")
    return poly.scaled(1.0 / poly.sphere_norm())


# ---------------------------------------------------------------------------
# Admissible frequency sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdmissibleFrequencySet:
    """Possible vanishing orders of u - p at a singular point of stratum m.

    For m <= n-2 the set is the integers {2, 3, 4, ...}.  For n = 2, m = 1 it
    is {3, 4, 5, ...} together with the half-integers 7/2, 11/2, 15/2, ...
    """

    dim: int
    stratum: int

    def __post_init__(self):
        if not (0 <= self.stratum <= self.dim - 1):
            raise FixtureError("stratum must satisfy 0 <= m <= n-1")
        if self.stratum == self.dim - 1 and self.dim != 2:
            raise FixtureError(
                "admissible set for the top stratum is only enumerated for n = 2")

    def distance(self, lam: float) -> float:
        if lam < 2.0:
            raise FixtureError("frequency must be >= 2")
        if self.stratum <= self.dim - 2:
            # integers >= 2
            return min(abs(lam - max(2, round(lam))), abs(lam - 2))
        # n = 2, m = 1: integers >= 3 plus 7/2 + 2j
        d_int = abs(lam - max(3, round(lam)))
        j = max(0, round((lam - 3.5) / 2.0))
        d_half = min(abs(lam - (3.5 + 2.0 * j)), abs(lam - (3.5 + 2.0 * max(0, j - 1))))
        return min(d_int, d_half)


def admissible_set_distance(dim: int, stratum: int, lam: float) -> float:
    """Distance from ``lam`` to the admissible frequency set for (n, m)."""
    return AdmissibleFrequencySet(dim, stratum).distance(lam)


# ---------------------------------------------------------------------------
# Named fixtures for the experiment harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Fixture:
    """A named pointwise function with optional known blow-up data."""

    name: str
    dim: int
    func: Callable[[np.ndarray], np.ndarray]
    kind: str                      # "regular" | "singular" | "other"
    matrix: np.ndarray | None = None
    direction: np.ndarray | None = None
    frequency: float | None = None

    def __call__(self, x):
        return self.func(x)


def _rotation2(deg: float) -> np.ndarray:
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s], [s, c]])


def _perturbed_quadratic(A: np.ndarray, degree: int, coef: float, index: int = 0):
    p = QuadraticBlowup(A)
    q = homogeneous_harmonic(A.shape[0], degree, index)

    def u(x):
        return p(x) + coef * q(x)

    return u


def _segment_lens(c: float = 0.08, s: float = 0.7):
    """Boundary data whose solution develops a contact segment on the
    x2-axis: A = diag(1, 0) quadratic minus a harmonic dipping below zero on
    a compact piece of the kernel line."""

    def u(x):
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., 0], x[..., 1]
        harm = s * s * (x2 ** 2 - x1 ** 2) - (x2 ** 4 - 6.0 * x1 ** 2 * x2 ** 2 + x1 ** 4)
        return 0.5 * x1 ** 2 - c * harm

    return u


def get_fixture(name: str) -> Fixture:
    """Resolve a fixture id.

    Parametric families: ``halfspace-e<k>``, ``halfspace-deg<angle>``,
    ``poly-diag-<a>-<b>[-<c>]``, ``poly-rot-<a>-<b>-<deg>`` (2D).
    Named: ``zero``, ``singular-cubic``, ``singular-quartic``,
    ``singular-quintic``, ``segment-lens``.
    """
    m = re.fullmatch(r"halfspace-e(\d)", name)
    if m:
        k = int(m.group(1))
        if k not in (1, 2, 3):
            raise FixtureError(f"bad axis in fixture {name!r}")
        dim = 2 if k <= 2 else 3
        e = np.zeros(dim)
        e[k - 1] = 1.0
        return Fixture(name, dim, halfspace_solution(e), "regular", direction=e)
    m = re.fullmatch(r"halfspace-deg(-?\d+(?:\.\d+)?)", name)
    if m:
        t = math.radians(float(m.group(1)))
        e = np.array([math.cos(t), math.sin(t)])
        return Fixture(name, 2, halfspace_solution(e), "regular", direction=e)
    m = re.fullmatch(r"poly-diag-([\d.]+)-([\d.]+)(?:-([\d.]+))?", name)
    if m:
        diag = [float(g) for g in m.groups() if g is not None]
        A = np.diag(diag)
        return Fixture(name, len(diag), polynomial_solution(A), "singular", matrix=A)
    m = re.fullmatch(r"poly-rot-([\d.]+)-([\d.]+)-(-?[\d.]+)", name)
    if m:
        a, b, deg = (float(g) for g in m.groups())
        R = _rotation2(deg)
        A = R @ np.diag([a, b]) @ R.T
        A = 0.5 * (A + A.T)
        return Fixture(name, 2, polynomial_solution(A), "singular", matrix=A)
    if name == "zero":
        return Fixture(name, 2, lambda x: np.zeros(np.asarray(x).shape[:-1]), "other")
    if name == "singular-cubic":
        A = np.diag([0.6, 0.4])
        return Fixture(name, 2, _perturbed_quadratic(A, 3, 0.1), "singular",
                       matrix=A, frequency=3.0)
    if name == "singular-cubic-rot":
        R = _rotation2(30.0)
        A = R @ np.diag([0.3, 0.7]) @ R.T
        A = 0.5 * (A + A.T)
        return Fixture(name, 2, _perturbed_quadratic(A, 3, 0.08, index=1), "singular",
                       matrix=A, frequency=3.0)
    if name == "singular-quartic":
        # sin-type quartic: the five-point stencil is exact on it, so the
        # solved field reproduces the sample to solver tolerance
        A = np.diag([0.5, 0.5])
        return Fixture(name, 2, _perturbed_quadratic(A, 4, 0.08, index=1), "singular",
                       matrix=A, frequency=4.0)
    if name == "singular-quintic":
        A = np.diag([0.4, 0.6])
        return Fixture(name, 2, _perturbed_quadratic(A, 5, 0.04), "singular",
                       matrix=A, frequency=5.0)
    if name == "segment-lens":
        A = np.diag([1.0, 0.0])
        return Fixture(name, 2, _segment_lens(), "singular", matrix=A)
    raise FixtureError(f"unknown fixture {name!r}")
