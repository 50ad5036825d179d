"""Uniform cell-centered grids, fields, interpolation and quadrature.

All diagnostic integrals in this package are built from three primitives:
multilinear interpolation of a nodal field, surface quadrature over spheres
(trapezoidal in 2D, latitude-longitude product rule in 3D) and midpoint cell
sums over balls.  Fields are immutable after construction.

Reductions on the classification-critical paths use ``math.fsum`` and a
sorted corner sum in the interpolator, so that results are invariant under
reorderings induced by axis permutations and sign flips of the input field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "BoxDomain",
    "GridField",
    "SphereSampleSet",
    "build_field",
    "interpolate",
    "sphere_values",
    "sphere_integral",
    "ball_integral",
    "gradient",
    "gradient_squared",
    "circle_directions",
    "sphere_samples",
    "save_field",
    "load_field",
    "field_to_csv",
    "transform_field",
    "RELIABLE_RADIUS_FACTOR",
]

# Radii below this multiple of h are rejected by the quadrature operations:
# interpolation noise dominates the signal there.
RELIABLE_RADIUS_FACTOR = 4.0


class GridError(ValueError):
    """Invalid grid geometry or out-of-range evaluation."""


@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned box in R^2 or R^3."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.ndim != 1 or hi.shape != lo.shape:
            raise GridError("lower/upper must be 1-d vectors of equal length")
        if lo.size not in (2, 3):
            raise GridError(f"dim must be 2 or 3, got {lo.size}")
        if not np.all(hi > lo):
            raise GridError("degenerate box: upper must exceed lower componentwise")
        lo.setflags(write=False)
        hi.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def edges(self) -> np.ndarray:
        return self.upper - self.lower


@dataclass(frozen=True)
class GridField:
    """Scalar field sampled at cell centers of a uniform grid.

    Node multi-index i sits at ``lower + (i + 1/2) h``.  Values are stored in
    C order, axis k of the array corresponding to coordinate k.
    """

    domain: BoxDomain
    h: float
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if self.h <= 0:
            raise GridError("non-positive h")
        expected = _extents(self.domain, self.h)
        if tuple(vals.shape) != tuple(expected):
            raise GridError(
                f"array extent {vals.shape} inconsistent with domain/h (expected {tuple(expected)})"
            )
        if not np.all(np.isfinite(vals)):
            raise GridError("field contains non-finite values")
        vals.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def extents(self) -> tuple[int, ...]:
        return self.values.shape

    def axis_coords(self, axis: int) -> np.ndarray:
        n = self.values.shape[axis]
        return self.domain.lower[axis] + (np.arange(n) + 0.5) * self.h

    def node_mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*[self.axis_coords(a) for a in range(self.dim)], indexing="ij")

    def node_points(self) -> np.ndarray:
        """All node coordinates, shape extents + (dim,)."""
        return np.stack(self.node_mesh(), axis=-1)

    def with_values(self, values: np.ndarray) -> "GridField":
        return GridField(self.domain, self.h, values)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return interpolate(self, points)


def _extents(domain: BoxDomain, h: float) -> tuple[int, ...]:
    ext = []
    for edge in domain.edges:
        n = edge / h
        n_round = round(n)
        if abs(n - n_round) > 1e-9 * max(1.0, n_round):
            raise GridError(f"h={h} does not divide box edge {edge}")
        ext.append(int(n_round))
    return tuple(ext)


def build_field(domain: BoxDomain, h: float, f: Callable[[np.ndarray], np.ndarray]) -> GridField:
    """Sample ``f`` at all cell centers.

    ``f`` receives an array of shape (..., dim) and must return shape (...).
    Each box edge must contain at least 8 cells.
    """
    if h <= 0:
        raise GridError("non-positive h")
    ext = _extents(domain, h)
    if min(ext) < 8:
        raise GridError(f"h={h} yields fewer than 8 cells per edge: {ext}")
    coords = np.meshgrid(
        *[domain.lower[a] + (np.arange(ext[a]) + 0.5) * h for a in range(domain.dim)],
        indexing="ij",
    )
    pts = np.stack(coords, axis=-1)
    vals = np.asarray(f(pts), dtype=float)
    if vals.shape != tuple(ext):
        raise GridError(f"function returned shape {vals.shape}, expected {tuple(ext)}")
    return GridField(domain, h, vals)


def _locate(field: GridField, pts: np.ndarray, check: bool = True):
    pts = np.asarray(pts, dtype=float)
    if pts.shape[-1] != field.dim:
        raise GridError(f"points have dim {pts.shape[-1]}, field has dim {field.dim}")
    lo = field.domain.lower
    hi = field.domain.upper
    h = field.h
    if check:
        bad = np.any(pts < lo + h, axis=-1) | np.any(pts > hi - h, axis=-1)
        if np.any(bad):
            raise GridError(
                f"{int(np.count_nonzero(bad))} point(s) outside interpolation region "
                f"[lower+h, upper-h]"
            )
    t = (pts - (lo + 0.5 * h)) / h
    i0 = np.floor(t).astype(np.int64)
    for a, n in enumerate(field.extents):
        np.clip(i0[..., a], 0, n - 2, out=i0[..., a])
    # both weights by exact subtraction from t (Sterbenz): the weight pair
    # {s, 1-s} is then reproduced bitwise in a mirrored frame
    s = t - i0
    c = (i0 + 1.0) - t
    return i0, s, c


def interpolate(field: GridField, points: np.ndarray, check: bool = True) -> np.ndarray:
    """Multilinear interpolation from the 2^dim surrounding nodes.

    Exact on affine functions.  Points must lie in the domain shrunk by one
    cell on every side.  The 2^dim corner contributions are summed in sorted
    order so the result does not depend on corner enumeration.
    """
    single = np.asarray(points).ndim == 1
    pts = np.atleast_2d(points)
    i0, s, c = _locate(field, pts, check=check)
    d = field.dim
    vals = field.values
    terms = np.empty(pts.shape[:-1] + (2 ** d,), dtype=float)
    for corner in range(2 ** d):
        idx = []
        w = np.ones(pts.shape[:-1], dtype=float)
        for a in range(d):
            bit = (corner >> a) & 1
            idx.append(i0[..., a] + bit)
            w = w * (s[..., a] if bit else c[..., a])
        terms[..., corner] = w * vals[tuple(idx)]
    terms.sort(axis=-1)
    out = np.sum(terms, axis=-1)
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# Sphere quadrature
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SphereSampleSet:
    """Quadrature directions and weights on a sphere around ``center``.

    Weights sum to the surface measure of the unit sphere (2*pi in 2D,
    4*pi in 3D).
    """

    center: np.ndarray
    radius: float
    directions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float)
        d = np.asarray(self.directions, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "weights", w)
        if self.radius <= 0:
            raise GridError("radius must be positive")
        if np.any(w <= 0):
            raise GridError("weights must be positive")
        dim = d.shape[1]
        target = 2.0 * math.pi if dim == 2 else 4.0 * math.pi
        if abs(math.fsum(w.tolist()) - target) > 1e-12 * target:
            raise GridError("quadrature weights do not sum to the sphere measure")
        norms = np.einsum("ij,ij->i", d, d)
        if np.max(np.abs(norms - 1.0)) > 2.5e-12:
            raise GridError("directions are not unit vectors")
        for arr in (c, d, w):
            arr.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.directions.shape[1]

    def points(self) -> np.ndarray:
        return self.center + self.radius * self.directions


def circle_directions(n: int = 256) -> np.ndarray:
    """Equispaced unit vectors on the circle, n a multiple of 8.

    Built from a single octant table so the set is exactly closed under the
    dihedral symmetries (90-degree rotations, axis swaps, sign flips).
    """
    if n % 8 != 0:
        raise GridError("circle direction count must be a multiple of 8")
    q = n // 4
    o = n // 8
    base = np.empty((n, 2), dtype=float)
    ang = 2.0 * math.pi * np.arange(o + 1) / n
    c = np.cos(ang)
    s = np.sin(ang)
    # first octant [0, pi/4], mirrored across the diagonal to fill [0, pi/2]
    base[: o + 1, 0] = c
    base[: o + 1, 1] = s
    base[q - np.arange(o + 1), 0] = s
    base[q - np.arange(o + 1), 1] = c
    # remaining quadrants by exact 90-degree rotations
    first = base[:q].copy()
    base[q : 2 * q, 0] = -first[:, 1]
    base[q : 2 * q, 1] = first[:, 0]
    base[2 * q : 3 * q] = -first
    base[3 * q :, 0] = first[:, 1]
    base[3 * q :, 1] = -first[:, 0]
    return base


def _latlong_directions(n_lat: int = 64, n_lon: int = 128):
    if n_lon % 8 != 0 or n_lat % 2 != 0:
        raise GridError("lat-long rule needs n_lon multiple of 8, n_lat even")
    lon = circle_directions(n_lon)
    theta = (np.arange(n_lat) + 0.5) * math.pi / n_lat  # colatitude midpoints
    sin_t = np.sin(theta[: n_lat // 2])
    cos_t = np.cos(theta[: n_lat // 2])
    sin_t = np.concatenate([sin_t, sin_t[::-1]])
    cos_t = np.concatenate([cos_t, -cos_t[::-1]])  # exact z-flip symmetry
    dirs = np.empty((n_lat * n_lon, 3), dtype=float)
    dirs[:, 0] = np.repeat(sin_t, n_lon) * np.tile(lon[:, 0], n_lat)
    dirs[:, 1] = np.repeat(sin_t, n_lon) * np.tile(lon[:, 1], n_lat)
    dirs[:, 2] = np.repeat(cos_t, n_lon)
    # sin-latitude weights, normalized so the total is exactly 4*pi
    w_lat = sin_t.copy()
    scale = 4.0 * math.pi / (math.fsum(w_lat.tolist()) * n_lon)
    weights = np.repeat(w_lat * scale, n_lon)
    nrm = np.sqrt(np.einsum("ij,ij->i", dirs, dirs))
    dirs /= nrm[:, None]
    return dirs, weights


_DEFAULT_DIRECTIONS: dict = {}


def _default_directions(dim: int):
    if dim not in _DEFAULT_DIRECTIONS:
        if dim == 2:
            d = circle_directions(256)
            w = np.full(d.shape[0], 2.0 * math.pi / d.shape[0])
            _DEFAULT_DIRECTIONS[dim] = (d, w)
        else:
            _DEFAULT_DIRECTIONS[dim] = _latlong_directions(64, 128)
    return _DEFAULT_DIRECTIONS[dim]


def sphere_samples(dim: int, center=None, radius: float = 1.0, n: int | None = None) -> SphereSampleSet:
    """Default quadrature sample set (256 angles in 2D, 64x128 in 3D)."""
    if center is None:
        center = np.zeros(dim)
    if n is None:
        dirs, w = _default_directions(dim)
    elif dim == 2:
        dirs = circle_directions(n)
        w = np.full(n, 2.0 * math.pi / n)
    else:
        dirs, w = _latlong_directions(n, 2 * n)
    return SphereSampleSet(np.asarray(center, dtype=float), radius, dirs, w)


def sphere_values(field: GridField, x0, rho: float, samples: SphereSampleSet | None = None,
                  check_radius: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Field values and quadrature weights at points of the sphere dB_rho(x0)."""
    x0 = np.asarray(x0, dtype=float)
    if check_radius and rho < RELIABLE_RADIUS_FACTOR * field.h:
        raise GridError(f"radius {rho} below reliable floor {RELIABLE_RADIUS_FACTOR}h = "
                        f"{RELIABLE_RADIUS_FACTOR * field.h}")
    if samples is None:
        dirs, w = _default_directions(field.dim)
    else:
        dirs, w = samples.directions, samples.weights
    pts = x0 + rho * dirs
    vals = interpolate(field, pts)
    return vals, w


def sphere_integral(field: GridField, x0, rho: float, samples: SphereSampleSet | None = None) -> float:
    """Surface integral of the field over dB_rho(x0).

    Returns rho^(dim-1) * sum(weights * field(x0 + rho * direction)).
    Requires rho >= 4h and the sphere inside the interpolation region.
    """
    vals, w = sphere_values(field, x0, rho, samples)
    return rho ** (field.dim - 1) * math.fsum((w * vals).tolist())


def ball_integral(field: GridField, x0, rho: float, partial_cells: bool = False) -> float:
    """Volume integral of the field over B_rho(x0) by midpoint cell sums.

    Cells are counted by their centers; ``partial_cells=True`` weights rim
    cells by an estimated cut fraction (off by default; diagnostics consume
    ratios of such integrals at equal rho, where the O(h) rim error largely
    cancels).
    """
    x0 = np.asarray(x0, dtype=float)
    h = field.h
    if rho < RELIABLE_RADIUS_FACTOR * h:
        raise GridError(f"radius {rho} below reliable floor {RELIABLE_RADIUS_FACTOR}h")
    if np.any(x0 - rho < field.domain.lower) or np.any(x0 + rho > field.domain.upper):
        raise GridError("ball leaves the domain")
    dist2 = np.zeros(field.extents, dtype=float)
    for a in range(field.dim):
        c = field.axis_coords(a) - x0[a]
        shape = [1] * field.dim
        shape[a] = -1
        dist2 = dist2 + (c ** 2).reshape(shape)
    if partial_cells:
        dist = np.sqrt(dist2)
        frac = np.clip(0.5 + (rho - dist) / h, 0.0, 1.0)
        total = float(np.sum(frac * field.values))
    else:
        total = float(np.sum(field.values[dist2 <= rho * rho]))
    return total * h ** field.dim


def ball_node_mask(field: GridField, x0, rho: float) -> np.ndarray:
    """Boolean array marking nodes with |x - x0| <= rho."""
    x0 = np.asarray(x0, dtype=float)
    dist2 = np.zeros(field.extents, dtype=float)
    for a in range(field.dim):
        c = field.axis_coords(a) - x0[a]
        shape = [1] * field.dim
        shape[a] = -1
        dist2 = dist2 + (c ** 2).reshape(shape)
    return dist2 <= rho * rho


def gradient(field: GridField) -> tuple[GridField, ...]:
    """Componentwise gradient, centered in the interior and one-sided at the
    boundary layer.  Exact on affine fields."""
    for n in field.extents:
        if n < 3:
            raise GridError("gradient needs at least 3 nodes per axis")
    grads = np.gradient(field.values, field.h, edge_order=1)
    if field.dim == 1:
        grads = [grads]
    return tuple(field.with_values(g) for g in grads)


def gradient_squared(field: GridField) -> GridField:
    """|grad u|^2 as a nodal field."""
    comps = gradient(field)
    out = np.zeros(field.extents, dtype=float)
    for g in comps:
        out += g.values ** 2
    return field.with_values(out)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_field(field: GridField, path) -> None:
    """Flat binary layout: int64 dim, int64 extents[dim], float64 lower[dim],
    float64 h, float64 values row-major.  Little-endian."""
    with open(path, "wb") as fh:
        np.asarray([field.dim], dtype="<i8").tofile(fh)
        np.asarray(field.extents, dtype="<i8").tofile(fh)
        np.asarray(field.domain.lower, dtype="<f8").tofile(fh)
        np.asarray([field.h], dtype="<f8").tofile(fh)
        np.ascontiguousarray(field.values, dtype="<f8").tofile(fh)


def load_field(path) -> GridField:
    with open(path, "rb") as fh:
        dim = int(np.fromfile(fh, dtype="<i8", count=1)[0])
        ext = np.fromfile(fh, dtype="<i8", count=dim).astype(int)
        lower = np.fromfile(fh, dtype="<f8", count=dim)
        h = float(np.fromfile(fh, dtype="<f8", count=1)[0])
        vals = np.fromfile(fh, dtype="<f8", count=int(np.prod(ext))).reshape(tuple(ext))
    upper = lower + ext * h
    return GridField(BoxDomain(lower, upper), h, vals)


def field_to_csv(field: GridField, path) -> None:
    """Debug dump, one row per node: coordinates then value."""
    pts = field.node_points().reshape(-1, field.dim)
    vals = field.values.reshape(-1)
    names = ["x", "y", "z"][: field.dim]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(names + ["value"]) + "\n")
        for row, v in zip(pts, vals):
            fh.write(",".join(f"{c:.17g}" for c in row) + f",{v:.17g}\n")


# ---------------------------------------------------------------------------
# Grid-exact transforms (axis permutations and sign flips), used to check
# equivariance of downstream classification.
# ---------------------------------------------------------------------------


def transform_field(field: GridField, perm: Sequence[int], signs: Sequence[int]) -> GridField:
    """Field of x -> field(R^-1 x) where R permutes axes by ``perm`` and then
    flips signs by ``signs``.  Requires each flipped/permuted axis pair to
    have matching symmetric geometry (e.g. a box symmetric about 0)."""
    perm = list(perm)
    signs = list(signs)
    vals = np.transpose(field.values, axes=perm)
    lo = field.domain.lower[perm]
    hi = field.domain.upper[perm]
    for a, s in enumerate(signs):
        if s < 0:
            vals = np.flip(vals, axis=a)
            lo_a, hi_a = -hi[a], -lo[a]
            lo[a], hi[a] = lo_a, hi_a
    return GridField(BoxDomain(lo, hi), field.h, np.ascontiguousarray(vals))
