"""Free-boundary extraction and point classification by blow-up fitting.

A free-boundary point is classified by least squares of the rescaled field
r^-2 u(x0 + r w) over sphere samples against the two blow-up models:

    regular:  max(e.w, 0)^2 / 2   over unit directions e,
    singular: w.Aw / 2            over symmetric A with tr A = 1.

Singular points get a stratum (kernel dimension of A), a vanishing-order
estimate lambda_* from the radial profile (log-slope of H and plateau of
the frequency), and a generic/anomalous label (anomalous iff lambda_* is
below 3 by more than the threshold slack).

The 2D fitting pipeline is exactly equivariant under grid rotations (axis
permutations and sign flips): direction tables are built by symmetry from
one octant, reductions use exact summation, small least-squares systems are
solved in closed form, and the direction refinement is a Newton iteration
in the offset from the best table candidate (starting at offset zero).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fixtures import QuadraticBlowup, KernelStratum, TAU_EIG
from .grid import GridField, interpolate, circle_directions, _default_directions
from .monotonicity import RadialProfile, radial_profile
from .solver import contact_threshold

__all__ = [
    "PointClassification",
    "FrequencyEstimate",
    "ThirdOrderFit",
    "ClassifyConfig",
    "contact_mask",
    "free_boundary_points",
    "fit_blowup",
    "estimate_frequency",
    "classify_point",
    "density_exponent",
    "third_order_fit",
    "TAU_ANOMALOUS",
]

# Label anomalous iff lambda_* < 3 - TAU_ANOMALOUS: separates the dichotomy
# (< 3 versus >= 3) beyond estimator noise.
TAU_ANOMALOUS = 0.1

# Residual threshold beyond which neither blow-up model is accepted.
UNRESOLVED_RESIDUAL = 0.2


class ClassifyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Contact set and free boundary
# ---------------------------------------------------------------------------


def contact_mask(u: GridField, eps_c: float | None = None) -> np.ndarray:
    """Boolean node mask of {u <= eps_c}; default threshold 0.1 h^2."""
    eps = contact_threshold(u.h) if eps_c is None else eps_c
    return u.values <= eps


def free_boundary_points(mask: np.ndarray, field_like: GridField) -> np.ndarray:
    """Midpoints of faces separating marked from unmarked cells.

    Returns an array of points, empty when the mask is uniform.
    """
    if mask.shape != field_like.extents:
        raise ClassifyError("mask shape does not match the field")
    if not mask.any() or mask.all():
        return np.empty((0, field_like.dim))
    h = field_like.h
    pts = []
    for a in range(mask.ndim):
        lo = [slice(None)] * mask.ndim
        hi = [slice(None)] * mask.ndim
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        cut = mask[tuple(lo)] ^ mask[tuple(hi)]
        idx = np.argwhere(cut).astype(float)
        if idx.size == 0:
            continue
        coords = field_like.domain.lower + (idx + 0.5) * h
        coords[:, a] += 0.5 * h
        pts.append(coords)
    if not pts:
        return np.empty((0, field_like.dim))
    return np.vstack(pts)


# ---------------------------------------------------------------------------
# Blow-up fitting
# ---------------------------------------------------------------------------


def _dot2(ax, ay, bx, by):
    # two-term dot: products commute pairwise under coordinate swaps
    return ax * bx + ay * by


def _wsum(w: np.ndarray, v: np.ndarray) -> float:
    return math.fsum((w * v).tolist())


def _traceless_basis(dim: int) -> list[np.ndarray]:
    if dim == 2:
        inv = 1.0 / math.sqrt(2.0)
        return [np.array([[inv, 0.0], [0.0, -inv]]),
                np.array([[0.0, inv], [inv, 0.0]])]
    inv2 = 1.0 / math.sqrt(2.0)
    inv6 = 1.0 / math.sqrt(6.0)
    basis = [
        np.diag([inv2, -inv2, 0.0]),
        np.diag([inv6, inv6, -2.0 * inv6]),
    ]
    for i in range(3):
        for j in range(i + 1, 3):
            B = np.zeros((3, 3))
            B[i, j] = B[j, i] = inv2
            basis.append(B)
    return basis


def _fit_quadratic(dirs: np.ndarray, w: np.ndarray, y: np.ndarray):
    """Weighted LSQ of y against w.Aw/2, A symmetric, tr A = 1 eliminated."""
    dim = dirs.shape[1]
    basis = _traceless_basis(dim)
    base = 1.0 / (2.0 * dim)
    feats = [0.5 * np.einsum("ij,jk,ik->i", dirs, B, dirs) for B in basis]
    resid0 = y - base
    if dim == 2:
        # closed-form 2x2 normal equations (exact sign symmetry under the
        # dihedral group keeps classification bit-equivariant)
        m11 = _wsum(w, feats[0] * feats[0])
        m22 = _wsum(w, feats[1] * feats[1])
        m12 = _wsum(w, feats[0] * feats[1])
        b1 = _wsum(w, resid0 * feats[0])
        b2 = _wsum(w, resid0 * feats[1])
        det = m11 * m22 - m12 * m12
        c = [(b1 * m22 - m12 * b2) / det, (m11 * b2 - m12 * b1) / det]
    else:
        M = np.array([[_wsum(w, fi * fj) for fj in feats] for fi in feats])
        b = np.array([_wsum(w, resid0 * fi) for fi in feats])
        c = np.linalg.solve(M, b)
    A = np.eye(dim) / dim
    for ck, B in zip(c, basis):
        A = A + ck * B
    model = np.full_like(y, base)
    for ck, f in zip(c, feats):
        model = model + ck * f
    return A, model


def _halfspace_model(dirs: np.ndarray, e: np.ndarray) -> np.ndarray:
    t = np.maximum(dirs @ e, 0.0)
    return 0.5 * t * t


_E_CANDIDATES_2D = 720


def _fit_halfspace_2d(dirs: np.ndarray, w: np.ndarray, y: np.ndarray):
    cands = circle_directions(_E_CANDIDATES_2D)
    dx, dy = dirs[:, 0], dirs[:, 1]
    best_j = 0
    best_sse = math.inf
    for j in range(cands.shape[0]):
        t = np.maximum(_dot2(dx, dy, cands[j, 0], cands[j, 1]), 0.0)
        r = y - 0.5 * t * t
        sse = _wsum(w, r * r)
        if sse < best_sse:
            best_sse = sse
            best_j = j
    e0 = cands[best_j]
    ep = np.array([-e0[1], e0[0]])
    # Newton in the angular offset s from the candidate, starting at s = 0
    a = _dot2(dx, dy, e0[0], e0[1])
    b = _dot2(dx, dy, ep[0], ep[1])
    s = 0.0
    for _ in range(10):
        cs, sn = math.cos(s), math.sin(s)
        t = a * cs + b * sn
        tp = -a * sn + b * cs
        pos = t > 0.0
        r = y - np.where(pos, 0.5 * t * t, 0.0)
        # SSE derivatives: g = -2 sum w r t t',  g' = 2 sum w (t^2 t'^2 - r t'^2 + r t^2)
        g = -2.0 * _wsum(w, np.where(pos, r * t * tp, 0.0))
        gg = 2.0 * _wsum(w, np.where(pos, t * t * tp * tp - r * tp * tp + r * t * t, 0.0))
        if gg <= 0.0 or not math.isfinite(gg):
            break
        step = g / gg
        step = max(-math.pi / _E_CANDIDATES_2D, min(math.pi / _E_CANDIDATES_2D, step))
        s = s - step
    cs, sn = math.cos(s), math.sin(s)
    e = np.array([e0[0] * cs + ep[0] * sn, e0[1] * cs + ep[1] * sn])
    model = _halfspace_model(dirs, e)
    return e, model


def _spiral_directions(n: int = 1024) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = math.pi * (1.0 + math.sqrt(5.0)) * i
    s = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)


def _fit_halfspace_3d(dirs: np.ndarray, w: np.ndarray, y: np.ndarray):
    cands = _spiral_directions(1024)
    models = np.maximum(dirs @ cands.T, 0.0)
    sse = ((y[:, None] - 0.5 * models ** 2) ** 2 * w[:, None]).sum(axis=0)
    e = cands[int(np.argmin(sse))]
    # Gauss-Newton in the tangent plane, offset from the candidate
    for _ in range(10):
        t1 = np.array([-e[1], e[0], 0.0])
        n1 = np.linalg.norm(t1)
        if n1 < 1e-12:
            t1 = np.array([1.0, 0.0, 0.0])
        else:
            t1 = t1 / n1
        t2 = np.cross(e, t1)
        t = np.maximum(dirs @ e, 0.0)
        r = y - 0.5 * t * t
        J1 = t * (dirs @ t1)
        J2 = t * (dirs @ t2)
        g = np.array([np.sum(w * r * J1), np.sum(w * r * J2)])
        Hm = np.array([[np.sum(w * J1 * J1), np.sum(w * J1 * J2)],
                       [np.sum(w * J1 * J2), np.sum(w * J2 * J2)]])
        try:
            step = np.linalg.solve(Hm, g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        step = np.clip(step, -0.1, 0.1)
        e = e + step[0] * t1 + step[1] * t2
        e = e / np.linalg.norm(e)
    return e, _halfspace_model(dirs, e)


@dataclass
class BlowupFit:
    kind: str                      # "regular" | "singular" | "unresolved"
    e: np.ndarray | None
    A: np.ndarray | None
    residual_halfspace: float
    residual_quadratic: float
    r_fit: float
    reason: str | None = None


def fit_blowup(u: GridField, x0, r_fit: float,
               tie_density: float | None = None) -> BlowupFit:
    """Least squares of r^-2 u(x0 + r w) over sphere samples against both
    blow-up models; returns the winning model and both relative residuals.

    When the residuals are within 10% of each other the contact density in
    B_r(x0) breaks the tie: half-space density is 1/2, singular density
    decays.  ``tie_density`` supplies that density (computed by the caller);
    without it, ties go to unresolved.
    """
    x0 = np.asarray(x0, dtype=float)
    dirs, wq = _default_directions(u.dim)
    pts = x0 + r_fit * dirs
    y = interpolate(u, pts) / (r_fit * r_fit)
    norm = math.sqrt(max(_wsum(wq, y * y), 1e-300))
    A, model_q = _fit_quadratic(dirs, wq, y)
    rq = y - model_q
    res_q = math.sqrt(_wsum(wq, rq * rq)) / norm
    if u.dim == 2:
        e, model_h = _fit_halfspace_2d(dirs, wq, y)
    else:
        e, model_h = _fit_halfspace_3d(dirs, wq, y)
    rh = y - model_h
    res_h = math.sqrt(_wsum(wq, rh * rh)) / norm
    if min(res_h, res_q) > UNRESOLVED_RESIDUAL:
        return BlowupFit("unresolved", None, None, res_h, res_q, r_fit,
                         "both model residuals above threshold")
    if abs(res_h - res_q) <= 0.1 * max(res_h, res_q):
        if tie_density is None:
            return BlowupFit("unresolved", e, A, res_h, res_q, r_fit,
                             "model residuals tied, no density available")
        if 0.3 <= tie_density <= 0.7:
            return BlowupFit("regular", e, None, res_h, res_q, r_fit)
        if tie_density < 0.1:
            return BlowupFit("singular", None, A, res_h, res_q, r_fit)
        return BlowupFit("unresolved", e, A, res_h, res_q, r_fit,
                         f"residuals tied, ambiguous density {tie_density}")
    if res_h < res_q:
        return BlowupFit("regular", e, None, res_h, res_q, r_fit)
    return BlowupFit("singular", None, A, res_h, res_q, r_fit)


# ---------------------------------------------------------------------------
# Frequency estimation
# ---------------------------------------------------------------------------


@dataclass
class FrequencyEstimate:
    value: float
    method: str                    # "slope" | "plateau" | "combined"
    window: tuple[float, float]
    residual: float
    disagreement: float
    slope: float
    plateau: float

    def __post_init__(self):
        if self.value < 2.0 - 0.1:
            raise ClassifyError(
                f"frequency estimate {self.value} below the lower bound 2 "
                "(vanishing order of u - p at a singular point is at least 2)")

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "method": self.method,
            "window": list(self.window),
            "residual": self.residual,
            "disagreement": self.disagreement,
        }


# combined estimate is flagged unresolved when the two methods disagree by
# more than this
FREQ_DISAGREE = 0.2

# window of the fit: radii within one decade of the smallest valid radius
FREQ_DECADE = 10.0


def estimate_frequency(u: GridField, p: QuadraticBlowup | np.ndarray | None,
                       x0, profile: RadialProfile | None = None,
                       window: tuple[float, float] | None = None) -> FrequencyEstimate:
    """lambda_* over the smallest reliable decade of the profile.

    slope method: least-squares slope of log H versus log r, divided by 2.
    plateau method: mean of the frequency phi over the same window.
    combined: plateau, unless the two disagree by more than 0.2.
    """
    if profile is None:
        if not isinstance(p, QuadraticBlowup) and p is not None:
            p = QuadraticBlowup(np.asarray(p, dtype=float))
        profile = radial_profile(u, p, x0, with_weiss=False)
    valid = profile.valid.copy()
    if window is not None:
        valid &= (profile.radii >= window[0]) & (profile.radii <= window[1])
    if int(valid.sum()) < 8:
        raise ClassifyError(f"window too short: {int(valid.sum())} valid rows, need 8")
    r = profile.radii[valid]
    r_lo = r.min()
    sel = r <= FREQ_DECADE * r_lo
    r_win = r[sel]
    H = profile.column("H")[valid][sel]
    phi = profile.column("phi")[valid][sel]
    logr = np.log(r_win)
    logh = np.log(np.maximum(H, 1e-300))
    n = len(r_win)
    mx = logr.mean()
    my = logh.mean()
    sxx = float(np.sum((logr - mx) ** 2))
    slope = float(np.sum((logr - mx) * (logh - my)) / sxx) / 2.0
    fitted = my + 2.0 * slope * (logr - mx)
    residual = float(np.sqrt(np.mean((logh - fitted) ** 2)))
    plateau = float(np.mean(phi))
    disagreement = abs(slope - plateau)
    if disagreement <= FREQ_DISAGREE:
        return FrequencyEstimate(plateau, "combined", (float(r_win.min()), float(r_win.max())),
                                 residual, disagreement, slope, plateau)
    return FrequencyEstimate(plateau, "plateau", (float(r_win.min()), float(r_win.max())),
                             residual, disagreement, slope, plateau)


# ---------------------------------------------------------------------------
# Point classification
# ---------------------------------------------------------------------------


@dataclass
class ClassifyConfig:
    r_fit: float | None = None           # default: smallest reliable profile radius
    r_max: float | None = None
    r_min: float | None = None
    window: tuple[float, float] | None = None
    tau_eig: float = TAU_EIG
    tau_anomalous: float = TAU_ANOMALOUS
    eps_c: float | None = None


@dataclass
class PointClassification:
    x0: np.ndarray
    kind: str                            # "regular" | "singular" | "unresolved"
    e: np.ndarray | None = None
    blowup: QuadraticBlowup | None = None
    stratum: KernelStratum | None = None
    frequency: FrequencyEstimate | None = None
    label: str | None = None             # "generic" | "anomalous"
    residuals: dict | None = None
    reason: str | None = None

    def to_dict(self) -> dict:
        out: dict = {
            "x0": [float(v) for v in self.x0],
            "kind": self.kind,
            "residuals": self.residuals,
        }
        out["e"] = None if self.e is None else [float(v) for v in self.e]
        out["A"] = None if self.blowup is None else [
            [float(v) for v in row] for row in self.blowup.matrix]
        out["m"] = None if self.stratum is None else self.stratum.m
        out["lambda_star"] = None if self.frequency is None else self.frequency.to_dict()
        out["label"] = self.label
        out["reason"] = self.reason
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def classify_point(u: GridField, x0, config: ClassifyConfig | None = None) -> PointClassification:
    """Classify a free-boundary point: blow-up fit at the smallest reliable
    radius, stratum from the fitted matrix, frequency estimate and
    generic/anomalous label for singular points."""
    cfg = config or ClassifyConfig()
    x0 = np.asarray(x0, dtype=float)
    try:
        profile = radial_profile(u, None, x0, r_max=cfg.r_max, r_min=cfg.r_min,
                                 with_weiss=False, eps_c=cfg.eps_c)
    except Exception as exc:
        return PointClassification(x0, "unresolved", reason=f"profile failed: {exc}")
    valid_r = profile.radii[profile.valid]
    if valid_r.size == 0:
        return PointClassification(x0, "unresolved", reason="no valid radii")
    r_fit = cfg.r_fit if cfg.r_fit is not None else float(valid_r.min())
    dens_idx = np.argmin(np.abs(profile.radii - r_fit))
    tie_density = float(profile.column("density")[dens_idx])
    fit = fit_blowup(u, x0, r_fit, tie_density=tie_density)
    residuals = {"halfspace": fit.residual_halfspace, "quadratic": fit.residual_quadratic,
                 "r_fit": r_fit}
    if fit.kind == "unresolved":
        return PointClassification(x0, "unresolved", e=fit.e, residuals=residuals,
                                   reason=fit.reason)
    if fit.kind == "regular":
        return PointClassification(x0, "regular", e=fit.e, residuals=residuals)
    A = _project_blowup(fit.A)
    stratum = A.kernel_stratum(cfg.tau_eig)
    try:
        prof_w = radial_profile(u, A, x0, r_max=cfg.r_max, r_min=cfg.r_min,
                                with_weiss=False, eps_c=cfg.eps_c)
        freq = estimate_frequency(u, A, x0, profile=prof_w, window=cfg.window)
    except ClassifyError as exc:
        return PointClassification(x0, "unresolved", blowup=A, stratum=stratum,
                                   residuals=residuals, reason=str(exc))
    if freq.disagreement > FREQ_DISAGREE:
        return PointClassification(x0, "unresolved", blowup=A, stratum=stratum,
                                   frequency=freq, residuals=residuals,
                                   reason=f"frequency methods disagree by {freq.disagreement:.3f}")
    label = "anomalous" if freq.value < 3.0 - cfg.tau_anomalous else "generic"
    return PointClassification(x0, "singular", blowup=A, stratum=stratum,
                               frequency=freq, label=label, residuals=residuals)


def _project_blowup(A: np.ndarray) -> QuadraticBlowup:
    """Symmetrize, clip tiny negative eigenvalues, renormalize the trace."""
    A = 0.5 * (A + A.T)
    w, v = np.linalg.eigh(A)
    w = np.maximum(w, 0.0)
    A = (v * w) @ v.T
    A = A / np.trace(A)
    A = 0.5 * (A + A.T)
    return QuadraticBlowup(A)


# ---------------------------------------------------------------------------
# Density exponent
# ---------------------------------------------------------------------------


def density_exponent(u: GridField, x0, profile: RadialProfile | None = None) -> float:
    """Log-log slope of the contact density versus r; +inf when the density
    vanishes identically (measure-zero contact set)."""
    if profile is None:
        profile = radial_profile(u, None, x0, with_weiss=False)
    dens = profile.column("density")[profile.valid]
    r = profile.radii[profile.valid]
    pos = dens > 0
    if not pos.any():
        return math.inf
    if int(pos.sum()) < 3:
        raise ClassifyError(f"density column has {int(pos.sum())} nonzero entries, need 3")
    x = np.log(r[pos])
    y = np.log(dens[pos])
    return float(np.polyfit(x, y, 1)[0])


# ---------------------------------------------------------------------------
# Third-order fit (2D)
# ---------------------------------------------------------------------------


@dataclass
class ThirdOrderFit:
    coefficient: float                   # against the unit-norm constrained cubic
    axis: np.ndarray                     # unit vector spanning the kernel line L
    radii: np.ndarray
    h3: np.ndarray
    worst_slope: float
    residual: float
    flagged: bool
    r_fit: float

    def q_values(self, pts: np.ndarray, x0) -> np.ndarray:
        return self.coefficient * _constrained_cubic(pts - np.asarray(x0), self.axis)


def _constrained_cubic(x: np.ndarray, axis: np.ndarray) -> np.ndarray:
    """Unit-L2-norm 3-homogeneous harmonic vanishing on the line spanned by
    ``axis``: (xi^3 - 3 xi eta^2)/sqrt(pi) in coordinates where xi is the
    direction orthogonal to the line."""
    perp = np.array([axis[1], -axis[0]])
    xi = x[..., 0] * perp[0] + x[..., 1] * perp[1]
    eta = x[..., 0] * axis[0] + x[..., 1] * axis[1]
    return (xi ** 3 - 3.0 * xi * eta * eta) / math.sqrt(math.pi)


# radius floor for third-order data: the r^-3 rescaling amplifies O(h^2)
# interpolation error, so the fit radius needs r^2 >> h^2 by a wide margin
THIRD_ORDER_FLOOR_CELLS = 64.0


def third_order_fit(u: GridField, p_star: QuadraticBlowup | np.ndarray, x0,
                    profile: RadialProfile | None = None,
                    r_fit: float | None = None) -> ThirdOrderFit:
    """Fit the third-order blow-up q at a 2D singular point of stratum 1.

    q ranges over the one-dimensional space of 3-homogeneous harmonic
    polynomials vanishing on L = ker A; v = u - p - q then satisfies the
    almost-monotonicity of H_3: its worst negative radial slope is reported.
    """
    if u.dim != 2:
        raise ClassifyError("third-order fits are 2D only")
    if not isinstance(p_star, QuadraticBlowup):
        p_star = QuadraticBlowup(np.asarray(p_star, dtype=float))
    x0 = np.asarray(x0, dtype=float)
    stratum = p_star.kernel_stratum()
    if stratum.m != 1:
        raise ClassifyError(f"third-order fit needs stratum m = 1, got m = {stratum.m}")
    axis = stratum.kernel_basis[0]
    if profile is None:
        profile = radial_profile(u, p_star, x0, with_weiss=False)
    valid_r = profile.radii[profile.valid]
    if valid_r.size == 0:
        raise ClassifyError("no valid radii in profile")
    if r_fit is None:
        floor = THIRD_ORDER_FLOOR_CELLS * u.h
        above = valid_r[valid_r >= floor]
        r_fit = float(above.min()) if above.size else float(valid_r.max())
    dirs, wq = _default_directions(2)
    pts = x0 + r_fit * dirs
    p_nodes = p_star(pts - x0)
    y = (interpolate(u, pts) - p_nodes) / r_fit ** 3
    qb = _constrained_cubic(dirs, axis)
    denom = _wsum(wq, qb * qb)
    coef = _wsum(wq, y * qb) / denom
    resid_vec = y - coef * qb
    norm = math.sqrt(max(_wsum(wq, y * y), 1e-300))
    residual = math.sqrt(max(_wsum(wq, resid_vec * resid_vec), 0.0)) / norm
    flagged = residual > 0.5
    if flagged:
        coef = 0.0
    # v = u - p - q by node subtraction, then the H_3 profile
    nodes = u.node_points()
    v_vals = u.values - np.asarray(p_star(nodes - x0)) - coef * _constrained_cubic(nodes - x0, axis)
    v_field = u.with_values(v_vals)
    radii = profile.radii[profile.valid]
    h3 = np.empty(radii.size)
    from .monotonicity import FieldDiagnostics
    diag = FieldDiagnostics(v_field, None, x0)
    for j, r in enumerate(radii):
        h3[j] = diag.boundary_mass(r) * r ** -6.0
    worst = 0.0
    for j in range(radii.size - 1):
        slope = (h3[j] - h3[j + 1]) / (radii[j] - radii[j + 1])
        worst = min(worst, slope)
    return ThirdOrderFit(coef, axis, radii, h3, worst, residual, flagged, r_fit)
