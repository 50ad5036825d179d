"""Discrete obstacle-problem solvers.

Solves the linear complementarity system

    u >= 0,   L u <= k w,   u (L u - k w) = 0

where L is the conservative five/seven-point discretization of
div(r^a grad .) on a cell-centered grid (a = 0 gives the Laplacian; a >= 1
is the weighted operator for axisymmetric runs, acting on the last
coordinate named r).  Dirichlet data is imposed on ghost nodes half a cell
outside the boundary; faces with zero weight (the r = 0 line for a >= 1)
carry no boundary condition.

Two solvers share the stencil: projected SOR with red-black sweeps, and a
primal active-set method whose inner Dirichlet problems are solved by a
sparse direct factorization.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import BoxDomain, GridField

__all__ = [
    "ObstacleProblemSpec",
    "SolveReport",
    "Stencil",
    "assemble_stencil",
    "apply_operator",
    "solve_psor",
    "solve_active_set",
    "complementarity_check",
    "contact_threshold",
]

DEFAULT_TOL = 1e-10


class SolverError(RuntimeError):
    pass


def contact_threshold(h: float) -> float:
    """Threshold separating contact nodes from genuinely positive values.

    u grows quadratically off the contact set, so true positive values one
    cell away exceed c h^2; 0.1 h^2 separates the scales.
    """
    return 0.1 * h * h


@dataclass(frozen=True)
class ObstacleProblemSpec:
    """Data of one discrete obstacle problem."""

    domain: BoxDomain
    h: float
    g: Callable[[np.ndarray], np.ndarray]
    weight_exponent: float = 0.0
    k: float = 1.0

    def __post_init__(self):
        if self.h <= 0:
            raise SolverError("non-positive h")
        if self.k <= 0:
            raise SolverError("forcing coefficient k must be positive")
        if self.weight_exponent < 0:
            raise SolverError("weight exponent must be >= 0")
        if self.weight_exponent > 0 and self.domain.dim != 2:
            raise SolverError("weighted operator is restricted to the 2D (z, r) rectangle")

    @property
    def dim(self) -> int:
        return self.domain.dim


@dataclass
class SolveReport:
    iterations: int
    comp_residual: float
    pde_residual: float
    min_u: float
    converged: bool = True
    method: str = ""
    residual_history: list | None = None

    def __post_init__(self):
        for v in (self.comp_residual, self.pde_residual):
            if not math.isfinite(v) or v < 0:
                raise SolverError("residuals must be finite and non-negative")

    def to_json(self) -> str:
        payload = {
            "iterations": self.iterations,
            "comp_residual": self.comp_residual,
            "pde_residual": self.pde_residual,
            "min_u": self.min_u,
        }
        return json.dumps(payload, sort_keys=True)


@dataclass
class Stencil:
    """Flux-form operator: (L u)_i = sum_faces w_f (u_nb - u_i) / h^2.

    ``w_lo[a]`` / ``w_hi[a]`` hold the face weights toward the lower/upper
    neighbor along axis a (full node shape).  ``ghost_lo[a]`` / ``ghost_hi[a]``
    hold Dirichlet values on the ghost layer (boundary slice shape); they are
    zero-filled where the corresponding face weight vanishes.  ``rhs`` is the
    node right side k * w_node.
    """

    spec: ObstacleProblemSpec
    shape: tuple[int, ...]
    w_lo: list[np.ndarray]
    w_hi: list[np.ndarray]
    ghost_lo: list[np.ndarray]
    ghost_hi: list[np.ndarray]
    rhs: np.ndarray
    diag: np.ndarray = field(init=False)

    def __post_init__(self):
        d = np.zeros(self.shape)
        for a in range(len(self.shape)):
            d += self.w_lo[a] + self.w_hi[a]
        self.diag = d / self.spec.h ** 2

    def neighbor_sum(self, u: np.ndarray) -> np.ndarray:
        """sum_faces w_f u_nb / h^2 with Dirichlet ghosts."""
        h2 = self.spec.h ** 2
        out = np.zeros(self.shape)
        for a in range(len(self.shape)):
            lo_slice = [slice(None)] * len(self.shape)
            hi_slice = [slice(None)] * len(self.shape)
            lo_slice[a] = slice(0, -1)
            hi_slice[a] = slice(1, None)
            lo_slice, hi_slice = tuple(lo_slice), tuple(hi_slice)
            w = self.w_hi[a][lo_slice]
            out[lo_slice] += w * u[hi_slice]
            out[hi_slice] += w * u[lo_slice]
            b_lo = [slice(None)] * len(self.shape)
            b_lo[a] = 0
            b_hi = [slice(None)] * len(self.shape)
            b_hi[a] = -1
            out[tuple(b_lo)] += self.w_lo[a][tuple(b_lo)] * self.ghost_lo[a]
            out[tuple(b_hi)] += self.w_hi[a][tuple(b_hi)] * self.ghost_hi[a]
        return out / h2

    def apply(self, u: np.ndarray) -> np.ndarray:
        return self.neighbor_sum(u) - self.diag * u

    def matrix_and_rhs(self) -> tuple[sp.csr_matrix, np.ndarray]:
        """Sparse matrix M and vector b with (L u)_flat = -(M u - b) such that
        M u = b is the unconstrained equation L u = rhs."""
        shape = self.shape
        n = int(np.prod(shape))
        h2 = self.spec.h ** 2
        idx = np.arange(n).reshape(shape)
        rows, cols, vals = [idx.ravel()], [idx.ravel()], [self.diag.ravel()]
        b = -self.rhs.copy()
        for a in range(len(shape)):
            lo_slice = [slice(None)] * len(shape)
            hi_slice = [slice(None)] * len(shape)
            lo_slice[a] = slice(0, -1)
            hi_slice[a] = slice(1, None)
            lo_slice, hi_slice = tuple(lo_slice), tuple(hi_slice)
            w = self.w_hi[a][lo_slice] / h2
            rows.append(idx[lo_slice].ravel())
            cols.append(idx[hi_slice].ravel())
            vals.append(-w.ravel())
            rows.append(idx[hi_slice].ravel())
            cols.append(idx[lo_slice].ravel())
            vals.append(-w.ravel())
            b_lo = [slice(None)] * len(shape)
            b_lo[a] = 0
            b_hi = [slice(None)] * len(shape)
            b_hi[a] = -1
            b[tuple(b_lo)] += self.w_lo[a][tuple(b_lo)] * self.ghost_lo[a] / h2
            b[tuple(b_hi)] += self.w_hi[a][tuple(b_hi)] * self.ghost_hi[a] / h2
        M = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n),
        )
        return M, b.ravel()


def _axis_coords(spec: ObstacleProblemSpec, axis: int) -> np.ndarray:
    n = round(spec.domain.edges[axis] / spec.h)
    return spec.domain.lower[axis] + (np.arange(n) + 0.5) * spec.h


def assemble_stencil(spec: ObstacleProblemSpec) -> Stencil:
    """Face weights w_f = (face r-coordinate)^a, node weights r_node^a.

    Faces on the r = 0 boundary get weight exactly zero when a > 0 (natural
    condition, the line has zero capacity for the weighted operator); all
    other boundary faces couple to Dirichlet ghost nodes evaluated from g.
    """
    dim = spec.dim
    shape = tuple(round(e / spec.h) for e in spec.domain.edges)
    a_exp = spec.weight_exponent
    r_axis = dim - 1

    def weight_at_r(r):
        if a_exp == 0:
            return np.ones_like(np.asarray(r, dtype=float))
        r = np.asarray(r, dtype=float)
        return np.where(r <= 0.0, 0.0, r) ** a_exp

    r_nodes = _axis_coords(spec, r_axis)
    w_node_1d = weight_at_r(r_nodes)
    w_lo, w_hi, ghost_lo, ghost_hi = [], [], [], []
    for ax in range(dim):
        bshape = [1] * dim
        bshape[ax] = shape[ax]
        if ax == r_axis:
            # faces normal to r sit at r-face coordinates
            faces = spec.domain.lower[r_axis] + np.arange(shape[r_axis] + 1) * spec.h
            wf = weight_at_r(faces)
            lo = wf[:-1]
            hi = wf[1:]
        else:
            # faces normal to other axes sit at the node's r-coordinate
            lo = hi = None
        if ax == r_axis:
            w_lo.append(np.broadcast_to(lo.reshape(bshape), shape).copy())
            w_hi.append(np.broadcast_to(hi.reshape(bshape), shape).copy())
        else:
            rshape = [1] * dim
            rshape[r_axis] = shape[r_axis]
            w = np.broadcast_to(w_node_1d.reshape(rshape), shape).copy()
            w_lo.append(w)
            w_hi.append(w.copy())
        # ghost Dirichlet values on both sides of this axis
        for side, store in ((0, ghost_lo), (1, ghost_hi)):
            coords = [_axis_coords(spec, b) for b in range(dim)]
            coords[ax] = np.array(
                [spec.domain.lower[ax] - 0.5 * spec.h if side == 0
                 else spec.domain.upper[ax] + 0.5 * spec.h]
            )
            mesh = np.meshgrid(*coords, indexing="ij")
            pts = np.stack(mesh, axis=-1)
            gslice = [slice(None)] * dim
            gslice[ax] = 0
            face_w = (w_lo if side == 0 else w_hi)[ax][tuple(
                [slice(None)] * ax + [0 if side == 0 else -1])]
            gvals = np.asarray(spec.g(pts), dtype=float)[tuple(gslice)]
            gvals = np.where(face_w > 0.0, gvals, 0.0)
            if np.any((gvals < -1e-12) & (face_w > 0)):
                raise SolverError("boundary data must be non-negative")
            store.append(np.maximum(gvals, 0.0))
    rshape = [1] * dim
    rshape[r_axis] = shape[r_axis]
    rhs = spec.k * np.broadcast_to(w_node_1d.reshape(rshape), shape).copy()
    return Stencil(spec, shape, w_lo, w_hi, ghost_lo, ghost_hi, rhs)


def apply_operator(spec_or_stencil, u: GridField | np.ndarray) -> np.ndarray:
    """Evaluate L u (flux form, Dirichlet ghosts from the spec)."""
    st = spec_or_stencil if isinstance(spec_or_stencil, Stencil) else assemble_stencil(spec_or_stencil)
    vals = u.values if isinstance(u, GridField) else np.asarray(u, dtype=float)
    return st.apply(vals)


def _comp_residual(st: Stencil, u: np.ndarray) -> float:
    s = st.rhs - st.apply(u)
    return float(np.max(np.abs(np.minimum(u, s))))


def _field(spec: ObstacleProblemSpec, u: np.ndarray) -> GridField:
    return GridField(spec.domain, spec.h, u)


def solve_psor(
    spec: ObstacleProblemSpec,
    omega: float = 1.8,
    tol: float = DEFAULT_TOL,
    max_iter: int = 200_000,
    initial: np.ndarray | None = None,
    check_every: int = 8,
    track_residuals: bool = False,
) -> tuple[GridField, SolveReport]:
    """Projected successive over-relaxation with red-black ordering.

    Each sweep updates the red then the black nodes: the unconstrained
    Gauss-Seidel value is relaxed by omega and clamped at zero, so u >= 0
    holds exactly throughout.  Terminates when the complementarity residual
    max |min(u, k w - L u)| drops below tol.
    """
    if not (1.0 <= omega < 2.0):
        raise SolverError("relaxation parameter must lie in [1, 2)")
    st = assemble_stencil(spec)
    shape = st.shape
    parity = np.zeros(shape, dtype=int)
    for a in range(len(shape)):
        view = [1] * len(shape)
        view[a] = shape[a]
        parity = parity + np.arange(shape[a]).reshape(view)
    red = (parity % 2) == 0
    black = ~red
    u = np.zeros(shape) if initial is None else np.maximum(np.asarray(initial, dtype=float), 0.0).copy()
    diag = st.diag
    rhs = st.rhs
    it = 0
    residual = math.inf
    history: list[float] = []
    while it < max_iter:
        for mask in (red, black):
            gs = (st.neighbor_sum(u) - rhs) / diag
            upd = np.maximum(0.0, u + omega * (gs - u))
            u[mask] = upd[mask]
        it += 1
        # cheap early exits for trivial problems, then periodic checks
        if it & (it - 1) == 0 or it % check_every == 0 or it >= max_iter:
            residual = _comp_residual(st, u)
            if track_residuals:
                history.append(residual)
            if not math.isfinite(residual):
                raise SolverError("NaN detected in PSOR iteration")
            if residual < tol:
                break
        elif track_residuals:
            history.append(_comp_residual(st, u))
    if not math.isfinite(residual):
        residual = _comp_residual(st, u)
    converged = residual < tol
    pde = _pde_residual(st, u, contact_threshold(spec.h))
    rep = SolveReport(it, residual, pde, float(np.min(u)), converged, "psor")
    rep.residual_history = history
    return _field(spec, u), rep


def _pde_residual(st: Stencil, u: np.ndarray, eps_c: float) -> float:
    resid = st.apply(u) - st.rhs
    mask = u > eps_c
    if not np.any(mask):
        return 0.0
    return float(np.max(np.abs(resid[mask])))


def suggested_omega(spec: ObstacleProblemSpec) -> float:
    """Near-optimal SOR relaxation for the Laplacian on this grid."""
    L = float(np.min(spec.domain.edges))
    return 2.0 / (1.0 + math.sin(math.pi * spec.h / L))


def _coarse_active_guess(spec: ObstacleProblemSpec, tol: float) -> np.ndarray | None:
    """Initial active set from a solve at spacing 2h (recursive)."""
    ext = tuple(round(e / spec.h) for e in spec.domain.edges)
    if any(n % 2 for n in ext) or min(ext) < 32:
        return None
    coarse = ObstacleProblemSpec(spec.domain, 2.0 * spec.h, spec.g,
                                 spec.weight_exponent, spec.k)
    u, _ = solve_active_set(coarse, tol=max(tol, 1e-9))
    mask = u.values <= contact_threshold(coarse.h)
    for a in range(u.values.ndim):
        mask = np.repeat(mask, 2, axis=a)
    return mask


def solve_active_set(
    spec: ObstacleProblemSpec,
    tol: float = DEFAULT_TOL,
    max_outer: int = 60,
    initial_active: np.ndarray | None = None,
    psor_fallback: bool = True,
    cascade: bool = True,
) -> tuple[GridField, SolveReport]:
    """Primal active-set iteration.

    Guesses the contact set, solves the linear Dirichlet problem on the
    inactive nodes by a sparse direct factorization, then updates the set by
    sign checks on u and on the multiplier k w - L u.  A repeated active set
    (cycle) triggers a PSOR fallback.

    The default guess comes from a solve at spacing 2h (recursively, down to
    a 32-cell floor): a free boundary localized to within a couple of cells
    keeps the outer iteration count resolution-independent.
    """
    if initial_active is None and cascade:
        initial_active = _coarse_active_guess(spec, tol)
    st = assemble_stencil(spec)
    shape = st.shape
    n = int(np.prod(shape))
    M, b = st.matrix_and_rhs()
    active = (np.zeros(n, dtype=bool) if initial_active is None
              else np.asarray(initial_active, dtype=bool).ravel().copy())
    seen = set()
    u = np.zeros(n)
    for outer in range(1, max_outer + 1):
        key = active.tobytes()
        if key in seen:
            if not psor_fallback:
                raise SolverError("active-set cycle detected")
            fld, rep = solve_psor(spec, tol=tol, initial=u.reshape(shape))
            rep.method = "active_set+psor_fallback"
            return fld, rep
        seen.add(key)
        inactive = ~active
        u = np.zeros(n)
        if np.any(inactive):
            Mii = M[inactive][:, inactive]
            bi = b[inactive]
            try:
                ui = spla.spsolve(Mii.tocsc(), bi)
            except Exception as exc:  # singular inner solve
                raise SolverError(f"singular inner solve: {exc}") from exc
            if not np.all(np.isfinite(ui)):
                raise SolverError("singular inner solve: non-finite solution")
            u[inactive] = ui
        s = st.rhs.ravel() - st.apply(u.reshape(shape)).ravel()
        # scale balancing: near the free boundary u is O(h^2) while the
        # multiplier s is O(1); c = 1/h^2 keeps the sign test sharp
        c_scale = 1.0 / spec.h ** 2
        new_active = (c_scale * u - s) < 0.0
        if np.array_equal(new_active, active):
            break
        active = new_active
    u = np.maximum(u, 0.0).reshape(shape)
    residual = _comp_residual(st, u)
    converged = residual < 10.0 * tol or residual < 1e-8
    pde = _pde_residual(st, u, contact_threshold(spec.h))
    rep = SolveReport(outer, residual, pde, float(np.min(u)), converged, "active_set")
    return _field(spec, u), rep


def complementarity_check(u: GridField, spec: ObstacleProblemSpec,
                          eps_c: float | None = None) -> SolveReport:
    """Violations of the complementarity triple for an arbitrary field.

    Reports max violation of u >= 0, of L u <= k w on the contact set
    {u <= eps_c}, and the PDE residual |L u - k w| on {u > eps_c}.
    """
    st = assemble_stencil(spec)
    vals = u.values
    if vals.shape != st.shape:
        raise SolverError("field incompatible with problem spec")
    eps = contact_threshold(spec.h) if eps_c is None else eps_c
    pos_violation = float(max(0.0, -np.min(vals)))
    resid = st.apply(vals) - st.rhs
    contact = vals <= eps
    ineq_violation = float(np.max(np.maximum(resid[contact], 0.0))) if np.any(contact) else 0.0
    pde = float(np.max(np.abs(resid[~contact]))) if np.any(~contact) else 0.0
    comp = max(pos_violation, ineq_violation)
    return SolveReport(0, comp, pde, float(np.min(vals)), True, "check")
