"""Detection-filter synthesis.

Builds detection spaces and generators for each fault event vector, the
excess subspace, the output-injection gain ``D`` and the canonical transforms
that map every event vector onto its own residual coordinate.

The synthesis is written for a generic ``(A, C)`` pair; the discrete model is
used for the shipped filter so that the assigned eigenvalues are z-plane
values.  For a discrete model the event vectors are the zero-order-hold images
``Bd[:, :8]`` of the continuous unit columns, which is what a current
injected between samples actually produces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import null_space, svd
from scipy.optimize import linear_sum_assignment, minimize_scalar

from .model import (
    LineParameters,
    StateSpaceModel,
    build_single_section,
    discretize,
    fault_event_basis,
)

__all__ = [
    "DesignError",
    "Subspace",
    "FilterDesign",
    "DesignReport",
    "RANK_RTOL",
    "REFERENCE_UNASSIGNABLE",
    "numerical_rank",
    "detection_space",
    "detection_generator",
    "multiple_detection_space",
    "check_output_separable",
    "check_mutually_detectable",
    "excess_subspace",
    "compute_feedback",
    "canonical_transform",
    "event_vectors",
    "design_filter",
    "verify_design",
    "multiset_distance",
    "calibrate_dt",
]

RANK_RTOL = 1e-8
# Unassignable eigenvalues published for the reference design (dt unknown).
REFERENCE_UNASSIGNABLE = (0.8118, 0.9940, 0.9957, 0.9949)


class DesignError(ValueError):
    """Raised when a design step is infeasible."""


def numerical_rank(M: np.ndarray, rtol: float = RANK_RTOL) -> int:
    """Rank from singular values above ``rtol`` times the largest one."""
    M = np.atleast_2d(M)
    if M.size == 0:
        return 0
    s = svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def _orth(M: np.ndarray, rtol: float = RANK_RTOL) -> np.ndarray:
    if M.size == 0:
        return np.zeros((M.shape[0], 0))
    U, s, _ = svd(M, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((M.shape[0], 0))
    return U[:, s > rtol * s[0]]


@dataclass(frozen=True)
class Subspace:
    """Subspace stored through an orthonormal basis (columns)."""

    basis: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=float)
        if b.ndim != 2:
            raise DesignError("subspace basis must be a 2-D array")
        if b.shape[1] and np.abs(b.T @ b - np.eye(b.shape[1])).max() > 1e-10:
            b = _orth(b)
        object.__setattr__(self, "basis", b)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[0]

    def contains(self, v: np.ndarray, tol: float = 1e-10) -> bool:
        """True when every column of ``v`` lies in the subspace (relative tol)."""
        v = np.atleast_2d(np.asarray(v, dtype=float).T).T
        resid = v - self.basis @ (self.basis.T @ v)
        scale = max(np.abs(v).max(), np.finfo(float).tiny)
        return bool(np.abs(resid).max() <= tol * scale)

    @classmethod
    def span(cls, M: np.ndarray) -> "Subspace":
        return cls(_orth(np.atleast_2d(np.asarray(M, dtype=float).T).T))


def _stacked_detection_matrix(A: np.ndarray, C: np.ndarray, Fm: np.ndarray) -> np.ndarray:
    CF = C @ Fm
    # Projector onto range(CF) via least squares, then the complement.
    P = CF @ np.linalg.pinv(CF)
    Df = A @ Fm @ np.linalg.pinv(CF)
    Cp = (np.eye(C.shape[0]) - P) @ C
    n = A.shape[0]
    if np.linalg.norm(Cp, 2) <= RANK_RTOL * np.linalg.norm(C, 2):
        # C F spans the outputs: C' is round-off only.
        return np.zeros((C.shape[0] * n, n))
    Acl = A - Df @ C
    # Row scaling keeps the null space and stops powers of a stiff A from
    # swamping the early blocks.
    blocks = []
    X = Cp
    for _ in range(n):
        nx = np.linalg.norm(X, 2)
        blocks.append(X / nx if nx > 0 else X)
        X = blocks[-1] @ Acl
    return np.vstack(blocks)


def _detection_null(M: np.ndarray) -> np.ndarray:
    n = M.shape[1]
    if not M.any():
        return np.eye(n)
    _, s, Vt = svd(M)
    rank = int(np.sum(s > RANK_RTOL * s[0]))
    return Vt[rank:].T


def _event_matrix(model: StateSpaceModel, f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape[0] != model.n_states:
        raise DesignError(f"event vector length {f.shape[0]} does not match {model.n_states} states")
    return f


def detection_space(model: StateSpaceModel, f: np.ndarray) -> Subspace:
    """Detection space of a single event vector.

    Computes ``D_f = A f [(Cf)^T Cf]^-1 (Cf)^T``, ``C' = [E - Cf ((Cf)^T Cf)^-1 (Cf)^T] C``
    and returns an orthonormal basis of the null space of
    ``M' = [C'; C'(A - D_f C); ...; C'(A - D_f C)^(n-1)]``.
    The rank of ``M'`` is ``n - dim``.
    """
    fm = _event_matrix(model, f)
    if fm.shape[1] != 1:
        raise DesignError("detection_space expects a single event vector")
    cf = model.C @ fm
    if np.linalg.norm(cf) <= RANK_RTOL * np.linalg.norm(model.C) * np.linalg.norm(fm):
        raise DesignError("event vector unobservable: C f = 0")
    M = _stacked_detection_matrix(model.A, model.C, fm)
    return Subspace(_detection_null(M))


def multiple_detection_space(model: StateSpaceModel, F: np.ndarray) -> Subspace:
    """Joint detection space of several event vectors (columns of ``F``)."""
    Fm = _event_matrix(model, F)
    if numerical_rank(model.C @ Fm) < Fm.shape[1]:
        raise DesignError("event vectors are not output separable: C F is rank deficient")
    M = _stacked_detection_matrix(model.A, model.C, Fm)
    return Subspace(_detection_null(M))


def detection_generator(model: StateSpaceModel, f: np.ndarray, space: Subspace) -> np.ndarray:
    """Generator g of a detection space.

    Solves ``C A^k g = 0`` for ``k < v - 1`` and ``C A^(v-1) g = C f`` with
    ``g`` restricted to ``space`` (``v = space.dim``).  When ``v = 1`` the event
    vector itself is returned.
    """
    f = np.asarray(f, dtype=float).ravel()
    v = space.dim
    if v == 0:
        raise DesignError("empty detection space")
    if v == 1 and space.contains(f):
        return f.copy()
    A, C, Bs = model.A, model.C, space.basis
    rows, rhs = [], []
    Ak = np.eye(model.n_states)
    for k in range(v):
        rows.append(C @ Ak @ Bs)
        rhs.append(C @ f if k == v - 1 else np.zeros(C.shape[0]))
        Ak = A @ Ak
    M = np.vstack(rows)
    r = np.concatenate(rhs)
    coef, *_ = np.linalg.lstsq(M, r, rcond=None)
    resid = np.linalg.norm(M @ coef - r)
    if resid > 1e-10 * max(np.linalg.norm(r), 1.0):
        raise DesignError(f"no detection generator: least-squares residual {resid:.3e}")
    return Bs @ coef


def check_output_separable(model: StateSpaceModel, F: np.ndarray) -> tuple[bool, dict]:
    """Output separability test ``rank(F) == rank(C F)``."""
    Fm = _event_matrix(model, F)
    rf = numerical_rank(Fm)
    rcf = numerical_rank(model.C @ Fm)
    return (rf == rcf == Fm.shape[1]), {"rank_F": rf, "rank_CF": rcf, "columns": Fm.shape[1]}


def check_mutually_detectable(spaces: Sequence[Subspace], total: Subspace) -> bool:
    """True iff the individual detection space dimensions add up to ``total.dim``."""
    return sum(s.dim for s in spaces) == total.dim


def excess_subspace(model: StateSpaceModel, total: Subspace, spaces: Sequence[Subspace]) -> Subspace:
    """Complement of the detection spaces inside ``total`` lying in null(C)."""
    n = model.n_states
    needed = total.dim - sum(s.dim for s in spaces)
    if needed < 0:
        raise DesignError("detection spaces exceed the joint detection space")
    if needed == 0:
        return Subspace(np.zeros((n, 0)))
    G = np.hstack([s.basis for s in spaces]) if spaces else np.zeros((n, 0))
    nullc = null_space(model.C, rcond=RANK_RTOL)
    # Intersection of null(C) with the total space.
    if total.dim < n:
        comp = null_space(total.basis.T)
        W = nullc @ null_space(comp.T @ nullc, rcond=RANK_RTOL)
    else:
        W = nullc
    if W.shape[1] < needed:
        raise DesignError("design infeasible: excess directions are not inside null(C)")
    Q = W - G @ np.linalg.lstsq(G, W, rcond=None)[0] if G.shape[1] else W
    _, s, Vt = svd(Q, full_matrices=False)
    if s.size < needed or s[needed - 1] <= RANK_RTOL * max(s[0], 1.0):
        raise DesignError("design infeasible: excess subspace is not complementary to the detection spaces")
    R0 = W @ Vt[:needed].T
    return Subspace(R0)


def compute_feedback(model: StateSpaceModel, generators: np.ndarray,
                     eigenvalues: Sequence[float]) -> np.ndarray:
    """Output-injection gain ``D = [A g_i - lambda_i g_i] [C g_i]^-1``.

    Uses a linear solve rather than an explicit inverse.
    """
    Gm = _event_matrix(model, generators)
    lam = np.asarray(eigenvalues, dtype=float).ravel()
    if lam.size == 1 and Gm.shape[1] > 1:
        lam = np.full(Gm.shape[1], lam[0])
    if lam.size != Gm.shape[1]:
        raise DesignError(f"{lam.size} eigenvalues given for {Gm.shape[1]} generators")
    CG = model.C @ Gm
    r = numerical_rank(CG)
    if r < Gm.shape[1]:
        # Identify the columns that depend on earlier ones.
        dep = [i for i in range(1, Gm.shape[1]) if numerical_rank(CG[:, : i + 1]) <= numerical_rank(CG[:, :i])]
        raise DesignError(f"[C g] is singular; dependent generators: {dep}")
    rhs = model.A @ Gm - Gm * lam[None, :]
    # D CG = rhs  ->  CG^T D^T = rhs^T
    if CG.shape[0] == CG.shape[1]:
        return np.linalg.solve(CG.T, rhs.T).T
    return np.linalg.lstsq(CG.T, rhs.T, rcond=None)[0].T


def canonical_transform(model: StateSpaceModel, generators: np.ndarray, excess_basis: np.ndarray,
                        orders: Optional[Sequence[int]] = None):
    """Canonical state and output transforms.

    Returns ``(T, Tm, T_inv, Tm_inv)`` with ``T_inv = [g_1 ... g_8, T_0]`` and
    ``Tm_inv = [C A^(v_i-1) g_i]``.  Canonical states are ``T x`` and the
    canonical residual is ``Tm (y - C x_hat)``, so each generator maps to a
    unit vector in both state and output coordinates.
    """
    Gm = _event_matrix(model, generators)
    E = np.asarray(excess_basis, dtype=float).reshape(model.n_states, -1)
    T_inv = np.hstack([Gm, E])
    if T_inv.shape[1] != model.n_states or numerical_rank(T_inv) < model.n_states:
        raise DesignError("generators and excess basis are not independent")
    orders = [1] * Gm.shape[1] if orders is None else list(orders)
    cols = []
    for i, v in enumerate(orders):
        cols.append(model.C @ np.linalg.matrix_power(model.A, v - 1) @ Gm[:, i])
    Tm_inv = np.column_stack(cols)
    if numerical_rank(Tm_inv) < Tm_inv.shape[1]:
        raise DesignError("output images of the generators are dependent")
    T = np.linalg.solve(T_inv, np.eye(model.n_states))
    Tm = np.linalg.solve(Tm_inv, np.eye(Tm_inv.shape[0]))
    return T, Tm, T_inv, Tm_inv


def event_vectors(model: StateSpaceModel) -> np.ndarray:
    """Event vectors for a model: F itself, or its hold image for a discrete model."""
    F = fault_event_basis()
    if model.is_discrete:
        return model.B @ F
    return F


@dataclass(frozen=True)
class FilterDesign:
    """Complete detection-filter design for a discrete model."""

    D: np.ndarray
    T: np.ndarray
    Tm: np.ndarray
    T_inv: np.ndarray
    Tm_inv: np.ndarray
    generators: np.ndarray
    excess_basis: np.ndarray
    assigned_eigenvalues: np.ndarray
    unassignable_eigenvalues: np.ndarray
    model: StateSpaceModel
    continuous: Optional[StateSpaceModel] = None
    detection_dims: tuple[int, ...] = ()
    joint_dim: int = 0
    v_base: float = 1.0
    i_base: float = 1.0
    length_km: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def closed_loop(self) -> np.ndarray:
        return self.model.A - self.D @ self.model.C

    @property
    def dt(self) -> float:
        return float(self.model.dt)


def multiset_distance(a: Sequence[complex], b: Sequence[complex]) -> float:
    """Largest pairwise gap under the best one-to-one matching of two multisets."""
    a = np.asarray(a, dtype=complex).ravel()
    b = np.asarray(b, dtype=complex).ravel()
    if a.size != b.size:
        return float("inf")
    if a.size == 0:
        return 0.0
    cost = np.abs(a[:, None] - b[None, :])
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].max())


def _unassignable(model: StateSpaceModel, D: np.ndarray, T: np.ndarray, T_inv: np.ndarray, k: int) -> np.ndarray:
    M = T @ (model.A - D @ model.C) @ T_inv
    ev = np.linalg.eigvals(M[k:, k:])
    return ev[np.lexsort((ev.imag, ev.real))]


def design_filter(params: LineParameters, dt: float = 1e-4,
                  eigenvalues: float | Sequence[float] = 0.1) -> FilterDesign:
    """Design the filter for the single-section line on a ``dt`` grid."""
    cont = build_single_section(params)
    disc = discretize(cont, dt)
    G0 = event_vectors(disc)
    ok, ranks = check_output_separable(disc, G0)
    if not ok:
        raise DesignError(f"event vectors are not output separable: {ranks}")
    spaces = [detection_space(disc, G0[:, i]) for i in range(G0.shape[1])]
    gens = np.column_stack([detection_generator(disc, G0[:, i], s) for i, s in enumerate(spaces)])
    if any(s.dim != 1 for s in spaces):
        raise DesignError(f"detection spaces of order > 1 are not supported: dims {[s.dim for s in spaces]}")
    total = multiple_detection_space(disc, G0)
    R0 = excess_subspace(disc, total, spaces)
    lam = np.broadcast_to(np.asarray(eigenvalues, dtype=float), (gens.shape[1],)).copy()
    if np.any(np.abs(lam) >= 1):
        raise DesignError("assigned eigenvalues must lie inside the unit circle")
    D = compute_feedback(disc, gens, lam)
    T, Tm, T_inv, Tm_inv = canonical_transform(disc, gens, R0.basis)
    un = _unassignable(disc, D, T, T_inv, gens.shape[1])
    if np.any(np.abs(un) >= 1):
        raise DesignError(f"unassignable eigenvalues are not stable: {un}")
    return FilterDesign(
        D=D, T=T, Tm=Tm, T_inv=T_inv, Tm_inv=Tm_inv, generators=gens, excess_basis=R0.basis,
        assigned_eigenvalues=lam, unassignable_eigenvalues=un, model=disc, continuous=cont,
        detection_dims=tuple(s.dim for s in spaces), joint_dim=total.dim,
        v_base=params.v_base, i_base=params.i_base, length_km=params.length_km,
    )


@dataclass
class DesignReport:
    """Named checks with measured values and pass flags."""

    checks: list[tuple[str, float, float, bool]] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def add(self, name: str, value: float, tol: float, passed: Optional[bool] = None):
        ok = bool(value <= tol) if passed is None else bool(passed)
        self.checks.append((name, float(value), float(tol), ok))

    @property
    def passed(self) -> bool:
        return all(c[3] for c in self.checks)

    def format(self) -> str:
        lines = []
        for name, val, tol, ok in self.checks:
            lines.append(f"{'PASS' if ok else 'FAIL'}  {name}: {val:.3e} (limit {tol:.1e})")
        for k, v in self.info.items():
            lines.append(f"info  {k}: {v}")
        return "\n".join(lines)


def verify_design(design: FilterDesign) -> DesignReport:
    """Check placement, invariance and canonical structure of a design."""
    rep = DesignReport()
    m = design.model
    Acl = m.A - design.D @ m.C
    k = design.generators.shape[1]
    spec = np.linalg.eigvals(Acl)
    expected = np.concatenate([design.assigned_eigenvalues.astype(complex), design.unassignable_eigenvalues])
    rep.add("eigenvalue placement (multiset distance)", multiset_distance(spec, expected), 1e-6)
    worst = 0.0
    for i in range(k):
        b = design.generators[:, i] / np.linalg.norm(design.generators[:, i])
        lam = b @ Acl @ b
        worst = max(worst, np.linalg.norm(Acl @ b - b * lam))
    rep.add("detection space invariance", worst, 1e-8)
    n = m.n_states
    rep.add("T T_inv identity", np.abs(design.T @ design.T_inv - np.eye(n)).max(), 1e-9)
    rep.add("Tm Tm_inv identity", np.abs(design.Tm @ design.Tm_inv - np.eye(k)).max(), 1e-9)
    canon = design.Tm @ m.C @ design.generators
    rep.add("canonical output structure", np.abs(canon - np.eye(k)).max(), 1e-9)
    M = design.T @ Acl @ design.T_inv
    rep.add("canonical block structure", max(np.abs(M[:k, :k] - np.diag(design.assigned_eigenvalues)).max(),
                                             np.abs(M[k:, :k]).max()), 1e-8)
    ok, ranks = check_output_separable(m, design.generators)
    rep.add("output separable", 0.0 if ok else 1.0, 0.5, ok)
    rep.add("unassignable eigenvalues inside unit circle", float(np.abs(design.unassignable_eigenvalues).max()), 1.0,
            bool(np.abs(design.unassignable_eigenvalues).max() < 1.0))
    if design.excess_basis.size:
        rep.add("excess subspace inside null(C)", np.abs(m.C @ design.excess_basis).max(), 1e-10)
    rep.info["cond([C g])"] = f"{np.linalg.cond(design.Tm_inv):.3e}"
    rep.info["detection space dims"] = list(design.detection_dims)
    rep.info["joint detection space dim"] = design.joint_dim
    rep.info["mutually detectable"] = sum(design.detection_dims) == design.joint_dim
    rep.info["unassignable eigenvalues"] = [f"{z.real:.4f}{z.imag:+.4f}j" if abs(z.imag) > 1e-12 else f"{z.real:.4f}"
                                            for z in design.unassignable_eigenvalues]
    rep.info["reference unassignable eigenvalues"] = list(REFERENCE_UNASSIGNABLE)
    rep.info["distance to reference"] = f"{multiset_distance(design.unassignable_eigenvalues, REFERENCE_UNASSIGNABLE):.4f}"
    return rep


def calibrate_dt(params: LineParameters, reference: Sequence[float] = REFERENCE_UNASSIGNABLE,
                 bounds: tuple[float, float] = (1e-6, 1e-2)) -> tuple[float, float, np.ndarray]:
    """Sampling interval whose unassignable eigenvalues best match ``reference``.

    Returns ``(dt, distance, eigenvalues)``.  Report-only: the shipped design
    keeps its configured ``dt``.
    """
    cont = build_single_section(params)

    def unassignable(dt):
        disc = discretize(cont, dt)
        G0 = event_vectors(disc)
        R0 = null_space(disc.C, rcond=RANK_RTOL)
        D = compute_feedback(disc, G0, 0.1)
        T_inv = np.hstack([G0, R0])
        T = np.linalg.solve(T_inv, np.eye(12))
        return _unassignable(disc, D, T, T_inv, 8)

    def cost(logdt):
        return multiset_distance(unassignable(10.0 ** logdt), reference)

    lo, hi = np.log10(bounds[0]), np.log10(bounds[1])
    grid = np.linspace(lo, hi, 61)
    vals = [cost(g) for g in grid]
    i = int(np.argmin(vals))
    res = minimize_scalar(cost, bounds=(grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]), method="bounded")
    dt = float(10.0 ** res.x)
    return dt, float(res.fun), unassignable(dt)
