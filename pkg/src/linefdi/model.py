"""Single-section line model, fault event vectors and discretization.

The healthy line is the lumped pi-section

    Cap dv1/dt = i1 - iL
    Cap dv2/dt = i2 + iL
    L diL/dt   = v1 - v2 - R iL

written in the scaled state z = B1 x with x = [v1; v2; iL] and
B1 = blockdiag(Cap, Cap, L).  In these coordinates a current injected at a
terminal conductor enters along a unit vector, which is what makes the fault
event vectors the columns of a block identity.

All models built here are expressed in per-unit quantities (see
:class:`LineParameters`) with time kept in seconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import expm

__all__ = [
    "ModelError",
    "CONDUCTORS",
    "FAULT_TYPES",
    "LineParameters",
    "StateSpaceModel",
    "FaultSignature",
    "LadderNetwork",
    "K_MATRIX",
    "build_single_section",
    "fault_event_basis",
    "fault_conductance",
    "fault_signature",
    "discretize",
    "concatenate_sections",
    "null_space_of_c",
    "fault_phases",
    "fault_branches",
    "fault_injection",
]

CONDUCTORS = ("A", "B", "C", "N")
FAULT_TYPES = ("A-G", "B-G", "C-G", "A-B", "B-C", "C-A", "A-B-C")

# Terminal measurement map from conductor voltages to the measured vector.
K_MATRIX = np.array(
    [
        [1.0, 0.0, 0.0, -1.0],
        [0.0, 1.0, 0.0, -1.0],
        [0.0, 0.0, 1.0, -1.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
)

_SYM_RTOL = 1e-9


class ModelError(ValueError):
    """Raised when line parameters or model inputs are invalid."""


def _check_phase_matrix(name: str, m: np.ndarray, positive_definite: bool) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.shape != (4, 4):
        raise ModelError(f"{name} must be 4x4, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ModelError(f"{name} has non-finite entries")
    scale = max(np.abs(m).max(), np.finfo(float).tiny)
    if np.abs(m - m.T).max() > _SYM_RTOL * scale:
        i, j = np.unravel_index(np.argmax(np.abs(m - m.T)), m.shape)
        raise ModelError(
            f"{name} is not symmetric: {name}[{CONDUCTORS[i]},{CONDUCTORS[j]}]={m[i, j]!r} "
            f"vs {name}[{CONDUCTORS[j]},{CONDUCTORS[i]}]={m[j, i]!r}"
        )
    if positive_definite:
        try:
            np.linalg.cholesky(0.5 * (m + m.T))
        except np.linalg.LinAlgError:
            raise ModelError(f"{name} matrix is not positive definite (singular {name})") from None
    elif np.linalg.cond(m) > 1e12:
        raise ModelError(f"{name} matrix is singular")
    return m


@dataclass(frozen=True)
class LineParameters:
    """Phase-domain parameters of a four-conductor line.

    Parameters
    ----------
    R, L, Cap : ndarray, shape (4, 4)
        Series resistance (ohm), series inductance (H) and the per-end shunt
        capacitance (F), indexed by conductor A, B, C, N.
    length_km : float
        Line length.
    v_rated : float
        Rated line-to-line RMS voltage (V).
    i_rated : float
        Rated RMS current (A).
    s_base : float or None
        Three-phase system power base (VA).  When given, the current base is
        the peak phase current of that power at rated voltage; when ``None``
        the peak rated current is used instead.

    Notes
    -----
    The voltage base is always the peak phase-to-neutral rated voltage.
    """

    R: np.ndarray
    L: np.ndarray
    Cap: np.ndarray
    length_km: float
    v_rated: float
    i_rated: float
    s_base: Optional[float] = 100e6

    def __post_init__(self):
        object.__setattr__(self, "R", _check_phase_matrix("R", self.R, True))
        object.__setattr__(self, "L", _check_phase_matrix("L", self.L, True))
        object.__setattr__(self, "Cap", _check_phase_matrix("Cap", self.Cap, False))
        for name in ("length_km", "v_rated", "i_rated"):
            val = float(getattr(self, name))
            if not np.isfinite(val) or val <= 0:
                raise ModelError(f"{name} must be positive, got {val!r}")
            object.__setattr__(self, name, val)
        if self.s_base is not None:
            sb = float(self.s_base)
            if not np.isfinite(sb) or sb <= 0:
                raise ModelError(f"s_base must be positive, got {sb!r}")
            object.__setattr__(self, "s_base", sb)
        for m in (self.R, self.L, self.Cap):
            m.setflags(write=False)

    @property
    def v_base(self) -> float:
        """Peak phase-to-neutral voltage base (V)."""
        return self.v_rated * np.sqrt(2.0 / 3.0)

    @property
    def i_base(self) -> float:
        """Peak current base (A)."""
        if self.s_base is None:
            return self.i_rated * np.sqrt(2.0)
        return np.sqrt(2.0) * self.s_base / (np.sqrt(3.0) * self.v_rated)

    @property
    def z_base(self) -> float:
        return self.v_base / self.i_base

    def per_unit(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(R, L, Cap)`` in per-unit (time left in seconds)."""
        zb = self.z_base
        return self.R / zb, self.L / zb, self.Cap * zb


@dataclass(frozen=True)
class StateSpaceModel:
    """State-space triple in scaled-z coordinates.

    For a continuous model ``dt`` is ``None``.  A discrete model holds the
    zero-order-hold pair ``(A, B)`` and additionally ``B_next``, the part of
    ``B`` that a first-order hold attributes to the next input sample, so that
    ``A z + (B - B_next) u[k] + B_next u[k+1]`` is exact for inputs that vary
    linearly across a step.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    dt: Optional[float] = None
    B_next: Optional[np.ndarray] = None
    coordinate_tag: str = "scaled-z"

    @property
    def is_discrete(self) -> bool:
        return self.dt is not None

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def time_tag(self) -> str:
        return "continuous" if self.dt is None else f"discrete(dt={self.dt!r})"


@dataclass(frozen=True)
class FaultSignature:
    """Linear combination of event vectors produced by a fault.

    ``combination`` lists ``(event_index, coefficient, magnitude)`` where the
    zero-based event index selects a column of :func:`fault_event_basis`,
    ``coefficient`` is the numeric factor in alpha, and ``magnitude`` names the
    time function multiplying that column.
    """

    fault_type: str
    alpha: Optional[float]
    combination: tuple[tuple[int, float, str], ...]
    magnitude_symbol: str

    def vector(self, magnitudes: Optional[dict[str, float]] = None) -> np.ndarray:
        """Evaluate the 12-vector for given magnitude values (default 1)."""
        F = fault_event_basis()
        out = np.zeros(12)
        for idx, coef, mag in self.combination:
            scale = 1.0 if magnitudes is None else magnitudes[mag]
            out += coef * scale * F[:, idx]
        return out


def null_space_of_c() -> np.ndarray:
    """Orthonormal basis of null(C): the four series-current coordinates."""
    basis = np.zeros((12, 4))
    basis[8:, :] = np.eye(4)
    return basis


def build_single_section(params: LineParameters, per_unit: bool = True) -> StateSpaceModel:
    """Continuous state-space model of the healthy line.

    Returns ``A = A1' B1^-1``, ``B = [I8 0; 0 0]`` and
    ``C = [K 0 0; 0 K 0] B1^-1``.  With ``per_unit=False`` the raw SI
    matrices are used.
    """
    R, L, Cap = params.per_unit() if per_unit else (params.R, params.L, params.Cap)
    Z = np.zeros((4, 4))
    I4 = np.eye(4)
    A1 = np.block([[Z, Z, -I4], [Z, Z, I4], [I4, -I4, -R]])
    B1 = np.block([[Cap, Z, Z], [Z, Cap, Z], [Z, Z, L]])
    # A = A1 B1^-1 computed as a solve against B1^T.
    A = np.linalg.solve(B1.T, A1.T).T
    B = np.zeros((12, 12))
    B[:8, :8] = np.eye(8)
    KK = np.block([[K_MATRIX, Z, Z], [Z, K_MATRIX, Z]])
    C = np.linalg.solve(B1.T, KK.T).T
    return StateSpaceModel(A=A, B=B, C=C)


def fault_event_basis() -> np.ndarray:
    """Return F = [E4 0; 0 E4; 0 0] (12 x 8)."""
    F = np.zeros((12, 8))
    F[:4, :4] = np.eye(4)
    F[4:8, 4:8] = np.eye(4)
    return F


_PHASE = {"A": 0, "B": 1, "C": 2}


def _normalize_fault_type(fault_type: str) -> str:
    ft = fault_type.upper().replace("_", "-")
    aliases = {"AG": "A-G", "BG": "B-G", "CG": "C-G", "AB": "A-B", "BC": "B-C",
               "CA": "C-A", "AC": "C-A", "ABC": "A-B-C", "B-A": "A-B", "C-B": "B-C",
               "A-C": "C-A"}
    ft = aliases.get(ft, ft)
    if ft not in FAULT_TYPES:
        raise ModelError(f"unknown fault type {fault_type!r}")
    return ft


def fault_phases(fault_type: str) -> tuple[int, ...]:
    """Zero-based phase indices involved in a fault type."""
    ft = _normalize_fault_type(fault_type)
    return tuple(_PHASE[p] for p in ft.split("-") if p in _PHASE)


def fault_branches(fault_type: str, Rf: float) -> list[tuple[np.ndarray, float]]:
    """Resistive branches making up a fault as ``(incidence, conductance)``.

    Three-phase faults are three ``Rf`` resistors connected phase to phase.
    """
    if not np.isfinite(Rf) or Rf <= 0:
        raise ModelError(f"fault resistance must be positive, got {Rf!r}")
    ft = _normalize_fault_type(fault_type)
    ph = fault_phases(ft)

    def inc(*pairs):
        a = np.zeros(4)
        for i, s in pairs:
            a[i] = s
        return a

    if ft.endswith("-G"):
        arcs = [inc((ph[0], 1.0))]
    elif len(ph) == 2:
        arcs = [inc((ph[0], 1.0), (ph[1], -1.0))]
    else:
        arcs = [inc((0, 1.0), (1, -1.0)), inc((1, 1.0), (2, -1.0)), inc((2, 1.0), (0, -1.0))]
    return [(a, 1.0 / Rf) for a in arcs]


def fault_conductance(fault_type: str, Rf: float) -> np.ndarray:
    """Fault conductance matrix G (4 x 4, siemens when ``Rf`` is in ohm)."""
    return sum((g * np.outer(a, a) for a, g in fault_branches(fault_type, Rf)), np.zeros((4, 4)))


def fault_signature(fault_type: str, alpha: Optional[float] = None,
                    channel: Optional[int] = None) -> FaultSignature:
    """Event-vector decomposition of a line fault or a bad current channel.

    Parameters
    ----------
    fault_type : str
        One of :data:`FAULT_TYPES` or ``"bad-data"``.
    alpha : float
        Per-unit distance from the left terminal, required for line faults.
    channel : int
        Zero-based current channel (0-7) for ``"bad-data"``.
    """
    if fault_type == "bad-data":
        if channel is None or not 0 <= int(channel) < 8:
            raise ModelError("bad-data signature needs a channel in 0..7")
        mag = f"i{CONDUCTORS[channel % 4].lower()}{1 + channel // 4}(t)"
        return FaultSignature("bad-data", None, ((int(channel), 1.0, mag),), mag)
    if alpha is None or not 0.0 < alpha < 1.0:
        raise ModelError(f"alpha must lie in (0, 1), got {alpha!r}")
    ft = _normalize_fault_type(fault_type)
    ph = fault_phases(ft)
    names = "abc"
    comb: list[tuple[int, float, str]] = []
    if ft.endswith("-G"):
        mag = f"v{names[ph[0]]}f(t)/Rf"
        comb = [(ph[0], 1.0 - alpha, mag), (ph[0] + 4, alpha, mag)]
    elif len(ph) == 2:
        i, j = ph
        mag = f"(v{names[i]}f(t)-v{names[j]}f(t))/Rf"
        comb = [(i, 1.0 - alpha, mag), (j, -(1.0 - alpha), mag),
                (i + 4, alpha, mag), (j + 4, -alpha, mag)]
    else:
        mags = []
        for p in range(3):
            o = [q for q in range(3) if q != p]
            mags.append(f"(2v{names[p]}f(t)-v{names[o[0]]}f(t)-v{names[o[1]]}f(t))/Rf")
        comb = [(p, 1.0 - alpha, mags[p]) for p in range(3)]
        comb += [(p + 4, alpha, mags[p]) for p in range(3)]
        mag = "; ".join(mags)
    return FaultSignature(ft, float(alpha), tuple(comb), mag)


def fault_injection(fault_type: str, Rf: float, alpha: float, vf: np.ndarray) -> np.ndarray:
    """Failure term f = [(1-alpha) G vf; alpha G vf; 0] for a fault-point voltage."""
    if not 0.0 < alpha < 1.0:
        raise ModelError(f"alpha must lie in (0, 1), got {alpha!r}")
    gv = fault_conductance(fault_type, Rf) @ np.asarray(vf, dtype=float)
    return np.concatenate([(1.0 - alpha) * gv, alpha * gv, np.zeros(4)])


def discretize(model: StateSpaceModel, dt: float) -> StateSpaceModel:
    """Exact zero-order-hold discretization with a first-order-hold split.

    ``Ad = exp(A dt)`` and ``Bd = int_0^dt exp(A s) ds B``.  The returned
    ``B_next`` equals ``int_0^dt exp(A (dt - s)) (s / dt) ds B``.
    """
    if model.is_discrete:
        raise ModelError("model is already discrete")
    if not np.isfinite(dt) or dt <= 0:
        raise ModelError(f"dt must be positive, got {dt!r}")
    n, m = model.B.shape
    M = np.zeros((n + 2 * m, n + 2 * m))
    M[:n, :n] = model.A * dt
    M[:n, n:n + m] = model.B * dt
    M[n:n + m, n + m:] = np.eye(m)
    E = expm(M)
    Ad = E[:n, :n]
    Bd = E[:n, n:n + m]
    B_next = E[:n, n + m:]
    return StateSpaceModel(A=Ad, B=Bd, C=model.C.copy(), dt=float(dt), B_next=B_next,
                           coordinate_tag=model.coordinate_tag)


@dataclass(frozen=True)
class LadderNetwork:
    """Cascade of ``n`` identical pi-sections used by the simulator.

    Section ``k`` joins node ``k`` to node ``k + 1``.  Each node carries the
    shunt capacitance of the sections touching it.
    """

    n: int
    R_section: np.ndarray
    L_section: np.ndarray
    node_capacitance: tuple[np.ndarray, ...] = field(repr=False)

    def input_impedance(self, omega: float, remote: str = "open") -> np.ndarray:
        """4x4 driving-point impedance seen at node 0 at angular frequency ``omega``.

        The far node is either left ``"open"`` or ``"shorted"`` to ground.
        """
        if remote not in ("open", "shorted"):
            raise ModelError(f"remote must be 'open' or 'shorted', got {remote!r}")
        zs = self.R_section + 1j * omega * self.L_section
        if remote == "open":
            Z = np.linalg.inv(1j * omega * self.node_capacitance[self.n])
        else:
            Z = np.zeros((4, 4), complex)
        for k in range(self.n - 1, -1, -1):
            Z = zs + Z
            Z = np.linalg.inv(np.linalg.inv(Z) + 1j * omega * self.node_capacitance[k])
        return Z


def concatenate_sections(params: LineParameters, n: int) -> LadderNetwork:
    """Split the line into ``n`` equal pi-sections (R, L, Cap scaled by 1/n)."""
    if int(n) != n or n < 1:
        raise ModelError(f"number of sections must be a positive integer, got {n!r}")
    n = int(n)
    cap = params.Cap / n
    nodes = tuple(cap if k in (0, n) else 2.0 * cap for k in range(n + 1))
    return LadderNetwork(n=n, R_section=params.R / n, L_section=params.L / n, node_capacitance=nodes)
