"""Time-domain oracle for the two-bus test system.

The line is a cascade of pi-sections fed at both ends by Thevenin sources.
The network is integrated with the trapezoidal rule on a fixed step.  Faults
are resistive branches stamped at the section boundary nearest the fault
location; after the scheduled end of a fault each branch opens at its own
current zero, as a breaker would.

Terminal measurements follow the line model sign convention: both terminal
currents flow into the line and the neutral conductor is grounded at both
terminals (its voltage is the constant pseudo-measurement 0).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.linalg import solve

from . import kernels
from .model import (
    LineParameters,
    concatenate_sections,
    fault_branches,
)

__all__ = [
    "CURRENT_CHANNELS",
    "VOLTAGE_CHANNELS",
    "PSEUDO_CHANNELS",
    "SimulationError",
    "SourceModel",
    "FaultScenario",
    "Waveforms",
    "OracleNetwork",
    "TABLE2",
    "HEALTHY_WINDOW",
    "default_sources",
    "simulate",
    "add_noise",
    "inject_bad_data",
    "run_event_table",
]

CURRENT_CHANNELS = ("ia1", "ib1", "ic1", "in1", "ia2", "ib2", "ic2", "in2")
VOLTAGE_CHANNELS = ("va1", "vb1", "vc1", "vn1", "va2", "vb2", "vc2", "vn2")
PSEUDO_CHANNELS = ("vn1", "vn2")

_PHASE_SHIFT = np.array([0.0, -2.0 * np.pi / 3.0, 2.0 * np.pi / 3.0])


class SimulationError(ValueError):
    """Raised for invalid scenarios or unstable integration."""


@dataclass(frozen=True)
class SourceModel:
    """Balanced three-phase Thevenin source.

    Parameters
    ----------
    amplitude : float
        Peak phase-to-neutral EMF (V).
    angle : float
        Phase-A EMF angle (rad).
    R, L : float
        Per-phase series resistance (ohm) and inductance (H).
    frequency : float
        System frequency (Hz).
    """

    amplitude: float
    angle: float = 0.0
    R: float = 1.0
    L: float = 0.01
    frequency: float = 60.0

    def __post_init__(self):
        if not self.amplitude > 0:
            raise SimulationError(f"source amplitude must be positive, got {self.amplitude!r}")
        if self.R < 0 or self.L < 0:
            raise SimulationError("source impedance must be non-negative")
        if self.L == 0:
            raise SimulationError("source inductance must be positive for the state model")

    def emf(self, t: np.ndarray) -> np.ndarray:
        """EMF samples, shape ``(len(t), 3)``."""
        w = 2.0 * np.pi * self.frequency
        t = np.asarray(t, dtype=float)
        return self.amplitude * np.cos(w * t[:, None] + self.angle + _PHASE_SHIFT[None, :])

    def phasor(self) -> np.ndarray:
        return self.amplitude * np.exp(1j * (self.angle + _PHASE_SHIFT))


def default_sources(line: LineParameters, angle_deg: float = 10.0, R: float = 1.0,
                    L: float = 0.01) -> tuple[SourceModel, SourceModel]:
    """Stiff sources at rated voltage with the left end leading by ``angle_deg``."""
    half = np.deg2rad(angle_deg) / 2.0
    return (SourceModel(line.v_base, +half, R, L), SourceModel(line.v_base, -half, R, L))


@dataclass(frozen=True)
class FaultScenario:
    """One scheduled event.

    ``kind`` is a line fault type (``"A-G"``, ``"A-B"``, ``"A-B-C"``, ...) or
    ``"loss"`` for a lost current measurement, in which case ``channel`` names
    the current channel and ``Rf``/``location_km`` are unused.  External faults
    (``internal=False``) are placed on the right bus outside the measured span.
    """

    event_id: int
    kind: str
    t_start: float
    t_end: float
    Rf: Optional[float] = None
    location_km: Optional[float] = None
    internal: bool = True
    channel: Optional[str] = None

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise SimulationError(f"event {self.event_id}: t_start must precede t_end")
        if self.kind == "loss":
            if self.channel not in CURRENT_CHANNELS:
                raise SimulationError(f"event {self.event_id}: loss events need a current channel, got {self.channel!r}")
            return
        if self.Rf is None or not self.Rf > 0:
            raise SimulationError(f"event {self.event_id}: fault resistance must be positive, got {self.Rf!r}")
        if self.location_km is None or self.location_km < 0:
            raise SimulationError(f"event {self.event_id}: location must be non-negative")
        fault_branches(self.kind, self.Rf)  # validates the type

    @property
    def is_bad_data(self) -> bool:
        return self.kind == "loss"


# Simulated events: nine faults then six lost current channels.
TABLE2: tuple[FaultScenario, ...] = (
    FaultScenario(1, "A-G", 0.6, 0.8, 1000.0, 48.0),
    FaultScenario(2, "B-G", 1.0, 1.2, 500.0, 48.0),
    FaultScenario(3, "B-C", 1.4, 1.6, 0.5, 48.0),
    FaultScenario(4, "C-G", 1.8, 2.0, 500.0, 64.0),
    FaultScenario(5, "C-A", 2.2, 2.4, 10.0, 64.0),
    FaultScenario(6, "A-B", 2.6, 2.8, 20.0, 64.0),
    FaultScenario(7, "A-B-C", 3.0, 3.2, 1.0, 128.032, internal=False),
    FaultScenario(8, "A-B-C", 3.4, 3.6, 2.0, 16.0),
    FaultScenario(9, "A-G", 3.8, 4.0, 1.0, 16.0),
    FaultScenario(10, "loss", 4.2, 4.4, channel="ia1"),
    FaultScenario(11, "loss", 4.6, 4.8, channel="ib1"),
    FaultScenario(12, "loss", 5.0, 5.2, channel="ic1"),
    FaultScenario(13, "loss", 5.4, 5.6, channel="ia2"),
    FaultScenario(14, "loss", 5.8, 6.0, channel="ib2"),
    FaultScenario(15, "loss", 6.2, 6.4, channel="ic2"),
)
HEALTHY_WINDOW = (0.1, 0.5)


@dataclass
class Waveforms:
    """Sampled terminal measurements in SI units.

    ``currents`` columns follow :data:`CURRENT_CHANNELS` and ``voltages``
    follow :data:`VOLTAGE_CHANNELS`; sample ``k`` is at ``t0 + k dt``.
    """

    dt: float
    currents: np.ndarray
    voltages: np.ndarray
    v_base: float
    i_base: float
    t0: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.currents = np.asarray(self.currents, dtype=float)
        self.voltages = np.asarray(self.voltages, dtype=float)
        if self.currents.ndim != 2 or self.currents.shape[1] != 8:
            raise SimulationError(f"currents must be (K, 8), got {self.currents.shape}")
        if self.voltages.shape != self.currents.shape:
            raise SimulationError("current and voltage channels must have equal length")
        if not self.dt > 0:
            raise SimulationError("dt must be positive")

    def __len__(self) -> int:
        return self.currents.shape[0]

    @property
    def time(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    def channel(self, name: str) -> np.ndarray:
        if name in CURRENT_CHANNELS:
            return self.currents[:, CURRENT_CHANNELS.index(name)]
        if name in VOLTAGE_CHANNELS:
            return self.voltages[:, VOLTAGE_CHANNELS.index(name)]
        raise KeyError(name)

    def per_unit(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(u, y)`` in per-unit: currents and voltages, each ``(K, 8)``."""
        return self.currents / self.i_base, self.voltages / self.v_base

    def copy(self) -> "Waveforms":
        return replace(self, currents=self.currents.copy(), voltages=self.voltages.copy(), meta=dict(self.meta))

    def slice(self, t_start: float, t_end: float) -> "Waveforms":
        k0 = max(int(np.ceil((t_start - self.t0) / self.dt - 1e-9)), 0)
        k1 = min(int(np.floor((t_end - self.t0) / self.dt + 1e-9)) + 1, len(self))
        return replace(self, currents=self.currents[k0:k1].copy(), voltages=self.voltages[k0:k1].copy(),
                       t0=self.t0 + k0 * self.dt, meta=dict(self.meta))


class OracleNetwork:
    """Sources plus an ``n``-section ladder as ``M dx/dt = J x + Bs e``.

    State order: free node voltages (terminal nodes carry A, B, C; interior
    nodes also N), section currents (4 per section), left then right source
    currents (3 each).  ``e`` stacks left and right source EMFs.
    """

    def __init__(self, line: LineParameters, sources: tuple[SourceModel, SourceModel], n_sections: int):
        self.line = line
        self.sources = sources
        self.ladder = concatenate_sections(line, n_sections)
        n = self.n = self.ladder.n
        self.nv = 6 + 4 * (n - 1)
        self.ni = 4 * n
        self.N = self.nv + self.ni + 6
        self.isl = np.arange(self.nv + self.ni, self.nv + self.ni + 3)
        self.isr = np.arange(self.nv + self.ni + 3, self.N)

    # node j -> (state indices, conductor indices)
    def node(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        if j == 0:
            return np.arange(0, 3), np.arange(3)
        if j == self.n:
            return np.arange(self.nv - 3, self.nv), np.arange(3)
        b = 3 + 4 * (j - 1)
        return np.arange(b, b + 4), np.arange(4)

    def section(self, k: int) -> np.ndarray:
        return np.arange(self.nv + 4 * k, self.nv + 4 * k + 4)

    def node_voltage_map(self, j: int) -> np.ndarray:
        """4 x N map from state to the four conductor voltages of node ``j``."""
        idx, cond = self.node(j)
        Mv = np.zeros((4, self.N))
        Mv[cond, idx] = 1.0
        return Mv

    def matrices(self, branches: Sequence[tuple[int, np.ndarray, float]] = ()):
        """Return ``(M, J, Bs)`` for a list of ``(node, incidence, conductance)`` branches."""
        n, N = self.n, self.N
        lad = self.ladder
        M = np.zeros((N, N))
        J = np.zeros((N, N))
        Bs = np.zeros((N, 6))
        for j in range(n + 1):
            idx, cond = self.node(j)
            M[np.ix_(idx, idx)] = lad.node_capacitance[j][np.ix_(cond, cond)]
            if j > 0:
                J[np.ix_(idx, self.section(j - 1)[cond])] += np.eye(len(cond))
            if j < n:
                J[np.ix_(idx, self.section(j)[cond])] -= np.eye(len(cond))
        for k in range(n):
            s = self.section(k)
            M[np.ix_(s, s)] = lad.L_section
            J[np.ix_(s, s)] = -lad.R_section
            a, ca = self.node(k)
            b, cb = self.node(k + 1)
            J[np.ix_(s[ca], a)] += np.eye(len(ca))
            J[np.ix_(s[cb], b)] -= np.eye(len(cb))
        for src, isx, j, col in ((self.sources[0], self.isl, 0, 0), (self.sources[1], self.isr, n, 3)):
            idx, _ = self.node(j)
            M[np.ix_(isx, isx)] = src.L * np.eye(3)
            J[np.ix_(isx, isx)] = -src.R * np.eye(3)
            J[np.ix_(isx, idx)] -= np.eye(3)
            J[np.ix_(idx, isx)] += np.eye(3)
            Bs[isx, col:col + 3] = np.eye(3)
        for j, a, g in branches:
            Mv = self.node_voltage_map(j)
            idx, cond = self.node(j)
            # Current g a^T v leaves node j along a.
            J[idx, :] -= g * np.outer(a, a @ Mv)[cond]
        return M, J, Bs

    def state_space(self, branches=()):
        M, J, Bs = self.matrices(branches)
        return solve(M, J), solve(M, Bs)

    def output_maps(self, A: np.ndarray, B: np.ndarray, external: Sequence[tuple[np.ndarray, float]] = ()):
        """Linear maps giving measured currents and voltages from state and EMF.

        Returns ``(Ux, Ue, Yx)`` with ``u = Ux x + Ue e`` and ``y = Yx x``.
        """
        n, N = self.n, self.N
        cn = self.ladder.node_capacitance[0]
        Ux = np.zeros((8, N))
        Ue = np.zeros((8, 6))
        Yx = np.zeros((8, N))
        i0, _ = self.node(0)
        iN, _ = self.node(n)
        Ux[0:3, self.isl] = np.eye(3)
        Ux[4:7, self.isr] = np.eye(3)
        for a, g in external:
            Mv = self.node_voltage_map(n)
            Ux[4:7] -= g * np.outer(a, a @ Mv)[:3]
        # Neutral current entering the line: charging current of the neutral
        # conductor at the terminal plus the section current it feeds.
        Ux[3] = cn[3, :3] @ A[i0] + np.eye(N)[self.section(0)[3]]
        Ue[3] = cn[3, :3] @ B[i0]
        Ux[7] = cn[3, :3] @ A[iN] - np.eye(N)[self.section(n - 1)[3]]
        Ue[7] = cn[3, :3] @ B[iN]
        Yx[0:3, i0] = np.eye(3)
        Yx[4:7, iN] = np.eye(3)
        return Ux, Ue, Yx

    def emf(self, t: np.ndarray) -> np.ndarray:
        return np.hstack([self.sources[0].emf(t), self.sources[1].emf(t)])

    def emf_phasor(self) -> np.ndarray:
        return np.concatenate([self.sources[0].phasor(), self.sources[1].phasor()])


class _Topology:
    """Cached trapezoidal step matrices for one set of closed fault branches."""

    def __init__(self, net: OracleNetwork, h: float, branches, external):
        self.branches = branches
        self.external = external
        allb = list(branches) + [(net.n, a, g) for a, g in external]
        A, B = net.state_space(allb)
        I = np.eye(net.N)
        lhs = I - 0.5 * h * A
        self.A, self.B = A, B
        self.P = solve(lhs, I + 0.5 * h * A)
        self.Q = solve(lhs, 0.5 * h * B)
        # Backward Euler over h/2 shares the same left-hand side.
        self.P_be = solve(lhs, I)
        self.Ux, self.Ue, self.Yx = net.output_maps(A, B, external)
        rho = np.abs(np.linalg.eigvals(self.P)).max()
        if rho > 1.0 + 1e-9:
            raise SimulationError(f"trapezoidal step unstable (spectral radius {rho:.6f})")


def _sample_index(t: float, dt: float) -> int:
    return int(np.ceil(t / dt - 1e-9))


def simulate(scenarios: Iterable[FaultScenario], line: LineParameters,
             sources: Optional[tuple[SourceModel, SourceModel]] = None, dt: float = 1e-4,
             n_sections: int = 16, t_stop: Optional[float] = None, return_states: bool = False,
             max_clearing_cycles: float = 2.0, damp_switching: bool = True):
    """Integrate the network through a schedule of faults.

    Bad-data scenarios in ``scenarios`` are applied to the recorded waveforms
    after integration.

    Parameters
    ----------
    scenarios : iterable of FaultScenario
        Non-overlapping events.
    line : LineParameters
    sources : pair of SourceModel, optional
        Defaults to :func:`default_sources`.
    dt : float
        Step and sampling interval (s).
    n_sections : int
        Number of pi-sections.
    t_stop : float, optional
        Last sample time; defaults to the end of the last event plus 0.1 s.
    return_states : bool
        Also return the ``(K, N)`` state trajectory and the network.
    max_clearing_cycles : float
        Fault branches still conducting this long after ``t_end`` are forced open.
    damp_switching : bool
        Replace the step following each topology change by two backward-Euler
        half steps.  This suppresses the undamped alternating ringing that the
        trapezoidal rule leaves in stiff modes after a discontinuity.

    Returns
    -------
    Waveforms, or ``(Waveforms, states, network)`` when ``return_states``.
    """
    if not dt > 0:
        raise SimulationError("dt must be positive")
    scenarios = sorted(scenarios, key=lambda s: s.t_start)
    faults = [s for s in scenarios if not s.is_bad_data]
    bad = [s for s in scenarios if s.is_bad_data]
    for a, b in zip(faults, faults[1:]):
        if b.t_start < a.t_end:
            raise SimulationError(f"events {a.event_id} and {b.event_id} overlap")
    for s in faults:
        if s.internal and not 0.0 <= s.location_km <= line.length_km:
            raise SimulationError(f"event {s.event_id}: location {s.location_km} km outside [0, {line.length_km}]")
    if sources is None:
        sources = default_sources(line)
    if t_stop is None:
        t_stop = max([s.t_end for s in scenarios], default=0.0) + 0.1
    net = OracleNetwork(line, sources, n_sections)
    n = net.n
    K = int(round(t_stop / dt)) + 1
    t = dt * np.arange(K + 1)
    E = net.emf(t)
    cache: dict = {}

    def topo(key, branches=(), external=()):
        if key not in cache:
            cache[key] = _Topology(net, dt, branches, external)
        return cache[key]

    healthy = topo(None)
    # Periodic steady state of the trapezoidal recursion itself.
    w = 2.0 * np.pi * sources[0].frequency
    z = np.exp(1j * w * dt)
    X = np.linalg.solve(z * np.eye(net.N) - healthy.P, healthy.Q @ net.emf_phasor() * (1.0 + z))
    x = X.real.copy()

    U = np.empty((K, 8))
    Y = np.empty((K, 8))
    states = np.empty((K, net.N)) if return_states else None

    def run(tp: _Topology, k0: int, k1: int, x0: np.ndarray) -> np.ndarray:
        if k1 <= k0:
            return x0
        Wf = (E[k0:k1] + E[k0 + 1:k1 + 1]) @ tp.Q.T
        Xs = kernels.affine_recursion(tp.P, Wf, x0)
        U[k0:k1] = Xs[:-1] @ tp.Ux.T + E[k0:k1] @ tp.Ue.T
        Y[k0:k1] = Xs[:-1] @ tp.Yx.T
        if states is not None:
            states[k0:k1] = Xs[:-1]
        if not np.all(np.isfinite(Xs[-1])):
            raise SimulationError("integration produced non-finite values")
        return Xs[-1]

    def switch_step(tp: _Topology, k0: int, x0: np.ndarray) -> np.ndarray:
        if not damp_switching or k0 >= K:
            return run(tp, k0, k0 + 1, x0) if k0 < K else x0
        U[k0] = tp.Ux @ x0 + tp.Ue @ E[k0]
        Y[k0] = tp.Yx @ x0
        if states is not None:
            states[k0] = x0
        e_half = net.emf(np.array([t[k0] + 0.5 * dt]))[0]
        xh = tp.P_be @ x0 + tp.Q @ e_half
        return tp.P_be @ xh + tp.Q @ E[k0 + 1]

    k = 0
    for ev in faults:
        k_on = min(_sample_index(ev.t_start, dt), K)
        k_off = min(_sample_index(ev.t_end, dt), K)
        x = run(healthy, k, k_on, x)
        k = k_on
        if k >= K:
            break
        arcs = fault_branches(ev.kind, ev.Rf)
        if ev.internal:
            j = int(round(ev.location_km / line.length_km * n))
            nodes = [j] * len(arcs)
        else:
            nodes = [n] * len(arcs)
        closed = [True] * len(arcs)

        def current_topo():
            key = (ev.event_id, tuple(closed))
            br = [(nodes[i], arcs[i][0], arcs[i][1]) for i in range(len(arcs)) if closed[i] and ev.internal]
            ext = [arcs[i] for i in range(len(arcs)) if closed[i] and not ev.internal]
            return topo(key, br, ext)

        tp = current_topo()
        if k_off > k:
            x = switch_step(tp, k, x)
            x = run(tp, k + 1, k_off, x)
        k = k_off
        # Branch currents g a^T v at the fault node.
        Mv = net.node_voltage_map(nodes[0])
        gmap = np.array([g * (a @ Mv) for a, g in arcs])
        limit = k + int(np.ceil(max_clearing_cycles / (sources[0].frequency * dt)))
        last = None
        prev_state = tuple(closed)
        while any(closed) and k < K:
            cur = gmap @ x
            if last is not None:
                for i in range(len(arcs)):
                    if closed[i] and (cur[i] == 0.0 or np.sign(cur[i]) != np.sign(last[i])):
                        closed[i] = False
                if k >= limit and any(closed):
                    warnings.warn(f"event {ev.event_id}: forcing open after {max_clearing_cycles} cycles")
                    closed = [False] * len(arcs)
            changed = last is not None and tuple(closed) != prev_state
            last = cur
            prev_state = tuple(closed)
            if not any(closed):
                break
            x = switch_step(current_topo(), k, x) if changed else run(current_topo(), k, k + 1, x)
            k += 1
        if k < K:
            x = switch_step(healthy, k, x)
            k += 1
    x = run(healthy, k, K, x)

    wf = Waveforms(dt=dt, currents=U, voltages=Y, v_base=line.v_base, i_base=line.i_base,
                   meta={"n_sections": n, "source": "oracle"})
    for s in bad:
        wf = inject_bad_data(wf, s.channel, s.t_start, s.t_end)
    if return_states:
        return wf, states, net
    return wf


def add_noise(w: Waveforms, amplitude_pu: float, rng=None) -> Waveforms:
    """Add independent uniform noise of ``amplitude_pu`` to every measured channel.

    The neutral-voltage pseudo-measurements are left untouched.
    """
    if amplitude_pu < 0:
        raise SimulationError("noise amplitude must be non-negative")
    out = w.copy()
    if amplitude_pu == 0:
        return out
    rng = np.random.default_rng(rng)
    K = len(w)
    out.currents = out.currents + w.i_base * rng.uniform(-amplitude_pu, amplitude_pu, (K, 8))
    nv = rng.uniform(-amplitude_pu, amplitude_pu, (K, 8))
    for name in PSEUDO_CHANNELS:
        nv[:, VOLTAGE_CHANNELS.index(name)] = 0.0
    out.voltages = out.voltages + w.v_base * nv
    return out


def inject_bad_data(w: Waveforms, channel: str, t_start: float, t_end: float, mode: str = "loss") -> Waveforms:
    """Force a current channel to zero on ``[t_start, t_end]``."""
    if mode != "loss":
        raise SimulationError(f"unsupported bad-data mode {mode!r}")
    if channel in VOLTAGE_CHANNELS:
        raise SimulationError(f"unsupported mode: bad data on voltage channel {channel!r}")
    if channel not in CURRENT_CHANNELS:
        raise SimulationError(f"unknown channel {channel!r}")
    out = w.copy()
    if t_end <= t_start:
        return out
    tt = w.time
    mask = (tt >= t_start - 1e-9 * w.dt) & (tt <= t_end + 1e-9 * w.dt)
    out.currents[mask, CURRENT_CHANNELS.index(channel)] = 0.0
    return out


def run_event_table(line: LineParameters, sources: Optional[tuple[SourceModel, SourceModel]] = None,
                    dt: float = 1e-4, n_sections: int = 16, events: Sequence[FaultScenario] = TABLE2,
                    t_stop: float = 6.4) -> Waveforms:
    """Simulate the full event schedule (noiseless)."""
    return simulate(events, line, sources, dt=dt, n_sections=n_sections, t_stop=t_stop)
