"""Acceptance criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v`` to see the lines.
"""

import time

import numpy as np
import pytest

from linefdi.design import (
    REFERENCE_UNASSIGNABLE,
    calibrate_dt,
    design_filter,
    detection_generator,
    detection_space,
    event_vectors,
    excess_subspace,
    multiple_detection_space,
    multiset_distance,
)
from linefdi.engine import classify, locate, nontrivial, run_observer, run_stream
from linefdi.model import build_single_section, discretize, fault_signature, null_space_of_c
from linefdi.report import format_table, match_events
from linefdi.sim import HEALTHY_WINDOW, TABLE2, FaultScenario, add_noise, run_event_table, simulate

THRESHOLD = 0.02


@pytest.fixture
def report(capsys):
    def emit(n, ok, text):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}  {text}")
    return emit


@pytest.fixture(scope="module")
def pipeline(line):
    """Design, simulate with 0.02 pu noise and diagnose the full schedule."""
    t = time.perf_counter()
    design = design_filter(line, 1e-4, 0.1)
    w = add_noise(run_event_table(line), 0.02, 0)
    u, y = w.per_unit()
    diags = run_stream(u, y, design, threshold=THRESHOLD)
    elapsed = time.perf_counter() - t
    return design, diags, match_events(diags, TABLE2, line.length_km), elapsed


def _rank(M, rtol=1e-8):
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s > rtol * s[0]))


def _stacked(A, C, f):
    f = f[:, None]
    Cf = C @ f
    Cp = (np.eye(C.shape[0]) - Cf @ np.linalg.pinv(Cf)) @ C
    Acl = A - A @ f @ np.linalg.pinv(Cf) @ C
    blocks = [Cp @ np.linalg.matrix_power(Acl, k) for k in range(A.shape[0])]
    return np.vstack([b / np.linalg.norm(b, 2) for b in blocks])


def test_criterion_1_subspace_dimensions(line, report):
    t = time.perf_counter()
    disc = discretize(build_single_section(line), 1e-4)
    G0 = event_vectors(disc)
    ranks, orders = [], []
    spaces = []
    for i in range(8):
        ranks.append(_rank(_stacked(disc.A, disc.C, G0[:, i])))
        s = detection_space(disc, G0[:, i])
        spaces.append(s)
        g = detection_generator(disc, G0[:, i], s)
        orders.append(s.dim if np.allclose(g, G0[:, i], rtol=0, atol=1e-15) else -1)
    total = multiple_detection_space(disc, G0)
    R0 = excess_subspace(disc, total, spaces)
    N0 = null_space_of_c()
    same = np.abs(R0.basis @ R0.basis.T - N0 @ N0.T).max()
    elapsed = time.perf_counter() - t
    ok = ranks == [11] * 8 and orders == [1] * 8 and total.dim == 12 and R0.dim == 4 and same < 1e-8 and elapsed < 1.0
    report(1, ok, f"rank(M'_i)={sorted(set(ranks))} v_i={sorted(set(orders))} d(R_F)={total.dim} "
                  f"d(R_0)={R0.dim} |P_R0-P_null(C)|={same:.1e} runtime={elapsed:.3f}s")
    assert ok


def test_criterion_2_fixed_eigenvalues(line, report):
    sets = {lam: design_filter(line, 1e-4, lam).unassignable_eigenvalues for lam in (0.1, 0.2, 0.5)}
    base = sets[0.1]
    dist = max(multiset_distance(v, base) for v in sets.values())
    radius = float(np.abs(base).max())
    dt_fit, d_fit, ev_fit = calibrate_dt(line)
    ok = dist <= 1e-8 and radius < 1.0
    report(2, ok, f"max multiset distance {dist:.1e}, max |z| {radius:.4f}; at dt=1e-4 "
                  f"{np.round(np.abs(base), 4).tolist()} vs reference {list(REFERENCE_UNASSIGNABLE)}; "
                  f"closest fit dt={dt_fit:.3e}s distance {d_fit:.4f}")
    assert ok


def test_criterion_3_unidirectionality(design, report):
    rng = np.random.default_rng(2024)
    Acl = design.closed_loop
    TC = design.Tm @ design.model.C
    worst = np.inf
    for trial in range(1000):
        i = trial % 8
        n = rng.uniform(-1.0, 1.0, 100)
        eps = np.zeros(12)
        R = np.empty((100, 8))
        for k in range(100):
            R[k] = TC @ eps
            eps = Acl @ eps + design.generators[:, i] * n[k]
        energy = np.sum(R ** 2, axis=0)
        off = np.delete(energy, i).max()
        worst = min(worst, energy[i] / off if off > 0 else np.inf)
    ok = worst >= 1e9
    report(3, ok, f"worst own/off-channel energy ratio over 1000 trials {worst:.2e} (limit 1e9)")
    assert ok


def test_criterion_4_bad_data(pipeline, report):
    design, diags, rows, _ = pipeline
    found = nontrivial(diags)
    hits = 0
    detail = []
    for ev in TABLE2[9:]:
        ch = ["ia1", "ib1", "ic1", "in1", "ia2", "ib2", "ic2", "in2"].index(ev.channel)
        m = [d for d in found if d.t0 <= ev.t_end + 0.1 and d.t1 >= ev.t_start]
        above = [np.flatnonzero(d.magnitudes > THRESHOLD).tolist() for d in m]
        good = len(m) == 1 and m[0].verdict == "bad_data" and above[0] == [ch]
        hits += good
        detail.append(f"{ev.event_id}:{'ok' if good else above}")
    ok = hits == 6
    report(4, ok, f"{hits}/6 lost channels isolated ({', '.join(detail)})")
    assert ok


def test_criterion_5_classification(pipeline, report):
    _, _, rows, _ = pipeline
    fault_rows = [r for r in rows if r.event is not None and not r.event.is_bad_data]
    extra = [r for r in rows if r.event is None]
    good = sum(r.verdict_ok for r in fault_rows)
    ok = good == 9 and len(fault_rows) == 9 and not extra
    detail = ", ".join(f"{r.event.event_id}:{r.observed}" for r in fault_rows)
    report(5, ok, f"{good}/9 correct ({detail}); spurious detections {len(extra)}")
    assert ok


def test_criterion_6_location(pipeline, report):
    _, diags, rows, elapsed = pipeline
    located = [r for r in rows if r.event is not None and r.expected.startswith("fault")]
    ok_loc = all(r.location_ok and r.verdict_ok for r in located)
    ok = ok_loc and len(located) == 8 and elapsed < 120.0
    detail = ", ".join(f"{r.event.event_id}:{r.location_km:.2f}km(err {r.error_km:.2f}/{r.tolerance_km:.2f})"
                       if r.location_km is not None else f"{r.event.event_id}:none" for r in located)
    report(6, ok, f"{detail}; pipeline runtime {elapsed:.1f}s")
    print(format_table(rows))
    assert ok


def test_criterion_7_rf_invariance(design, report):
    alpha = 0.375
    Acl = design.closed_loop
    TC = design.Tm @ design.model.C
    g = design.model.B @ fault_signature("A-G", alpha).vector()
    vaf = np.sqrt(2) * np.sin(2 * np.pi * 60 * 1e-4 * np.arange(2000))
    got = []
    for rf in (1.0, 10.0, 100.0, 1000.0):
        eps = np.zeros(12)
        R = np.empty((2000, 8))
        for k in range(2000):
            R[k] = TC @ eps
            eps = Acl @ eps + g * vaf[k] / rf
        w = R[500:]
        thr = 1e-6 * np.abs(w).max()
        got.append(locate(w, classify(w, threshold=thr), design.length_km, threshold=thr)[0])
    spread = max(got) - min(got)
    ok = spread <= 1e-6 and abs(got[0] - alpha) <= 1e-6
    report(7, ok, f"alpha over Rf in {{1,10,100,1000}}: {[round(a, 9) for a in got]}, spread {spread:.1e}")
    assert ok


def _matched_stream(design, u, z0):
    m = design.model
    Bn = m.B_next[:, :8]
    B0 = m.B[:, :8] - Bn
    K = len(u)
    y = np.empty((K, 8))
    z = z0.copy()
    for k in range(K):
        y[k] = m.C @ z
        z = m.A @ z + B0 @ u[k] + Bn @ u[min(k + 1, K - 1)]
    return y


def _settle(can, tol=1e-9):
    bad = np.flatnonzero(np.abs(can).max(axis=1) >= tol)
    return 0 if bad.size == 0 else int(bad[-1]) + 1


def test_criterion_8_observer_convergence(line, design, noisy_waveforms, report):
    # Plant: the observer's own discrete model driven by healthy line currents,
    # started on its periodic steady state; observer starts from zero.
    m = design.model
    w = simulate([], line, n_sections=1, t_stop=1.0)
    u, _ = w.per_unit()
    dt = m.dt
    om = 2 * np.pi * 60
    zz = np.exp(1j * om * dt)
    t = dt * np.arange(len(u))
    ncyc = int(round(10 / (60 * dt)))
    U = 2 * np.mean(u[:ncyc] * np.exp(-1j * om * t[:ncyc, None]), axis=0)
    Bn = m.B_next[:, :8]
    Z = np.linalg.solve(zz * np.eye(12) - m.A, (m.B[:, :8] - Bn + zz * Bn) @ U)
    _, can = run_observer(design, u, _matched_stream(design, u, Z.real))
    settle_ss = _settle(can)
    # Same plant, initial error restricted to the assignable subspace.
    rng = np.random.default_rng(8)
    z0 = design.generators @ rng.normal(size=8)
    _, can_a = run_observer(design, u[:200], _matched_stream(design, u[:200], z0))
    settle_a = _settle(can_a)
    # Noisy healthy window of the full schedule.
    lo, hi = HEALTHY_WINDOW
    uu, yy = noisy_waveforms.slice(0.0, hi).per_unit()
    quiet = [d for d in run_stream(uu, yy, design) if d.t0 >= lo - 1e-9]
    false = [d.label for d in nontrivial(quiet)]
    ok = settle_ss <= 50 and settle_a <= 50 and not false
    report(8, ok, f"matched stream from periodic steady state below 1e-9 pu after {settle_ss} samples (limit 50); "
                  f"from an assignable-subspace error after {settle_a} samples; "
                  f"false verdicts in {lo}-{hi}s with noise: {false or 'none'}. "
                  f"Slow decay: unassignable modes |z| up to {np.abs(design.unassignable_eigenvalues).max():.4f} "
                  f"feed the residual through C A R_0")
    assert ok


def _order_ratio(waves, n_out):
    y = [w.per_unit()[1][::2 ** i][:n_out] for i, w in enumerate(waves)]
    e1 = np.sqrt(np.mean((y[0] - y[1]) ** 2))
    e2 = np.sqrt(np.mean((y[1] - y[2]) ** 2))
    return e1 / e2


def test_criterion_9_order(line, report):
    # 0.1 s healthy window at 100/50/25 us, full ladder.
    hw = [simulate([], line, dt=h, t_stop=0.1) for h in (1e-4, 5e-5, 2.5e-5)]
    r_h = _order_ratio(hw, 1001)
    # Faulted window: one section and steps short enough to resolve the
    # switching transient.
    ev = FaultScenario(1, "A-G", 0.01, 1.0, 1000.0, 48.0)
    fw = [simulate([ev], line, dt=h, n_sections=1, t_stop=0.02) for h in (4e-6, 2e-6, 1e-6)]
    r_f = _order_ratio(fw, 5001)
    ok = 3.0 <= r_h <= 5.0 and 3.0 <= r_f <= 5.0
    report(9, ok, f"RMS difference ratio on halving dt: healthy {r_h:.3f}, faulted {r_f:.3f} (limits 3-5)")
    assert ok
