"""Compare diagnoses against a known event schedule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from .engine import Diagnosis, nontrivial
from .sim import CURRENT_CHANNELS, FaultScenario

__all__ = ["EventResult", "location_tolerance_km", "match_events", "format_table"]

# Tolerance tiers as a fraction of line length.
LOW_IMPEDANCE_OHM = 20.0
LOW_IMPEDANCE_TOL = 0.005
HIGH_IMPEDANCE_TOL = 0.025


def location_tolerance_km(event: FaultScenario, length_km: float) -> float:
    frac = LOW_IMPEDANCE_TOL if event.Rf <= LOW_IMPEDANCE_OHM else HIGH_IMPEDANCE_TOL
    return frac * length_km


@dataclass(frozen=True)
class EventResult:
    event: Optional[FaultScenario]
    expected: str
    observed: str
    location_km: Optional[float] = None
    error_km: Optional[float] = None
    tolerance_km: Optional[float] = None
    verdict_ok: bool = True
    location_ok: bool = True

    @property
    def ok(self) -> bool:
        return self.verdict_ok and self.location_ok


def _expected(ev: FaultScenario) -> str:
    if ev.is_bad_data:
        return f"bad_data ch{CURRENT_CHANNELS.index(ev.channel) + 1}"
    if not ev.internal:
        return "none"
    return f"fault {ev.kind}"


def match_events(diagnoses: Sequence[Diagnosis], events: Sequence[FaultScenario], length_km: float,
                 margin: float = 0.1) -> list[EventResult]:
    """One result per scheduled event, plus one per unmatched detection.

    A detection belongs to an event when its span overlaps
    ``[t_start, t_end + margin]``.
    """
    found = nontrivial(diagnoses)
    used: set[int] = set()
    rows = []
    for ev in sorted(events, key=lambda e: e.t_start):
        hits = [i for i, d in enumerate(found) if d.t0 <= ev.t_end + margin and d.t1 >= ev.t_start]
        used.update(hits)
        exp = _expected(ev)
        obs = "; ".join(found[i].label for i in hits) or "none"
        ok = obs == exp
        loc = err = tol = None
        loc_ok = True
        if ok and exp.startswith("fault"):
            loc = found[hits[0]].location_km
            tol = location_tolerance_km(ev, length_km)
            if loc is None:
                loc_ok = False
            else:
                err = abs(loc - ev.location_km)
                loc_ok = err <= tol
        rows.append(EventResult(ev, exp, obs, loc, err, tol, ok, loc_ok))
    for i, d in enumerate(found):
        if i not in used:
            rows.append(EventResult(None, "none", d.label, verdict_ok=False))
    return rows


def format_table(rows: Sequence[EventResult]) -> str:
    head = f"{'event':>5}  {'expected':<16}{'observed':<22}{'loc km':>8}{'err km':>8}{'tol km':>8}  result"
    out = [head, "-" * len(head)]
    for r in rows:
        eid = "-" if r.event is None else str(r.event.event_id)
        f = lambda v: f"{v:8.2f}" if v is not None else f"{'':8}"
        out.append(f"{eid:>5}  {r.expected:<16}{r.observed:<22}{f(r.location_km)}{f(r.error_km)}{f(r.tolerance_km)}"
                   f"  {'PASS' if r.ok else 'FAIL'}")
    return "\n".join(out)
