"""Configuration, waveform, design and report files.

Formats
-------
Line parameters and run settings are INI files (see ``data/table1.cfg`` and
the README).  Waveforms are CSV with a header row ``t, ia1 .. in2, va1 .. vn2``
in SI units plus a JSON sidecar ``<file>.meta.json`` holding ``dt`` and the
per-unit bases.  Filter designs are JSON with row-major matrices.  Diagnoses
are JSON lines validated against ``data/diagnosis.schema.json``.
"""

from __future__ import annotations

import configparser
import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .design import FilterDesign
from .engine import Diagnosis, StatisticConfig
from .model import CONDUCTORS, LineParameters, ModelError, StateSpaceModel
from .sim import (
    CURRENT_CHANNELS,
    PSEUDO_CHANNELS,
    TABLE2,
    VOLTAGE_CHANNELS,
    FaultScenario,
    SimulationError,
    SourceModel,
    Waveforms,
)

__all__ = [
    "ConfigError",
    "IngestError",
    "RunConfig",
    "WAVEFORM_COLUMNS",
    "builtin_line_path",
    "builtin_run_path",
    "load_line_config",
    "write_line_config",
    "load_config",
    "write_waveforms",
    "read_waveforms",
    "save_design",
    "load_design",
    "diagnosis_record",
    "write_diagnoses",
    "read_diagnoses",
    "validate_records",
    "write_residuals",
    "read_residuals",
]

WAVEFORM_COLUMNS = ("t",) + CURRENT_CHANNELS + VOLTAGE_CHANNELS
_UNIT_SCALE = {"ohm": 1.0, "H": 1.0, "mH": 1e-3, "F": 1.0, "uF": 1e-6, "nF": 1e-9}


class ConfigError(ValueError):
    """Raised for missing or invalid configuration fields."""


class IngestError(ValueError):
    """Raised for malformed waveform or residual files."""


def builtin_line_path() -> Path:
    return Path(str(resources.files("linefdi") / "data" / "table1.cfg"))


def builtin_run_path() -> Path:
    return Path(str(resources.files("linefdi") / "data" / "run.cfg"))


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep conductor keys case-sensitive
    return cp


def _float(section: str, key: str, text: str) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{key}: expected a number, got {text!r}") from None


def load_line_config(path) -> LineParameters:
    """Read line parameters from an INI file."""
    path = Path(path)
    if str(path) in ("builtin:table1", "table1"):
        path = builtin_line_path()
    cp = _parser()
    if not cp.read(path):
        raise ConfigError(f"cannot read line config {path}")
    required = ["line.length_km", "line.v_rated", "line.i_rated"] + [f"{m}.{c}" for m in ("R", "L", "Cap") for c in CONDUCTORS]
    missing = [r for r in required if not cp.has_option(*r.split("."))]
    if missing:
        raise ConfigError(f"line config {path} is missing required fields: {', '.join(missing)}")
    mats = {}
    for name in ("R", "L", "Cap"):
        unit = cp.get(name, "unit", fallback={"R": "ohm", "L": "H", "Cap": "F"}[name])
        if unit not in _UNIT_SCALE:
            raise ConfigError(f"{name}.unit: unknown unit {unit!r}")
        rows = []
        for c in CONDUCTORS:
            vals = cp.get(name, c).split()
            if len(vals) != 4:
                raise ConfigError(f"{name}.{c}: expected 4 numbers, got {len(vals)}")
            rows.append([_float(name, c, v) for v in vals])
        mats[name] = np.array(rows) * _UNIT_SCALE[unit]
    sb = cp.get("line", "s_base", fallback="100e6").strip().lower()
    s_base = None if sb in ("none", "rated") else _float("line", "s_base", sb)
    try:
        return LineParameters(
            R=mats["R"], L=mats["L"], Cap=mats["Cap"],
            length_km=_float("line", "length_km", cp.get("line", "length_km")),
            v_rated=_float("line", "v_rated", cp.get("line", "v_rated")),
            i_rated=_float("line", "i_rated", cp.get("line", "i_rated")),
            s_base=s_base,
        )
    except ModelError as exc:
        raise ConfigError(f"line config {path}: {exc}") from None


def write_line_config(params: LineParameters, path) -> None:
    """Write line parameters in the format read by :func:`load_line_config`."""
    lines = ["[line]", f"length_km = {params.length_km!r}", f"v_rated = {params.v_rated!r}",
             f"i_rated = {params.i_rated!r}", f"s_base = {'none' if params.s_base is None else repr(params.s_base)}", ""]
    for name, unit in (("R", "ohm"), ("L", "H"), ("Cap", "F")):
        m = getattr(params, name)
        lines.append(f"[{name}]")
        lines.append(f"unit = {unit}")
        for i, c in enumerate(CONDUCTORS):
            lines.append(f"{c} = " + " ".join(repr(float(v)) for v in m[i]))
        lines.append("")
    Path(path).write_text("\n".join(lines))


@dataclass(frozen=True)
class RunConfig:
    """Validated settings for a design, simulation or end-to-end run."""

    line: LineParameters
    line_source: str
    sources: tuple[SourceModel, SourceModel]
    dt: float = 1e-4
    n_sections: int = 16
    eigenvalues: tuple[float, ...] = (0.1,)
    threshold_pu: float = 0.02
    noise_pu: float = 0.02
    seed: int = 0
    t_stop: float = 6.4
    events: tuple[FaultScenario, ...] = TABLE2
    statistic: StatisticConfig = field(default_factory=StatisticConfig)
    output_dir: Path = Path("out")


def _parse_event(key: str, text: str) -> FaultScenario:
    parts = [p.strip() for p in text.split(",")]
    try:
        eid = int(key)
    except ValueError:
        raise ConfigError(f"events.{key}: event ids must be integers") from None
    try:
        if parts[0] == "loss":
            if len(parts) != 4:
                raise ConfigError(f"events.{key}: expected 'loss, channel, t_start, t_end'")
            return FaultScenario(eid, "loss", _float("events", key, parts[2]), _float("events", key, parts[3]),
                                 channel=parts[1])
        if len(parts) not in (5, 6):
            raise ConfigError(f"events.{key}: expected 'type, t_start, t_end, Rf, location_km[, external]'")
        internal = not (len(parts) == 6 and parts[5].lower() in ("external", "ext"))
        return FaultScenario(eid, parts[0], _float("events", key, parts[1]), _float("events", key, parts[2]),
                             Rf=_float("events", key, parts[3]), location_km=_float("events", key, parts[4]),
                             internal=internal)
    except (SimulationError, ModelError) as exc:
        raise ConfigError(f"events.{key}: {exc}") from None


def load_config(path) -> RunConfig:
    """Read and validate a run configuration.

    Only ``run.line`` is required; every other field falls back to the
    documented default.
    """
    path = Path(path)
    cp = _parser()
    try:
        ok = cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not ok:
        raise ConfigError(f"cannot read config {path}")
    if not cp.has_option("run", "line"):
        raise ConfigError(f"config {path} is missing required fields: run.line")
    run = cp["run"]
    src = run.get("line").strip()
    if src.startswith("builtin:"):
        line = load_line_config(builtin_line_path())
    else:
        lp = Path(src)
        line = load_line_config(lp if lp.is_absolute() else path.parent / lp)

    def num(sec, key, default, cast=float, check=None, what=""):
        if not cp.has_option(sec, key):
            return default
        raw = cp.get(sec, key)
        try:
            val = cast(float(raw)) if cast is int else cast(raw)
        except ValueError:
            raise ConfigError(f"{sec}.{key}: expected a number, got {raw!r}") from None
        if cast is int and float(raw) != int(float(raw)):
            raise ConfigError(f"{sec}.{key}: expected an integer, got {raw!r}")
        if check is not None and not check(val):
            raise ConfigError(f"{sec}.{key}: must be {what}, got {raw!r}")
        return val

    dt = num("run", "dt", 1e-4, float, lambda v: v > 0, "positive")
    n_sections = num("run", "n_sections", 16, int, lambda v: v >= 1, "at least 1")
    threshold = num("run", "threshold_pu", 0.02, float, lambda v: v > 0, "positive")
    noise = num("run", "noise_pu", 0.02, float, lambda v: v >= 0, "non-negative")
    seed = num("run", "seed", 0, int)
    t_stop = num("run", "t_stop", 6.4, float, lambda v: v > 0, "positive")
    eig_text = run.get("eigenvalues", "0.1")
    try:
        eig = tuple(float(v) for v in eig_text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"run.eigenvalues: expected numbers, got {eig_text!r}") from None
    if len(eig) not in (1, 8) or any(abs(v) >= 1 for v in eig):
        raise ConfigError("run.eigenvalues: give 1 or 8 values inside the unit circle")
    band_text = run.get("band_hz", "45 90")
    try:
        band = tuple(float(v) for v in band_text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"run.band_hz: expected two numbers, got {band_text!r}") from None
    if len(band) != 2 or not 0 < band[0] < band[1] < 0.5 / dt:
        raise ConfigError("run.band_hz: expected 0 < low < high < Nyquist")

    angle = num("sources", "angle_deg", 10.0)
    Rs = num("sources", "R", 1.0, float, lambda v: v >= 0, "non-negative")
    Ls = num("sources", "L", 0.01, float, lambda v: v > 0, "positive")
    amp = num("sources", "amplitude", line.v_base, float, lambda v: v > 0, "positive")
    half = np.deg2rad(angle) / 2.0
    sources = (SourceModel(amp, half, Rs, Ls), SourceModel(amp, -half, Rs, Ls))

    if cp.has_section("events"):
        events = tuple(sorted((_parse_event(k, v) for k, v in cp.items("events")), key=lambda e: e.t_start))
        ids = [e.event_id for e in events]
        if len(set(ids)) != len(ids):
            raise ConfigError("events: duplicate event ids")
    else:
        events = TABLE2
    out_dir = Path(cp.get("output", "dir", fallback="out"))
    return RunConfig(line=line, line_source=src, sources=sources, dt=dt, n_sections=n_sections,
                     eigenvalues=eig, threshold_pu=threshold, noise_pu=noise, seed=seed, t_stop=t_stop,
                     events=events, statistic=StatisticConfig(band=band), output_dir=out_dir)


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def write_waveforms(w: Waveforms, path) -> None:
    """Write SI waveforms as CSV plus a JSON sidecar with dt and per-unit bases."""
    path = Path(path)
    data = np.column_stack([w.time, w.currents, w.voltages])
    np.savetxt(path, data, delimiter=",", header=",".join(WAVEFORM_COLUMNS), comments="", fmt="%.17g")
    meta = {
        "units": "SI",
        "dt": w.dt,
        "t0": w.t0,
        "samples": len(w),
        "channels": list(WAVEFORM_COLUMNS[1:]),
        "pseudo_channels": list(PSEUDO_CHANNELS),
        "v_base": w.v_base,
        "i_base": w.i_base,
        "v_base_definition": "peak phase-to-neutral rated voltage",
        "i_base_definition": "peak phase current of the system power base at rated voltage",
        **{k: v for k, v in w.meta.items() if isinstance(v, (int, float, str))},
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2))


def read_waveforms(path, bases: Optional[tuple[float, float]] = None) -> Waveforms:
    """Read a waveform CSV.

    ``bases`` is ``(v_base, i_base)``; when omitted it is taken from the
    sidecar file.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), None)
    if header is None:
        raise IngestError(f"{path}: empty file")
    header = [h.strip() for h in header]
    missing = [c for c in WAVEFORM_COLUMNS if c not in header]
    if missing:
        raise IngestError(f"{path}: missing channel(s) {', '.join(missing)}")
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise IngestError(f"{path}: {exc}") from None
    if data.shape[0] == 0:
        data = np.zeros((0, len(header)))
    if data.shape[1] != len(header):
        raise IngestError(f"{path}: rows have {data.shape[1]} fields, header has {len(header)}")
    cols = {h: data[:, i] for i, h in enumerate(header)}
    t = cols["t"]
    if t.size > 1:
        d = np.diff(t)
        if np.any(d <= 0):
            row = int(np.argmax(d <= 0)) + 3  # header is line 1
            raise IngestError(f"{path}: time is not increasing at line {row}")
    meta = {}
    sc = _sidecar(path)
    if sc.exists():
        meta = json.loads(sc.read_text())
    if bases is None:
        if "v_base" not in meta or "i_base" not in meta:
            raise IngestError(f"{path}: no per-unit bases given and no sidecar found")
        bases = (meta["v_base"], meta["i_base"])
    if "dt" in meta:
        dt = float(meta["dt"])
    elif t.size > 1:
        dt = float(np.median(np.diff(t)))
    else:
        raise IngestError(f"{path}: cannot determine the sampling interval")
    if t.size > 1 and np.abs(np.diff(t) - dt).max() > 1e-6 * dt + 1e-12 * np.abs(t).max():
        raise IngestError(f"{path}: samples are not uniformly spaced at dt={dt}")
    cur = np.column_stack([cols[c] for c in CURRENT_CHANNELS]) if t.size else np.zeros((0, 8))
    vol = np.column_stack([cols[c] for c in VOLTAGE_CHANNELS]) if t.size else np.zeros((0, 8))
    extra = {k: v for k, v in meta.items() if k in ("n_sections", "source", "noise_pu", "seed")}
    return Waveforms(dt=dt, currents=cur, voltages=vol, v_base=float(bases[0]), i_base=float(bases[1]),
                     t0=float(t[0]) if t.size else float(meta.get("t0", 0.0)), meta=extra)


def _mat(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def save_design(design: FilterDesign, path) -> None:
    """Serialize a design as JSON with row-major matrices."""
    m = design.model
    doc = {
        "format": "linefdi-filter-design",
        "version": 1,
        "dt": m.dt,
        "length_km": design.length_km,
        "v_base": design.v_base,
        "i_base": design.i_base,
        "assigned_eigenvalues": _mat(design.assigned_eigenvalues),
        "unassignable_eigenvalues": [[float(z.real), float(z.imag)] for z in design.unassignable_eigenvalues],
        "detection_dims": list(design.detection_dims),
        "joint_dim": design.joint_dim,
        "matrices": {
            "Ad": _mat(m.A), "Bd": _mat(m.B), "B_next": _mat(m.B_next), "C": _mat(m.C),
            "D": _mat(design.D), "T": _mat(design.T), "Tm": _mat(design.Tm), "T_inv": _mat(design.T_inv),
            "Tm_inv": _mat(design.Tm_inv), "generators": _mat(design.generators),
            "excess_basis": _mat(design.excess_basis),
        },
    }
    if design.continuous is not None:
        doc["matrices"]["A_continuous"] = _mat(design.continuous.A)
        doc["matrices"]["B_continuous"] = _mat(design.continuous.B)
    Path(path).write_text(json.dumps(doc, indent=1))


def load_design(path) -> FilterDesign:
    """Load a design written by :func:`save_design`."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "linefdi-filter-design":
        raise IngestError(f"{path}: not a filter design file")
    M = {k: np.array(v, dtype=float) for k, v in doc["matrices"].items()}
    model = StateSpaceModel(A=M["Ad"], B=M["Bd"], C=M["C"], dt=float(doc["dt"]), B_next=M["B_next"])
    cont = None
    if "A_continuous" in M:
        cont = StateSpaceModel(A=M["A_continuous"], B=M["B_continuous"], C=M["C"])
    un = np.array([complex(a, b) for a, b in doc["unassignable_eigenvalues"]])
    return FilterDesign(
        D=M["D"], T=M["T"], Tm=M["Tm"], T_inv=M["T_inv"], Tm_inv=M["Tm_inv"], generators=M["generators"],
        excess_basis=M["excess_basis"].reshape(12, -1), assigned_eigenvalues=np.array(doc["assigned_eigenvalues"]),
        unassignable_eigenvalues=un, model=model, continuous=cont,
        detection_dims=tuple(doc.get("detection_dims", ())), joint_dim=int(doc.get("joint_dim", 0)),
        v_base=float(doc["v_base"]), i_base=float(doc["i_base"]), length_km=float(doc["length_km"]),
    )


def diagnosis_record(d: Diagnosis) -> dict:
    """JSON-ready record for one diagnosis."""
    return {
        "t0": float(d.t0),
        "t1": float(d.t1),
        "verdict": d.verdict,
        "fault_type": d.fault_type,
        "channel": None if d.channel is None else CURRENT_CHANNELS[d.channel],
        "alpha": None if d.alpha is None else float(d.alpha),
        "location_km": None if d.location_km is None else float(d.location_km),
        "magnitudes": [float(v) for v in d.magnitudes],
        "peaks": None if d.peaks is None else [float(v) for v in d.peaks],
        "notes": list(d.notes),
    }


def _schema() -> dict:
    return json.loads((resources.files("linefdi") / "data" / "diagnosis.schema.json").read_text())


def validate_records(records: Iterable[dict]) -> None:
    """Raise ``jsonschema.ValidationError`` if any record violates the schema."""
    import jsonschema

    schema = _schema()
    for rec in records:
        jsonschema.validate(rec, schema)


def write_diagnoses(diagnoses: Sequence[Diagnosis], path) -> list[dict]:
    recs = [diagnosis_record(d) for d in diagnoses]
    validate_records(recs)
    with open(path, "w") as fh:
        for r in recs:
            fh.write(json.dumps(r) + "\n")
    return recs


def read_diagnoses(path) -> list[dict]:
    recs = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    validate_records(recs)
    return recs


_RES_COLS = tuple(f"r{i}" for i in range(1, 9))


def write_residuals(path, t: np.ndarray, canonical: np.ndarray, filtered: Optional[np.ndarray] = None) -> None:
    """Per-sample canonical residual CSV (pu), optionally with the band-limited copy."""
    cols = ["t", *_RES_COLS]
    data = [np.asarray(t)[:, None], canonical]
    if filtered is not None:
        cols += [f"b{i}" for i in range(1, 9)]
        data.append(filtered)
    np.savetxt(path, np.hstack(data), delimiter=",", header=",".join(cols), comments="", fmt="%.10g")


def read_residuals(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), None)
    if not header or header[0] != "t":
        raise IngestError(f"{path}: not a residual file")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data
