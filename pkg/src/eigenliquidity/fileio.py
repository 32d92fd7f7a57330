"""File formats: CSV and JSON readers and writers.

All writers are atomic (temporary file in the target directory, then
rename). Floats are written with ``repr`` so files round-trip exactly and
re-runs are byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import FLOW_UNITS, MarketSeries
from .cost import ExecutionSchedule
from .elm import PropagatorModel
from .errors import InputError
from .kernel import TimeGrid
from .spectral import validate_correlation


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _sanitize(obj):
    # JSON has no inf/nan; write them as strings so documents stay standard
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    return obj


def write_json(path, doc) -> Path:
    text = json.dumps(_sanitize(json.loads(json.dumps(doc, default=_json_default))), indent=2)
    return atomic_write_text(path, text + "\n")


def read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}: malformed JSON ({exc.msg})") from None


def write_csv(path, header, rows) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return atomic_write_text(path, buf.getvalue())


def _read_rows(path):
    try:
        with open(path, newline="") as fh:
            return list(csv.reader(fh))
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None


def _to_float(text, path, line, what):
    try:
        value = float(text)
    except ValueError:
        raise InputError(f"{path}:{line}: cannot parse {what} {text!r} as a number") from None
    if not np.isfinite(value):
        raise InputError(f"{path}:{line}: {what} is not finite")
    return value


# ---------------------------------------------------------------- matrices


def read_correlation(path):
    """Correlation matrix from CSV (optional header of instrument ids) or JSON.

    JSON documents are either a bare matrix or an object with
    ``correlation`` and optional ``instrument_ids``. Returns ``(rho, ids)``.
    """
    path = Path(path)
    ids = None
    if path.suffix.lower() == ".json":
        doc = read_json(path)
        if isinstance(doc, dict):
            if "correlation" not in doc:
                raise InputError(f"{path}: missing 'correlation'")
            ids = doc.get("instrument_ids")
            doc = doc["correlation"]
        try:
            rho = np.array(doc, dtype=float)
        except (TypeError, ValueError):
            raise InputError(f"{path}: correlation is not a numeric matrix") from None
    else:
        rows = [r for r in _read_rows(path) if r]
        start = 1
        if rows and not _is_number(rows[0][0]):
            ids = rows[0]
            start = 2
            rows = rows[1:]
        rho = np.array([[_to_float(v, path, i + start, "entry") for v in r]
                        for i, r in enumerate(rows)])
    rho = validate_correlation(rho)
    if ids is not None and len(ids) != rho.shape[0]:
        raise InputError(f"{path}: {len(ids)} ids for a {rho.shape[0]}x{rho.shape[0]} matrix")
    return rho, ids


def _is_number(text) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def write_matrix(path, matrix, ids) -> Path:
    """Square matrix with instrument ids as header row and first column."""
    rows = [[ids[i], *map(float, matrix[i])] for i in range(len(ids))]
    return write_csv(path, ["instrument", *ids], rows)


def read_model(path) -> PropagatorModel:
    return PropagatorModel.from_dict(read_json(path))


def write_model(path, model: PropagatorModel) -> Path:
    return write_json(path, model.to_dict())


# ---------------------------------------------------------------- schedules


def grid_sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".grid.json")


def write_schedule(path, schedule: ExecutionSchedule) -> Path:
    """Rates table (one column per instrument) plus a ``.grid.json`` sidecar."""
    ids = schedule.instrument_ids or tuple(f"S{i}" for i in range(schedule.n_assets))
    mids = schedule.grid.midpoints
    rows = [[k, float(mids[k]), *map(float, schedule.rates[:, k])] for k in range(schedule.grid.n_bins)]
    write_json(grid_sidecar(path), schedule.grid.to_dict())
    return write_csv(path, ["bin", "time_seconds", *ids], rows)


def read_schedule(path, grid: TimeGrid | None = None) -> ExecutionSchedule:
    """Inverse of ``write_schedule``; the grid comes from the sidecar unless given."""
    path = Path(path)
    if grid is None:
        side = grid_sidecar(path)
        if not side.exists():
            raise InputError(f"{path}: no grid given and sidecar {side.name} not found")
        grid = TimeGrid.from_dict(read_json(side))
    rows = _read_rows(path)
    if not rows or not rows[0]:
        raise InputError(f"{path}:1: expected a header of instrument ids")
    # the bin and time columns are optional
    skip = 2 if [h.strip() for h in rows[0][:2]] == ["bin", "time_seconds"] else 0
    ids = rows[0][skip:]
    if not ids:
        raise InputError(f"{path}:1: no instrument columns")
    rates = []
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(ids) + skip:
            raise InputError(f"{path}:{line}: expected {len(ids) + skip} fields, got {len(row)}")
        rates.append([_to_float(v, path, line, "rate") for v in row[skip:]])
    if len(rates) != grid.n_bins:
        raise InputError(f"{path}: {len(rates)} rows for a grid of {grid.n_bins} bins")
    return ExecutionSchedule(grid, np.array(rates).T, instrument_ids=ids)


def read_targets(path):
    """Targets CSV with header ``instrument,target``; returns ``(ids, values)``."""
    rows = _read_rows(path)
    if not rows or [h.strip() for h in rows[0][:2]] != ["instrument", "target"]:
        raise InputError(f"{path}:1: expected header 'instrument,target'")
    ids, values = [], []
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise InputError(f"{path}:{line}: expected 2 fields, got {len(row)}")
        ids.append(row[0])
        values.append(_to_float(row[1], path, line, "target"))
    if not ids:
        raise InputError(f"{path}: no targets")
    return ids, np.array(values)


def align_to_model(ids, values, model: PropagatorModel, what: str = "targets",
                   fill=None) -> np.ndarray:
    """Reorder a labelled vector to the model's instrument order.

    Instruments absent from ``ids`` take the value ``fill``; with
    ``fill=None`` they are an error.
    """
    lookup = dict(zip(ids, values))
    if len(lookup) != len(ids):
        raise InputError(f"duplicate instruments in {what}")
    missing = [i for i in model.instrument_ids if i not in lookup]
    extra = [i for i in ids if i not in set(model.instrument_ids)]
    if fill is not None:
        lookup.update({i: fill for i in missing})
        missing = []
    if missing or extra:
        raise InputError(f"{what} do not match the model instruments (missing {missing}, unknown {extra})")
    return np.array([lookup[i] for i in model.instrument_ids])


# ---------------------------------------------------------------- market series


def series_manifest_path(csv_path) -> Path:
    path = Path(csv_path)
    return path.with_suffix(".json")


def write_market_series(path, series: MarketSeries) -> Path:
    """Long-format CSV ``timestamp,instrument,price,signed_flow`` plus a JSON manifest."""
    buf = io.StringIO()
    buf.write("timestamp,instrument,price,signed_flow\n")
    ids = series.instrument_ids
    for t in range(series.length):
        ts = repr(float(t * series.dt))
        for i, name in enumerate(ids):
            buf.write(f"{ts},{name},{float(series.prices[i, t])!r},{float(series.flows[i, t])!r}\n")
    write_json(series_manifest_path(path), {
        "dt_seconds": series.dt,
        "flow_units": series.flow_units,
        "instrument_ids": list(ids),
        "n_samples": series.length,
    })
    return atomic_write_text(path, buf.getvalue())


def read_market_series(path, manifest=None) -> MarketSeries:
    """Read the long format written by ``write_market_series``.

    The manifest (``dt_seconds``, ``flow_units``, optional
    ``instrument_ids``) defaults to the ``.json`` file next to the CSV;
    without one, ``dt`` is inferred from the timestamps and flows are taken
    to be in shares per second. Errors name the offending line.
    """
    path = Path(path)
    man_path = Path(manifest) if manifest is not None else series_manifest_path(path)
    meta = read_json(man_path) if man_path.exists() else {}
    units = meta.get("flow_units", "shares")
    if units not in FLOW_UNITS:
        raise InputError(f"{man_path}: flow_units must be one of {FLOW_UNITS}")
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
    data: dict = {}
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["timestamp", "instrument", "price", "signed_flow"]:
            raise InputError(f"{path}:1: expected header 'timestamp,instrument,price,signed_flow'")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise InputError(f"{path}:{line}: expected 4 fields, got {len(row)}")
            ts = _to_float(row[0], path, line, "timestamp")
            price = _to_float(row[2], path, line, "price")
            flow = _to_float(row[3], path, line, "signed_flow")
            per = data.setdefault(row[1], {})
            if ts in per:
                raise InputError(f"{path}:{line}: duplicate timestamp {row[0]} for {row[1]}")
            per[ts] = (price, flow)
    if not data:
        raise InputError(f"{path}: no observations")
    ids = meta.get("instrument_ids") or sorted(data)
    if set(ids) != set(data):
        raise InputError(f"{path}: instruments differ from the manifest")
    stamps = np.array(sorted(data[ids[0]]))
    for name in ids:
        if len(data[name]) != stamps.size or not np.array_equal(np.array(sorted(data[name])), stamps):
            raise InputError(f"{path}: instrument {name} has gaps or misaligned timestamps")
    if stamps.size < 2:
        raise InputError(f"{path}: need at least two timestamps")
    steps = np.diff(stamps)
    dt = float(meta.get("dt_seconds", steps[0]))
    if np.any(np.abs(steps - dt) > 1e-9 * dt):
        raise InputError(f"{path}: sampling is not uniform with step {dt}s")
    prices = np.array([[data[n][t][0] for t in stamps] for n in ids])
    flows = np.array([[data[n][t][1] for t in stamps] for n in ids])
    return MarketSeries(tuple(ids), dt, prices, flows, units)


# ---------------------------------------------------------------- run manifest


@dataclass
class RunManifest:
    """Record of one CLI run: enough to replay it."""

    subcommand: str
    arguments: dict
    seed: int | None
    version: str
    timestamp: str
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    resolved_config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunManifest":
        try:
            return cls(**{k: doc[k] for k in ("subcommand", "arguments", "seed", "version", "timestamp")},
                       inputs=doc.get("inputs", {}), outputs=doc.get("outputs", {}),
                       resolved_config=doc.get("resolved_config", {}))
        except KeyError as exc:
            raise InputError(f"run manifest is missing field {exc}") from None
