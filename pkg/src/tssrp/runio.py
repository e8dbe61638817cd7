"""Run manifests, live monitoring over newline-delimited records, and reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Iterable, Iterator

import numpy as np

from . import __version__
from .baselines import TrasConfig
from .configfile import RunConfig, emit_config
from .detector import Detector
from .errors import DataError, ProtocolError


# ---------------------------------------------------------------------------
# manifests


@dataclass
class RunManifest:
    """Provenance of one CLI invocation.

    ``digest`` covers only what determines the outputs: config, seed, tool
    version and the command with its result-affecting options. Worker count,
    output paths and timestamps are recorded but excluded, so reruns with
    equal digests write byte-identical artifacts.
    """

    config_hash: str
    master_seed: int
    version: str
    command: list[str]
    options: dict = field(default_factory=dict)
    started: str = ""
    finished: str = ""
    outputs: list[str] = field(default_factory=list)

    @classmethod
    def create(cls, cfg: RunConfig, command: list[str], options: dict, master_seed: int) -> RunManifest:
        return cls(
            config_hash=config_hash(cfg),
            master_seed=int(master_seed),
            version=__version__,
            command=list(command),
            options=dict(options),
            started=_now(),
        )

    @property
    def digest(self) -> str:
        core = {
            "config_hash": self.config_hash,
            "master_seed": self.master_seed,
            "version": self.version,
            "options": self.options,
        }
        return hashlib.sha256(json.dumps(core, sort_keys=True).encode()).hexdigest()

    def write(self, path: Path) -> None:
        self.finished = _now()
        body = asdict(self) | {"digest": self.digest}
        Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(emit_config(cfg).encode()).hexdigest()


def dump_json(obj, path: Path | None = None) -> str:
    """Canonical JSON text: sorted keys, fixed indent, non-finite as strings."""
    text = json.dumps(_finite(obj), indent=2, sort_keys=True) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, np.generic):
        return _finite(obj.item())
    return obj


# ---------------------------------------------------------------------------
# live monitoring


@dataclass
class MonitorResult:
    alarm: bool
    steps: int
    statistic: float
    report: dict


class RecordReader:
    """Parses one tick per line, as a JSON object or as a CSV row.

    JSON: ``{"t": 3, "values": {"2": 0.1, "5": -1.3}}`` with 1-based stream
    keys, or ``"values"`` as a full list of K numbers. CSV: a header
    ``t,1,2,...,K`` then one row per tick; cells of unrequested streams may
    be empty.
    """

    def __init__(self, lines: Iterable[str], K: int, fmt: str = "ndjson"):
        if fmt not in ("ndjson", "csv"):
            raise ValueError(f"unknown record format {fmt!r}")
        self.K = K
        self.fmt = fmt
        self._lines = (ln for ln in lines if ln.strip())
        self._columns: list[int] | None = None

    def _header(self) -> None:
        try:
            head = next(csv.reader([next(self._lines)]))
        except StopIteration:
            raise DataError("empty CSV input; expected a header row") from None
        if not head or head[0].strip() != "t":
            raise ProtocolError(f"CSV header must start with 't', got {head[:1]}")
        cols = []
        for name in head[1:]:
            name = name.strip().lstrip("xX")
            if not name.isdigit() or not 1 <= int(name) <= self.K:
                raise ProtocolError(f"CSV column {name!r} is not a stream number in 1..{self.K}")
            cols.append(int(name) - 1)
        self._columns = cols

    def __iter__(self) -> Iterator[tuple[int, dict[int, object]]]:
        if self.fmt == "csv":
            self._header()
        for line in self._lines:
            yield self._parse(line)

    def _parse(self, line: str) -> tuple[int, dict[int, object]]:
        if self.fmt == "csv":
            cells = next(csv.reader([line]))
            t = _int_t(cells[0])
            return t, {k: c for k, c in zip(self._columns, cells[1:]) if c.strip() != ""}
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"record is not valid JSON: {exc}") from None
        if not isinstance(rec, dict) or "t" not in rec or "values" not in rec:
            raise ProtocolError("record must be an object with 't' and 'values'")
        t = _int_t(rec["t"])
        vals = rec["values"]
        if isinstance(vals, list):
            if len(vals) != self.K:
                raise DataError(f"t={t}: expected {self.K} values, got {len(vals)}")
            return t, {k: v for k, v in enumerate(vals) if v is not None}
        if isinstance(vals, dict):
            out = {}
            for key, v in vals.items():
                key = str(key).lstrip("xX")
                if not key.isdigit() or not 1 <= int(key) <= self.K:
                    raise DataError(f"t={t}: stream key {key!r} is not in 1..{self.K}")
                out[int(key) - 1] = v
            return t, out
        raise ProtocolError(f"t={t}: 'values' must be an object or a list")


def _int_t(v) -> int:
    try:
        t = int(str(v).strip())
    except ValueError:
        raise ProtocolError(f"time index {v!r} is not an integer") from None
    return t


def _values_for(t: int, layout: list[int], raw: dict[int, object]) -> dict[int, float]:
    out = {}
    for k in layout:
        if k not in raw:
            raise DataError(f"missing value for requested stream k={k + 1} at t={t}")
        try:
            x = float(raw[k])
        except (TypeError, ValueError):
            raise DataError(f"value {raw[k]!r} for stream k={k + 1} at t={t} is not a number") from None
        if not math.isfinite(x):
            raise DataError(f"non-finite value for stream k={k + 1} at t={t}")
        out[k] = x
    return out


def top_streams(det: Detector, r: int) -> list[dict]:
    """The r streams with the largest local statistics, 1-based."""
    rep = det.kernel.report(det.state)
    if "log_R" in rep:
        log_r = rep["log_R"][0]
        order = np.argsort(-log_r, kind="stable")[:r]
        return [
            {"stream": int(k) + 1, "log_R": float(log_r[k]), "R": float(math.exp(log_r[k])) if log_r[k] < 700 else None}
            for k in order
        ]
    w = rep["W"][0]
    order = np.argsort(-w, kind="stable")[:r]
    return [{"stream": int(k) + 1, "W": float(w[k])} for k in order]


def monitor(
    records: Iterable[str],
    cfg: RunConfig,
    threshold: float,
    *,
    fmt: str = "ndjson",
    layout_sink: IO[str] | None = None,
    trace_sink: IO[str] | None = None,
    manifest: str | None = None,
) -> MonitorResult:
    """Run the detector over live records, one step per record.

    Before each record the next layout request ``{"t": t, "layout": [...]}``
    is written to ``layout_sink`` so the supplier knows which streams to send.
    """
    procedure = cfg.procedure.with_threshold(threshold)
    det = Detector(procedure)
    r = procedure.r if isinstance(procedure, TrasConfig) else procedure.rule.r
    trace = csv.writer(trace_sink, lineterminator="\n") if trace_sink is not None else None
    if trace is not None:
        trace.writerow(["t", "stat", "threshold", "level", "layout"])
    reader = iter(RecordReader(records, procedure.K, fmt))
    stat = math.nan
    while True:
        expected = det.t + 1
        layout = det.layout.sorted()
        if layout_sink is not None:
            layout_sink.write(json.dumps({"t": expected, "layout": [k + 1 for k in layout]}) + "\n")
            layout_sink.flush()
        try:
            t, raw = next(reader)
        except StopIteration:
            break
        if t != expected:
            raise ProtocolError(f"record with t={t} arrived when t={expected} was expected")
        outcome = det.step(_values_for(t, layout, raw))
        stat = outcome.stat
        if trace is not None:
            trace.writerow([t, repr(stat), repr(float(threshold)), repr(procedure.level), " ".join(str(k + 1) for k in layout)])
        if outcome.alarm:
            break
    report = {
        "alarm": det.stopped,
        "steps": det.t,
        "statistic": stat,
        "level": procedure.level,
        "threshold": threshold,
        "algorithm": procedure.algorithm,
        "manifest": manifest,
    }
    if det.stopped:
        report["alarm_time"] = det.t
        report["top_r_streams"] = top_streams(det, r)
    return MonitorResult(det.stopped, det.t, stat, report)


# ---------------------------------------------------------------------------
# reports


def _order_key(row: dict):
    alg = 0 if row["algorithm"] == "TSSRP" else 1
    try:
        setting = (0, float(row["prior_or_delta"]), "")
    except ValueError:
        setting = (1, 0.0, row["prior_or_delta"])
    return alg, setting


def load_reports(paths: Iterable[Path]) -> list[dict]:
    out = []
    for p in paths:
        p = Path(p)
        files = sorted(p.glob("*.json")) if p.is_dir() else [p]
        for f in files:
            data = json.loads(f.read_text())
            if isinstance(data, dict) and {"mean_delay", "stderr", "label"} <= data.keys():
                data["_file"] = str(f)
                out.append(data)
    if not out:
        raise DataError("no experiment reports found")
    return out


def build_table(reports: list[dict]) -> tuple[str, list[dict]]:
    """Text matrix of ``mean(stderr)`` by procedure and change count, plus CSV rows."""
    gammas = sorted({float(r["gamma"]) for r in reports})
    if len(gammas) > 1:
        detail = ", ".join(f"{Path(r['_file']).name}: gamma={r['gamma']}" for r in reports)
        raise DataError(f"reports mix ARL targets {gammas}; refusing to tabulate ({detail})")
    rows = sorted(
        (
            {
                "algorithm": r["algorithm"],
                "prior_or_delta": r["prior_or_delta"],
                "n_changes": r["n_changes"],
                "mean_delay": r["mean_delay"],
                "stderr": r["stderr"],
                "label": r["label"],
            }
            for r in reports
        ),
        key=lambda row: (_order_key(row), row["n_changes"] if row["n_changes"] is not None else -1),
    )
    seen: dict[tuple, dict] = {}
    for row in rows:
        key = (row["label"], row["n_changes"])
        if key in seen:
            raise DataError(f"duplicate report for {row['label']} with {row['n_changes']} changes")
        seen[key] = row
    labels = list(dict.fromkeys(row["label"] for row in rows))
    cols = sorted({row["n_changes"] for row in rows}, key=lambda n: -1 if n is None else n)
    head = ["changes"] + ["none" if c is None else str(c) for c in cols]
    body = [
        [lab] + [
            f"{seen[(lab, c)]['mean_delay']:.2f}({seen[(lab, c)]['stderr']:.2f})" if (lab, c) in seen else "-"
            for c in cols
        ]
        for lab in labels
    ]
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    lines = [" ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(r, widths)))
             for r in [head] + body]
    title = f"mean detection delay (stderr), gamma={gammas[0]:g}"
    return "\n".join([title] + lines) + "\n", rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["algorithm", "prior_or_delta", "n_changes", "mean_delay", "stderr"])
    for row in rows:
        w.writerow([row["algorithm"], row["prior_or_delta"], row["n_changes"], repr(row["mean_delay"]), repr(row["stderr"])])
    return buf.getvalue()
