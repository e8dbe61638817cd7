"""TOML run configuration: parsing with per-field diagnostics and emission.

Stream indices in files are 1-based; everything returned is 0-based.

A config has five sections::

    [scenario]      K, q, gamma, nu, changed | n_changes | random_changes,
                    replications, seed, shift, network
    [models]        family and parameters of the detector's belief
    [models.truth]  optional data-generating models (defaults to the belief)
    [prior]         name = "G0".."G3", or an explicit ``streams`` list
    [rule]          algorithm, kind, r, threshold, delta
    [calibration]   reps, rel_tol, horizon, seed
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .baselines import TrasConfig
from .detector import DetectorConfig, RuleKind
from .errors import ConfigError
from .models import StreamModel
from .priors import PRESETS, PointMass, PriorSpec, Tabulated, Uniform
from .sim import HOT_FORMING, BayesNetSpec, Scenario, build_procedure

SCHEMA: dict[str, tuple[str, ...]] = {
    "scenario": (
        "K", "q", "gamma", "nu", "changed", "n_changes", "random_changes",
        "replications", "seed", "shift", "network",
    ),
    "models": ("family", "pre_mean", "post_mean", "sd", "df", "pre_location", "post_location", "truth"),
    "prior": ("name", "streams"),
    "rule": ("algorithm", "kind", "r", "threshold", "delta"),
    "calibration": ("reps", "rel_tol", "horizon", "seed"),
}
MODEL_KEYS = ("family", "pre_mean", "post_mean", "sd", "df", "pre_location", "post_location")
NETWORK_KEYS = ("names", "edges", "noise_sd", "standardize")
PRIOR_STREAM_KEYS = ("kind", "lo", "hi", "value", "probs", "values", "count")


@dataclass(frozen=True)
class CalibrationSettings:
    reps: int = 1000
    rel_tol: float = 0.01
    horizon: int | None = None
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    """Everything one config file describes."""

    scenario: Scenario
    procedure: DetectorConfig | TrasConfig
    calibration: CalibrationSettings = field(default_factory=CalibrationSettings)
    seed: int = 0

    @property
    def algorithm(self) -> str:
        return self.procedure.algorithm


# ---------------------------------------------------------------------------
# diagnostics


class _Lines:
    """Maps ``section.key`` to a line number in the source text."""

    _header = re.compile(r"^\s*\[+\s*([A-Za-z0-9_.\s]+?)\s*\]+")
    _key = re.compile(r"^\s*([A-Za-z0-9_]+)\s*=")

    def __init__(self, text: str):
        self.where: dict[str, int] = {}
        section = ""
        for n, line in enumerate(text.splitlines(), 1):
            if m := self._header.match(line):
                section = m.group(1).replace(" ", "")
                self.where.setdefault(section, n)
            elif m := self._key.match(line):
                self.where.setdefault(f"{section}.{m.group(1)}" if section else m.group(1), n)

    def tag(self, path: str) -> str:
        n = self.where.get(path)
        return f"line {n}: {path}" if n else path


class _Reader:
    def __init__(self, lines: _Lines):
        self.lines = lines
        self.problems: list[str] = []

    def fail(self, path: str, message: str) -> None:
        self.problems.append(f"{self.lines.tag(path)} {message}")

    def unknown(self, table: dict, allowed, prefix: str) -> None:
        for key in table:
            if key not in allowed:
                self.fail(f"{prefix}.{key}", f"is not a recognised key (allowed: {', '.join(allowed)})")

    def get(self, table: dict, key: str, prefix: str, kind: str, default=None, required=False):
        path = f"{prefix}.{key}"
        if key not in table:
            if required:
                self.fail(path, "is required")
            return default
        v = table[key]
        if kind == "int":
            if isinstance(v, bool) or not isinstance(v, int):
                return self._bad(path, "an integer", v, default)
        elif kind == "float":
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                return self._bad(path, "a number", v, default)
            v = float(v)
        elif kind == "str":
            if not isinstance(v, str):
                return self._bad(path, "a string", v, default)
        elif kind == "bool":
            if not isinstance(v, bool):
                return self._bad(path, "true or false", v, default)
        elif kind == "list":
            if not isinstance(v, list):
                return self._bad(path, "a list", v, default)
        return v

    def _bad(self, path, what, v, default):
        self.fail(path, f"must be {what}, got {v!r}")
        return default


# ---------------------------------------------------------------------------
# parsing


def parse_config(path: str | Path) -> RunConfig:
    """Parse and validate a config file.

    All violations are gathered before raising a single :class:`ConfigError`.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config file {path} does not exist"])
    return parse_config_text(path.read_text())


def parse_config_text(text: str) -> RunConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError([f"malformed config: {exc}"]) from None
    rd = _Reader(_Lines(text))
    rd.unknown(doc, tuple(SCHEMA), "")
    for name in SCHEMA:
        if name in doc and not isinstance(doc[name], dict):
            rd.fail(name, "must be a table")
            doc[name] = {}
    for name, allowed in SCHEMA.items():
        rd.unknown(doc.get(name, {}), allowed, name)

    sc = doc.get("scenario", {})
    K = rd.get(sc, "K", "scenario", "int", required=True)
    q = rd.get(sc, "q", "scenario", "int", required=True)
    gamma = rd.get(sc, "gamma", "scenario", "float", default=1000.0)
    replications = rd.get(sc, "replications", "scenario", "int", default=1000)
    seed = rd.get(sc, "seed", "scenario", "int", default=0)
    nu = _read_nu(rd, sc)
    network = _read_network(rd, sc.get("network"))
    if network is not None and K is not None and network.n != K:
        rd.fail("scenario.network", f"has {network.n} nodes but scenario.K = {K}")
    shift = rd.get(sc, "shift", "scenario", "float")
    if shift is not None and network is None:
        rd.fail("scenario.shift", "only applies to a network scenario")

    rule = doc.get("rule", {})
    algorithm = rd.get(rule, "algorithm", "rule", "str", default="TSSRP").upper()
    if algorithm not in ("TSSRP", "TRAS"):
        rd.fail("rule.algorithm", f"must be TSSRP or TRAS, got {algorithm!r}")
    kind = rd.get(rule, "kind", "rule", "str", default="T")
    if kind not in {k.value for k in RuleKind}:
        rd.fail("rule.kind", f"must be one of T, T2, T3, T4, got {kind!r}")
        kind = "T"
    r = rd.get(rule, "r", "rule", "int", default=q)
    threshold = rd.get(rule, "threshold", "rule", "float", default=math.inf)
    delta = rd.get(rule, "delta", "rule", "float", default=0.05)
    if algorithm == "TRAS" and kind != "T":
        rd.fail("rule.kind", "only applies to TSSRP")
    if algorithm != "TRAS" and "delta" in rule:
        rd.fail("rule.delta", "only applies to TRAS")

    if isinstance(K, int):
        if isinstance(q, int) and q > K:
            rd.fail("scenario.q", f"= {q} exceeds scenario.K = {K} ({rd.lines.tag('scenario.K')})")
        if isinstance(r, int) and r > K:
            rd.fail("rule.r", f"= {r} exceeds scenario.K = {K} ({rd.lines.tag('scenario.K')})")
    for path, v in (("scenario.K", K), ("scenario.q", q), ("rule.r", r), ("scenario.replications", replications)):
        if isinstance(v, int) and v < 1:
            rd.fail(path, f"must be positive, got {v}")
    if gamma is not None and not gamma > 1:
        rd.fail("scenario.gamma", f"must exceed 1, got {gamma}")
    if threshold is not None and not threshold > 0 and kind in ("T", "T2") and algorithm == "TSSRP":
        rd.fail("rule.threshold", f"must be positive, got {threshold}")
    if delta is not None and not delta >= 0:
        rd.fail("rule.delta", f"must be nonnegative, got {delta}")

    changed, random_changes = _read_changes(rd, sc, K)
    models = doc.get("models", {})
    belief = _read_model(rd, models, "models")
    truth_table = models.get("truth")
    truth = belief
    if truth_table is not None:
        if not isinstance(truth_table, dict):
            rd.fail("models.truth", "must be a table")
        else:
            base = {k: v for k, v in models.items() if k != "truth"}
            if truth_table.get("family", "gaussian") != base.get("family", "gaussian"):
                base = {}
            truth = _read_model(rd, {**base, **truth_table}, "models.truth")
    prior = _read_prior(rd, doc.get("prior", {}), K)
    cal = _read_calibration(rd, doc.get("calibration", {}))

    if rd.problems:
        raise ConfigError(rd.problems)
    try:
        scenario = Scenario(
            K=K, q=q, r=r, gamma=gamma,
            detector_models=(belief,) * K,
            truth_models=() if network is not None else (truth,) * K,
            nu=nu, changed=changed, random_changes=random_changes,
            prior=prior, replications=replications,
            network=network, shift=(shift if shift is not None else 2.0) if network is not None else None,
        )
        procedure = build_procedure(scenario, algorithm, threshold, rule=kind, delta=delta, seed=seed)
    except ConfigError as exc:
        raise ConfigError(exc.problems) from None
    return RunConfig(scenario, procedure, cal, seed)


def _read_nu(rd: _Reader, sc: dict):
    v = sc.get("nu", 1)
    if v in ("inf", "never"):
        return None
    if isinstance(v, float) and math.isinf(v):
        return None
    if isinstance(v, bool) or not isinstance(v, int) or v < 1:
        rd.fail("scenario.nu", f'must be a positive integer or "inf", got {v!r}')
        return 1
    return v


def _read_changes(rd: _Reader, sc: dict, K):
    given = [k for k in ("changed", "n_changes", "random_changes") if k in sc]
    if len(given) > 1:
        rd.fail(f"scenario.{given[1]}", f"conflicts with scenario.{given[0]}; give only one")
    changed: tuple[int, ...] = ()
    random_changes = None
    if "changed" in sc:
        items = rd.get(sc, "changed", "scenario", "list", default=[])
        bad = [v for v in items if isinstance(v, bool) or not isinstance(v, int)]
        if bad:
            rd.fail("scenario.changed", f"must list integer stream numbers, got {bad[0]!r}")
        else:
            if isinstance(K, int) and any(not 1 <= v <= K for v in items):
                rd.fail("scenario.changed", f"stream numbers must lie in 1..{K}")
            if len(set(items)) != len(items):
                rd.fail("scenario.changed", "repeats a stream")
            changed = tuple(sorted(v - 1 for v in items))
    elif "n_changes" in sc:
        n = rd.get(sc, "n_changes", "scenario", "int", default=0)
        if isinstance(K, int) and not 0 <= n <= K:
            rd.fail("scenario.n_changes", f"must lie in 0..{K}, got {n}")
        changed = tuple(range(max(n, 0)))
    elif "random_changes" in sc:
        random_changes = rd.get(sc, "random_changes", "scenario", "int")
        if isinstance(random_changes, int) and isinstance(K, int) and not 1 <= random_changes <= K:
            rd.fail("scenario.random_changes", f"must lie in 1..{K}, got {random_changes}")
    return changed, random_changes


def _read_model(rd: _Reader, t: dict, prefix: str):
    allowed = MODEL_KEYS + (("truth",) if prefix == "models" else ())
    if prefix != "models":
        rd.unknown({k: v for k, v in t.items() if k != "truth"}, allowed, prefix)
    family = rd.get(t, "family", prefix, "str", default="gaussian")
    try:
        if family == "gaussian":
            for key in ("df", "pre_location", "post_location"):
                if key in t:
                    rd.fail(f"{prefix}.{key}", "does not apply to a gaussian model")
            return StreamModel.gaussian(
                rd.get(t, "pre_mean", prefix, "float", default=0.0),
                rd.get(t, "post_mean", prefix, "float", default=1.5),
                rd.get(t, "sd", prefix, "float", default=1.0),
            )
        if family == "student_t":
            for key in ("pre_mean", "post_mean", "sd"):
                if key in t:
                    rd.fail(f"{prefix}.{key}", "does not apply to a student_t model")
            return StreamModel.student_t(
                rd.get(t, "df", prefix, "float", default=5.0),
                rd.get(t, "pre_location", prefix, "float", default=0.0),
                rd.get(t, "post_location", prefix, "float", default=1.5),
            )
    except (ValueError, TypeError) as exc:
        rd.fail(prefix, f"is invalid: {exc}")
        return StreamModel.gaussian()
    rd.fail(f"{prefix}.family", f"must be gaussian or student_t, got {family!r}")
    return StreamModel.gaussian()


def _read_prior(rd: _Reader, t: dict, K):
    if "name" in t and "streams" in t:
        rd.fail("prior.streams", "conflicts with prior.name; give only one")
    if "streams" not in t:
        name = rd.get(t, "name", "prior", "str", default="G3")
        if name not in PRESETS:
            rd.fail("prior.name", f"must be one of {', '.join(PRESETS)}, got {name!r}")
            return "G3"
        need = {"G0": 10, "G1": 5}.get(name, 1)
        if isinstance(K, int) and K < need:
            rd.fail("prior.name", f"{name} needs scenario.K >= {need}, got {K}")
        return name
    items = rd.get(t, "streams", "prior", "list", default=[])
    out = []
    for i, item in enumerate(items):
        path = f"prior.streams[{i + 1}]"
        if not isinstance(item, dict):
            rd.fail(path, "must be an inline table")
            continue
        rd.unknown(item, PRIOR_STREAM_KEYS, path)
        count = rd.get(item, "count", path, "int", default=1)
        kind = item.get("kind")
        try:
            if kind == "uniform":
                d = Uniform(rd.get(item, "lo", path, "float", required=True), rd.get(item, "hi", path, "float", required=True))
            elif kind == "point":
                d = PointMass(rd.get(item, "value", path, "float", default=0.0))
            elif kind == "tabulated":
                d = Tabulated(tuple(item.get("probs", ())), tuple(item.get("values", ())))
            else:
                rd.fail(f"{path}.kind", f"must be uniform, point or tabulated, got {kind!r}")
                continue
        except (ValueError, TypeError) as exc:
            rd.fail(path, f"is invalid: {exc}")
            continue
        out.extend([d] * max(count, 0))
    if isinstance(K, int) and len(out) != K and not rd.problems:
        rd.fail("prior.streams", f"describes {len(out)} streams, expected scenario.K = {K}")
    return PriorSpec(tuple(out)) if out else "G3"


def _read_network(rd: _Reader, v):
    if v is None:
        return None
    if v == "hot_forming":
        return HOT_FORMING
    if not isinstance(v, dict):
        rd.fail("scenario.network", f'must be "hot_forming" or a table, got {v!r}')
        return None
    rd.unknown(v, NETWORK_KEYS, "scenario.network")
    names = tuple(rd.get(v, "names", "scenario.network", "list", required=True) or ())
    edges = {}
    for e in rd.get(v, "edges", "scenario.network", "list", default=[]):
        if not (isinstance(e, list) and len(e) == 3 and e[0] in names and e[1] in names):
            rd.fail("scenario.network.edges", f"entry {e!r} must be [parent, child, weight] with known names")
            continue
        edges[(names.index(e[0]), names.index(e[1]))] = float(e[2])
    noise = rd.get(v, "noise_sd", "scenario.network", "list")
    standardize = rd.get(v, "standardize", "scenario.network", "bool", default=True)
    if rd.problems or not names:
        return None
    try:
        return BayesNetSpec(names, edges, tuple(noise) if noise is not None else None, standardize)
    except ConfigError as exc:
        for p in exc.problems:
            rd.fail("scenario.network", p)
        return None


def _read_calibration(rd: _Reader, t: dict) -> CalibrationSettings:
    d = CalibrationSettings()
    reps = rd.get(t, "reps", "calibration", "int", default=d.reps)
    rel_tol = rd.get(t, "rel_tol", "calibration", "float", default=d.rel_tol)
    horizon = rd.get(t, "horizon", "calibration", "int", default=None)
    seed = rd.get(t, "seed", "calibration", "int", default=d.seed)
    if isinstance(reps, int) and reps < 2:
        rd.fail("calibration.reps", f"must be >= 2, got {reps}")
    if rel_tol is not None and not 0 < rel_tol <= 0.2:
        rd.fail("calibration.rel_tol", f"must lie in (0, 0.2], got {rel_tol}")
    if isinstance(horizon, int) and horizon < 1:
        rd.fail("calibration.horizon", f"must be positive, got {horizon}")
    return CalibrationSettings(reps, rel_tol, horizon, seed)


# ---------------------------------------------------------------------------
# emission


def _model_table(m: StreamModel) -> dict:
    if m.family == "gaussian":
        return {"family": "gaussian", "pre_mean": m.pre.mean, "post_mean": m.post.mean, "sd": m.pre.sd}
    return {"family": "student_t", "df": m.pre.df, "pre_location": m.pre.location, "post_location": m.post.location}


def _prior_table(prior) -> dict:
    if isinstance(prior, str):
        return {"name": prior}
    if prior.name in PRESETS and prior == _preset_spec(prior.name, prior.K):
        return {"name": prior.name}
    runs: list[dict] = []
    last = None
    for d in prior.per_stream:
        if d == last:
            runs[-1]["count"] += 1
            continue
        if isinstance(d, Uniform):
            item = {"kind": "uniform", "lo": d.lo, "hi": d.hi}
        elif isinstance(d, PointMass):
            item = {"kind": "point", "value": d.value}
        else:
            item = {"kind": "tabulated", "probs": list(d.probs), "values": list(d.values)}
        item["count"] = 1
        runs.append(item)
        last = d
    return {"streams": runs}


def _preset_spec(name, K):
    from .priors import preset

    return preset(name, K)


def emit_config(cfg: RunConfig) -> str:
    """TOML text that :func:`parse_config` maps back to ``cfg``."""
    s = cfg.scenario
    if len(set(s.detector_models)) != 1 or (s.truth_models and len(set(s.truth_models)) != 1):
        raise ConfigError("only stream-homogeneous models can be written to a config file")
    scenario: dict = {"K": s.K, "q": s.q, "gamma": s.gamma, "nu": s.nu if s.nu is not None else "inf"}
    if s.random_changes is not None:
        scenario["random_changes"] = s.random_changes
    else:
        scenario["changed"] = [k + 1 for k in s.changed]
    scenario["replications"] = s.replications
    scenario["seed"] = cfg.seed
    if s.network is not None:
        scenario["shift"] = s.shift
        if s.network == HOT_FORMING:
            scenario["network"] = "hot_forming"
        else:
            names = list(s.network.names)
            scenario["network"] = {
                "names": names,
                "edges": [[names[a], names[b], w] for (a, b), w in sorted(s.network.edges.items())],
                "standardize": s.network.standardize,
            }
            if s.network.noise_sd is not None:
                scenario["network"]["noise_sd"] = list(s.network.noise_sd)
    models = _model_table(s.detector_models[0])
    if s.truth_models and s.truth_models[0] != s.detector_models[0]:
        models["truth"] = _model_table(s.truth_models[0])
    p = cfg.procedure
    if isinstance(p, TrasConfig):
        rule = {"algorithm": "TRAS", "r": p.r, "threshold": p.threshold, "delta": p.delta}
    else:
        rule = {"algorithm": "TSSRP", "kind": p.rule.kind.value, "r": p.rule.r, "threshold": p.rule.threshold}
    c = cfg.calibration
    calibration = {"reps": c.reps, "rel_tol": c.rel_tol, "seed": c.seed}
    if c.horizon is not None:
        calibration["horizon"] = c.horizon
    doc = {
        "scenario": scenario,
        "models": models,
        "prior": _prior_table(s.prior),
        "rule": rule,
        "calibration": calibration,
    }
    return tomli_w.dumps(doc)


def with_threshold(cfg: RunConfig, threshold: float) -> RunConfig:
    return RunConfig(cfg.scenario, cfg.procedure.with_threshold(threshold), cfg.calibration, cfg.seed)
