"""Deterministic self-checks against brute-force oracles.

Each check recomputes something the detector maintains recursively by an
independent route and reports the worst relative discrepancy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bayes_oracle import PosteriorState, both_routes, finite_p_score
from .detector import (
    DetectorConfig,
    LocalState,
    RuleKind,
    StoppingRule,
    randomized_score,
    run,
    update_local,
)
from .engine import run_batch
from .models import StreamModel, log_likelihood_ratio
from .priors import preset
from .rng import replication_streams
from .sim import IndependentPanel


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def sr_double_sum(lrs) -> float:
    """sum_{j<=t} prod_{i=j..t} LR_i, by explicit double loop."""
    total = 0.0
    for j in range(len(lrs)):
        prod = 1.0
        for i in range(j, len(lrs)):
            prod *= lrs[i]
        total += prod
    return total


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(b), 1e-300)


def check_double_sum(seed: int = 11, t_max: int = 20) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = StreamModel.gaussian(0.0, 1.5)
    x = rng.normal(0.75, 1.0, t_max)
    lrs = [math.exp(log_likelihood_ratio(model, v)) for v in x]
    st, worst = LocalState(), 0.0
    for t in range(t_max):
        st = update_local(st, log_likelihood_ratio(model, x[t]), True)
        worst = max(worst, _rel(st.log_R, math.log(sr_double_sum(lrs[: t + 1]))))
    return CheckResult("full-observation R equals the double sum", worst <= 1e-10, f"max rel err {worst:.2e}")


def check_decomposition(seed: int = 12, steps: int = 50, r_tilde: float = 0.7) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = StreamModel.gaussian(0.0, 1.5)
    obs = rng.random(steps) < 0.5
    x = rng.normal(0.5, 1.0, steps)
    st = LocalState()
    log_star = math.log(r_tilde)
    worst = 0.0
    for t in range(steps):
        llr = log_likelihood_ratio(model, x[t])
        st = update_local(st, llr, bool(obs[t]))
        log_star = np.logaddexp(log_star, 0.0) + (llr if obs[t] else 0.0)
        worst = max(worst, _rel(log_star, randomized_score(st, r_tilde)))
    return CheckResult("frozen-prior score equals R + L * r", bool(worst <= 1e-10), f"max rel err {worst:.2e}")


def _record(seed: int, steps: int):
    rng = np.random.default_rng(seed)
    model = StreamModel.gaussian(0.0, 1.5)
    x = rng.normal(0.3, 1.0, steps)
    lrs = [math.exp(log_likelihood_ratio(model, v)) for v in x]
    obs = (rng.random(steps) < 0.6).tolist()
    return lrs, obs


def check_finite_p(seed: int = 13, steps: int = 50, r0: float = 0.4) -> CheckResult:
    lrs, obs = _record(seed, steps)
    worst = 0.0
    for p in (0.1, 0.01, 0.001):
        a, b = both_routes(p, r0, lrs, obs)
        worst = max(worst, max(_rel(u, v) for u, v in zip(a, b)))
    return CheckResult("posterior odds equal the odds recursion", worst <= 1e-9, f"max rel err {worst:.2e}")


def check_limit(seed: int = 14, steps: int = 50, r0: float = 0.4, p: float = 1e-5) -> CheckResult:
    lrs, obs = _record(seed, steps)
    st, finite = LocalState(), PosteriorState.start(p, r0)
    worst = 0.0
    for lr, o in zip(lrs, obs):
        st = update_local(st, math.log(lr), o)
        finite = PosteriorState(finite.comp, p, finite_p_score(finite, lr, o))
        star = math.exp(randomized_score(st, r0))
        worst = max(worst, _rel(finite.r_p, star))
    return CheckResult(f"odds at p={p:g} match the limiting score", worst <= 1e-3, f"max rel gap {worst:.2e}")


def _small_config(threshold: float = 200.0) -> DetectorConfig:
    K = 8
    return DetectorConfig(
        K, 3, (StreamModel.gaussian(0.0, 1.5),) * K, preset("G2", K), StoppingRule(RuleKind.TOP_R_SUM, 2, threshold), seed=5
    )


def check_poisoned(seed: int = 15, horizon: int = 300) -> CheckResult:
    cfg = _small_config()
    panel = np.random.default_rng(seed).normal(0.0, 1.0, (horizon, cfg.K))
    panel[40:, :2] += 1.0
    first = run(cfg, lambda t: panel[t - 1], horizon, trace_layouts=True)
    poisoned = np.full_like(panel, 1e6)
    for t, layout in enumerate(first.layouts):
        poisoned[t, layout] = panel[t, layout]
    second = run(cfg, lambda t: poisoned[t - 1], horizon, trace_layouts=True)
    same = first == second
    return CheckResult("unobserved values are never read", same, f"T={first.stopping_time} both runs" if same else "runs differ")


def check_scalar_batch(reps: int = 6, horizon: int = 400) -> CheckResult:
    cfg = _small_config()
    source = IndependentPanel(cfg.models, nu=1, changed=(0, 1))
    batch = run_batch(cfg, source, 3, reps, horizon, cfg.level)["T"].tolist()
    scalar = []
    for rep in range(reps):
        streams = replication_streams(3, rep)
        ctx = source.setup(streams.scenario)
        res = run(cfg, lambda t: source.block(streams.data, ctx, t, 1)[0], horizon, streams=streams)
        scalar.append(res.stopping_time)
    return CheckResult("batch engine replays the scalar detector", batch == scalar, f"T={scalar}")


CHECKS: tuple[Callable[[], CheckResult], ...] = (
    check_double_sum,
    check_decomposition,
    check_finite_p,
    check_limit,
    check_poisoned,
    check_scalar_batch,
)


def run_checks() -> list[CheckResult]:
    return [check() for check in CHECKS]
