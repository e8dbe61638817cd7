"""TSSRP: Shiryaev-Roberts local statistics with Thompson-sampled sensor layouts.

Every statistic lives in log-space. ``log_R = -inf`` encodes R = 0.

The array functions below broadcast over leading axes, so the same code
drives a single detector (shape ``(K,)``) and a lockstep batch of
replications (shape ``(n, K)``).
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DataError, StateError
from .models import StreamModel
from .priors import PriorSpec
from .rng import Streams, replication_streams


class RuleKind(str, enum.Enum):
    """Global stopping rules.

    ``TOP_R_SUM`` is the default rule. The other three swap in randomised
    scores and/or sum logarithms instead of raw values.
    """

    TOP_R_SUM = "T"
    TOP_R_SUM_RANDOMIZED = "T2"
    TOP_R_LOG_SUM = "T3"
    TOP_R_LOG_SUM_RANDOMIZED = "T4"

    @property
    def randomized(self) -> bool:
        return self in (RuleKind.TOP_R_SUM_RANDOMIZED, RuleKind.TOP_R_LOG_SUM_RANDOMIZED)

    @property
    def log_sum(self) -> bool:
        return self in (RuleKind.TOP_R_LOG_SUM, RuleKind.TOP_R_LOG_SUM_RANDOMIZED)


@dataclass(frozen=True)
class StoppingRule:
    """Top-r fusion rule with its threshold.

    For T and T2 ``threshold`` is A and the alarm fires when
    ``log(sum of top-r) >= log(A)``. For T3 and T4 ``threshold`` is already
    on the log scale (it plays the role of log A) and is compared with the
    sum of the top-r logarithms directly.
    """

    kind: RuleKind = RuleKind.TOP_R_SUM
    r: int = 1
    threshold: float = math.inf

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", RuleKind(self.kind))
        if self.r < 1:
            raise ConfigError(f"rule.r must be >= 1, got {self.r}")
        if self.threshold < 0 or math.isnan(self.threshold):
            raise ConfigError(f"rule.threshold must be >= 0, got {self.threshold}")

    @property
    def level(self) -> float:
        return stat_level(self.kind, self.threshold)


def stat_level(kind: RuleKind, threshold: float) -> float:
    """The value on the statistic's own scale that ``threshold`` maps to."""
    if RuleKind(kind).log_sum:
        return float(threshold)
    with np.errstate(divide="ignore"):
        return float(np.log(threshold))


@dataclass(frozen=True)
class LocalState:
    log_R: float = -math.inf
    log_L: float = 0.0

    @property
    def R(self) -> float:
        return math.exp(self.log_R)

    @property
    def L(self) -> float:
        return math.exp(self.log_L)


@dataclass(frozen=True)
class SensorLayout:
    observed: frozenset[int]
    K: int

    def __post_init__(self) -> None:
        if any(not 0 <= k < self.K for k in self.observed):
            raise ValueError(f"layout index outside 0..{self.K - 1}: {sorted(self.observed)}")

    @property
    def q(self) -> int:
        return len(self.observed)

    @property
    def indicator(self) -> np.ndarray:
        d = np.zeros(self.K, dtype=bool)
        d[list(self.observed)] = True
        return d

    def sorted(self) -> list[int]:
        return sorted(self.observed)


# ---------------------------------------------------------------------------
# array kernels


def update_arrays(log_R, log_L, log_lr, observed):
    """One recursion step for R and L; unobserved streams use a ratio of one."""
    inc = np.where(observed, log_lr, 0.0)
    return np.logaddexp(log_R, 0.0) + inc, log_L + inc


def score_arrays(log_R, log_L, r_tilde):
    """log(R + L * r_tilde); r_tilde = 0 returns log_R bit-exactly."""
    with np.errstate(divide="ignore"):
        log_rt = np.log(r_tilde)
    return np.logaddexp(log_R, log_L + log_rt)


def top_q(scores, q: int, keys):
    """Indices (unordered) of the q largest scores along the last axis.

    Ties are ordered by ``keys`` (iid uniforms), which makes the choice among
    tied streams uniform. numpy orders complex numbers lexicographically, so
    one partition over ``-score + i*key`` does the two-key selection.
    """
    scores = np.asarray(scores, dtype=float)
    K = scores.shape[-1]
    if q >= K:
        return np.broadcast_to(np.arange(K), scores.shape).copy()
    z = -scores + 1j * np.asarray(keys, dtype=float)
    return np.argpartition(z, q - 1, axis=-1)[..., :q]


def layout_mask(indices, K: int):
    idx = np.asarray(indices)
    mask = np.zeros(idx.shape[:-1] + (K,), dtype=bool)
    np.put_along_axis(mask, idx, True, axis=-1)
    return mask


def top_r_statistic(log_R, log_scores, kind: RuleKind, r: int):
    """Rule statistic on its own scale (see :class:`StoppingRule`)."""
    kind = RuleKind(kind)
    values = np.asarray(log_scores if kind.randomized else log_R, dtype=float)
    K = values.shape[-1]
    if r > K:
        raise ConfigError(f"rule.r={r} exceeds K={K}")
    top = np.partition(values, K - r, axis=-1)[..., K - r :]
    if kind.log_sum:
        return top.sum(axis=-1)
    return logsumexp(top, axis=-1)


def initial_layout(rng: np.random.Generator, K: int, q: int) -> np.ndarray:
    return np.sort(rng.choice(K, size=q, replace=False))


# ---------------------------------------------------------------------------
# scalar operations


def update_local(state: LocalState, log_lr: float, observed: bool) -> LocalState:
    log_R, log_L = update_arrays(state.log_R, state.log_L, log_lr if observed else 0.0, observed)
    return LocalState(float(log_R), float(log_L))


def randomized_score(state: LocalState, r_tilde: float) -> float:
    """log R* = log(R + L * r_tilde)."""
    if r_tilde < 0:
        raise ValueError(f"r_tilde must be nonnegative, got {r_tilde}")
    return float(score_arrays(state.log_R, state.log_L, r_tilde))


def select_layout(scores: Sequence[float], q: int, rng: np.random.Generator) -> SensorLayout:
    scores = np.asarray(scores, dtype=float)
    keys = rng.random(scores.shape[-1])
    idx = top_q(scores, q, keys)
    return SensorLayout(frozenset(int(i) for i in idx), scores.shape[-1])


def global_statistic(
    states: Sequence[LocalState], frozen_scores: Sequence[float] | None, rule: StoppingRule
) -> float:
    log_R = np.array([s.log_R for s in states])
    scores = log_R if frozen_scores is None else np.asarray(frozen_scores, dtype=float)
    return float(top_r_statistic(log_R, scores, rule.kind, rule.r))


# ---------------------------------------------------------------------------
# configuration


def _check_models(models, K, problems):
    if len(models) != K:
        problems.append(f"models has {len(models)} entries, expected K={K}")


@dataclass(frozen=True)
class DetectorConfig:
    K: int
    q: int
    models: tuple[StreamModel, ...]
    prior: PriorSpec
    rule: StoppingRule
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "models", tuple(self.models))
        problems: list[str] = []
        if self.K < 1:
            problems.append(f"K must be >= 1, got {self.K}")
        if not 1 <= self.q <= self.K:
            problems.append(f"q={self.q} must satisfy 1 <= q <= K={self.K}")
        if self.rule.r > self.K:
            problems.append(f"rule.r={self.rule.r} exceeds K={self.K}")
        _check_models(self.models, self.K, problems)
        if self.prior.K != self.K:
            problems.append(f"prior covers {self.prior.K} streams, expected K={self.K}")
        if problems:
            raise ConfigError(problems)

    algorithm = "TSSRP"

    @property
    def level(self) -> float:
        return self.rule.level

    def with_threshold(self, threshold: float) -> DetectorConfig:
        return dataclasses.replace(self, rule=dataclasses.replace(self.rule, threshold=threshold))

    def with_seed(self, seed: int) -> DetectorConfig:
        return dataclasses.replace(self, seed=seed)

    def kernel(self) -> TssrpKernel:
        return TssrpKernel(self)


def _model_groups(models: Sequence[StreamModel]):
    groups: dict[StreamModel, list[int]] = {}
    for k, m in enumerate(models):
        groups.setdefault(m, []).append(k)
    return list(groups.items())


def batch_llr(groups, K: int, x):
    """Log-likelihood ratios for a (..., K) block, grouped by model."""
    if len(groups) == 1:
        return groups[0][0].llr(x)
    out = np.empty(np.shape(x))
    for model, idx in groups:
        out[..., idx] = model.llr(x[..., idx])
    return out


@dataclass
class KernelState:
    """Per-replication arrays; leading axis indexes replications."""

    observed: np.ndarray
    arrays: dict[str, np.ndarray]

    def take(self, keep) -> KernelState:
        return KernelState(self.observed[keep], {k: v[keep] for k, v in self.arrays.items()})


class TssrpKernel:
    """Vectorised TSSRP step shared by :class:`Detector` and the batch engine."""

    def __init__(self, config: DetectorConfig):
        self.config = config
        self.K, self.q = config.K, config.q
        self.rule = config.rule
        self.prior = config.prior
        # a point mass at zero needs no uniforms
        self.uses_prior = not config.prior.is_degenerate_zero
        self._groups = _model_groups(config.models)

    def initial_state(self, layouts: np.ndarray) -> KernelState:
        n = layouts.shape[0]
        return KernelState(
            layout_mask(layouts, self.K),
            {"log_R": np.full((n, self.K), -np.inf), "log_L": np.zeros((n, self.K))},
        )

    def step(self, st: KernelState, x, prior_u, tie_keys):
        """Algorithm steps (1)-(5); returns the rule statistic per replication."""
        obs = st.observed
        llr = batch_llr(self._groups, self.K, np.where(obs, x, 0.0))
        log_R, log_L = update_arrays(st.arrays["log_R"], st.arrays["log_L"], llr, obs)
        st.arrays["log_R"], st.arrays["log_L"] = log_R, log_L
        if not self.uses_prior:
            scores = log_R
        else:
            scores = score_arrays(log_R, log_L, self.prior.quantiles(prior_u))
        st.arrays["scores"] = scores
        st.observed = layout_mask(top_q(scores, self.q, tie_keys), self.K)
        return top_r_statistic(log_R, scores, self.rule.kind, self.rule.r)

    def report(self, st: KernelState) -> dict[str, np.ndarray]:
        return {"log_R": st.arrays["log_R"], "log_L": st.arrays["log_L"]}


# ---------------------------------------------------------------------------
# single-run driver


@dataclass
class StepOutcome:
    alarm: bool
    stat: float
    layout_next: SensorLayout


@dataclass
class RunResult:
    stopping_time: int
    censored: bool
    counts: list[int]
    final_stat: float
    final: dict[str, list[float]]
    stats: list[float] = field(default_factory=list)
    layouts: list[list[int]] | None = None

    @property
    def alarm(self) -> bool:
        return not self.censored

    def delay(self, nu: int = 1) -> int:
        """T - nu; callers must condition on T >= nu."""
        return self.stopping_time - nu

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _kernel_for(config):
    return config.kernel()


class Detector:
    """Stateful single-replication detector (TSSRP or any kernel-backed config).

    ``x`` passed to :meth:`step` may be a length-K sequence, of which only the
    entries in the current layout are read, or a mapping from stream index to
    value covering at least the current layout.
    """

    def __init__(self, config, streams: Streams | None = None, rep: int = 0):
        self.config = config
        self.kernel = _kernel_for(config)
        self.streams = streams if streams is not None else replication_streams(config.seed, rep)
        self.K = config.K
        first = initial_layout(self.streams.layout, config.K, config.q)
        self.state = self.kernel.initial_state(first[None, :])
        self.level = config.level
        self.t = 0
        self.stopped = False
        self.counts = np.zeros(self.K, dtype=np.int64)

    @property
    def layout(self) -> SensorLayout:
        return SensorLayout(frozenset(np.flatnonzero(self.state.observed[0]).tolist()), self.K)

    def _as_vector(self, x) -> np.ndarray:
        obs = self.state.observed[0]
        vec = np.zeros(self.K)
        if isinstance(x, Mapping):
            for k in np.flatnonzero(obs):
                if int(k) not in x:
                    raise DataError(f"missing value for observed stream {int(k)} at t={self.t + 1}")
                vec[k] = x[int(k)]
        else:
            arr = np.asarray(x, dtype=float)
            if arr.shape != (self.K,):
                raise DataError(f"expected {self.K} values, got shape {arr.shape}")
            vec[obs] = arr[obs]
        if not np.all(np.isfinite(vec[obs])):
            raise DataError(f"non-finite observation at t={self.t + 1}")
        return vec

    def step(self, x) -> StepOutcome:
        if self.stopped:
            raise StateError("detector already raised an alarm")
        vec = self._as_vector(x)
        self.counts += self.state.observed[0]
        prior_u = self.streams.prior.random(self.K) if self.kernel.uses_prior else None
        keys = self.streams.tiebreak.random(self.K)
        stat = float(self.kernel.step(self.state, vec[None, :], prior_u, keys)[0])
        self.t += 1
        alarm = stat >= self.level
        self.stopped = alarm
        return StepOutcome(alarm, stat, self.layout)

    def local_states(self) -> list[LocalState]:
        rep = self.kernel.report(self.state)
        if "log_R" not in rep:
            raise AttributeError("kernel has no Shiryaev-Roberts state")
        return [LocalState(float(a), float(b)) for a, b in zip(rep["log_R"][0], rep["log_L"][0])]


def run(
    config,
    source: Callable[[int], Sequence[float]],
    horizon: int,
    *,
    trace_layouts: bool = False,
    streams: Streams | None = None,
) -> RunResult:
    """Step until alarm or ``horizon``; ``source(t)`` returns the panel at time t."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    det = Detector(config, streams)
    stats: list[float] = []
    layouts: list[list[int]] | None = [] if trace_layouts else None
    outcome = None
    for t in range(1, horizon + 1):
        if layouts is not None:
            layouts.append(det.layout.sorted())
        try:
            x = source(t)
        except (StopIteration, IndexError) as exc:
            partial = _result(det, stats, layouts, censored=True)
            raise DataError(f"data source exhausted at t={t}", partial) from exc
        outcome = det.step(x)
        stats.append(outcome.stat)
        if outcome.alarm:
            break
    return _result(det, stats, layouts, censored=not (outcome and outcome.alarm))


def _result(det: Detector, stats, layouts, censored: bool) -> RunResult:
    final = {k: v[0].tolist() for k, v in det.kernel.report(det.state).items()}
    return RunResult(
        stopping_time=det.t,
        censored=censored,
        counts=det.counts.tolist(),
        final_stat=stats[-1] if stats else float("nan"),
        final=final,
        stats=list(stats),
        layouts=layouts,
    )
