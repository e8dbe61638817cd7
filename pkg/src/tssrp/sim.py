"""Scenario generators and experiment drivers."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .baselines import TrasConfig
from .detector import DetectorConfig, RuleKind, StoppingRule
from .engine import run_batch
from .errors import ConfigError
from .models import Gaussian, StreamModel
from .priors import PriorSpec, preset


@dataclass(frozen=True)
class ChangeContext:
    changed: tuple[int, ...]
    mask: np.ndarray = field(compare=False, repr=False)


def _standard_family(models: Sequence[StreamModel]):
    first = models[0]
    for m in models[1:]:
        if m.family != first.family or (m.family == "student_t" and m.pre.df != first.pre.df):
            raise ConfigError("all truth models in a panel must share one family (and df)")
    return first


@dataclass(frozen=True)
class IndependentPanel:
    """K independent streams; streams in the changed set switch to their
    post-change density from time ``nu`` on (``nu=None``: never).

    With ``random_changes=m`` each replication draws its own m changed
    streams from the scenario stream instead of using ``changed``.
    """

    truth_models: tuple[StreamModel, ...]
    nu: int | None = 1
    changed: tuple[int, ...] = ()
    random_changes: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "truth_models", tuple(self.truth_models))
        object.__setattr__(self, "changed", tuple(sorted(self.changed)))
        _standard_family(self.truth_models)
        if any(not 0 <= k < self.K for k in self.changed):
            raise ConfigError(f"changed streams must lie in 0..{self.K - 1}")
        if self.random_changes is not None and not 0 <= self.random_changes <= self.K:
            raise ConfigError(f"random_changes must lie in 0..{self.K}")
        object.__setattr__(self, "_homogeneous", len(set(self.truth_models)) == 1)

    @property
    def K(self) -> int:
        return len(self.truth_models)

    def setup(self, rng: np.random.Generator) -> ChangeContext:
        if self.random_changes is not None:
            changed = tuple(sorted(int(k) for k in rng.choice(self.K, self.random_changes, replace=False)))
        else:
            changed = self.changed
        mask = np.zeros(self.K, dtype=bool)
        if self.nu is not None:
            mask[list(changed)] = True
        return ChangeContext(changed, mask)

    def _post(self, ctx: ChangeContext, times: np.ndarray) -> np.ndarray:
        after = times >= self.nu if self.nu is not None else np.zeros(times.shape, dtype=bool)
        return after[:, None] & ctx.mask[None, :]

    def block(self, rng: np.random.Generator, ctx: ChangeContext, t0: int, n: int) -> np.ndarray:
        base = self.truth_models[0]
        z = base.standard_draws(rng, (n, self.K))
        post = self._post(ctx, np.arange(t0, t0 + n))
        if self._homogeneous:
            return base.transform(z, post)
        out = np.empty_like(z)
        for k, m in enumerate(self.truth_models):
            out[:, k] = m.transform(z[:, k], post[:, k])
        return out


def generate_panel(panel: IndependentPanel, t: int, rng: np.random.Generator, ctx=None) -> np.ndarray:
    """One tick of the panel at time ``t`` (K values)."""
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    ctx = ctx if ctx is not None else panel.setup(np.random.default_rng(0))
    return panel.block(rng, ctx, t, 1)[0]


# ---------------------------------------------------------------------------
# linear-Gaussian Bayesian network


@dataclass(frozen=True)
class BayesNetSpec:
    """Linear-Gaussian DAG: ``X_i = sum_j w[j, i] X_j + noise_sd[i] * eps_i``.

    ``edges`` maps (parent, child) index pairs to weights. With
    ``standardize`` the noise sds are solved so every in-control marginal
    variance is one, overriding ``noise_sd``.
    """

    names: tuple[str, ...]
    edges: dict[tuple[int, int], float] = field(default_factory=dict)
    noise_sd: tuple[float, ...] | None = None
    standardize: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "names", tuple(self.names))
        n = len(self.names)
        for (j, i) in self.edges:
            if not (0 <= j < n and 0 <= i < n) or i == j:
                raise ConfigError(f"bad edge {self.names[j] if 0 <= j < n else j}->{i}")
        self.order  # raises on cycles
        if not self.standardize and (self.noise_sd is None or len(self.noise_sd) != n):
            raise ConfigError("noise_sd must list one sd per node when standardize is false")

    def __hash__(self):
        return hash((self.names, tuple(sorted(self.edges.items())), self.noise_sd, self.standardize))

    @property
    def n(self) -> int:
        return len(self.names)

    @property
    def weights(self) -> np.ndarray:
        W = np.zeros((self.n, self.n))
        for (j, i), w in self.edges.items():
            W[j, i] = w
        return W

    @property
    def roots(self) -> tuple[int, ...]:
        children = {i for (_, i) in self.edges}
        return tuple(k for k in range(self.n) if k not in children)

    @property
    def order(self) -> tuple[int, ...]:
        parents = {i: {j for (j, c) in self.edges if c == i} for i in range(self.n)}
        out: list[int] = []
        ready = [k for k in range(self.n) if not parents[k]]
        while ready:
            k = ready.pop(0)
            out.append(k)
            for c in range(self.n):
                if k in parents[c]:
                    parents[c].discard(k)
                    if not parents[c] and c not in out and c not in ready:
                        ready.append(c)
        if len(out) != self.n:
            raise ConfigError("Bayesian network edges contain a cycle")
        return tuple(out)

    def sigmas(self) -> np.ndarray:
        if not self.standardize:
            return np.asarray(self.noise_sd, dtype=float)
        W = self.weights
        cov = np.zeros((self.n, self.n))
        sig = np.zeros(self.n)
        for i in self.order:
            w = W[:, i]
            explained = w @ cov @ w
            if explained >= 1:
                raise ConfigError(f"parents of {self.names[i]} explain variance >= 1; cannot standardise")
            sig[i] = math.sqrt(1 - explained)
            cov[i, :] = w @ cov
            cov[:, i] = cov[i, :]
            cov[i, i] = 1.0
        return sig

    def covariance(self) -> np.ndarray:
        """In-control covariance of (X_1..X_n)."""
        B = self.weights.T  # X = B X + D eps
        A = np.linalg.inv(np.eye(self.n) - B)
        D = np.diag(self.sigmas())
        return A @ D @ D @ A.T


# Weights and structure are illustrative: the case study does not publish
# them. X1 and X2 are roots so they can be the changed variables.
HOT_FORMING = BayesNetSpec(
    names=("X1", "X2", "X3", "X4", "X5"),
    edges={(3, 2): 0.6, (4, 2): 0.3},
)


def generate_hot_forming(
    spec: BayesNetSpec, changed_roots, shift: float, rng: np.random.Generator, n: int | None = None
) -> np.ndarray:
    """Draw ``n`` ticks (or one if None) in topological order.

    ``shift`` is added to the mean of each changed root; descendants pick it
    up through the edge weights.
    """
    changed_roots = set(changed_roots)
    bad = changed_roots - set(spec.roots)
    if bad:
        raise ConfigError(f"changed nodes {sorted(bad)} are not roots")
    m = 1 if n is None else n
    eps = rng.standard_normal((m, spec.n))
    x = _propagate(spec, eps, np.array([shift if k in changed_roots else 0.0 for k in range(spec.n)]))
    return x[0] if n is None else x


def _propagate(spec: BayesNetSpec, eps: np.ndarray, mean_shift) -> np.ndarray:
    sig = spec.sigmas()
    W = spec.weights
    x = np.zeros_like(eps)
    for i in spec.order:
        x[:, i] = x @ W[:, i] + sig[i] * eps[:, i] + mean_shift[..., i]
    return x


@dataclass(frozen=True)
class BayesNetPanel:
    """Panel source over a Bayesian network with changed roots from ``nu`` on."""

    spec: BayesNetSpec = HOT_FORMING
    shift: float = 2.0
    nu: int | None = 1
    changed: tuple[int, ...] = ()
    random_changes: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "changed", tuple(sorted(self.changed)))
        roots = self.spec.roots
        if set(self.changed) - set(roots):
            raise ConfigError(f"changed nodes must be roots {roots}")
        if self.random_changes is not None and not 0 <= self.random_changes <= len(roots):
            raise ConfigError(f"random_changes must lie in 0..{len(roots)}")

    @property
    def K(self) -> int:
        return self.spec.n

    def setup(self, rng: np.random.Generator) -> ChangeContext:
        if self.random_changes is not None:
            roots = np.asarray(self.spec.roots)
            changed = tuple(sorted(int(k) for k in rng.choice(roots, self.random_changes, replace=False)))
        else:
            changed = self.changed
        mask = np.zeros(self.K, dtype=bool)
        if self.nu is not None:
            mask[list(changed)] = True
        return ChangeContext(changed, mask)

    def block(self, rng: np.random.Generator, ctx: ChangeContext, t0: int, n: int) -> np.ndarray:
        eps = rng.standard_normal((n, self.K))
        times = np.arange(t0, t0 + n)
        after = times >= self.nu if self.nu is not None else np.zeros(n, dtype=bool)
        shift = np.where(after[:, None] & ctx.mask[None, :], self.shift, 0.0)
        return _propagate(self.spec, eps, shift)


# ---------------------------------------------------------------------------
# scenarios and experiments


@dataclass(frozen=True)
class Scenario:
    """A full experiment description.

    ``changed`` are 0-based stream indices. ``nu=None`` means no change.
    ``random_changes`` makes every replication draw its own changed set.
    """

    K: int
    q: int
    r: int
    gamma: float
    detector_models: tuple[StreamModel, ...]
    truth_models: tuple[StreamModel, ...]
    nu: int | None = 1
    changed: tuple[int, ...] = ()
    random_changes: int | None = None
    prior: str | PriorSpec = "G3"
    replications: int = 1000
    network: BayesNetSpec | None = None
    shift: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "detector_models", tuple(self.detector_models))
        object.__setattr__(self, "truth_models", tuple(self.truth_models))
        object.__setattr__(self, "changed", tuple(sorted(self.changed)))
        problems = []
        if not 1 <= self.q <= self.K:
            problems.append(f"q={self.q} must satisfy 1 <= q <= K={self.K}")
        if not 1 <= self.r <= self.K:
            problems.append(f"r={self.r} must satisfy 1 <= r <= K={self.K}")
        if len(self.detector_models) != self.K:
            problems.append(f"detector_models has {len(self.detector_models)} entries, expected K={self.K}")
        if self.network is None and len(self.truth_models) != self.K:
            problems.append(f"truth_models has {len(self.truth_models)} entries, expected K={self.K}")
        if self.network is not None and self.network.n != self.K:
            problems.append(f"network has {self.network.n} nodes, expected K={self.K}")
        if any(not 0 <= k < self.K for k in self.changed):
            problems.append(f"changed streams must lie in 0..{self.K - 1}")
        if self.nu is not None and self.nu < 1:
            problems.append(f"nu must be >= 1, got {self.nu}")
        if not self.gamma > 1:
            problems.append(f"gamma must exceed 1, got {self.gamma}")
        if problems:
            raise ConfigError(problems)

    @classmethod
    def gaussian(
        cls,
        K: int = 100,
        q: int = 10,
        r: int = 10,
        gamma: float = 1000,
        n_changes: int = 10,
        belief_shift: float = 1.5,
        true_shift: float = 1.5,
        **kw,
    ) -> Scenario:
        """Independent N(0,1) streams; the first ``n_changes`` shift."""
        kw.setdefault("changed", tuple(range(n_changes)))
        return cls(
            K=K, q=q, r=r, gamma=gamma,
            detector_models=(StreamModel.gaussian(0.0, belief_shift),) * K,
            truth_models=(StreamModel.gaussian(0.0, true_shift),) * K,
            **kw,
        )

    @classmethod
    def student_t(
        cls, K=100, q=10, r=10, gamma=1000, n_changes=10, df=5.0, belief_shift=1.5, true_shift=1.5, **kw
    ) -> Scenario:
        """Gaussian belief, t-distributed data with a location shift."""
        kw.setdefault("changed", tuple(range(n_changes)))
        return cls(
            K=K, q=q, r=r, gamma=gamma,
            detector_models=(StreamModel.gaussian(0.0, belief_shift),) * K,
            truth_models=(StreamModel.student_t(df, 0.0, true_shift),) * K,
            **kw,
        )

    @classmethod
    def hot_forming(
        cls, q=2, r=2, gamma=100, changed=(), random_changes=None, shift=2.0, belief_shift=1.5,
        network: BayesNetSpec = HOT_FORMING, **kw,
    ) -> Scenario:
        K = network.n
        return cls(
            K=K, q=q, r=r, gamma=gamma,
            detector_models=(StreamModel.gaussian(0.0, belief_shift),) * K,
            truth_models=(), changed=tuple(changed), random_changes=random_changes,
            network=network, shift=shift, **kw,
        )

    def in_control(self) -> Scenario:
        return dataclasses.replace(self, nu=None)

    def with_changes(self, n: int) -> Scenario:
        return dataclasses.replace(self, changed=tuple(range(n)))

    def source(self):
        if self.network is not None:
            return BayesNetPanel(self.network, self.shift, self.nu, self.changed, self.random_changes)
        return IndependentPanel(self.truth_models, self.nu, self.changed, self.random_changes)

    def prior_spec(self) -> PriorSpec:
        return self.prior if isinstance(self.prior, PriorSpec) else preset(self.prior, self.K)


def build_procedure(
    scenario: Scenario,
    algorithm: str = "TSSRP",
    threshold: float = math.inf,
    *,
    rule: str | RuleKind = RuleKind.TOP_R_SUM,
    delta: float = 0.05,
    seed: int = 0,
):
    """Detector config for ``scenario``: TSSRP with the scenario's prior or TRAS."""
    algorithm = algorithm.upper()
    if algorithm == "TSSRP":
        return DetectorConfig(
            scenario.K, scenario.q, scenario.detector_models, scenario.prior_spec(),
            StoppingRule(RuleKind(rule), scenario.r, threshold), seed,
        )
    if algorithm == "TRAS":
        return TrasConfig(scenario.K, scenario.q, scenario.detector_models, scenario.r, delta, threshold, seed)
    raise ConfigError(f"unknown algorithm {algorithm!r}; expected TSSRP or TRAS")


@dataclass
class ExperimentReport:
    algorithm: str
    label: str
    prior_or_delta: str
    n_changes: int | None
    gamma: float
    threshold: float
    replications: int
    mean_delay: float
    stderr: float
    occupancy: list[float]
    occupancy_changed: float | None
    occupancy_unchanged: float | None
    censored: int
    delays: list[int]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def prior_or_delta(config) -> str:
    if isinstance(config, TrasConfig):
        return f"{config.delta:g}"
    name = config.prior.name or "custom"
    rule = config.rule.kind.value
    return name if rule == "T" else f"{name},{rule}"


def procedure_label(config) -> str:
    if isinstance(config, TrasConfig):
        return f"TRAS(delta={config.delta:g})"
    name = config.prior.name or "custom"
    rule = config.rule.kind.value
    return f"TSSRP({name})" if rule == "T" else f"TSSRP({name},{rule})"


def run_experiment(
    scenario: Scenario,
    config,
    master_seed: int,
    *,
    replications: int | None = None,
    horizon: int | None = None,
    workers: int = 1,
) -> ExperimentReport:
    """Mean detection delay ``T - nu`` over replications with ``T >= nu``.

    ``config`` must carry the calibrated threshold. With ``nu=None`` the
    report's mean is the in-control run length instead of a delay.
    """
    reps = replications or scenario.replications
    horizon = horizon or int(100 * scenario.gamma)
    out = run_batch(config, scenario.source(), master_seed, reps, horizon, config.level, workers=workers)
    T = out["T"]
    nu = scenario.nu
    valid = T >= nu if nu is not None else np.ones(len(T), dtype=bool)
    delays = T[valid] - (nu if nu is not None else 0)
    mean = float(delays.mean()) if len(delays) else float("nan")
    stderr = float(delays.std(ddof=1) / math.sqrt(len(delays))) if len(delays) > 1 else float("nan")
    frac = out["counts"][valid] / T[valid][:, None]
    occupancy = frac.mean(axis=0).tolist()
    occ_c = occ_u = None
    if nu is not None:
        masks = np.zeros((len(T), scenario.K), dtype=bool)
        for i, ch in enumerate(out["changed"]):
            masks[i, list(ch)] = True
        masks = masks[valid]
        if masks.any():
            occ_c = float(frac[masks].mean())
        if (~masks).any():
            occ_u = float(frac[~masks].mean())
    n_changes = None if nu is None else (scenario.random_changes if scenario.random_changes is not None else len(scenario.changed))
    return ExperimentReport(
        algorithm=config.algorithm,
        label=procedure_label(config),
        prior_or_delta=prior_or_delta(config),
        n_changes=n_changes,
        gamma=scenario.gamma,
        threshold=_threshold_of(config),
        replications=reps,
        mean_delay=mean,
        stderr=stderr,
        occupancy=occupancy,
        occupancy_changed=occ_c,
        occupancy_unchanged=occ_u,
        censored=int(out["censored"].sum()),
        delays=delays.tolist(),
    )


def _threshold_of(config) -> float:
    return config.threshold if isinstance(config, TrasConfig) else config.rule.threshold
