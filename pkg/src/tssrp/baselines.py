"""TRAS baseline: per-stream CUSUM with a compensation increment for
unobserved streams, top-r sum stopping and greedy top-q layouts."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .detector import (
    KernelState,
    _check_models,
    _model_groups,
    batch_llr,
    layout_mask,
    top_q,
)
from .errors import ConfigError
from .models import StreamModel


def update_tras(w: float, log_lr: float, observed: bool, delta: float) -> float:
    if w < 0:
        raise ValueError(f"w must be nonnegative, got {w}")
    if observed:
        return max(w + log_lr, 0.0)
    return w + delta


@dataclass(frozen=True)
class TrasConfig:
    K: int
    q: int
    models: tuple[StreamModel, ...]
    r: int
    delta: float
    threshold: float = float("inf")
    seed: int = 0

    algorithm = "TRAS"

    def __post_init__(self) -> None:
        object.__setattr__(self, "models", tuple(self.models))
        problems: list[str] = []
        if not 1 <= self.q <= self.K:
            problems.append(f"q={self.q} must satisfy 1 <= q <= K={self.K}")
        if not 1 <= self.r <= self.K:
            problems.append(f"r={self.r} must satisfy 1 <= r <= K={self.K}")
        if self.delta < 0:
            problems.append(f"delta must be >= 0, got {self.delta}")
        if self.threshold < 0:
            problems.append(f"threshold must be >= 0, got {self.threshold}")
        _check_models(self.models, self.K, problems)
        if problems:
            raise ConfigError(problems)

    @property
    def level(self) -> float:
        return float(self.threshold)

    def with_threshold(self, threshold: float) -> TrasConfig:
        return dataclasses.replace(self, threshold=threshold)

    def with_seed(self, seed: int) -> TrasConfig:
        return dataclasses.replace(self, seed=seed)

    def kernel(self) -> TrasKernel:
        return TrasKernel(self)


class TrasKernel:
    uses_prior = False

    def __init__(self, config: TrasConfig):
        self.config = config
        self.K, self.q, self.r = config.K, config.q, config.r
        self.delta = config.delta
        self._groups = _model_groups(config.models)

    def initial_state(self, layouts: np.ndarray) -> KernelState:
        n = layouts.shape[0]
        return KernelState(layout_mask(layouts, self.K), {"W": np.zeros((n, self.K))})

    def step(self, st: KernelState, x, prior_u, tie_keys):
        obs = st.observed
        llr = batch_llr(self._groups, self.K, np.where(obs, x, 0.0))
        W = np.where(obs, np.maximum(st.arrays["W"] + llr, 0.0), st.arrays["W"] + self.delta)
        st.arrays["W"] = W
        st.observed = layout_mask(top_q(W, self.q, tie_keys), self.K)
        K, r = self.K, self.r
        return np.partition(W, K - r, axis=-1)[..., K - r :].sum(axis=-1)

    def report(self, st: KernelState) -> dict[str, np.ndarray]:
        return {"W": st.arrays["W"]}
