"""Priors G for the randomisation values mixed into the sampling score.

Every descriptor is an inverse CDF applied to one uniform variate, so each
step consumes exactly K uniforms whatever the prior is. This keeps the
random-number stream layout identical across priors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not 0 <= self.lo <= self.hi:
            raise ValueError(f"need 0 <= lo <= hi, got [{self.lo}, {self.hi}]")

    def quantile(self, u):
        return self.lo + (self.hi - self.lo) * u


@dataclass(frozen=True)
class PointMass:
    value: float = 0.0

    def __post_init__(self) -> None:
        if self.value < 0:
            raise ValueError(f"point mass must be nonnegative, got {self.value}")

    def quantile(self, u):
        return np.full(np.shape(u), self.value)


@dataclass(frozen=True)
class Tabulated:
    """Piecewise-linear inverse CDF through ``(probs[i], values[i])``."""

    probs: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if p.shape != v.shape or p.size < 2:
            raise ValueError("probs and values need equal length >= 2")
        if p[0] != 0.0 or p[-1] != 1.0 or np.any(np.diff(p) <= 0):
            raise ValueError("probs must increase strictly from 0 to 1")
        if np.any(np.diff(v) < 0) or v[0] < 0:
            raise ValueError("values must be nondecreasing and nonnegative")

    def quantile(self, u):
        return np.interp(u, self.probs, self.values)


Descriptor = Union[Uniform, PointMass, Tabulated]

PRESETS = ("G0", "G1", "G2", "G3")


@dataclass(frozen=True)
class PriorSpec:
    per_stream: tuple[Descriptor, ...]
    name: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "per_stream", tuple(self.per_stream))
        if not self.per_stream:
            raise ValueError("prior needs at least one stream")
        # group identical descriptors so G0..G3 cost two numpy calls at most
        groups: dict[Descriptor, list[int]] = {}
        for k, d in enumerate(self.per_stream):
            groups.setdefault(d, []).append(k)
        object.__setattr__(self, "_groups", tuple((d, np.asarray(i)) for d, i in groups.items()))

    @property
    def K(self) -> int:
        return len(self.per_stream)

    @property
    def is_degenerate_zero(self) -> bool:
        return all(isinstance(d, PointMass) and d.value == 0 for d in self.per_stream)

    def quantiles(self, u: np.ndarray) -> np.ndarray:
        """Map uniforms of shape (..., K) to prior draws of the same shape."""
        u = np.asarray(u, dtype=float)
        out = np.empty_like(u)
        for d, idx in self._groups:
            if len(idx) == self.K:
                out[...] = d.quantile(u)
            else:
                out[..., idx] = d.quantile(u[..., idx])
        return out


def preset(name: str, K: int) -> PriorSpec:
    """Build one of the named priors G0..G3 for ``K`` streams."""
    if name == "G0":
        if K < 10:
            raise ConfigError(f"G0 needs K >= 10, got K={K}")
        head, cut = Uniform(0.5, 1.0), 10
    elif name == "G1":
        if K < 5:
            raise ConfigError(f"G1 needs K >= 5, got K={K}")
        head, cut = Uniform(0.5, 1.0), 5
    elif name == "G2":
        return PriorSpec((Uniform(0.0, 1.0),) * K, name)
    elif name == "G3":
        return PriorSpec((PointMass(0.0),) * K, name)
    else:
        raise ConfigError(f"unknown prior preset {name!r}; expected one of {PRESETS}")
    return PriorSpec((head,) * cut + (Uniform(0.0, 0.5),) * (K - cut), name)


def from_descriptors(items: Sequence[Descriptor]) -> PriorSpec:
    return PriorSpec(tuple(items))


def draw(spec: PriorSpec, k: int, rng: np.random.Generator) -> float:
    """Independent draw for stream ``k`` (0-based)."""
    if not 0 <= k < spec.K:
        raise IndexError(f"stream index {k} outside 0..{spec.K - 1}")
    return float(spec.per_stream[k].quantile(rng.random()))


def draw_all(spec: PriorSpec, rng: np.random.Generator) -> np.ndarray:
    """One draw per stream, consuming exactly K uniforms."""
    return spec.quantiles(rng.random(spec.K))
