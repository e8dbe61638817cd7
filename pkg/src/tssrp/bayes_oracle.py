"""Finite-p Bayesian posterior recursion for one stream (verification only).

The change time has a geometric(p) prior with an atom ``pi0`` at time 0.
As p -> 0 the odds statistic ``pi / (p (1 - pi))`` follows the TSSRP
recursion started from ``pi0 / (p (1 - pi0))``. Nothing here runs on the
monitoring path.

The posterior is carried as its complement ``1 - pi``, updated
multiplicatively, so the odds stay accurate when ``pi`` is close to one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence


@dataclass(frozen=True)
class PosteriorState:
    comp: float
    p: float
    r_p: float = 0.0

    def __post_init__(self) -> None:
        if not 0 < self.comp <= 1:
            raise ValueError(f"1 - pi must lie in (0, 1], got {self.comp}")
        if not 0 < self.p < 1:
            raise ValueError(f"p must lie in (0, 1), got {self.p}")

    @classmethod
    def start(cls, p: float, r0: float = 0.0) -> PosteriorState:
        """State whose odds statistic starts at ``r0``, i.e. pi0 = p r0 / (1 + p r0)."""
        if r0 < 0:
            raise ValueError(f"r0 must be nonnegative, got {r0}")
        return cls(1.0 / (1.0 + p * r0), p, r0)

    @property
    def pi(self) -> float:
        return 1.0 - self.comp

    @property
    def odds(self) -> float:
        """pi / (p (1 - pi)) from the posterior itself."""
        return self.pi / (self.p * self.comp)


def _check_lr(lr: float, observed: bool) -> None:
    if observed and not (lr > 0 and math.isfinite(lr)):
        raise ValueError(f"likelihood ratio must be positive and finite, got {lr}")


def posterior_update(state: PosteriorState, lr: float, observed: bool) -> PosteriorState:
    """Advance P(change by t | data) one step; ``lr`` is ignored when unobserved."""
    _check_lr(lr, observed)
    p = state.p
    stay = state.comp * (1 - p)  # P(no change yet) after the prior step
    if observed:
        comp = stay / (lr * (1 - stay) + stay)
    else:
        comp = stay
    if comp == 0:
        raise OverflowError("posterior complement underflowed to zero")
    return PosteriorState(comp, p, state.r_p)


def finite_p_score(state: PosteriorState, lr: float, observed: bool) -> float:
    """Next odds statistic by its own recursion ``(R + 1) lr / (1 - p)``."""
    _check_lr(lr, observed)
    step = (state.r_p + 1) / (1 - state.p)
    return step * lr if observed else step


def both_routes(
    p: float, r0: float, lrs: Sequence[float], observed: Iterable[bool]
) -> tuple[list[float], list[float]]:
    """Odds along a record computed from the posterior and by direct recursion."""
    post = PosteriorState.start(p, r0)
    direct = PosteriorState.start(p, r0)
    via_pi, via_r = [], []
    for lr, obs in zip(lrs, observed):
        post = posterior_update(post, lr, obs)
        direct = PosteriorState(direct.comp, p, finite_p_score(direct, lr, obs))
        via_pi.append(post.odds)
        via_r.append(direct.r_p)
    return via_pi, via_r
