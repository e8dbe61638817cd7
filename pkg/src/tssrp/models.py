"""Per-stream probability models: log-likelihood ratios and samplers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import gammaln


@dataclass(frozen=True)
class Gaussian:
    mean: float
    sd: float = 1.0

    def __post_init__(self) -> None:
        if not self.sd > 0:
            raise ValueError(f"Gaussian sd must be positive, got {self.sd}")

    def logpdf(self, x):
        z = (np.asarray(x, dtype=float) - self.mean) / self.sd
        return -0.5 * z * z - math.log(self.sd) - 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class StudentT:
    df: float
    location: float = 0.0

    def __post_init__(self) -> None:
        if not self.df > 0:
            raise ValueError(f"StudentT df must be positive, got {self.df}")

    def logpdf(self, x):
        nu = self.df
        z = np.asarray(x, dtype=float) - self.location
        const = gammaln((nu + 1) / 2) - gammaln(nu / 2) - 0.5 * math.log(nu * math.pi)
        return const - (nu + 1) / 2 * np.log1p(z * z / nu)


Family = Union[Gaussian, StudentT]


@dataclass(frozen=True)
class StreamModel:
    """Pre- and post-change densities of one stream.

    ``pre`` and ``post`` must belong to the same family. A model only
    describes densities; whether it is the detector's belief or the data
    generator's truth is decided by where it is used.
    """

    pre: Family
    post: Family

    def __post_init__(self) -> None:
        if type(self.pre) is not type(self.post):
            raise ValueError("pre and post must be the same family")
        if self.pre == self.post:
            raise ValueError("pre and post parameters must differ")
        if isinstance(self.pre, StudentT) and self.pre.df != self.post.df:
            raise ValueError("StudentT pre/post must share df")

    @classmethod
    def gaussian(cls, mu0: float = 0.0, mu1: float = 1.5, sd: float = 1.0) -> StreamModel:
        return cls(Gaussian(mu0, sd), Gaussian(mu1, sd))

    @classmethod
    def student_t(cls, df: float = 5.0, loc0: float = 0.0, loc1: float = 1.5) -> StreamModel:
        return cls(StudentT(df, loc0), StudentT(df, loc1))

    @property
    def family(self) -> str:
        return "gaussian" if isinstance(self.pre, Gaussian) else "student_t"

    def llr(self, x):
        """Vectorised log f_post(x) - log f_pre(x); no finiteness check."""
        pre, post = self.pre, self.post
        if isinstance(pre, Gaussian) and pre.sd == post.sd:
            # exact linear form avoids cancellation between two quadratics
            x = np.asarray(x, dtype=float)
            d = post.mean - pre.mean
            return d / pre.sd**2 * (x - 0.5 * (pre.mean + post.mean))
        return post.logpdf(x) - pre.logpdf(x)

    def standard_draws(self, rng: np.random.Generator, size):
        """Regime-free variates that :meth:`transform` maps onto either regime."""
        if isinstance(self.pre, Gaussian):
            return rng.standard_normal(size)
        return rng.standard_t(self.pre.df, size)

    def transform(self, z, post):
        """Map standard draws to the pre (``post`` False) or post regime."""
        if isinstance(self.pre, Gaussian):
            loc = np.where(post, self.post.mean, self.pre.mean)
            scale = np.where(post, self.post.sd, self.pre.sd)
            return loc + scale * z
        return np.where(post, self.post.location, self.pre.location) + z


def log_likelihood_ratio(model: StreamModel, x: float) -> float:
    """log f_post(x) - log f_pre(x) for a single finite observation."""
    if not math.isfinite(x):
        raise ValueError(f"observation must be finite, got {x!r}")
    return float(model.llr(x))


def sample(model: StreamModel, regime: str, rng: np.random.Generator) -> float:
    """One draw from the ``"pre"`` or ``"post"`` density."""
    if regime not in ("pre", "post"):
        raise ValueError(f"regime must be 'pre' or 'post', got {regime!r}")
    z = model.standard_draws(rng, None)
    return float(model.transform(z, regime == "post"))
