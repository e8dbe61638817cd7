"""In-control ARL estimation and threshold calibration.

Calibration records each replication's statistic trace once. Paths do not
depend on the threshold, so the stopping time at any threshold is the
first crossing of the trace. The empirical ARL is then an exactly
nondecreasing step function of the threshold, and bisection on it is
well posed.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .baselines import TrasConfig
from .detector import RuleKind, stat_level
from .engine import TraceRecorder, run_batch
from .errors import CalibrationError
from .sim import IndependentPanel


def level_of(config, threshold: float) -> float:
    if isinstance(config, TrasConfig):
        return float(threshold)
    return stat_level(config.rule.kind, threshold)


def threshold_of(config, level: float) -> float:
    """Inverse of :func:`level_of`, nudged down so the level is never overshot.

    Calibrated levels are statistic values actually reached; landing an ulp
    above one would move the alarm to a later crossing.
    """
    if isinstance(config, TrasConfig) or config.rule.kind.log_sum:
        return float(level)
    a = math.exp(level)
    while level_of(config, a) > level:
        a = np.nextafter(a, 0.0)
    return float(a)


def in_control_source(config):
    """Panel drawn from the detector's own pre-change densities."""
    return IndependentPanel(config.models, nu=None)


@dataclass
class CalibrationReport:
    threshold: float
    arl_estimate: float
    std_error: float
    replications: int
    horizon: int
    censored_count: int
    gamma: float
    bracket_history: list[tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["bracket_history"] = [list(p) for p in self.bracket_history]
        return d


def _summary(T: np.ndarray, censored: np.ndarray) -> tuple[float, float, int]:
    se = float(T.std(ddof=1) / math.sqrt(len(T))) if len(T) > 1 else 0.0
    return float(T.mean()), se, int(censored.sum())


def estimate_arl(
    config,
    threshold: float,
    reps: int,
    horizon: int,
    master_seed: int,
    *,
    source=None,
    workers: int = 1,
) -> tuple[float, float, int]:
    """(mean, stderr, censored) of in-control stopping times.

    Censored runs count as ``horizon``, biasing the mean downward.
    """
    if reps < 2:
        raise ValueError(f"reps must be >= 2, got {reps}")
    source = source if source is not None else in_control_source(config)
    out = run_batch(config, source, master_seed, reps, horizon, level_of(config, threshold), workers=workers)
    return _summary(out["T"], out["censored"])


class _TraceArl:
    """Empirical ARL as a function of the level, extending traces lazily.

    ``check`` only simulates as far as needed to decide ARL >= gamma: rows
    are paused at a time cap that doubles until the summed partial run
    lengths already exceed ``gamma * reps`` or every row has finished.
    """

    def __init__(self, recorder: TraceRecorder, horizon: int):
        self.recorder = recorder
        self.horizon = horizon
        self.runmax: list[np.ndarray] = []

    def _extend(self, level: float, until: int | None = None) -> None:
        traces = self.recorder.extend(level, until)
        self.runmax = [np.maximum.accumulate(tr) for tr in traces]

    def _lengths(self, level: float) -> tuple[np.ndarray, np.ndarray]:
        """Run length at ``level`` (a lower bound where unfinished) and a finished mask."""
        T = np.empty(len(self.runmax), dtype=np.int64)
        done = np.empty(len(self.runmax), dtype=bool)
        for j, m in enumerate(self.runmax):
            i = int(np.searchsorted(m, level, side="left"))
            if i < len(m):
                T[j], done[j] = i + 1, True
            else:
                T[j], done[j] = len(m), len(m) >= self.horizon
        return T, done

    def check(self, level: float, gamma: float) -> tuple[bool, float]:
        """(ARL >= gamma, ARL or its lower bound). A negative answer is exact."""
        cap = max(int(2 * gamma), 2)
        while True:
            self._extend(level, cap)
            T, done = self._lengths(level)
            mean = float(T.mean())
            if mean >= gamma or done.all():
                return mean >= gamma, mean
            cap = min(2 * cap, self.horizon)

    def times(self, level: float) -> tuple[np.ndarray, np.ndarray]:
        self._extend(level)
        T, _ = self._lengths(level)
        T = np.minimum(T, self.horizon)
        censored = np.array([not (m[t - 1] >= level) for m, t in zip(self.runmax, T)])
        return T, censored

    def arl(self, level: float) -> float:
        return float(self.times(level)[0].mean())

    def candidates(self, lo: float, hi: float) -> np.ndarray:
        """Trace values in (lo, hi] plus the first one at or above hi.

        The empirical ARL is constant between consecutive values, so the
        step containing ``hi`` ends at that last entry.
        """
        vals = np.unique(np.concatenate(self.runmax)) if self.runmax else np.empty(0)
        above = vals[vals >= hi][:1]
        return np.union1d(vals[(vals > lo) & (vals <= hi)], above)

    def n_between(self, lo: float, hi: float) -> int:
        return sum(int(np.count_nonzero((m > lo) & (m <= hi))) for m in self.runmax)


def calibrate_threshold(
    config,
    gamma: float,
    reps: int = 1000,
    horizon: int | None = None,
    rel_tol: float = 0.01,
    master_seed: int = 0,
    *,
    source=None,
    workers: int = 1,
    safety: float = 2.0,
    max_expansions: int = 10,
) -> CalibrationReport:
    """Smallest threshold whose empirical in-control ARL reaches ``gamma``.

    The bracket starts at 1 and doubles upward until the ARL clears
    ``gamma``; going more than ``max_expansions`` doublings past
    ``K * gamma * safety`` is a calibration failure. Bisection on
    log(threshold) then narrows it until at most one trace value is left
    inside, and the result is snapped to the smallest statistic value at
    which the empirical ARL reaches ``gamma`` on these replications. The
    snapped answer is exact for the sample, so ``rel_tol`` only bounds
    what callers may ask for.
    """
    if not gamma > 1:
        raise ValueError(f"gamma must exceed 1, got {gamma}")
    if not 0 < rel_tol <= 0.2:
        raise ValueError(f"rel_tol must lie in (0, 0.2], got {rel_tol}")
    horizon = int(horizon or 100 * gamma)
    source = source if source is not None else in_control_source(config)
    history: list[tuple[float, float]] = []

    with TraceRecorder(config, source, master_seed, reps, horizon, workers=workers) as rec:
        curve = _TraceArl(rec, horizon)

        def meets(threshold: float) -> bool:
            ok, a = curve.check(level_of(config, threshold), gamma)
            history.append((float(threshold), a))
            return ok

        lo = 1.0
        while meets(lo):
            lo /= 2
            if lo < 1e-300:
                raise CalibrationError("ARL exceeds gamma at every tested lower bound")
        # grow upward from below: a level far above the answer would be
        # simulated until the lower bound on its ARL clears gamma anyway
        ceiling = config.K * gamma * safety * 2.0**max_expansions
        hi = 2 * lo
        while not meets(hi):
            lo, hi = hi, 2 * hi
            if hi > ceiling:
                raise CalibrationError(
                    f"ARL still below gamma={gamma} at threshold {lo:g}, "
                    f"{max_expansions} doublings past K*gamma*{safety:g}"
                )
        while hi / lo - 1 > 1e-12 and curve.n_between(level_of(config, lo), level_of(config, hi)) > 1:
            mid = math.sqrt(lo * hi)
            if meets(mid):
                hi = mid
            else:
                lo = mid

        # full traces up to the upper end fix every step of the curve below it
        lvl_lo, lvl_hi = level_of(config, lo), level_of(config, hi)
        curve.times(lvl_hi)
        cand = curve.candidates(lvl_lo, lvl_hi)
        best = cand[-1] if len(cand) and cand[-1] >= lvl_hi else lvl_hi
        left, right = 0, len(cand) - 1
        while left <= right:
            m = (left + right) // 2
            if curve.arl(cand[m]) >= gamma:
                best, right = cand[m], m - 1
            else:
                left = m + 1
        threshold = threshold_of(config, best)
        T, censored = curve.times(level_of(config, threshold))
    mean, se, n_cens = _summary(T, censored)
    history.append((threshold, mean))
    return CalibrationReport(threshold, mean, se, reps, horizon, n_cens, float(gamma), history)
