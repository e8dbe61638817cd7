from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pytest

from tssrp.calibration import calibrate_threshold, estimate_arl, level_of, threshold_of
from tssrp.detector import DetectorConfig, KernelState, RuleKind, StoppingRule, layout_mask
from tssrp.engine import TraceRecorder, run_batch
from tssrp.errors import CalibrationError
from tssrp.models import StreamModel
from tssrp.priors import preset
from tssrp.sim import IndependentPanel

GAUSS = StreamModel.gaussian(0.0, 1.5)


def desk(threshold=math.inf, kind="T"):
    K = 5
    return DetectorConfig(K, 2, (GAUSS,) * K, preset("G2", K), StoppingRule(RuleKind(kind), 2, threshold), seed=0)


class _ClockKernel:
    """Statistic equal to the time index, whatever the data."""

    uses_prior = False

    def __init__(self, K):
        self.K = K

    def initial_state(self, layouts):
        return KernelState(layout_mask(layouts, self.K), {"t": np.zeros((len(layouts), 1))})

    def step(self, st, x, prior_u, keys):
        st.arrays["t"] = st.arrays["t"] + 1
        return st.arrays["t"][:, 0].copy()

    def report(self, st):
        return {"t": st.arrays["t"]}


@dataclass(frozen=True)
class Clock:
    K: int = 2
    q: int = 1
    seed: int = 0
    threshold: float = math.inf
    rule = StoppingRule(RuleKind.TOP_R_LOG_SUM, 1, math.inf)
    models = (GAUSS, GAUSS)

    @property
    def level(self):
        return self.threshold

    def kernel(self):
        return _ClockKernel(self.K)


def test_linear_statistic_calibrates_to_gamma_exactly():
    rep = calibrate_threshold(Clock(), 100, reps=20, master_seed=0)
    assert rep.threshold == 100.0
    assert rep.arl_estimate == 100.0 and rep.std_error == 0.0 and rep.censored_count == 0


def test_zero_threshold_gives_unit_arl():
    assert estimate_arl(desk(), 0.0, 10, 50, 0) == (1.0, 0.0, 0)


def test_unreachable_threshold_is_censored_at_horizon():
    mean, se, cens = estimate_arl(desk(), 1e300, 12, 50, 0)
    assert (mean, se, cens) == (50.0, 0.0, 12)


def test_estimate_needs_two_replications():
    with pytest.raises(ValueError):
        estimate_arl(desk(), 10.0, 1, 50, 0)


def test_estimate_is_reproducible_across_worker_counts():
    a = estimate_arl(desk(), 200.0, 40, 5000, 3, workers=1)
    b = estimate_arl(desk(), 200.0, 40, 5000, 3, workers=8)
    assert a == b


def test_arl_is_exactly_monotone_on_shared_records():
    source = IndependentPanel(desk().models, nu=None)
    grid = [20.0, 50.0, 100.0, 200.0, 400.0]
    runs = [run_batch(desk(a), source, 4, 60, 20_000, desk(a).level)["T"] for a in grid]
    means = [float(T.mean()) for T in runs]
    assert means == sorted(means)
    for lo, hi in zip(runs, runs[1:]):
        assert np.all(lo <= hi)


def test_calibrated_threshold_is_smallest_meeting_gamma():
    c = desk()
    rep = calibrate_threshold(c, 100, reps=200, master_seed=5)
    assert rep.arl_estimate >= 100
    assert rep.arl_estimate >= 100 - 2 * rep.std_error
    # the empirical ARL steps only at reached statistic values; one step
    # down it must miss gamma
    level = level_of(c, rep.threshold)
    with TraceRecorder(c, IndependentPanel(c.models, nu=None), 5, 200, 10_000) as rec:
        values = np.unique(np.concatenate(rec.extend(level)))
    prev = values[values < level].max()
    mean, _, _ = estimate_arl(c, threshold_of(c, prev), 200, 10_000, 5)
    assert mean < 100
    again, _, _ = estimate_arl(c, rep.threshold, 200, 10_000, 5)
    assert again == rep.arl_estimate


def test_lower_bound_on_arl_holds():
    c = desk()
    rep = calibrate_threshold(c, 100, reps=200, master_seed=6)
    assert rep.threshold / c.K <= rep.arl_estimate + 3 * rep.std_error


def test_calibration_independent_of_workers():
    a = calibrate_threshold(desk(), 60, reps=40, master_seed=2, workers=1)
    b = calibrate_threshold(desk(), 60, reps=40, master_seed=2, workers=2)
    assert a.threshold == b.threshold and a.arl_estimate == b.arl_estimate


def test_log_scale_rules_calibrate():
    rep = calibrate_threshold(desk(kind="T3"), 80, reps=100, master_seed=1)
    assert rep.arl_estimate >= 80
    assert level_of(desk(kind="T3"), rep.threshold) == rep.threshold


def test_threshold_level_round_trip_never_overshoots():
    c = desk()
    for level in (0.1, 3.7, 12.0, 40.5):
        back = level_of(c, threshold_of(c, level))
        assert back <= level and back == pytest.approx(level, rel=1e-14)


def test_bracket_failure_when_horizon_caps_the_arl():
    with pytest.raises(CalibrationError):
        calibrate_threshold(desk(), 100, reps=10, horizon=50, master_seed=0, max_expansions=2)


@pytest.mark.parametrize("gamma,rel_tol", [(1.0, 0.01), (100, 0.0), (100, 0.3)])
def test_bad_arguments(gamma, rel_tol):
    with pytest.raises(ValueError):
        calibrate_threshold(desk(), gamma, reps=10, rel_tol=rel_tol)


def test_report_serializes():
    rep = calibrate_threshold(Clock(), 10, reps=5)
    d = rep.to_dict()
    assert d["threshold"] == 10.0 and all(len(p) == 2 for p in d["bracket_history"])
