from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from tssrp.errors import ConfigError
from tssrp.models import StreamModel
from tssrp.sim import (
    HOT_FORMING,
    BayesNetSpec,
    IndependentPanel,
    Scenario,
    build_procedure,
    generate_hot_forming,
    generate_panel,
    prior_or_delta,
    procedure_label,
    run_experiment,
)

GAUSS = StreamModel.gaussian(0.0, 1.5)

# thresholds from a 1000-replication calibration (seed 1) of the K=100,
# q=10, r=10, gamma=1000 setting, pinned to keep these checks fast
A_G3 = 42235.5
A_G0 = 43275.6
A_TRAS = 22.3403


def test_panel_means_before_and_after_change():
    panel = IndependentPanel((GAUSS,) * 4, nu=5, changed=(1, 3))
    ctx = panel.setup(np.random.default_rng(0))
    rng = np.random.default_rng(1)
    x = panel.block(rng, ctx, 1, 40_000)
    pre, post = x[:4], x[4:]
    assert np.allclose(post.mean(axis=0), [0, 1.5, 0, 1.5], atol=0.03)
    assert np.allclose(post.std(axis=0), 1.0, atol=0.02)
    assert np.all(np.abs(pre[:, [0, 2]]) < 6)


def test_generate_panel_rejects_time_zero():
    with pytest.raises(ValueError):
        generate_panel(IndependentPanel((GAUSS,) * 3), 0, np.random.default_rng(0))


def test_in_control_panel_never_shifts():
    panel = IndependentPanel((GAUSS,) * 3, nu=None, changed=(0, 1, 2))
    x = panel.block(np.random.default_rng(2), panel.setup(np.random.default_rng(0)), 1, 30_000)
    assert np.allclose(x.mean(axis=0), 0, atol=0.03)


def test_random_changes_draw_distinct_streams():
    panel = IndependentPanel((GAUSS,) * 10, random_changes=3)
    seen = set()
    for s in range(30):
        ch = panel.setup(np.random.default_rng(s)).changed
        assert len(set(ch)) == 3 and all(0 <= k < 10 for k in ch)
        seen.add(ch)
    assert len(seen) > 1


def test_hot_forming_marginals_are_standardised():
    x = generate_hot_forming(HOT_FORMING, (), 0.0, np.random.default_rng(3), n=200_000)
    assert np.allclose(x.std(axis=0), 1.0, rtol=0.02)
    assert np.allclose(np.cov(x.T), HOT_FORMING.covariance(), atol=0.02)


def test_single_edge_child_inherits_weighted_shift():
    spec = BayesNetSpec(("P", "C"), {(0, 1): 0.5})
    x = generate_hot_forming(spec, (0,), 2.0, np.random.default_rng(4), n=200_000)
    assert x[:, 0].mean() == pytest.approx(2.0, abs=0.01)
    assert x[:, 1].mean() == pytest.approx(1.0, abs=0.01)
    assert x[:, 1].std() == pytest.approx(1.0, rel=0.02)


def test_cycle_is_a_config_error():
    with pytest.raises(ConfigError, match="cycle"):
        BayesNetSpec(("A", "B", "C"), {(0, 1): 0.3, (1, 2): 0.3, (2, 0): 0.3})


def test_only_roots_may_change():
    with pytest.raises(ConfigError):
        generate_hot_forming(HOT_FORMING, (2,), 1.0, np.random.default_rng(0))


def test_overexplained_node_cannot_be_standardised():
    spec = BayesNetSpec(("A", "B", "C"), {(0, 2): 0.8, (1, 2): 0.8})
    with pytest.raises(ConfigError):
        spec.sigmas()


def test_scenario_validation_collects_problems():
    with pytest.raises(ConfigError) as exc:
        Scenario.gaussian(K=10, q=11, r=12, gamma=1.0, n_changes=0)
    assert len(exc.value.problems) >= 3


def test_labels():
    sc = Scenario.gaussian(prior="G0")
    assert procedure_label(build_procedure(sc)) == "TSSRP(G0)"
    assert procedure_label(build_procedure(sc, rule="T3")) == "TSSRP(G0,T3)"
    assert prior_or_delta(build_procedure(sc, "TRAS", delta=0.03)) == "0.03"
    with pytest.raises(ConfigError):
        build_procedure(sc, "CUSUM")


def test_occupancy_sums_to_q():
    sc = Scenario.gaussian(K=8, q=3, r=2, gamma=50, n_changes=2, prior="G2")
    cfg = build_procedure(sc, threshold=200.0)
    rep = run_experiment(sc, cfg, 1, replications=50)
    assert sum(rep.occupancy) == pytest.approx(3.0, rel=1e-12)
    assert rep.occupancy_changed > rep.occupancy_unchanged
    assert len(rep.delays) == 50 and rep.n_changes == 2


def test_in_control_report_gives_run_lengths():
    sc = Scenario.gaussian(K=6, q=2, r=2, gamma=50, n_changes=1, prior="G2").in_control()
    rep = run_experiment(sc, build_procedure(sc, threshold=100.0), 2, replications=30)
    assert rep.n_changes is None and rep.occupancy_changed is None
    assert min(rep.delays) >= 1


def test_delay_falls_as_more_streams_change():
    sc = Scenario.gaussian(prior="G3")
    cfg = build_procedure(sc, threshold=A_G3)
    means = [run_experiment(sc.with_changes(m), cfg, 3, replications=1000).mean_delay for m in (1, 3, 5, 8, 10)]
    assert all(b <= a + 0.2 for a, b in zip(means, means[1:]))
    assert means[0] > 1.5 * means[-1]


@pytest.mark.parametrize("m", [1, 3, 5, 8, 10])
def test_informative_prior_beats_tras(m):
    sc = Scenario.gaussian(prior="G0").with_changes(m)
    a = run_experiment(sc, build_procedure(sc, threshold=A_G0), 4, replications=1000)
    b = run_experiment(sc, build_procedure(sc, "TRAS", threshold=A_TRAS), 4, replications=1000)
    assert b.mean_delay - a.mean_delay >= 5 * math.hypot(a.stderr, b.stderr)


def test_hot_forming_scenario_runs_with_random_roots():
    sc = Scenario.hot_forming(random_changes=2, prior="G2")
    rep = run_experiment(sc, build_procedure(sc, threshold=50.0), 5, replications=40)
    assert rep.n_changes == 2 and math.isfinite(rep.mean_delay)
    with pytest.raises(ConfigError):
        dataclasses.replace(sc, changed=(2,)).source()
