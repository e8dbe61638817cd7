from __future__ import annotations

import numpy as np
import pytest

from tssrp.detector import DetectorConfig, RuleKind, StoppingRule, run
from tssrp.engine import LockstepBatch, TraceRecorder, run_batch, shard
from tssrp.models import StreamModel
from tssrp.priors import preset
from tssrp.rng import replication_streams
from tssrp.sim import IndependentPanel

GAUSS = StreamModel.gaussian(0.0, 1.5)


def cfg(K=6, q=2, r=2, threshold=80.0, prior="G2"):
    return DetectorConfig(K, q, (GAUSS,) * K, preset(prior, K), StoppingRule(RuleKind.TOP_R_SUM, r, threshold), seed=0)


def source(K=6, changed=(0,)):
    return IndependentPanel((GAUSS,) * K, nu=1, changed=changed)


@pytest.mark.parametrize("n,w", [(10, 1), (10, 3), (3, 8), (1, 4)])
def test_shards_partition_the_replications(n, w):
    parts = shard(n, w)
    assert [i for r in parts for i in r] == list(range(n))
    assert all(len(r) for r in parts)


def test_batch_rows_replay_the_scalar_detector():
    c, src = cfg(), source()
    T = run_batch(c, src, 21, 8, 2000, c.level)["T"].tolist()
    for rep in range(8):
        s = replication_streams(21, rep)
        ctx = src.setup(s.scenario)
        res = run(c, lambda t: src.block(s.data, ctx, t, 1)[0], 2000, streams=s)
        assert res.stopping_time == T[rep]


def test_results_do_not_depend_on_worker_count():
    c, src = cfg(), source()
    a = run_batch(c, src, 5, 12, 2000, c.level, workers=1)
    b = run_batch(c, src, 5, 12, 2000, c.level, workers=3)
    for key in ("T", "censored", "counts", "last_stat"):
        assert np.array_equal(a[key], b[key])
    assert a["changed"] == b["changed"]


def test_chunk_size_is_invisible():
    c, src = cfg(), source()
    a = run_batch(c, src, 5, 6, 2000, c.level, chunk=1)
    b = run_batch(c, src, 5, 6, 2000, c.level, chunk=64)
    assert np.array_equal(a["T"], b["T"]) and np.array_equal(a["counts"], b["counts"])


def test_replication_offset_selects_the_same_runs():
    c, src = cfg(), source()
    full = run_batch(c, src, 5, 7, 2000, c.level)["T"]
    tail = run_batch(c, src, 5, 4, 2000, c.level, first_rep=3)["T"]
    assert np.array_equal(full[3:], tail)


def test_parked_rows_resume_exactly():
    c, src = cfg(), source(changed=())
    hi = c.level
    direct = LockstepBatch(c, src, 2, range(6), 3000)
    direct.advance(hi)
    staged = LockstepBatch(c, src, 2, range(6), 3000)
    staged.advance(hi - 2.0)
    staged.advance(hi - 1.0)
    staged.advance(hi)
    assert np.array_equal(direct.stopping_times(hi)[0], staged.stopping_times(hi)[0])


def test_paused_rows_resume_exactly():
    c, src = cfg(), source(changed=())
    a = LockstepBatch(c, src, 2, range(5), 3000, record=True)
    a.advance(c.level)
    b = LockstepBatch(c, src, 2, range(5), 3000, record=True)
    for cap in (3, 10, 40):
        b.advance(c.level, until=cap)
        assert all(len(tr) <= cap for tr in b.traces())
    b.advance(c.level)
    for x, y in zip(a.traces(), b.traces()):
        assert np.array_equal(x, y)


def test_censored_rows_stop_at_horizon():
    c = cfg(threshold=1e300)
    out = run_batch(c, source(changed=()), 1, 4, 25, c.level)
    assert out["T"].tolist() == [25] * 4 and out["censored"].all()


def test_trace_recorder_workers_agree():
    c, src = cfg(), source(changed=())
    with TraceRecorder(c, src, 9, 6, 2000, workers=1) as one:
        a = one.extend(c.level)
    with TraceRecorder(c, src, 9, 6, 2000, workers=2) as two:
        b = two.extend(c.level)
    assert len(a) == len(b) == 6
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
