"""Lockstep replication engine.

Runs many independent replications of one procedure as rows of numpy
arrays. Replication ``i`` draws only from ``replication_streams(seed, i)``
through per-purpose buffers of ``chunk`` steps; numpy generators fill
arrays sequentially, so a buffered block equals ``chunk`` successive
single-step draws and a batch row reproduces :class:`detector.Detector`
exactly.

Replications can be parked once their statistic reaches a level and
resumed later with a higher level. Paths never depend on the level, so
stopping times for every threshold are read off the recorded statistic
traces (shared random numbers across thresholds).
"""

from __future__ import annotations

import multiprocessing as mp
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .detector import KernelState, initial_layout
from .rng import Streams, replication_streams


class PanelSource(Protocol):
    K: int

    def setup(self, rng: np.random.Generator):
        """Per-replication scenario context drawn from the scenario stream."""

    def block(self, rng: np.random.Generator, ctx, t0: int, n: int) -> np.ndarray:
        """Observations for times t0 .. t0+n-1, shape (n, K)."""


@dataclass
class _Parked:
    t: int
    runmax: float
    pos: int
    gen_states: tuple
    observed: np.ndarray
    arrays: dict
    counts: np.ndarray
    last_stat: float


class LockstepBatch:
    def __init__(
        self,
        config,
        source: PanelSource,
        master_seed: int,
        reps: Sequence[int],
        horizon: int,
        *,
        record: bool = False,
        chunk: int = 32,
    ):
        self.config = config
        self.kernel = config.kernel()
        self.source = source
        self.K = config.K
        self.horizon = int(horizon)
        self.record = record
        self.chunk = chunk
        self.reps = np.asarray(list(reps), dtype=np.int64)
        n = len(self.reps)
        self.streams: list[Streams] = [replication_streams(master_seed, int(i)) for i in self.reps]
        self.ctx = [source.setup(s.scenario) for s in self.streams]
        layouts = np.stack([initial_layout(s.layout, self.K, config.q) for s in self.streams])

        # running group, indexed by position in self.reps
        self.run_idx = np.arange(n)
        self.state: KernelState = self.kernel.initial_state(layouts)
        self.t = np.zeros(n, dtype=np.int64)
        self.runmax = np.full(n, -np.inf)
        self.last_stat = np.full(n, np.nan)
        self.counts = np.zeros((n, self.K), dtype=np.int64)
        self.pos = np.full(n, chunk, dtype=np.int64)
        self.gen_states: list[tuple | None] = [None] * n
        shape = (n, chunk, self.K)
        self.xbuf = np.empty(shape)
        self.kbuf = np.empty(shape)
        self.ubuf = np.empty(shape) if self.kernel.uses_prior else None

        self.parked: dict[int, _Parked] = {}
        self._trace_parts: list[tuple[np.ndarray, np.ndarray]] = []

    # -- buffers -----------------------------------------------------------

    def _gens(self, j: int):
        s = self.streams[j]
        return (s.data, s.tiebreak, s.prior) if self.kernel.uses_prior else (s.data, s.tiebreak)

    def _fill(self, row: int, j: int, t0: int) -> None:
        s = self.streams[j]
        self.xbuf[row] = self.source.block(s.data, self.ctx[j], t0, self.chunk)
        self.kbuf[row] = s.tiebreak.random((self.chunk, self.K))
        if self.ubuf is not None:
            self.ubuf[row] = s.prior.random((self.chunk, self.K))

    def _refill(self, rows: np.ndarray) -> None:
        for row in rows:
            j = int(self.run_idx[row])
            self.gen_states[row] = tuple(g.bit_generator.state for g in self._gens(j))
            self._fill(row, j, int(self.t[row]) + 1)
            self.pos[row] = 0

    # -- parking -----------------------------------------------------------

    def _park(self, rows: np.ndarray) -> None:
        for row in rows:
            j = int(self.run_idx[row])
            self.parked[j] = _Parked(
                t=int(self.t[row]),
                runmax=float(self.runmax[row]),
                pos=int(self.pos[row]),
                gen_states=self.gen_states[row],
                observed=self.state.observed[row].copy(),
                arrays={k: v[row].copy() for k, v in self.state.arrays.items()},
                counts=self.counts[row].copy(),
                last_stat=float(self.last_stat[row]),
            )

    def _select(self, keep) -> None:
        self.run_idx = self.run_idx[keep]
        self.state = self.state.take(keep)
        self.t, self.runmax, self.last_stat = self.t[keep], self.runmax[keep], self.last_stat[keep]
        self.counts, self.pos = self.counts[keep], self.pos[keep]
        self.gen_states = [g for g, k in zip(self.gen_states, keep) if k]
        self.xbuf, self.kbuf = self.xbuf[keep], self.kbuf[keep]
        if self.ubuf is not None:
            self.ubuf = self.ubuf[keep]

    def _resume(self, level: float, cap: int) -> None:
        back = sorted(j for j, p in self.parked.items() if p.runmax < level and p.t < cap)
        if not back:
            return
        items = [self.parked.pop(j) for j in back]
        m = len(items)
        arrays = {
            k: np.concatenate([v, np.stack([p.arrays[k] for p in items])])
            for k, v in self.state.arrays.items()
        } if len(self.run_idx) else {
            k: np.stack([p.arrays[k] for p in items]) for k in items[0].arrays
        }
        self.state = KernelState(
            np.concatenate([self.state.observed, np.stack([p.observed for p in items])]), arrays
        )
        self.run_idx = np.concatenate([self.run_idx, np.asarray(back, dtype=np.int64)])
        self.t = np.concatenate([self.t, [p.t for p in items]]).astype(np.int64)
        self.runmax = np.concatenate([self.runmax, [p.runmax for p in items]])
        self.last_stat = np.concatenate([self.last_stat, [p.last_stat for p in items]])
        self.counts = np.concatenate([self.counts, np.stack([p.counts for p in items])])
        self.pos = np.concatenate([self.pos, [p.pos for p in items]]).astype(np.int64)
        self.gen_states.extend(p.gen_states for p in items)
        pad = np.empty((m, self.chunk, self.K))
        self.xbuf = np.concatenate([self.xbuf, pad])
        self.kbuf = np.concatenate([self.kbuf, pad])
        if self.ubuf is not None:
            self.ubuf = np.concatenate([self.ubuf, pad])
        n0 = len(self.run_idx) - m
        for off, (j, p) in enumerate(zip(back, items)):
            row = n0 + off
            if p.pos < self.chunk:
                # rewind to the buffer start and regenerate the same block
                for g, st in zip(self._gens(j), p.gen_states):
                    g.bit_generator.state = st
                self._fill(row, j, p.t - p.pos + 1)

    # -- stepping ----------------------------------------------------------

    def advance(self, level: float, until: int | None = None) -> None:
        """Run every replication until its statistic reaches ``level`` or the horizon.

        With ``until`` rows pause at that time instead; a later call with a
        larger ``until`` picks them up where they stopped.
        """
        cap = self.horizon if until is None else min(int(until), self.horizon)
        self._resume(level, cap)
        # finished rows are parked at once but dropped from the arrays lazily;
        # until then they are stepped on stale inputs and ignored
        alive = np.ones(len(self.run_idx), dtype=bool)
        while alive.any():
            need = np.flatnonzero(alive & (self.pos >= self.chunk))
            if len(need):
                self._refill(need)
            rows = np.arange(len(self.run_idx))
            pos = np.minimum(self.pos, self.chunk - 1)
            x = self.xbuf[rows, pos]
            keys = self.kbuf[rows, pos]
            u = self.ubuf[rows, pos] if self.ubuf is not None else None
            self.counts += self.state.observed
            stat = self.kernel.step(self.state, x, u, keys)
            self.pos += 1
            self.t += 1
            self.last_stat = stat
            self.runmax = np.maximum(self.runmax, stat)
            if self.record:
                self._trace_parts.append((self.run_idx[alive], stat[alive]))
            done = alive & ((stat >= level) | (self.t >= cap))
            if done.any():
                self._park(np.flatnonzero(done))
                alive &= ~done
                n_dead = len(alive) - int(alive.sum())
                if n_dead * 4 >= len(alive) or not alive.any():
                    self._select(alive)
                    alive = alive[alive]

    # -- results -----------------------------------------------------------

    def _parked_all(self) -> list[_Parked]:
        if len(self.run_idx):
            raise RuntimeError("advance() has not finished")
        return [self.parked[j] for j in range(len(self.reps))]

    def stopping_times(self, level: float) -> tuple[np.ndarray, np.ndarray]:
        """(T, censored) at ``level``, valid for any level not above the last advance."""
        if self.record:
            traces = self.traces()
            T = np.empty(len(traces), dtype=np.int64)
            for j, tr in enumerate(traces):
                T[j] = np.searchsorted(np.maximum.accumulate(tr), level, side="left") + 1
            T = np.minimum(T, self.horizon)
            hit = np.array([len(tr) >= T[j] and tr[T[j] - 1] >= level for j, tr in enumerate(traces)])
            # first crossing of the running max is a crossing of the statistic
            return T, ~hit
        parked = self._parked_all()
        T = np.array([p.t for p in parked], dtype=np.int64)
        censored = np.array([not p.last_stat >= level for p in parked])
        return T, censored

    def traces(self) -> list[np.ndarray]:
        if not self.record:
            raise RuntimeError("batch was not recording")
        if not self._trace_parts:
            return [np.empty(0) for _ in self.reps]
        idx = np.concatenate([p[0] for p in self._trace_parts])
        val = np.concatenate([p[1] for p in self._trace_parts])
        order = np.argsort(idx, kind="stable")
        idx, val = idx[order], val[order]
        bounds = np.searchsorted(idx, np.arange(len(self.reps) + 1))
        self._trace_parts = [(idx, val)]
        return [val[bounds[j] : bounds[j + 1]] for j in range(len(self.reps))]

    def outcome(self) -> dict:
        parked = self._parked_all()
        return {
            "reps": self.reps.copy(),
            "t": np.array([p.t for p in parked], dtype=np.int64),
            "last_stat": np.array([p.last_stat for p in parked]),
            "counts": np.stack([p.counts for p in parked]),
            "changed": [getattr(c, "changed", None) for c in self.ctx],
        }


# ---------------------------------------------------------------------------
# sharding over worker processes


def shard(n_reps: int, workers: int) -> list[range]:
    workers = max(1, min(workers, n_reps))
    edges = np.linspace(0, n_reps, workers + 1).astype(int)
    return [range(a, b) for a, b in zip(edges[:-1], edges[1:])]


def _one_shot(args):
    config, source, master_seed, reps, horizon, level, chunk = args
    batch = LockstepBatch(config, source, master_seed, reps, horizon, chunk=chunk)
    batch.advance(level)
    T, censored = batch.stopping_times(level)
    out = batch.outcome()
    out["T"], out["censored"] = T, censored
    return out


def run_batch(
    config,
    source: PanelSource,
    master_seed: int,
    n_reps: int,
    horizon: int,
    level: float,
    *,
    workers: int = 1,
    chunk: int = 32,
    first_rep: int = 0,
) -> dict:
    """Run replications ``first_rep .. first_rep+n_reps-1`` until ``level``.

    Results are concatenated in replication order, so they do not depend on
    ``workers``.
    """
    parts = [
        (config, source, master_seed, range(first_rep + r.start, first_rep + r.stop), horizon, level, chunk)
        for r in shard(n_reps, workers)
    ]
    if len(parts) == 1:
        outs = [_one_shot(parts[0])]
    else:
        with mp.get_context("spawn").Pool(len(parts)) as pool:
            outs = pool.map(_one_shot, parts)
    merged = {}
    for key in outs[0]:
        vals = [o[key] for o in outs]
        merged[key] = sum(vals, []) if isinstance(vals[0], list) else np.concatenate(vals)
    return merged


def _worker_loop(conn, args):
    config, source, master_seed, reps, horizon, chunk = args
    batch = LockstepBatch(config, source, master_seed, reps, horizon, record=True, chunk=chunk)
    while True:
        cmd, arg = conn.recv()
        if cmd == "stop":
            conn.close()
            return
        batch.advance(*arg)
        conn.send(batch.traces())


class TraceRecorder:
    """Record per-replication statistic traces, optionally across worker processes.

    ``extend(level, until)`` advances every replication until its statistic
    reaches ``level`` (or the time cap) and returns the traces in
    replication order.
    """

    def __init__(self, config, source, master_seed, n_reps, horizon, *, workers=1, chunk=32):
        self.horizon = horizon
        self._local = None
        self._procs = []
        ranges = shard(n_reps, workers)
        if len(ranges) == 1:
            self._local = LockstepBatch(
                config, source, master_seed, ranges[0], horizon, record=True, chunk=chunk
            )
        else:
            ctx = mp.get_context("spawn")
            for r in ranges:
                parent, child = ctx.Pipe()
                p = ctx.Process(
                    target=_worker_loop, args=(child, (config, source, master_seed, r, horizon, chunk))
                )
                p.start()
                self._procs.append((p, parent))

    def extend(self, level: float, until: int | None = None) -> list[np.ndarray]:
        if self._local is not None:
            self._local.advance(level, until)
            return self._local.traces()
        for _, conn in self._procs:
            conn.send(("advance", (level, until)))
        out: list[np.ndarray] = []
        for _, conn in self._procs:
            out.extend(conn.recv())
        return out

    def close(self) -> None:
        for p, conn in self._procs:
            conn.send(("stop", None))
            p.join()
        self._procs = []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
