"""Segment replay buffer carrying expert action distributions, plus lazy
re-planning of stored imitation targets.

Every stored transition carries the planner's first-step action distribution
from the moment it was collected; a low-frequency reanalysis pass refreshes
those distributions in place with plans under current parameters, leaving
(s, a, r, s') untouched. The buffer is safe to share between a trainer, a
collector and one reanalyze worker: a single lock makes per-record pi updates
atomic with respect to sampling.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParameterSet
from .planner import Planner
from .world_model import DiagGaussian, WorldModel


@dataclass
class TransitionRecord:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    pi: DiagGaussian
    pi_version: int = 0
    episode_id: int = 0
    step_index: int = 0


@dataclass
class ReanalyzeConfig:
    interval: int = 10          # k updates between ticks; 0 disables
    batch: int = 20             # b segments per tick
    replan_log_std_min: float = -2.0  # widened exploration bound during re-planning
    replan_log_std_max: float = 1.0

    def __post_init__(self):
        if self.interval < 0:
            raise ValueError("interval must be >= 0 (0 disables)")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


def remap_log_std(log_std, lo: float = -3.0, hi: float = 1.0,
                  new_lo: float = -2.0, new_hi: float = 1.0):
    """Affine remap of the policy log-std bounds used while re-planning.

    With the default bounds this is log_std * 0.75 + 0.25, widening the
    exploration floor from -3 to -2 while keeping the ceiling at 1.
    """
    scale = (new_hi - new_lo) / (hi - lo)
    shift = new_hi - hi * scale
    return log_std * scale + shift


def _log_std_transform(model_cfg, rcfg: ReanalyzeConfig) -> tuple[float, float]:
    scale = (rcfg.replan_log_std_max - rcfg.replan_log_std_min) / (
        model_cfg.log_std_max - model_cfg.log_std_min)
    shift = rcfg.replan_log_std_max - model_cfg.log_std_max * scale
    return scale, shift


def replan_batch_targets(model: WorldModel, planner: Planner, batch: "SegmentBatch",
                         rcfg: ReanalyzeConfig, seed_key, update_step: int):
    """Plan fresh expert targets for every state in a segment batch.

    Overlapping segments reference shared records, so states are deduplicated
    to unique (episode_id, row) records in canonical sorted order and planned
    once each, batched, with the policy's log-std affinely widened per the
    re-planning bounds. The plan seed derives from (seed_key, update_step)
    only; the targets are therefore a pure function of (parameters, seed_key,
    update_step, record identity).

    Returns time-major per-slot arrays (means [T,B,m], log_stds [T,B,m],
    ok [T,B]) plus the unique record list and the flat first-occurrence index
    of each unique record.
    """
    T, B = batch.obs.shape[:2]
    eids = np.array([e for e, _ in batch.starts], dtype=np.int64)
    offs = np.array([o for _, o in batch.starts], dtype=np.int64)
    keys = np.stack([np.tile(eids, T), np.tile(offs, T) + np.repeat(np.arange(T), B)], axis=1)
    uniq, first_idx, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)

    obs_flat = batch.obs.reshape(T * B, -1)
    z = model.encode(obs_flat[first_idx])
    transform = _log_std_transform(model.cfg, rcfg)
    results, ok_u = planner.plan_batch(
        model, z, seed=np.random.SeedSequence((seed_key, update_step, 0x5E)),
        log_std_transform=transform)
    means_u = np.stack([r.first_step.mean for r in results])
    stds_u = np.stack([r.first_step.log_std for r in results])

    m = means_u.shape[-1]
    inverse = inverse.reshape(-1)
    means = means_u[inverse].reshape(T, B, m)
    stds = stds_u[inverse].reshape(T, B, m)
    ok = ok_u[inverse].reshape(T, B)
    records = [(int(e), int(r)) for e, r in uniq]
    return means, stds, ok, records, first_idx


@dataclass
class SegmentBatch:
    """Time-major (H+1)-step segments: leading axis is the step within the segment."""

    obs: np.ndarray          # [T, B, n]
    act: np.ndarray          # [T, B, m]
    rew: np.ndarray          # [T, B]
    next_obs: np.ndarray     # [T, B, n]
    pi_mean: np.ndarray      # [T, B, m]
    pi_log_std: np.ndarray   # [T, B, m]
    pi_version: np.ndarray   # [T, B]
    starts: list = field(default_factory=list)  # (episode_id, offset) per column

    @property
    def horizon(self) -> int:
        return self.obs.shape[0] - 1

    @property
    def size(self) -> int:
        return self.obs.shape[1]


class _EpisodeBlock:
    __slots__ = ("episode_id", "obs", "act", "rew", "next_obs",
                 "pi_mean", "pi_log_std", "pi_version", "length")

    def __init__(self, episode_id, records):
        self.episode_id = episode_id
        self.length = len(records)
        self.obs = np.stack([r.s for r in records]).astype(np.float64)
        self.act = np.stack([r.a for r in records]).astype(np.float64)
        self.rew = np.array([r.r for r in records], dtype=np.float64)
        self.next_obs = np.stack([r.s_next for r in records]).astype(np.float64)
        self.pi_mean = np.stack([r.pi.mean for r in records]).astype(np.float64)
        self.pi_log_std = np.stack([r.pi.log_std for r in records]).astype(np.float64)
        self.pi_version = np.array([r.pi_version for r in records], dtype=np.int64)


class ReplayBuffer:
    """Episode-granular FIFO buffer with uniform segment sampling."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._episodes: list[_EpisodeBlock] = []
        self._by_id: dict[int, _EpisodeBlock] = {}
        self._size = 0
        self._lock = threading.Lock()
        self.reanalyzed_segments = 0
        self.reanalyze_failures = 0

    def __len__(self):
        return self._size

    @property
    def num_episodes(self):
        return len(self._episodes)

    def push_episode(self, records: list[TransitionRecord]):
        if not records:
            return
        eid = records[0].episode_id
        if any(r.episode_id != eid for r in records):
            raise ValueError("push_episode: records span multiple episode ids")
        if any(not np.isfinite(r.r) for r in records):
            raise ValueError("push_episode: non-finite reward")
        block = _EpisodeBlock(eid, records)
        with self._lock:
            self._episodes.append(block)
            self._by_id[eid] = block
            self._size += block.length
            while self._size > self.capacity and len(self._episodes) > 1:
                old = self._episodes.pop(0)
                del self._by_id[old.episode_id]
                self._size -= old.length

    # -- sampling -----------------------------------------------------------

    def _start_counts(self, horizon):
        return [max(0, ep.length - horizon) for ep in self._episodes]

    def sample_starts(self, count: int, horizon: int, rng: np.random.Generator):
        """Uniformly random valid (episode_id, offset) pairs; segments never
        cross episode boundaries."""
        with self._lock:
            counts = self._start_counts(horizon)
            total = sum(counts)
            if total == 0:
                raise ValueError(f"buffer holds no episode of length >= {horizon + 1}")
            cum = np.cumsum(counts)
            draws = rng.integers(0, total, size=count)
            out = []
            for d in draws:
                ep_i = int(np.searchsorted(cum, d, side="right"))
                offset = int(d - (cum[ep_i - 1] if ep_i > 0 else 0))
                out.append((self._episodes[ep_i].episode_id, offset))
        return out

    def gather(self, starts, horizon: int) -> SegmentBatch:
        B, T = len(starts), horizon + 1
        first = self._by_id[starts[0][0]]
        n, m = first.obs.shape[1], first.act.shape[1]
        batch = SegmentBatch(
            obs=np.empty((T, B, n)), act=np.empty((T, B, m)), rew=np.empty((T, B)),
            next_obs=np.empty((T, B, n)), pi_mean=np.empty((T, B, m)),
            pi_log_std=np.empty((T, B, m)), pi_version=np.empty((T, B), dtype=np.int64),
            starts=list(starts))
        with self._lock:
            for j, (eid, off) in enumerate(starts):
                ep = self._by_id[eid]
                sl = slice(off, off + T)
                batch.obs[:, j] = ep.obs[sl]
                batch.act[:, j] = ep.act[sl]
                batch.rew[:, j] = ep.rew[sl]
                batch.next_obs[:, j] = ep.next_obs[sl]
                batch.pi_mean[:, j] = ep.pi_mean[sl]
                batch.pi_log_std[:, j] = ep.pi_log_std[sl]
                batch.pi_version[:, j] = ep.pi_version[sl]
        return batch

    def sample_segments(self, count: int, horizon: int, rng: np.random.Generator) -> SegmentBatch:
        return self.gather(self.sample_starts(count, horizon, rng), horizon)

    def write_pi(self, records, means, log_stds, version: int, ok=None):
        """Write fresh expert distributions for the given (episode_id, row)
        records. ``means``/``log_stds`` are [N, m]; rows with ok == False are
        skipped, as are rows whose episode has been evicted meanwhile.
        Existing pi values are never partially overwritten."""
        skipped = 0
        with self._lock:
            for j, (eid, row) in enumerate(records):
                if ok is not None and not ok[j]:
                    skipped += 1
                    continue
                ep = self._by_id.get(eid)
                if ep is None:
                    skipped += 1
                    continue
                ep.pi_mean[row] = means[j]
                ep.pi_log_std[row] = log_stds[j]
                ep.pi_version[row] = version
        return skipped

    def freshness(self, update_step: int):
        """Quantiles of pi age (in updates) over all stored transitions."""
        with self._lock:
            ages = np.concatenate([update_step - ep.pi_version for ep in self._episodes])
        qs = np.quantile(ages, [0.0, 0.25, 0.5, 0.75, 1.0])
        return {"p0": float(qs[0]), "p25": float(qs[1]), "p50": float(qs[2]),
                "p75": float(qs[3]), "p100": float(qs[4])}

    # -- reanalysis ---------------------------------------------------------

    def replan_starts(self, starts, horizon: int, model: WorldModel, planner: Planner,
                      rcfg: ReanalyzeConfig, seed_key, update_step: int) -> int:
        """Re-plan every state of the given segments and write back the plans'
        first-step distributions. Returns the number of skipped rows.

        The per-state targets depend only on (parameters, seed_key, update_step,
        record identity), so overlapping segments receive consistent values and
        an identical call reproduces identical targets.
        """
        batch = self.gather(starts, horizon)
        means, stds, ok, records, first_idx = replan_batch_targets(
            model, planner, batch, rcfg, seed_key, update_step)
        skipped = self.write_pi(records, means.reshape(-1, means.shape[-1])[first_idx],
                                stds.reshape(-1, stds.shape[-1])[first_idx],
                                update_step, ok=ok.reshape(-1)[first_idx])
        self.reanalyzed_segments += len(starts)
        self.reanalyze_failures += skipped
        return skipped

    def reanalyze_tick(self, update_step: int, model: WorldModel, planner: Planner,
                       rcfg: ReanalyzeConfig, horizon: int, seed_key: int,
                       rng: np.random.Generator) -> dict:
        """One lazy-reanalyze pass: sample b segments and refresh their pi's."""
        starts = self.sample_starts(rcfg.batch, horizon, rng)
        skipped = self.replan_starts(starts, horizon, model, planner, rcfg,
                                     seed_key, update_step)
        return {"segments": len(starts), "skipped": skipped}

    # -- dump/restore --------------------------------------------------------

    def save(self, path):
        ps = ParameterSet()
        ps.add("capacity", np.array(float(self.capacity)))
        with self._lock:
            for i, ep in enumerate(self._episodes):
                pre = f"ep{i}."
                ps.add(pre + "id", np.array(float(ep.episode_id)))
                ps.add(pre + "obs", ep.obs)
                ps.add(pre + "act", ep.act)
                ps.add(pre + "rew", ep.rew)
                ps.add(pre + "next_obs", ep.next_obs)
                ps.add(pre + "pi_mean", ep.pi_mean)
                ps.add(pre + "pi_log_std", ep.pi_log_std)
                ps.add(pre + "pi_version", ep.pi_version.astype(np.float64))
        ps.save(path)

    @staticmethod
    def load(path) -> "ReplayBuffer":
        ps = ParameterSet.load(path)
        buf = ReplayBuffer(int(ps["capacity"].value))
        i = 0
        while f"ep{i}.id" in ps:
            pre = f"ep{i}."
            block = _EpisodeBlock.__new__(_EpisodeBlock)
            block.episode_id = int(ps[pre + "id"].value)
            block.obs = ps[pre + "obs"].value
            block.act = ps[pre + "act"].value
            block.rew = ps[pre + "rew"].value
            block.next_obs = ps[pre + "next_obs"].value
            block.pi_mean = ps[pre + "pi_mean"].value
            block.pi_log_std = ps[pre + "pi_log_std"].value
            block.pi_version = ps[pre + "pi_version"].value.astype(np.int64)
            block.length = block.obs.shape[0]
            buf._episodes.append(block)
            buf._by_id[block.episode_id] = block
            buf._size += block.length
            i += 1
        return buf
