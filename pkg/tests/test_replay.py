import numpy as np
import pytest
from scipy import stats

from bmpc.planner import Planner, PlannerConfig
from bmpc.replay import (ReanalyzeConfig, ReplayBuffer, TransitionRecord,
                         remap_log_std)
from bmpc.world_model import DiagGaussian

from helpers import tiny_model


def _episode(eid, length, n=3, m=2, rng=None, pi_version=0):
    rng = rng or np.random.default_rng(eid)
    recs = []
    for t in range(length):
        a = rng.uniform(-1, 1, m)
        recs.append(TransitionRecord(
            s=rng.normal(size=n), a=a, r=float(rng.uniform()),
            s_next=rng.normal(size=n),
            pi=DiagGaussian(a * 0.5, np.full(m, -1.0)),
            pi_version=pi_version, episode_id=eid, step_index=t))
    return recs


def test_segments_stay_within_one_episode():
    buf = ReplayBuffer(10_000)
    for e in range(5):
        buf.push_episode(_episode(e, 20))
    rng = np.random.default_rng(0)
    for _ in range(100):
        starts = buf.sample_starts(100, 3, rng)
        for eid, off in starts:
            assert 0 <= off <= 20 - 4


def test_fifo_eviction_by_episode():
    buf = ReplayBuffer(capacity=40)  # fits two 20-step episodes
    for e in range(3):
        buf.push_episode(_episode(e, 20))
    assert buf.num_episodes == 2
    assert len(buf) == 40
    rng = np.random.default_rng(1)
    starts = buf.sample_starts(200, 1, rng)
    assert {eid for eid, _ in starts} == {1, 2}  # episode 0 evicted


def test_capacity_bounded_under_many_pushes():
    buf = ReplayBuffer(capacity=500)
    for e in range(1000):  # 1e5 transitions pushed in total
        buf.push_episode(_episode(e, 100))
    assert len(buf) <= 500 + 100  # at most one episode of slack while evicting
    assert buf.num_episodes <= 6


def test_zero_capacity_rejected():
    with pytest.raises(ValueError):
        ReplayBuffer(0)


def test_h0_segments_are_single_transitions():
    buf = ReplayBuffer(1000)
    buf.push_episode(_episode(0, 10))
    batch = buf.sample_segments(4, 0, np.random.default_rng(0))
    assert batch.obs.shape == (1, 4, 3)
    assert batch.horizon == 0


def test_sampling_requires_long_enough_episode():
    buf = ReplayBuffer(1000)
    buf.push_episode(_episode(0, 3))
    with pytest.raises(ValueError, match="length"):
        buf.sample_starts(1, 3, np.random.default_rng(0))


def test_start_index_uniformity_chi_square():
    buf = ReplayBuffer(10_000)
    buf.push_episode(_episode(0, 14))  # 11 valid starts each for H=3
    buf.push_episode(_episode(1, 14))
    rng = np.random.default_rng(2)
    counts = np.zeros(22)
    for _ in range(100):
        for eid, off in buf.sample_starts(100, 3, rng):
            counts[eid * 11 + off] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_sampled_rows_carry_stored_pi():
    buf = ReplayBuffer(1000)
    buf.push_episode(_episode(0, 10))
    batch = buf.sample_segments(5, 2, np.random.default_rng(3))
    assert batch.pi_mean.shape == (3, 5, 2)
    assert np.all(batch.pi_log_std == -1.0)


def test_remap_log_std_endpoints_exact():
    assert remap_log_std(-3.0) == -2.0
    assert remap_log_std(1.0) == 1.0
    assert remap_log_std(0.0) == 0.25


def test_remap_log_std_general_bounds():
    # identity when the bounds do not change
    assert remap_log_std(0.37, new_lo=-3.0) == pytest.approx(0.37)


# ---------------------------------------------------------------------------
# reanalysis


def _filled_buffer_and_model(seed=0, n_eps=4, ep_len=12):
    model = tiny_model(seed=seed)
    buf = ReplayBuffer(10_000)
    rng = np.random.default_rng(seed)
    for e in range(n_eps):
        buf.push_episode(_episode(e, ep_len, n=3, m=2, rng=rng))
    planner = Planner(PlannerConfig(horizon=3, iterations=2, samples=16,
                                    prior_samples=4, elites=6),
                      (model.cfg.log_std_min, model.cfg.log_std_max))
    return model, buf, planner


def test_disabled_reanalyze_never_touches_pi():
    model, buf, planner = _filled_buffer_and_model()
    rcfg = ReanalyzeConfig(interval=0, batch=4)
    before = buf.sample_segments(8, 3, np.random.default_rng(0)).pi_mean.copy()
    # interval 0 means the harness never calls the tick; nothing else mutates pi
    after = buf.sample_segments(8, 3, np.random.default_rng(0)).pi_mean
    assert np.array_equal(before, after)


def test_reanalyze_stamps_version_and_preserves_transitions():
    model, buf, planner = _filled_buffer_and_model()
    rcfg = ReanalyzeConfig(interval=10, batch=4)
    rng = np.random.default_rng(1)
    starts = buf.sample_starts(4, 3, rng)
    before = buf.gather(starts, 3)
    buf.replan_starts(starts, 3, model, planner, rcfg, seed_key=7, update_step=40)
    after = buf.gather(starts, 3)
    assert np.array_equal(before.obs, after.obs)
    assert np.array_equal(before.act, after.act)
    assert np.array_equal(before.rew, after.rew)
    assert np.array_equal(before.next_obs, after.next_obs)
    assert np.all(after.pi_version == 40)
    assert not np.array_equal(before.pi_mean, after.pi_mean)
    assert np.all(after.pi_log_std >= model.cfg.log_std_min)
    assert buf.reanalyzed_segments == 4


def test_reanalyze_is_deterministic_given_key():
    out = []
    for _ in range(2):
        model, buf, planner = _filled_buffer_and_model(seed=3)
        starts = buf.sample_starts(3, 3, np.random.default_rng(3))
        buf.replan_starts(starts, 3, model, planner, ReanalyzeConfig(), 11, 50)
        out.append(buf.gather(starts, 3).pi_mean.copy())
    assert np.array_equal(out[0], out[1])


def test_write_pi_skips_evicted_episode():
    buf = ReplayBuffer(capacity=24)
    buf.push_episode(_episode(0, 12))
    records = [(0, 2)]
    buf.push_episode(_episode(1, 12))
    buf.push_episode(_episode(2, 12))  # evicts episode 0
    skipped = buf.write_pi(records, np.zeros((1, 2)), np.zeros((1, 2)), version=5)
    assert skipped == 1


def test_freshness_quantiles():
    buf = ReplayBuffer(1000)
    buf.push_episode(_episode(0, 10, pi_version=0))
    buf.push_episode(_episode(1, 10, pi_version=90))
    fresh = buf.freshness(update_step=100)
    assert fresh["p0"] == 10.0 and fresh["p100"] == 100.0


def test_dump_restore_roundtrip(tmp_path):
    model, buf, planner = _filled_buffer_and_model(seed=4)
    path = tmp_path / "buffer.bin"
    buf.save(path)
    loaded = ReplayBuffer.load(path)
    assert len(loaded) == len(buf)
    a = buf.gather([(1, 2)], 3)
    b = loaded.gather([(1, 2)], 3)
    for name in ("obs", "act", "rew", "next_obs", "pi_mean", "pi_log_std", "pi_version"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_push_rejects_mixed_episode_ids_and_nonfinite_reward():
    buf = ReplayBuffer(100)
    recs = _episode(0, 3)
    recs[1].episode_id = 1
    with pytest.raises(ValueError, match="episode ids"):
        buf.push_episode(recs)
    recs = _episode(0, 3)
    recs[0].r = float("inf")
    with pytest.raises(ValueError, match="reward"):
        buf.push_episode(recs)
