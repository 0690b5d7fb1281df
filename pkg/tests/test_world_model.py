import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bmpc import autodiff as ad
from bmpc.autodiff import Node, ParameterSet, backward, optimizer_step
from bmpc.envs import make_env
from bmpc.world_model import (DiagGaussian, ModelConfig, TwoHot, WorldModel,
                              load_checkpoint, save_checkpoint, symexp, symlog)

from helpers import check_grads, tiny_model


def test_encode_is_deterministic():
    m = tiny_model()
    s = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(m.encode(s), m.encode(s))


def test_encode_finite_over_rollout_sweep():
    m = tiny_model(obs_dim=3, action_dim=1)
    env = make_env("pendulum_swingup")
    rng = np.random.default_rng(5)
    states = []
    obs = env.reset(0)
    for i in range(10_000):
        obs, _, done = env.step(rng.uniform(-1, 1, 1))
        states.append(obs)
        if done:
            obs = env.reset(i)
    z = m.encode(np.asarray(states))
    assert np.isfinite(z).all()
    assert np.abs(z).max() <= 1.0  # latents are tanh-bounded


def test_encode_dim_mismatch():
    m = tiny_model()
    with pytest.raises(ad.ShapeError):
        m.encode(np.zeros((2, 5)))


def test_dynamics_rejects_out_of_bounds_actions():
    m = tiny_model()
    z = m.encode(np.zeros((1, 3)))
    with pytest.raises(ValueError, match="action"):
        m.dynamics(z, np.array([[0.0, 1.5]]))


def test_latent_rollout_deterministic():
    m = tiny_model()
    rng = np.random.default_rng(1)
    z0 = m.encode(rng.normal(size=(1, 3)))
    acts = np.clip(rng.normal(size=(3, 1, 2)), -1, 1)

    def roll():
        z = z0
        for a in acts:
            z = m.dynamics(z, a)
        return z

    assert np.array_equal(roll(), roll())


def test_head_gradients_match_finite_differences():
    m = tiny_model(seed=3)
    rng = np.random.default_rng(3)
    s = rng.normal(size=(2, 3))
    a = np.clip(rng.normal(size=(2, 2)), -1, 1)
    proj = rng.normal(size=(2, m.cfg.latent_dim))

    def enc_loss():
        return ad.mean_(ad.mul(m.encode_g(Node(s)), Node(proj)))

    def dyn_loss():
        return ad.mean_(ad.square(m.dynamics_g(m.encode_g(Node(s)), Node(a))))

    def rew_loss():
        z = m.encode_g(Node(s))
        t = m.twohot.encode(np.array([0.3, -0.2]))
        return ad.cross_entropy(m.reward_logits_g(z, Node(a)), Node(t))

    def val_loss():
        z = m.encode_g(Node(s))
        t = m.twohot.encode(np.array([1.0, 2.0]))
        ce0 = ad.cross_entropy(m.value_logits_g(z, 0), Node(t))
        ce1 = ad.cross_entropy(m.value_logits_g(z, 1), Node(t))
        return ad.add(ce0, ce1)

    def pol_loss():
        mean, log_std = m.policy_g(m.encode_g(Node(s)))
        return ad.add(ad.mean_(ad.square(mean)), ad.mean_(ad.square(log_std)))

    for f in (enc_loss, dyn_loss, rew_loss, val_loss, pol_loss):
        check_grads(f, m.params, rng, coords_per_param=2)


def test_zeroed_reward_head_decodes_to_midpoint():
    cfg = ModelConfig(obs_dim=3, action_dim=2, latent_dim=6, hidden=(8, 8), num_bins=9)
    m = WorldModel(cfg, seed=0)  # reward/value output layers are zero-initialized
    z = m.encode(np.zeros((1, 3)))
    r = m.reward(z, np.zeros((1, 2)))
    assert abs(r[0] - symexp(0.0)) < 1e-12  # midpoint bin decodes to 0


def test_reward_head_fits_constant_reward():
    m = tiny_model(seed=4)
    rng = np.random.default_rng(4)
    z = np.tanh(rng.normal(size=(64, m.cfg.latent_dim)))
    a = np.clip(rng.normal(size=(64, 2)), -1, 1)
    target = Node(m.twohot.encode(np.ones(64)))
    for _ in range(800):
        m.params.zero_grad()
        backward(ad.cross_entropy(m.reward_logits_g(Node(z), Node(a)), target))
        optimizer_step(m.params, lr=1e-2)
    m.params.zero_grad()
    pred = m.reward(z, a)
    assert np.abs(pred - 1.0).max() < 0.05


def test_value_one_hot_logits_decode_to_center():
    th = TwoHot(num_bins=11, lo=-10.0, hi=10.0)
    for c in (2, 5, 9):
        logits = np.zeros(11)
        logits[c] = 1e4  # softmax saturates to an exact one-hot in f64
        got = th.decode_logits(logits[None, :])[0]
        assert got == pytest.approx(th.centers[c], abs=1e-12)


def test_value_ensemble_takes_minimum():
    m = tiny_model(seed=6)
    z = np.tanh(np.random.default_rng(6).normal(size=(3, m.cfg.latent_dim)))
    per_head = [m.twohot.decode_logits(m.value_logits(z, e)) for e in range(2)]
    assert np.array_equal(m.value_scalar(z), np.minimum(*per_head))


def test_value_ensemble_min_is_monotone_in_heads():
    rng = np.random.default_rng(7)
    cfg2 = ModelConfig(obs_dim=3, action_dim=2, latent_dim=6, hidden=(8, 8),
                       num_bins=9, num_value_heads=2)
    cfg3 = ModelConfig(obs_dim=3, action_dim=2, latent_dim=6, hidden=(8, 8),
                       num_bins=9, num_value_heads=3)
    m2, m3 = WorldModel(cfg2, seed=8), WorldModel(cfg3, seed=9)
    for name, p in m2.params.items():
        m3.params[name].value[...] = p.value  # heads 0/1 identical, head 2 extra
    for name in m3.params.names():
        if name.startswith("val2"):
            m3.params[name].value[...] = 0.05 * rng.normal(size=m3.params[name].value.shape)
    z = np.tanh(rng.normal(size=(5, 6)))
    assert np.all(m3.value_scalar(z) <= m2.value_scalar(z) + 1e-12)


def test_policy_log_std_limits_and_midpoint():
    m = tiny_model()
    # saturate: tanh(-inf) -> -1 maps to log_std_min, tanh(0) -> midpoint
    assert np.tanh(-1e9) == -1.0
    lo, hi = m.cfg.log_std_min, m.cfg.log_std_max
    assert lo + (np.tanh(-1e9) + 1) / 2 * (hi - lo) == -3.0
    assert lo + (np.tanh(0.0) + 1) / 2 * (hi - lo) == -1.0
    # zeroed head gives exactly the midpoint
    for name, p in m.params.items():
        if name.startswith("pol.2"):
            p.value[...] = 0.0
    _, log_std = m.policy(np.tanh(np.random.default_rng(0).normal(size=(4, 6))))
    assert np.all(log_std == -1.0)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_policy_bounds_hold_for_any_params_and_input(seed):
    rng = np.random.default_rng(seed)
    m = tiny_model(seed=seed % 1000)
    for _, p in m.params.items():
        p.value[...] = rng.normal(scale=3.0, size=p.value.shape)
    z = rng.normal(scale=5.0, size=(8, m.cfg.latent_dim))
    mean, log_std = m.policy(z)
    # tanh saturates to exactly +-1 in f64 for |raw| > ~19, so closed bounds
    assert np.all(mean >= -1.0) and np.all(mean <= 1.0)
    assert np.all(log_std >= m.cfg.log_std_min) and np.all(log_std <= m.cfg.log_std_max)


def test_policy_samples_stay_in_action_box():
    m = tiny_model(seed=11)
    z = np.tanh(np.random.default_rng(11).normal(size=(1, m.cfg.latent_dim)))
    dist = m.policy_dist(z[0])
    rng = np.random.default_rng(12)
    samples = np.stack([dist.sample(rng) for _ in range(100_000)])
    assert samples.min() >= -1.0 and samples.max() <= 1.0


# ---------------------------------------------------------------------------
# two-hot


def test_two_hot_bin_center_is_one_hot():
    th = TwoHot(num_bins=11, lo=-10.0, hi=10.0)
    for c in (0, 4, 10):
        p = th.encode(symexp(th.bins[c]))
        expected = np.zeros(11)
        expected[c] = 1.0
        assert np.allclose(p, expected, atol=1e-12)


def test_two_hot_roundtrip_in_transformed_space():
    th = TwoHot(num_bins=101, lo=-10.0, hi=10.0)
    rng = np.random.default_rng(13)
    v = symexp(rng.uniform(-10, 10, size=1000))
    decoded = th.decode_probs(th.encode(v))
    assert np.abs(symlog(decoded) - symlog(v)).max() < 1e-9


def test_two_hot_clamps_below_range():
    th = TwoHot(num_bins=11, lo=-2.0, hi=2.0)
    p = th.encode(np.array([-1e9]))
    assert p[0, 0] == 1.0 and p[0, 1:].sum() == 0.0


def test_two_hot_rejects_nan():
    th = TwoHot(num_bins=11, lo=-2.0, hi=2.0)
    with pytest.raises(ValueError, match="NaN"):
        th.encode(np.array([np.nan]))


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path):
    m = tiny_model(seed=14)
    target = m.clone_value_params()
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, m, target, extra_header={"env": "pendulum_swingup", "step": 7})
    m2, target2, header = load_checkpoint(path)
    assert header["env"] == "pendulum_swingup"
    assert m2.cfg == m.cfg
    for name in m.params.names():
        assert np.array_equal(m.params[name].value, m2.params[name].value)
    for name in target.names():
        assert np.array_equal(target[name].value, target2[name].value)


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(obs_dim=3, action_dim=1, num_bins=1)
    with pytest.raises(ValueError):
        ModelConfig(obs_dim=3, action_dim=1, v_min=5.0, v_max=-5.0)
    with pytest.raises(ValueError):
        ModelConfig(obs_dim=3, action_dim=1, log_std_min=2.0, log_std_max=1.0)
