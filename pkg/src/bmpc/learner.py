"""Gradient-based updates: model consistency/reward losses, model-based TD
value regression, and the imitation policy loss with moving-percentile KL
normalization.

All losses consume (H+1)-step segment batches. The latent training path
encodes the first observation and rolls stored actions through the dynamics;
the policy loss re-uses that path with gradients blocked into the model, so
imitation updates touch policy parameters only.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParameterSet, backward, optimizer_step
from .planner import Planner
from .replay import ReanalyzeConfig, SegmentBatch, replan_batch_targets
from .world_model import DiagGaussian, WorldModel

_LOG_2PI_E = float(np.log(2.0 * np.pi * np.e))


@dataclass
class LearnerConfig:
    batch_size: int = 256
    horizon: int = 3            # segment/model horizon H
    temporal_weight: float = 0.5  # lambda
    td_horizon: int = 1         # N
    entropy_coef: float = 1e-4  # beta
    kl_scale_ema: float = 0.99
    target_ema: float = 0.01
    lr: float = 3e-4
    discount: float = 0.99
    consistency_coef: float = 20.0
    reward_coef: float = 0.1
    value_coef: float = 0.1

    def __post_init__(self):
        if self.td_horizon < 1:
            raise ValueError("td_horizon must be >= 1")
        if not 0.0 < self.temporal_weight <= 1.0:
            raise ValueError("temporal_weight must be in (0, 1]")
        if self.entropy_coef < 0.0:
            raise ValueError("entropy_coef must be >= 0")


@dataclass(frozen=True)
class KLScale:
    """Moving-percentile spread of batch KLs; the loss divides by max(1, S)."""

    value: float = 0.0
    initialized: bool = False

    @property
    def divisor(self) -> float:
        return max(1.0, self.value)


def update_kl_scale(scale: KLScale, batch_kls, ema: float = 0.99) -> KLScale:
    """Fold one batch of KL values into the running spread.

    spread = 95th - 5th percentile (linear interpolation); the first call
    initializes S to the observed spread rather than decaying from zero.
    """
    kls = np.asarray(batch_kls, dtype=np.float64).ravel()
    if kls.size == 0:
        raise ValueError("update_kl_scale: empty batch")
    spread = float(np.percentile(kls, 95) - np.percentile(kls, 5))
    if not scale.initialized:
        return KLScale(spread, True)
    return KLScale(ema * scale.value + (1.0 - ema) * spread, True)


# ---------------------------------------------------------------------------
# diagonal-Gaussian algebra


def kl_diag_gaussian(p: DiagGaussian, q: DiagGaussian) -> float:
    """Closed-form KL(p || q), summed over dimensions."""
    if p.mean.shape != q.mean.shape:
        raise ad.ShapeError(f"kl: dim mismatch {p.mean.shape} vs {q.mean.shape}")
    dls = p.log_std - q.log_std
    ratio = np.exp(2.0 * dls)
    maha = (p.mean - q.mean) ** 2 * np.exp(-2.0 * q.log_std)
    return float(np.sum(q.log_std - p.log_std + 0.5 * (ratio + maha) - 0.5))


def _kl_nodes(mu_p, log_std_p, mean_q: Node, log_std_q: Node) -> Node:
    """KL(stored expert || policy head) per row, as a graph node [B]."""
    dls = ad.sub(Node(log_std_p), log_std_q)
    ratio = ad.exp(ad.mul(dls, 2.0))
    diff = ad.sub(Node(mu_p), mean_q)
    maha = ad.mul(ad.square(diff), ad.exp(ad.mul(log_std_q, -2.0)))
    elem = ad.add(ad.neg(dls), ad.sub(ad.mul(ad.add(ratio, maha), 0.5), 0.5))
    return ad.sum_(elem, axis=1)


def _entropy_nodes(log_std_q: Node) -> Node:
    m = log_std_q.value.shape[1]
    return ad.add(ad.sum_(log_std_q, axis=1), 0.5 * m * _LOG_2PI_E)


# ---------------------------------------------------------------------------
# latent training path


def rollout_latents_g(model: WorldModel, batch: SegmentBatch) -> list[Node]:
    """Graph-mode z_0..z_H: encode s_0, then roll stored actions through the
    dynamics. Shared by the model and value losses."""
    zs = [model.encode_g(Node(batch.obs[0]))]
    for t in range(batch.horizon):
        zs.append(model.dynamics_g(zs[-1], Node(batch.act[t])))
    return zs


def _time_weights(T: int, batch_size: int, lam: float) -> np.ndarray:
    """Per-row weights lambda^t / B for T stacked time-major blocks of B rows."""
    return np.repeat(lam ** np.arange(T), batch_size) / batch_size


def model_loss(model: WorldModel, batch: SegmentBatch, cfg: LearnerConfig,
               zs: list[Node] | None = None, enc_targets: np.ndarray | None = None):
    """Latent consistency toward stop-gradient encodings plus two-hot reward
    regression, temporally weighted. Head calls are stacked across time.

    ``enc_targets`` overrides the stop-gradient encodings (finite-difference
    oracles freeze them to probe the live path only)."""
    if zs is None:
        zs = rollout_latents_g(model, batch)
    H, B = batch.horizon, batch.size
    if enc_targets is None:
        enc_targets = model.encode(batch.obs[1:].reshape(H * B, -1))
        enc_targets = enc_targets.reshape(H, B, -1)

    consistency = None
    lam = 1.0
    for t in range(H):
        diff = ad.sub(zs[t + 1], Node(enc_targets[t]))
        term = ad.mul(ad.mean_(ad.square(diff)), lam)
        consistency = term if consistency is None else ad.add(consistency, term)
        lam *= cfg.temporal_weight

    logits = model.reward_logits_g(ad.concat_rows(zs[:H]), Node(batch.act[:H].reshape(H * B, -1)))
    targets = model.twohot.encode(batch.rew[:H].reshape(H * B))
    reward_ce = ad.cross_entropy(logits, Node(targets),
                                 row_weights=_time_weights(H, B, cfg.temporal_weight))

    loss = ad.add(ad.mul(consistency, cfg.consistency_coef), ad.mul(reward_ce, cfg.reward_coef))
    aux = {"consistency": float(consistency.value), "reward_ce": float(reward_ce.value)}
    return loss, aux


def td_targets(model: WorldModel, target_value: ParameterSet, obs_steps: np.ndarray,
               cfg: LearnerConfig) -> np.ndarray:
    """N-step TD-targets from fresh encodings, rolled under the current policy
    mean; bootstrapped with the EMA value copy. No gradients flow here."""
    T, B = obs_steps.shape[:2]
    z = model.encode(obs_steps.reshape(T * B, -1))
    total = np.zeros(T * B)
    gamma = cfg.discount
    for k in range(cfg.td_horizon):
        a, _ = model.policy(z)
        total += gamma**k * model.reward(z, a)
        z = model.dynamics(z, a)
    total += gamma**cfg.td_horizon * model.value_scalar(z, params=target_value)
    return total.reshape(T, B)


def value_loss(model: WorldModel, target_value: ParameterSet, batch: SegmentBatch,
               cfg: LearnerConfig, zs: list[Node] | None = None,
               targets: np.ndarray | None = None):
    """Two-hot cross-entropy of every ensemble head against the TD-target,
    temporally weighted; backward reaches the value heads and the trunk.

    ``targets`` overrides the TD-targets (finite-difference oracles freeze
    them; no gradient ever flows through them either way)."""
    if zs is None:
        zs = rollout_latents_g(model, batch)
    T, B = batch.horizon + 1, batch.size
    if targets is None:
        targets = td_targets(model, target_value, batch.obs, cfg)
    enc = Node(model.twohot.encode(targets.reshape(T * B)))
    z_stack = ad.concat_rows(zs)
    weights = _time_weights(T, B, cfg.temporal_weight)

    E = model.cfg.num_value_heads
    loss = None
    for e in range(E):
        ce = ad.cross_entropy(model.value_logits_g(z_stack, e), enc, row_weights=weights / E)
        loss = ce if loss is None else ad.add(loss, ce)
    aux = {"td_target_mean": float(targets.mean())}
    return loss, aux


def _policy_loss_from_pis(model: WorldModel, batch: SegmentBatch,
                          pi_mean: np.ndarray, pi_log_std: np.ndarray,
                          scale: KLScale, cfg: LearnerConfig, update_scale: bool,
                          zs: list[Node] | None = None):
    """Shared assembly for the stored-target and freshly-planned policy losses."""
    if zs is None:
        with ad.no_grad():
            zs = rollout_latents_g(model, batch)
    T, B = batch.horizon + 1, batch.size
    z_flat = Node(np.concatenate([z.value for z in zs]))  # grads blocked into the model
    mean_q, log_std_q = model.policy_g(z_flat)
    kl = _kl_nodes(pi_mean.reshape(T * B, -1), pi_log_std.reshape(T * B, -1),
                   mean_q, log_std_q)
    ent = _entropy_nodes(log_std_q)

    kl_values = kl.value
    if update_scale:
        scale = update_kl_scale(scale, kl_values, ema=cfg.kl_scale_ema)

    weights = Node(_time_weights(T, B, cfg.temporal_weight))
    kl_term = ad.mul(ad.sum_(ad.mul(kl, weights)), 1.0 / scale.divisor)
    ent_term = ad.mul(ad.sum_(ad.mul(ent, weights)), cfg.entropy_coef)
    loss = ad.sub(kl_term, ent_term)

    aux = {
        "policy_kl": float(kl_values.mean()),
        "policy_entropy": float(ent.value.mean()),
        "kl_values": kl_values.copy(),
    }
    return loss, scale, aux


def policy_loss(model: WorldModel, batch: SegmentBatch, scale: KLScale,
                cfg: LearnerConfig, update_scale: bool = False,
                zs: list[Node] | None = None):
    """Imitation loss against the stored expert distributions (the lazy
    surrogate objective). Returns (loss, possibly-updated scale, aux)."""
    return _policy_loss_from_pis(model, batch, batch.pi_mean, batch.pi_log_std,
                                 scale, cfg, update_scale, zs=zs)


def exact_policy_loss(model: WorldModel, batch: SegmentBatch, planner: Planner,
                      scale: KLScale, cfg: LearnerConfig, rcfg: ReanalyzeConfig,
                      seed_key: int, update_step: int, update_scale: bool = False):
    """Imitation loss with expert distributions re-planned fresh for every row.

    Mirrors the reanalysis path exactly (same record-keyed seed derivation,
    same widened log-std bounds), so it is bit-equal to :func:`policy_loss`
    whenever every row was reanalyzed with the same key immediately
    beforehand. Intended for tests and diagnostics; re-planning every row is
    far too slow for training.
    """
    mean, log_std, ok, _, _ = replan_batch_targets(
        model, planner, batch, rcfg, seed_key, update_step)
    if not ok.all():
        raise RuntimeError("exact_policy_loss: plan failure")
    return _policy_loss_from_pis(model, batch, mean, log_std, scale, cfg, update_scale)


def update_targets(online: ParameterSet, target: ParameterSet, rate: float):
    """EMA move of the target copy toward the online parameters."""
    for name, node in target.items():
        src = online[name]
        if src.value.shape != node.value.shape:
            raise ad.ShapeError(f"target {name!r}: {node.value.shape} vs {src.value.shape}")
        node.value *= 1.0 - rate
        node.value += rate * src.value


def update(model: WorldModel, target_value: ParameterSet, batch: SegmentBatch,
           scale: KLScale, cfg: LearnerConfig, train_policy: bool = True):
    """One full gradient step: model + value losses in one backward pass, the
    policy loss in its own, then a single optimizer step and the target EMA.

    ``train_policy=False`` keeps the imitation loss out of the gradients (used
    by the frozen-policy control runs); its metrics are still reported.
    """
    model.params.zero_grad()
    zs = rollout_latents_g(model, batch)
    mloss, maux = model_loss(model, batch, cfg, zs=zs)
    vloss, vaux = value_loss(model, target_value, batch, cfg, zs=zs)
    ploss, scale, paux = policy_loss(model, batch, scale, cfg, update_scale=True, zs=zs)

    backward(ad.add(mloss, ad.mul(vloss, cfg.value_coef)))
    if train_policy:
        backward(ploss)
    grad_norm = optimizer_step(model.params, cfg.lr)
    model.params.zero_grad()
    update_targets(model.params, target_value, cfg.target_ema)

    metrics = {
        "model_loss": float(mloss.value),
        "value_loss": float(vloss.value),
        "policy_kl": paux["policy_kl"],
        "policy_entropy": paux["policy_entropy"],
        "S": scale.value,
        "grad_norm": grad_norm,
    }
    metrics.update(maux)
    metrics.update(vaux)
    return scale, metrics
