"""Sampling-based planner: MPPI over latent rollouts with a policy prior.

Each iteration scores Gaussian action-sequence samples plus a handful of
sequences sampled autoregressively from the network policy, then moves the
sequence distribution toward a softmax-weighted average of the elites. The
previous mean and the best sequence seen so far are always re-injected as
candidates, so the best elite score never degrades within one call.

Planning is a pure function of (latent, parameter snapshot, seed); batched
variants vectorize many independent plans (used heavily by reanalysis).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .world_model import DiagGaussian, WorldModel


class PlanError(RuntimeError):
    pass


@dataclass
class PlannerConfig:
    horizon: int = 3
    iterations: int = 6
    samples: int = 512
    prior_samples: int = 24
    elites: int = 64
    temperature: float = 0.5
    sigma_floor: float = 0.05
    sigma_init: float = 1.0
    discount: float = 0.99

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.elites > self.samples + self.prior_samples:
            raise ValueError("elites must be <= samples + prior_samples")


@dataclass
class PlanDistribution:
    """Time-indexed diagonal Gaussian over an action sequence, [H, m] each."""

    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class PlanResult:
    dist: PlanDistribution
    first_step: DiagGaussian
    actions: np.ndarray        # selected sequence [H, m] (the elite-weighted mean)
    value: float               # estimated value of the selected sequence
    prior_values: np.ndarray   # per-sample values of the prior-policy sequences
    iter_best: np.ndarray      # best candidate score after each iteration


class Planner:
    """Stateless planning ops plus call accounting for diagnostics."""

    def __init__(self, cfg: PlannerConfig, log_std_bounds: tuple[float, float] = (-3.0, 1.0)):
        self.cfg = cfg
        self.log_std_bounds = log_std_bounds
        self.calls = 0

    # -- value estimation ---------------------------------------------------

    def estimate_value(self, model: WorldModel, z0: np.ndarray, actions: np.ndarray) -> float:
        """Discounted reward sum over a latent rollout plus discounted terminal value.

        ``actions`` is [H, m]; H == 0 degenerates to the terminal value alone.
        """
        z = np.atleast_2d(np.asarray(z0, dtype=np.float64))
        actions = np.asarray(actions, dtype=np.float64)
        gamma = self.cfg.discount
        total = 0.0
        for h in range(actions.shape[0]):
            a = actions[h][None, :]
            r = model.reward(z, a)
            z = model.dynamics(z, a)
            if not np.isfinite(z).all() or not np.isfinite(r).all():
                raise PlanError(f"non-finite rollout at step {h}")
            total += gamma**h * float(r[0])
        v = model.value_scalar(z)
        if not np.isfinite(v).all():
            raise PlanError("non-finite terminal value")
        return total + gamma ** actions.shape[0] * float(v[0])

    def _score_batch(self, model, z0_rep, actions):
        """Score candidate sequences; NaNs propagate into the returned scores.

        ``z0_rep`` is [N, L], ``actions`` is [N, H, m]; returns [N].
        """
        gamma = self.cfg.discount
        z = z0_rep
        total = np.zeros(z.shape[0])
        with np.errstate(invalid="ignore", over="ignore"):
            for h in range(actions.shape[1]):
                a = actions[:, h, :]
                total += gamma**h * model.reward(z, a)
                z = model.dynamics(z, a)
            total += gamma ** actions.shape[1] * model.value_scalar(z)
        return total

    def _sample_prior(self, model, z0, n, rng, log_std_transform):
        """Autoregressive action samples from the policy through the dynamics.

        ``z0`` is [B, L]; returns actions [B, n, H, m] and their start latents.
        """
        B = z0.shape[0]
        H = self.cfg.horizon
        m = model.cfg.action_dim
        z = np.repeat(z0, n, axis=0)
        acts = np.empty((B * n, H, m))
        for h in range(H):
            mean, log_std = model.policy(z)
            if log_std_transform is not None:
                a_c, b_c = log_std_transform
                log_std = a_c * log_std + b_c
            eps = rng.standard_normal(mean.shape)
            a = np.clip(mean + np.exp(log_std) * eps, -1.0, 1.0)
            acts[:, h, :] = a
            z = model.dynamics(z, a)
        return acts.reshape(B, n, H, m)

    def plan_batch(self, model: WorldModel, z0: np.ndarray, seed,
                   warm_start: list | None = None,
                   log_std_transform: tuple[float, float] | None = None):
        """Run independent plans for a batch of initial latents.

        Returns (results, ok_mask); a plan fails only if every candidate score
        is non-finite for that latent. Bit-deterministic given (z0, parameter
        snapshot, seed).
        """
        cfg = self.cfg
        z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
        B, H, m = z0.shape[0], cfg.horizon, model.cfg.action_dim
        rng = np.random.default_rng(seed)
        self.calls += B

        if warm_start is not None:
            mu = np.stack([w.mu for w in warm_start]).astype(np.float64)
            sigma = np.stack([w.sigma for w in warm_start]).astype(np.float64)
        else:
            mu = np.zeros((B, H, m))
            sigma = np.full((B, H, m), cfg.sigma_init)

        best_actions = mu.copy()
        best_scores = np.full(B, -np.inf)
        iter_best = np.empty((B, cfg.iterations))
        prior_values = np.zeros((B, cfg.prior_samples))

        for it in range(cfg.iterations):
            prior = self._sample_prior(model, z0, cfg.prior_samples, rng, log_std_transform)
            eps = rng.standard_normal((B, cfg.samples, H, m))
            gauss = np.clip(mu[:, None] + sigma[:, None] * eps, -1.0, 1.0)
            cand = np.concatenate(
                [gauss, prior, mu[:, None], best_actions[:, None]], axis=1)
            C = cand.shape[1]
            z_rep = np.repeat(z0, C, axis=0)
            scores = self._score_batch(model, z_rep, cand.reshape(B * C, H, m)).reshape(B, C)
            scores = np.where(np.isfinite(scores), scores, -np.inf)
            prior_values = scores[:, cfg.samples : cfg.samples + cfg.prior_samples]

            order = np.argpartition(-scores, cfg.elites - 1, axis=1)[:, : cfg.elites]
            elite_scores = np.take_along_axis(scores, order, axis=1)
            elite_actions = np.take_along_axis(cand, order[:, :, None, None], axis=1)

            smax = elite_scores.max(axis=1, keepdims=True)
            smin = elite_scores.min(axis=1, keepdims=True)
            # scale-normalized softmax weights: insensitive to reward units
            with np.errstate(invalid="ignore"):
                norm = (elite_scores - smax) / (smax - smin + 1e-9)
                w = np.exp(norm / cfg.temperature)
                w /= w.sum(axis=1, keepdims=True)
            w4 = w[:, :, None, None]
            mu = np.clip((w4 * elite_actions).sum(axis=1), -1.0, 1.0)
            var = (w4 * (elite_actions - mu[:, None]) ** 2).sum(axis=1)
            sigma = np.maximum(np.sqrt(var), cfg.sigma_floor)

            it_best_idx = np.argmax(scores, axis=1)
            it_best = scores[np.arange(B), it_best_idx]
            improved = it_best > best_scores
            best_scores = np.where(improved, it_best, best_scores)
            best_actions[improved] = cand[np.arange(B), it_best_idx][improved]
            iter_best[:, it] = best_scores

        ok = np.isfinite(best_scores) if cfg.iterations > 0 else np.ones(B, dtype=bool)
        with np.errstate(invalid="ignore", over="ignore"):
            sel_values = self._score_batch(model, z0.copy(), mu)

        lo, hi = self.log_std_bounds
        results = []
        for i in range(B):
            first = DiagGaussian(mu[i, 0], np.clip(np.log(sigma[i, 0]), lo, hi))
            results.append(PlanResult(
                dist=PlanDistribution(mu[i], sigma[i]),
                first_step=first,
                actions=mu[i],
                value=float(sel_values[i]),
                prior_values=prior_values[i].copy(),
                iter_best=iter_best[i].copy(),
            ))
        return results, ok

    def plan(self, model: WorldModel, z0: np.ndarray, seed,
             warm_start: PlanDistribution | None = None,
             log_std_transform: tuple[float, float] | None = None) -> PlanResult:
        """Plan from a single latent; raises if every candidate was non-finite."""
        cfg = self.cfg
        if cfg.iterations == 0:
            if warm_start is None:
                raise PlanError("iterations == 0 requires a warm start")
            lo, hi = self.log_std_bounds
            first = DiagGaussian(warm_start.mu[0], np.clip(np.log(warm_start.sigma[0]), lo, hi))
            value = self.estimate_value(model, z0, warm_start.mu)
            return PlanResult(dist=warm_start, first_step=first, actions=warm_start.mu,
                              value=value, prior_values=np.zeros(0),
                              iter_best=np.zeros(0))
        warm = [warm_start] if warm_start is not None else None
        results, ok = self.plan_batch(model, np.atleast_2d(z0), seed, warm_start=warm,
                                      log_std_transform=log_std_transform)
        if not ok[0] or not np.isfinite(results[0].value):
            raise PlanError("all candidate scores were NaN")
        return results[0]

    def shift(self, prev: PlanDistribution, z0_next: np.ndarray, model: WorldModel) -> PlanDistribution:
        """Warm start for the next step: shift one step, re-seed the tail row
        from the policy prior's statistics at the rolled-out latent."""
        H = self.cfg.horizon
        mu = np.empty_like(prev.mu)
        sigma = np.empty_like(prev.sigma)
        mu[: H - 1] = prev.mu[1:]
        sigma[: H - 1] = prev.sigma[1:]
        z = np.atleast_2d(z0_next)
        for h in range(H - 1):
            z = model.dynamics(z, mu[h][None, :])
        mean, log_std = model.policy(z)
        mu[H - 1] = mean[0]
        sigma[H - 1] = np.maximum(np.exp(log_std[0]), self.cfg.sigma_floor)
        return PlanDistribution(np.clip(mu, -1.0, 1.0), sigma)

def act(result: PlanResult, mode: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """First action of the optimized distribution: sampled or its mean."""
    if mode == "deterministic":
        return result.dist.mu[0].copy()
    if mode == "stochastic":
        if rng is None:
            raise ValueError("stochastic act needs an rng")
        a = result.dist.mu[0] + result.dist.sigma[0] * rng.standard_normal(result.dist.mu[0].shape)
        return np.clip(a, -1.0, 1.0)
    raise ValueError(f"unknown act mode {mode!r}")


def delta_q(result: PlanResult) -> float:
    """Value gain of the selected sequence over the mean prior-policy sequence."""
    if result.prior_values.size == 0:
        raise ValueError("plan carries no prior-policy sample values")
    return result.value - float(result.prior_values.mean())
