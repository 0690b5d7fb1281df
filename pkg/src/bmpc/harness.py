"""End-to-end training loop: collect with planner acting, update, lazily
reanalyze, evaluate both the network policy and the MPC policy, checkpoint.

Two execution modes: ``single`` runs everything on one thread in strict order
(bit-deterministic given the seed); ``concurrent`` moves reanalysis onto a
worker thread fed with parameter snapshots, which reorders buffer writes but
is statistically equivalent. All metrics append to ``metrics.jsonl``, one JSON
object per line; the stream carries no timestamps or paths so identical seeds
produce identical bytes.
"""

from __future__ import annotations

import dataclasses
import json
import queue
import threading
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import learner as ln
from .envs import make_env, oracle_return
from .learner import KLScale, LearnerConfig
from .planner import Planner, PlannerConfig, act, delta_q
from .replay import ReanalyzeConfig, ReplayBuffer, TransitionRecord
from .world_model import DiagGaussian, ModelConfig, WorldModel, load_checkpoint, save_checkpoint

# seed-derivation domains (entropy tuples (seed, domain, *counters))
_D_MODEL, _D_RESET, _D_PLAN, _D_RESAMPLE, _D_BATCH, _D_ACT, _D_EVAL = range(7)


@dataclass
class RunConfig:
    env: str = "pendulum_swingup"
    total_env_steps: int = 30_000
    seed_steps: int = 1_000
    updates_per_step: float = 1.0
    eval_interval: int = 5_000
    eval_episodes: int = 10
    buffer_capacity: int = 200_000
    mode: str = "single"            # single | concurrent
    freeze_policy: bool = False     # control runs: no imitation updates
    early_stop_fraction: float = 0.0  # stop once both policies reach this oracle fraction
    seed: int = 0
    out_dir: str = "runs/out"
    latent_dim: int = 64
    hidden: tuple = (128, 128)
    num_bins: int = 101
    v_min: float = -10.0
    v_max: float = 10.0
    log_std_min: float = -3.0
    log_std_max: float = 1.0
    num_value_heads: int = 2
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    reanalyze: ReanalyzeConfig = field(default_factory=ReanalyzeConfig)

    def model_config(self, obs_dim: int, action_dim: int) -> ModelConfig:
        return ModelConfig(
            obs_dim=obs_dim, action_dim=action_dim, latent_dim=self.latent_dim,
            hidden=self.hidden, num_bins=self.num_bins, v_min=self.v_min,
            v_max=self.v_max, log_std_min=self.log_std_min,
            log_std_max=self.log_std_max, num_value_heads=self.num_value_heads)


_SUBCONFIGS = {"planner": PlannerConfig, "learner": LearnerConfig, "reanalyze": ReanalyzeConfig}


def _coerce(raw: str, typ):
    if typ is bool or typ == "bool":
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if typ is int or typ == "int":
        return int(raw)
    if typ is float or typ == "float":
        return float(raw)
    if typ is tuple or typ == "tuple":
        return tuple(int(x) for x in raw.replace("(", "").replace(")", "").split(",") if x.strip())
    return raw


def config_from_kv(kv: dict) -> RunConfig:
    """Build a RunConfig from flat key=value pairs; sub-config fields use a
    ``planner_``/``learner_``/``reanalyze_`` prefix."""
    cfg = RunConfig()
    own = {f.name: f.type for f in fields(RunConfig)}
    for key, raw in kv.items():
        prefix, _, rest = key.partition("_")
        if key in own and key not in _SUBCONFIGS:
            setattr(cfg, key, _coerce(raw, own[key]))
            continue
        if prefix in _SUBCONFIGS and rest:
            sub = getattr(cfg, prefix)
            sub_types = {f.name: f.type for f in fields(sub)}
            if rest in sub_types:
                setattr(sub, rest, _coerce(raw, sub_types[rest]))
                continue
        raise KeyError(f"unknown config key {key!r}")
    cfg.planner.__post_init__()
    cfg.learner.__post_init__()
    cfg.reanalyze.__post_init__()
    return cfg


def load_config_file(path) -> dict:
    """Flat ``key = value`` text; '#' starts a comment."""
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        if not _:
            raise ValueError(f"bad config line: {line!r}")
        out[key.strip()] = value.strip()
    return out


def config_summary(cfg: RunConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d.pop("out_dir", None)  # keep the stream path-free and seed-comparable
    d["hidden"] = list(cfg.hidden)
    return d


class MetricsWriter:
    """Append-only JSONL event stream, flushed per event."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(self.path, "w")

    def emit(self, kind: str, step: int, **payload):
        event = {"kind": kind, "step": int(step)}
        event.update(payload)
        self._f.write(json.dumps(event, sort_keys=True, default=_json_default))
        self._f.write("\n")
        self._f.flush()

    def close(self):
        self._f.close()


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON-serializable: {type(x)}")


@dataclass
class EvalReport:
    step: int
    mpc_returns: list
    network_returns: list
    delta_q: list

    @property
    def mpc_mean(self):
        return float(np.mean(self.mpc_returns)) if self.mpc_returns else float("nan")

    @property
    def network_mean(self):
        return float(np.mean(self.network_returns)) if self.network_returns else float("nan")

    def summary(self) -> dict:
        out = {}
        if self.mpc_returns:
            out["mpc_mean"] = self.mpc_mean
            out["mpc_std"] = float(np.std(self.mpc_returns))
            out["mpc_returns"] = list(self.mpc_returns)
        if self.network_returns:
            out["network_mean"] = self.network_mean
            out["network_std"] = float(np.std(self.network_returns))
            out["network_returns"] = list(self.network_returns)
        if self.mpc_returns and self.network_returns:
            out["gap"] = self.mpc_mean - self.network_mean
        if self.delta_q:
            dq = np.asarray(self.delta_q)
            out["delta_q_mean"] = float(dq.mean())
            out["delta_q_std"] = float(dq.std())
            out["delta_q_p10"] = float(np.percentile(dq, 10))
            out["delta_q_p50"] = float(np.percentile(dq, 50))
            out["delta_q_p90"] = float(np.percentile(dq, 90))
            out["delta_q"] = [float(x) for x in dq]
        return out


def _run_episode_mpc(model, env, planner, reset_seed, plan_seed, mode, rng=None,
                     delta_q_out=None):
    obs = env.reset(reset_seed)
    warm = None
    total, done, k = 0.0, False, 0
    while not done:
        z = model.encode(obs[None, :])
        if warm is not None:
            warm = planner.shift(warm, z[0], model)
        result = planner.plan(model, z, seed=(*plan_seed, k), warm_start=warm)
        a = act(result, mode, rng)
        obs, r, done = env.step(a)
        total += r
        warm = result.dist
        if delta_q_out is not None:
            delta_q_out.append(delta_q(result))
        k += 1
    return total


def _run_episode_network(model, env, reset_seed):
    obs = env.reset(reset_seed)
    total, done = 0.0, False
    while not done:
        mean, _ = model.policy(model.encode(obs[None, :]))
        obs, r, done = env.step(mean[0])
        total += r
    return total


def evaluate(model: WorldModel, env_name: str, episodes: int, policy: str,
             planner_cfg: PlannerConfig, seed: int = 0, step: int = 0) -> EvalReport:
    """Deterministic evaluation of the requested policies.

    ``policy`` is ``mpc``, ``network`` or ``both``. Network mode never touches
    a planner; MPC mode records the planner's per-step value improvement.
    """
    env = make_env(env_name)
    if env.spec.obs_dim != model.cfg.obs_dim or env.spec.action_dim != model.cfg.action_dim:
        raise ValueError(
            f"checkpoint dims (n={model.cfg.obs_dim}, m={model.cfg.action_dim}) do not match "
            f"env {env_name!r} (n={env.spec.obs_dim}, m={env.spec.action_dim})")
    report = EvalReport(step=step, mpc_returns=[], network_returns=[], delta_q=[])
    if policy in ("mpc", "both"):
        planner = Planner(planner_cfg, (model.cfg.log_std_min, model.cfg.log_std_max))
        for e in range(episodes):
            report.mpc_returns.append(_run_episode_mpc(
                model, env, planner, reset_seed=(seed, _D_EVAL, e),
                plan_seed=(seed, _D_EVAL, e), mode="deterministic",
                delta_q_out=report.delta_q))
    if policy in ("network", "both"):
        for e in range(episodes):
            report.network_returns.append(_run_episode_network(
                model, env, reset_seed=(seed, _D_EVAL, e)))
    return report


class _ReanalyzeWorker:
    """Consumes (update_step, snapshot) jobs and refreshes buffer targets."""

    def __init__(self, buffer, model_cfg, planner_cfg, rcfg, horizon, seed, log_std_bounds):
        self.buffer = buffer
        self.model_cfg = model_cfg
        self.rcfg = rcfg
        self.horizon = horizon
        self.seed = seed
        self.planner = Planner(planner_cfg, log_std_bounds)
        self.queue: queue.Queue = queue.Queue(maxsize=2)
        self.thread = threading.Thread(target=self._loop, daemon=True)
        self.error = None
        self.thread.start()

    def _loop(self):
        while True:
            job = self.queue.get()
            if job is None:
                return
            step, params = job
            try:
                model = WorldModel(self.model_cfg, params=params)
                rng = np.random.default_rng((self.seed, _D_RESAMPLE, step))
                self.buffer.reanalyze_tick(step, model, self.planner, self.rcfg,
                                           self.horizon, self.seed, rng)
            except Exception as exc:  # surfaced on the trainer thread
                self.error = exc
                return

    def submit(self, step, params):
        if self.error is not None:
            raise self.error
        self.queue.put((step, params))

    def stop(self):
        self.queue.put(None)
        self.thread.join()
        if self.error is not None:
            raise self.error


def train(cfg: RunConfig):
    """Run the full training loop; returns (checkpoint path, summary dict)."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = MetricsWriter(out / "metrics.jsonl")
    metrics.emit("config", 0, config=config_summary(cfg))

    env = make_env(cfg.env)
    mcfg = cfg.model_config(env.spec.obs_dim, env.spec.action_dim)
    model = WorldModel(mcfg, seed=np.random.SeedSequence((cfg.seed, _D_MODEL)))
    target_value = model.clone_value_params()
    planner = Planner(cfg.planner, (mcfg.log_std_min, mcfg.log_std_max))
    buffer = ReplayBuffer(cfg.buffer_capacity)
    scale = KLScale()
    act_rng = np.random.default_rng((cfg.seed, _D_ACT))
    lcfg = cfg.learner
    rcfg = cfg.reanalyze

    worker = None
    if cfg.mode == "concurrent" and rcfg.interval > 0:
        worker = _ReanalyzeWorker(buffer, mcfg, cfg.planner, rcfg, lcfg.horizon,
                                  cfg.seed, (mcfg.log_std_min, mcfg.log_std_max))
    elif cfg.mode not in ("single", "concurrent"):
        raise ValueError(f"unknown mode {cfg.mode!r}")

    env_steps = 0
    update_step = 0
    episode_id = 0
    last_eval = -cfg.eval_interval
    final_report = None
    stopped_early = False
    ckpt_path = out / "checkpoint.bin"

    def save(step):
        save_checkpoint(ckpt_path, model, target_value,
                        extra_header={"env": cfg.env, "step": step})

    def run_eval(step):
        report = evaluate(model, cfg.env, cfg.eval_episodes, "both", cfg.planner,
                          seed=cfg.seed, step=step)
        metrics.emit("eval", step, **report.summary())
        metrics.emit("buffer_freshness", step, update=update_step,
                     **buffer.freshness(update_step))
        return report

    try:
        while env_steps < cfg.total_env_steps:
            # -- collect one episode ------------------------------------
            warmup = env_steps < cfg.seed_steps
            obs = env.reset((cfg.seed, _D_RESET, episode_id))
            records, dqs = [], []
            warm = None
            done = False
            ep_return = 0.0
            t_idx = 0
            while not done:
                if warmup:
                    a = act_rng.uniform(-1.0, 1.0, env.spec.action_dim)
                    pi = DiagGaussian(a.copy(), np.full(env.spec.action_dim, mcfg.log_std_max))
                else:
                    z = model.encode(obs[None, :])
                    if warm is not None:
                        warm = planner.shift(warm, z[0], model)
                    result = planner.plan(model, z, seed=(cfg.seed, _D_PLAN, episode_id, t_idx),
                                          warm_start=warm)
                    a = act(result, "stochastic", act_rng)
                    warm = result.dist
                    pi = result.first_step
                    dqs.append(delta_q(result))
                next_obs, r, done = env.step(a)
                records.append(TransitionRecord(
                    s=obs, a=np.asarray(a, dtype=np.float64), r=r, s_next=next_obs,
                    pi=pi, pi_version=update_step, episode_id=episode_id, step_index=t_idx))
                ep_return += r
                obs = next_obs
                t_idx += 1
            ep_env_steps = t_idx * env.spec.action_repeat
            env_steps += ep_env_steps
            buffer.push_episode(records)
            metrics.emit("episode", env_steps, episode=episode_id, ret=ep_return,
                         warmup=warmup, delta_q_mean=float(np.mean(dqs)) if dqs else None,
                         delta_q=dqs if dqs else None)
            episode_id += 1

            # -- update phase --------------------------------------------
            if not warmup or env_steps >= cfg.seed_steps:
                n_updates = int(round(ep_env_steps * cfg.updates_per_step))
                for _ in range(n_updates):
                    if len(buffer) < (lcfg.horizon + 1) * 2:
                        break
                    rng = np.random.default_rng((cfg.seed, _D_BATCH, update_step))
                    batch = buffer.sample_segments(lcfg.batch_size, lcfg.horizon, rng)
                    scale, m = ln.update(model, target_value, batch, scale, lcfg,
                                         train_policy=not cfg.freeze_policy)
                    update_step += 1
                    bad = not all(np.isfinite(v) for v in
                                  (m["model_loss"], m["value_loss"], m["policy_kl"]))
                    metrics.emit("update", env_steps, update=update_step, **m)
                    if bad:
                        dump = out / "diagnostic_dump.json"
                        dump.write_text(json.dumps({"update": update_step, "metrics": m}))
                        raise RuntimeError(f"non-finite loss at update {update_step}; "
                                           f"dump at {dump}")
                    if rcfg.interval > 0 and update_step % rcfg.interval == 0:
                        if worker is not None:
                            worker.submit(update_step, model.params.clone())
                        else:
                            rng_re = np.random.default_rng((cfg.seed, _D_RESAMPLE, update_step))
                            stats = buffer.reanalyze_tick(
                                update_step, model, planner, rcfg, lcfg.horizon,
                                cfg.seed, rng_re)
                            metrics.emit("reanalyze", env_steps, update=update_step, **stats)

            # -- evaluation / checkpoint ---------------------------------
            if env_steps - last_eval >= cfg.eval_interval:
                last_eval = env_steps
                final_report = run_eval(env_steps)
                save(env_steps)
                if cfg.early_stop_fraction > 0:
                    target = cfg.early_stop_fraction * oracle_return(cfg.env)
                    if (final_report.mpc_mean >= target
                            and final_report.network_mean >= target):
                        stopped_early = True
                        break
    finally:
        if worker is not None:
            worker.stop()

    if env_steps > 0 and (final_report is None or final_report.step != env_steps):
        final_report = run_eval(env_steps)
    save(env_steps)
    summary = {
        "env_steps": env_steps,
        "updates": update_step,
        "episodes": episode_id,
        "stopped_early": stopped_early,
        "reanalyzed_segments": buffer.reanalyzed_segments,
        "reanalyze_failures": buffer.reanalyze_failures,
        "planner_calls": planner.calls,
    }
    if final_report is not None:
        summary["final_mpc_return"] = final_report.mpc_mean
        summary["final_network_return"] = final_report.network_mean
    metrics.emit("final", env_steps, **{k: v for k, v in summary.items()})
    metrics.close()
    return ckpt_path, summary
