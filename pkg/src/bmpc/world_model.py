"""Latent world model: encoder, dynamics, reward head, value ensemble, policy head.

All heads are small float64 MLPs over a tanh-bounded latent space. Reward and
value are discrete regressions over symmetric-log-spaced bins (two-hot
targets); the policy is a squashed diagonal Gaussian. Methods ending in ``_g``
build autodiff graphs; the plain methods are array-in/array-out and never
record gradients. Inputs are batched 2-D arrays ``[B, dim]`` throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParameterSet


@dataclass
class ModelConfig:
    obs_dim: int
    action_dim: int
    latent_dim: int = 64
    hidden: tuple = (128, 128)
    num_bins: int = 101
    v_min: float = -10.0  # bin support in symlog space
    v_max: float = 10.0
    log_std_min: float = -3.0
    log_std_max: float = 1.0
    num_value_heads: int = 2

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.num_bins < 2:
            raise ValueError("num_bins must be >= 2")
        if not self.v_min < self.v_max:
            raise ValueError("v_min must be < v_max")
        if not self.log_std_min < self.log_std_max:
            raise ValueError("log_std_min must be < log_std_max")

    def to_header(self) -> dict:
        return {
            "obs_dim": self.obs_dim,
            "action_dim": self.action_dim,
            "latent_dim": self.latent_dim,
            "hidden": ",".join(str(h) for h in self.hidden),
            "num_bins": self.num_bins,
            "v_min": self.v_min,
            "v_max": self.v_max,
            "log_std_min": self.log_std_min,
            "log_std_max": self.log_std_max,
            "num_value_heads": self.num_value_heads,
        }

    @staticmethod
    def from_header(h: dict) -> "ModelConfig":
        return ModelConfig(
            obs_dim=int(h["obs_dim"]),
            action_dim=int(h["action_dim"]),
            latent_dim=int(h["latent_dim"]),
            hidden=tuple(int(x) for x in str(h["hidden"]).split(",")),
            num_bins=int(h["num_bins"]),
            v_min=float(h["v_min"]),
            v_max=float(h["v_max"]),
            log_std_min=float(h["log_std_min"]),
            log_std_max=float(h["log_std_max"]),
            num_value_heads=int(h["num_value_heads"]),
        )


@dataclass
class DiagGaussian:
    """Diagonal Gaussian over actions; the common currency of policy, planner
    output and imitation targets. ``mean`` lies in [-1, 1] (squashed or
    clamped), ``log_std`` within the configured bounds."""

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_std = np.asarray(self.log_std, dtype=np.float64)
        if self.mean.shape != self.log_std.shape:
            raise ad.ShapeError(
                f"DiagGaussian: mean {self.mean.shape} vs log_std {self.log_std.shape}"
            )

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def sample(self, rng: np.random.Generator, clip: float = 1.0) -> np.ndarray:
        """Draw from N(mean, std^2) and clamp to the action box."""
        x = self.mean + self.std * rng.standard_normal(self.mean.shape)
        return np.clip(x, -clip, clip)

    def entropy(self) -> float:
        # closed-form differential entropy, summed over dims
        return float(self.log_std.sum() + 0.5 * self.log_std.size * np.log(2.0 * np.pi * np.e))


def symlog(x):
    return np.sign(x) * np.log1p(np.abs(x))


def symexp(y):
    return np.sign(y) * np.expm1(np.abs(y))


class TwoHot:
    """Two-hot discrete regression support over symlog-spaced bins.

    A scalar is clamped into the transformed support and its mass split
    between the two neighbouring bins; decoding takes the expectation in
    transformed space and maps back.
    """

    def __init__(self, num_bins: int, lo: float, hi: float):
        self.num_bins = num_bins
        self.lo = float(lo)
        self.hi = float(hi)
        self.bins = np.linspace(lo, hi, num_bins)
        self.step = (hi - lo) / (num_bins - 1)

    @property
    def centers(self) -> np.ndarray:
        """Bin centers in untransformed (value) space."""
        return symexp(self.bins)

    def encode(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        if np.isnan(v).any():
            raise ValueError("two-hot encode: NaN input")
        y = np.clip(symlog(v), self.lo, self.hi)
        pos = (y - self.lo) / self.step
        idx = np.clip(np.floor(pos).astype(np.int64), 0, self.num_bins - 2)
        w = pos - idx
        out = np.zeros(v.shape + (self.num_bins,))
        np.put_along_axis(out, idx[..., None], (1.0 - w)[..., None], axis=-1)
        # accumulate, not overwrite: w == 0 keeps the one-hot case exact
        np.put_along_axis(
            out, (idx + 1)[..., None],
            np.take_along_axis(out, (idx + 1)[..., None], axis=-1) + w[..., None], axis=-1)
        return out

    def decode_probs(self, probs: np.ndarray) -> np.ndarray:
        return symexp(probs @ self.bins)

    def decode_logits(self, logits: np.ndarray) -> np.ndarray:
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return self.decode_probs(e / e.sum(axis=-1, keepdims=True))


def _layer_sizes(in_dim: int, hidden: tuple, out_dim: int):
    dims = [in_dim, *hidden, out_dim]
    return list(zip(dims[:-1], dims[1:]))


class WorldModel:
    """The model family used for planning and learning.

    Owns one live :class:`ParameterSet`. Evaluation is pure given a parameter
    snapshot; training code mutates the set on a single thread and hands
    clones to concurrent readers (see :meth:`snapshot`).
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, params: ParameterSet | None = None):
        self.cfg = cfg
        self.twohot = TwoHot(cfg.num_bins, cfg.v_min, cfg.v_max)
        if params is not None:
            self.params = params
        else:
            self.params = ParameterSet()
            self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng):
        c = self.cfg
        self._init_mlp(rng, "enc", c.obs_dim, c.latent_dim)
        self._init_mlp(rng, "dyn", c.latent_dim + c.action_dim, c.latent_dim)
        self._init_mlp(rng, "rew", c.latent_dim + c.action_dim, c.num_bins, zero_last=True)
        for e in range(c.num_value_heads):
            self._init_mlp(rng, f"val{e}", c.latent_dim, c.num_bins, zero_last=True)
        self._init_mlp(rng, "pol", c.latent_dim, 2 * c.action_dim, last_scale=0.01)

    def _init_mlp(self, rng, prefix, in_dim, out_dim, zero_last=False, last_scale=1.0):
        sizes = _layer_sizes(in_dim, self.cfg.hidden, out_dim)
        for i, (a, b) in enumerate(sizes):
            last = i == len(sizes) - 1
            if last and zero_last:
                w = np.zeros((a, b))
            else:
                scale = (last_scale if last else 1.0) / np.sqrt(a)
                w = rng.normal(0.0, scale, size=(a, b))
            self.params.add(f"{prefix}.{i}.w", w)
            self.params.add(f"{prefix}.{i}.b", np.zeros(b))

    def _mlp_g(self, prefix: str, x: Node) -> Node:
        n_layers = len(self.cfg.hidden) + 1
        for i in range(n_layers):
            x = ad.add(ad.matmul(x, self.params[f"{prefix}.{i}.w"]), self.params[f"{prefix}.{i}.b"])
            if i < n_layers - 1:
                x = ad.silu(x)
        return x

    # -- graph mode -------------------------------------------------------

    def encode_g(self, s: Node) -> Node:
        if s.value.shape[-1] != self.cfg.obs_dim:
            raise ad.ShapeError(f"encode: obs dim {s.value.shape[-1]} != {self.cfg.obs_dim}")
        return ad.tanh(self._mlp_g("enc", s))

    def dynamics_g(self, z: Node, a: Node) -> Node:
        if np.abs(a.value).max(initial=0.0) > 1.0 + 1e-12:
            raise ValueError("dynamics: action outside [-1, 1]")
        return ad.tanh(self._mlp_g("dyn", ad.concat(z, a)))

    def reward_logits_g(self, z: Node, a: Node) -> Node:
        return self._mlp_g("rew", ad.concat(z, a))

    def value_logits_g(self, z: Node, head: int) -> Node:
        return self._mlp_g(f"val{head}", z)

    def policy_g(self, z: Node) -> tuple[Node, Node]:
        """Squashed Gaussian head: tanh mean, log-std mapped into its bounds."""
        c = self.cfg
        raw = self._mlp_g("pol", z)
        mean = ad.tanh(ad.slice_cols(raw, 0, c.action_dim))
        span = c.log_std_max - c.log_std_min
        t = ad.tanh(ad.slice_cols(raw, c.action_dim, 2 * c.action_dim))
        log_std = ad.add(ad.mul(ad.add(t, 1.0), 0.5 * span), c.log_std_min)
        return mean, log_std

    # -- array mode (no gradients) ----------------------------------------

    def encode(self, s: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.encode_g(Node(s)).value

    def dynamics(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.dynamics_g(Node(z), Node(a)).value

    def reward(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Decoded scalar reward per row."""
        with ad.no_grad():
            return self.twohot.decode_logits(self.reward_logits_g(Node(z), Node(a)).value)

    def value_logits(self, z: np.ndarray, head: int) -> np.ndarray:
        with ad.no_grad():
            return self.value_logits_g(Node(z), head).value

    def value_scalar(self, z: np.ndarray, params: ParameterSet | None = None) -> np.ndarray:
        """Ensemble value estimate: minimum over heads of the decoded expectation.

        ``params`` overrides the live set (used for the EMA target copy).
        """
        src = self if params is None else WorldModel(self.cfg, params=params)
        with ad.no_grad():
            vals = [src.twohot.decode_logits(src.value_logits_g(Node(z), e).value)
                    for e in range(self.cfg.num_value_heads)]
        return np.min(vals, axis=0)

    def policy(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        with ad.no_grad():
            mean, log_std = self.policy_g(Node(z))
            return mean.value, log_std.value

    def policy_dist(self, z_row: np.ndarray) -> DiagGaussian:
        """Policy at a single latent, as a distribution object."""
        mean, log_std = self.policy(z_row[None, :])
        return DiagGaussian(mean[0], log_std[0])

    # -- lifecycle ---------------------------------------------------------

    def value_param_names(self):
        return [n for n in self.params.names() if n.startswith("val")]

    def clone_value_params(self) -> ParameterSet:
        out = ParameterSet()
        for name in self.value_param_names():
            out.add(name, self.params[name].value.copy())
        return out

    def snapshot(self) -> "WorldModel":
        return WorldModel(self.cfg, params=self.params.clone())


# ---------------------------------------------------------------------------
# checkpoint I/O: config header plus online and target parameter blobs

_CKPT_MAGIC = b"BMPCCKP1"


def save_checkpoint(path, model: WorldModel, target_value: ParameterSet,
                    extra_header: dict | None = None):
    header = dict(model.cfg.to_header())
    if extra_header:
        header.update(extra_header)
    head_bytes = "".join(f"{k}={v}\n" for k, v in header.items()).encode("utf-8")
    online = model.params.to_bytes()
    target = target_value.to_bytes()
    import struct

    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(head_bytes)))
        f.write(head_bytes)
        f.write(struct.pack("<Q", len(online)))
        f.write(online)
        f.write(struct.pack("<Q", len(target)))
        f.write(target)


def load_checkpoint(path) -> tuple[WorldModel, ParameterSet, dict]:
    import struct

    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = 8
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = {}
    for line in data[off : off + hlen].decode("utf-8").splitlines():
        k, _, v = line.partition("=")
        header[k] = v
    off += hlen
    (olen,) = struct.unpack_from("<Q", data, off)
    off += 8
    online = ParameterSet.from_bytes(data[off : off + olen])
    off += olen
    (tlen,) = struct.unpack_from("<Q", data, off)
    off += 8
    target = ParameterSet.from_bytes(data[off : off + tlen])
    cfg = ModelConfig.from_header(header)
    return WorldModel(cfg, params=online), target, header
