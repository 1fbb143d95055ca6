"""Token-pruning layer: shared actor and centralized critic MLPs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

PRUNE, PRESERVE = 0, 1


class MLP:
    """GELU MLP with a single shared parameter set."""

    def __init__(self, sizes, prefix: str, rng, dtype=np.float32, out_std: float | None = None):
        self.sizes = tuple(int(s) for s in sizes)
        self.prefix = prefix
        self.params = {}
        n = len(self.sizes) - 1
        for j in range(n):
            fan_in, fan_out = self.sizes[j], self.sizes[j + 1]
            std = np.sqrt(2.0 / fan_in) if j < n - 1 else (out_std if out_std is not None else 1.0 / np.sqrt(fan_in))
            w = rng.normal(0.0, std, size=(fan_in, fan_out)).astype(dtype)
            self.params[f"{prefix}.fc{j + 1}.weight"] = Tensor(w, requires_grad=True)
            self.params[f"{prefix}.fc{j + 1}.bias"] = Tensor(np.zeros(fan_out, dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        n = len(self.sizes) - 1
        for j in range(n):
            x = nx.linear(x, self.params[f"{self.prefix}.fc{j + 1}.weight"], self.params[f"{self.prefix}.fc{j + 1}.bias"])
            if j < n - 1:
                x = nx.gelu(x)
        return x

    def layers(self) -> list:
        n = len(self.sizes) - 1
        return [
            (self.params[f"{self.prefix}.fc{j + 1}.weight"].data, self.params[f"{self.prefix}.fc{j + 1}.bias"].data)
            for j in range(n)
        ]

    def parameters(self) -> list:
        return list(self.params.values())

    def state_dict(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict):
        for k, t in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)


class ActorNet(MLP):
    def __init__(self, embed_dim: int, rng=None, dtype=np.float32):
        rng = np.random.default_rng(1) if rng is None else rng
        D = embed_dim
        super().__init__((D, 4 * D, 256, 64, 2), "actor", rng, dtype, out_std=0.01)


class CriticNet(MLP):
    def __init__(self, embed_dim: int, rng=None, dtype=np.float32):
        rng = np.random.default_rng(2) if rng is None else rng
        D = embed_dim
        super().__init__((2 * D, 4 * D, 256, 64, 1), "critic", rng, dtype)


@dataclass(frozen=True)
class PolicyMode:
    kind: str = "mappo"
    keep_prob: float = 0.5

    KINDS = ("mappo", "single_agent", "random")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown policy mode {self.kind!r}")
        if not 0.0 <= self.keep_prob <= 1.0:
            raise ValueError("keep_prob must lie in [0, 1]")

    @classmethod
    def parse(cls, text: str) -> "PolicyMode":
        """``mappo``, ``single_agent`` or ``random:<keep_prob>``."""
        if isinstance(text, PolicyMode):
            return text
        kind, _, arg = str(text).partition(":")
        if kind == "random":
            return cls("random", float(arg) if arg else 0.5)
        return cls(kind)

    def __str__(self):
        return f"random:{self.keep_prob:g}" if self.kind == "random" else self.kind

    @property
    def learnable(self) -> bool:
        return self.kind != "random"


def actor_logits(actor: ActorNet, token_features) -> Tensor:
    return actor(nx.as_tensor(token_features))


def critic_values(critic: CriticNet, token_features, class_feature) -> Tensor:
    """One value per agent from ``token ∥ class token``.

    ``class_feature`` is either a single ``[D]`` vector or one row per agent.
    """
    tf = nx.as_tensor(token_features)
    cf = np.asarray(class_feature.data if isinstance(class_feature, Tensor) else class_feature, dtype=tf.dtype)
    if cf.ndim == 1:
        cf = np.broadcast_to(cf, tf.shape)
    v = critic(nx.concat([tf, Tensor(cf)], axis=1))
    return nx.reshape(v, (tf.shape[0],))


def _log_softmax2(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sample_actions(logits, train: bool, mode: PolicyMode, rng) -> tuple[np.ndarray, np.ndarray]:
    """Actions (0 prune, 1 preserve) and their log-probabilities.

    ``logits`` is ``[n, 2]``; for random mode only its length is used.
    """
    logits = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    n = logits.shape[0]
    if mode.kind == "random":
        p = mode.keep_prob
        actions = (rng.random(n) < p).astype(np.int64)
        with np.errstate(divide="ignore"):
            lp = np.where(actions == PRESERVE, np.log(p), np.log1p(-p))
        return actions, lp
    logp = _log_softmax2(logits.astype(np.float64))
    if train or mode.kind == "single_agent":
        p_keep = np.exp(logp[:, PRESERVE])
        actions = (rng.random(n) < p_keep).astype(np.int64)
    else:
        actions = np.argmax(logits, axis=1).astype(np.int64)
    return actions, logp[np.arange(n), actions]


def apply_prune(keep_mask: np.ndarray, actions: np.ndarray, active_indices: np.ndarray) -> tuple[np.ndarray, int]:
    """Clear entries whose action is prune; returns the new mask and kept non-class count."""
    keep_mask = np.asarray(keep_mask, dtype=bool)
    active_indices = np.asarray(active_indices, dtype=np.int64)
    actions = np.asarray(actions)
    if actions.shape != active_indices.shape:
        raise AssertionError("actions and active indices disagree in length")
    if np.any(active_indices == 0):
        raise AssertionError("class token cannot act")
    if not np.all(keep_mask[active_indices]):
        raise AssertionError("already-pruned token cannot act")
    out = keep_mask.copy()
    out[active_indices[actions == PRUNE]] = False
    return out, int(out[1:].sum())


@dataclass
class Decision:
    """Flat record of one pruning layer's decisions for a whole batch."""

    batch: np.ndarray
    pos: np.ndarray
    states: np.ndarray
    globals_: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray | None
    values: np.ndarray | None


class Policy:
    """Actor + critic + mode; the object handed to the ViT forward pass."""

    def __init__(self, actor: ActorNet | None, critic: CriticNet | None, mode: PolicyMode | str = "mappo"):
        self.actor = actor
        self.critic = critic
        self.mode = PolicyMode.parse(mode)

    @classmethod
    def create(cls, embed_dim: int, mode="mappo", rng=None, dtype=np.float32) -> "Policy":
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(ActorNet(embed_dim, rng, dtype), CriticNet(embed_dim, rng, dtype), mode)

    def with_mode(self, mode) -> "Policy":
        return Policy(self.actor, self.critic, mode)

    def parameters(self) -> list:
        out = []
        for net in (self.actor, self.critic):
            if net is not None:
                out.extend(net.parameters())
        return out

    def state_dict(self) -> dict:
        out = {}
        for net in (self.actor, self.critic):
            if net is not None:
                out.update(net.state_dict())
        return out

    def load_state_dict(self, state: dict):
        for net in (self.actor, self.critic):
            if net is not None:
                net.load_state_dict(state)

    def agent_states(self, token_feats: np.ndarray, class_feats: np.ndarray) -> np.ndarray:
        """Actor input per agent: its own token, or the class token in single-agent mode."""
        if self.mode.kind == "single_agent":
            return class_feats
        return token_feats

    def act(self, features: np.ndarray, keep: np.ndarray, train: bool, rng) -> Decision:
        """Decide for every kept non-class token of every image in the batch."""
        b, pos = np.nonzero(keep[:, 1:])
        pos = pos + 1
        tok = features[b, pos]
        glob = features[b, 0]
        states = self.agent_states(tok, glob)
        values = None
        if self.mode.kind == "random":
            actions, logp = sample_actions(np.zeros((len(b), 2)), train, self.mode, rng)
            if train:
                values = np.zeros(len(b))
            return Decision(b, pos, states, glob, actions, logp, values)
        with nx.no_grad():
            if len(b) == 0:
                logits = np.zeros((0, 2))
            elif self.mode.kind == "single_agent":
                # one policy evaluation per image, shared by all its tokens
                uniq, inv = np.unique(b, return_inverse=True)
                logits = actor_logits(self.actor, features[uniq, 0]).data[inv]
            else:
                logits = actor_logits(self.actor, tok).data
            actions, logp = sample_actions(logits, train, self.mode, rng)
            if train and len(b):
                values = critic_values(self.critic, states, glob).data.astype(np.float64)
            elif train:
                values = np.zeros(0)
        return Decision(b, pos, states, glob, actions, logp, values)
