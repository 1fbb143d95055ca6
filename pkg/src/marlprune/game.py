"""Per-image Markov game records: rewards, episode termination, GAE."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .pruning import PRESERVE, PRUNE

R2_SCOPES = ("all_agents", "preserved_only")


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 1.0
    beta: float = 1.0
    r2_scope: str = "all_agents"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("alpha, beta must be non-negative with a positive sum")
        if self.r2_scope not in R2_SCOPES:
            raise ValueError(f"r2_scope must be one of {R2_SCOPES}")


@dataclass
class AgentStep:
    layer_index: int
    token_index: int
    state_feature: np.ndarray
    global_feature: np.ndarray
    action: int
    log_prob: float
    value: float
    reward: float
    done: bool
    advantage: float
    return_to_go: float


@dataclass
class LayerRecord:
    """All agents of one image at one pruning layer (ascending token index)."""

    layer: int
    tokens: np.ndarray
    states: np.ndarray
    global_feature: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray | None
    values: np.ndarray | None
    n_kept: int
    rewards: np.ndarray | None = None
    dones: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self):
        return len(self.tokens)


@dataclass
class Trajectory:
    image_id: int
    layers: list = field(default_factory=list)
    gamma_correct: int | None = None

    @property
    def n_kept(self) -> list:
        return [rec.n_kept for rec in self.layers]

    @property
    def num_agents(self) -> int:
        return sum(len(rec) for rec in self.layers)

    def agent_steps(self) -> Iterator[AgentStep]:
        for rec in self.layers:
            for j in range(len(rec)):
                yield AgentStep(
                    layer_index=rec.layer,
                    token_index=int(rec.tokens[j]),
                    state_feature=rec.states[j],
                    global_feature=rec.global_feature,
                    action=int(rec.actions[j]),
                    log_prob=_get(rec.log_probs, j),
                    value=_get(rec.values, j),
                    reward=_get(rec.rewards, j),
                    done=bool(rec.dones[j]) if rec.dones is not None else False,
                    advantage=_get(rec.advantages, j),
                    return_to_go=_get(rec.returns, j),
                )


def _get(arr, j):
    return float("nan") if arr is None else float(arr[j])


def compute_gamma(logits, label: int) -> int:
    """1 iff the prediction is right; ``np.argmax`` breaks ties toward the lowest index."""
    return int(int(np.argmax(np.asarray(logits))) == int(label))


def layer_rewards(actions: np.ndarray, n_kept: int, gamma: int, cfg: RewardConfig) -> np.ndarray:
    actions = np.asarray(actions)
    r1 = np.where(actions == PRUNE, 0.0, -1.0)
    r2_value = gamma / n_kept if n_kept > 0 else 0.0
    if cfg.r2_scope == "all_agents":
        r2 = np.full(len(actions), r2_value)
    else:
        r2 = np.where(actions == PRESERVE, r2_value, 0.0)
    return cfg.alpha * r1 + cfg.beta * r2


def compute_rewards(trajectory: Trajectory, cfg: RewardConfig) -> Trajectory:
    if trajectory.gamma_correct is None:
        raise ValueError("gamma_correct must be set before computing rewards")
    last = len(trajectory.layers) - 1
    for li, rec in enumerate(trajectory.layers):
        rec.rewards = layer_rewards(rec.actions, rec.n_kept, trajectory.gamma_correct, cfg)
        rec.dones = (rec.actions == PRUNE) | (li == last)
    return trajectory


def gae(trajectory: Trajectory, gamma_d: float = 0.99, lam: float = 0.95) -> Trajectory:
    """Fill advantages and returns; each token's episode is its chain across layers."""
    if not trajectory.layers:
        return trajectory
    size = max(int(rec.tokens.max()) + 1 if len(rec) else 1 for rec in trajectory.layers)
    next_value = np.zeros(size)
    next_adv = np.zeros(size)
    for rec in reversed(trajectory.layers):
        t = rec.tokens
        cont = 1.0 - rec.dones.astype(np.float64)
        v = np.asarray(rec.values, dtype=np.float64)
        delta = rec.rewards + gamma_d * next_value[t] * cont - v
        adv = delta + gamma_d * lam * next_adv[t] * cont
        rec.advantages = adv
        rec.returns = adv + v
        next_value[:] = 0.0
        next_adv[:] = 0.0
        next_value[t] = v
        next_adv[t] = adv
    return trajectory


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    a = np.asarray(advantages, dtype=np.float64)
    if a.size < 2:
        return a.copy()
    return (a - a.mean()) / (a.std() + 1e-8)


def dump_csv(trajectories: Iterable[Trajectory], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "layer", "token", "action", "reward", "value", "advantage"])
        for tr in trajectories:
            for s in tr.agent_steps():
                w.writerow([tr.image_id, s.layer_index, s.token_index, s.action,
                            repr(s.reward), repr(s.value), repr(s.advantage)])
