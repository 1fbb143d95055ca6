"""Clipped policy/value losses, RL updates, ViT fine-tuning and the alternating epoch loop."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .checkpoint import save_checkpoint
from .data import Dataset, minibatches
from .game import RewardConfig, compute_gamma, compute_rewards, gae, normalize_advantages
from .numerics import Adam, Tensor
from .pruning import Policy, PolicyMode, actor_logits, critic_values
from .vit import ViTModel, run_model, vit_forward

log = logging.getLogger(__name__)

STREAM_ACTIONS = 21
STREAM_VIT_INIT = 31
STREAM_POLICY_INIT = 32
STREAM_PRETRAIN = 41


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    r2_scope: str = "all_agents"
    eps_theta: float = 0.2
    eps_phi: float = 0.2
    K: int = 15
    actor_lr: float = 5e-5
    critic_lr: float = 5e-5
    vit_lr: float = 1e-4
    gamma_d: float = 0.99
    lam: float = 0.95
    entropy_coef: float = 0.01
    epochs: int = 2
    batch_size: int = 64
    seed: int = 0
    finetune_enabled: bool = True
    policy_mode: str = "mappo"
    max_grad_norm: float = 10.0
    normalize_advantages: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0 < self.eps_theta < 1 or not 0 < self.eps_phi < 1:
            raise ValueError("eps_theta and eps_phi must lie in (0, 1)")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        PolicyMode.parse(self.policy_mode)
        self.reward

    @property
    def reward(self) -> RewardConfig:
        return RewardConfig(self.alpha, self.beta, self.r2_scope)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class UpdateBatch:
    """Every agent step of one mini-batch, with the collection-time snapshot."""

    states: np.ndarray
    globals_: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    old_values: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return len(self.actions)

    @classmethod
    def from_trajectories(cls, trajectories, normalize: bool = True, dtype=np.float32) -> "UpdateBatch":
        recs = [rec for tr in trajectories for rec in tr.layers if len(rec)]
        if not recs:
            z = np.zeros(0)
            return cls(np.zeros((0, 0), dtype), np.zeros((0, 0), dtype), z.astype(np.int64), z, z, z, z)
        states = np.concatenate([r.states for r in recs]).astype(dtype)
        glob = np.concatenate([np.broadcast_to(r.global_feature, r.states.shape) for r in recs]).astype(dtype)
        adv = np.concatenate([r.advantages for r in recs])
        if normalize:
            adv = normalize_advantages(adv)
        return cls(
            states,
            glob,
            np.concatenate([r.actions for r in recs]).astype(np.int64),
            np.concatenate([r.log_probs for r in recs]).astype(np.float64),
            np.concatenate([r.values for r in recs]).astype(np.float64),
            adv,
            np.concatenate([r.returns for r in recs]).astype(np.float64),
        )


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def surrogate_terms(ratio: Tensor, advantages: np.ndarray, eps_theta: float) -> Tensor:
    """min(r A, clip(r, 1-eps, 1+eps) A) per agent."""
    adv = np.asarray(advantages, dtype=ratio.dtype)
    return nx.minimum(ratio * adv, nx.clip(ratio, 1.0 - eps_theta, 1.0 + eps_theta) * adv)


def value_terms(v_new: Tensor, v_old: np.ndarray, returns: np.ndarray, eps_phi: float) -> Tensor:
    """max((V - R)^2, (clip(V, V_old - eps, V_old + eps) - R)^2) per agent."""
    dt = v_new.dtype
    v_old = np.asarray(v_old, dtype=dt)
    ret = np.asarray(returns, dtype=dt)
    unclipped = nx.square(v_new - ret)
    clipped = nx.square(nx.clip(v_new, v_old - eps_phi, v_old + eps_phi) - ret)
    return nx.maximum(unclipped, clipped)


def policy_objective(batch: UpdateBatch, actor, eps_theta: float = 0.2) -> tuple[Tensor, Tensor]:
    """Mean clipped surrogate over all agents, and the mean policy entropy."""
    logp_all = nx.log_softmax(actor_logits(actor, batch.states))
    new_logp = nx.pick(logp_all, batch.actions)
    old = np.asarray(batch.old_log_probs, dtype=new_logp.dtype)
    with np.errstate(over="ignore"):
        ratio = nx.exp(new_logp - old)
    if not np.all(np.isfinite(ratio.data)):
        raise FloatingPointError("policy ratio overflow")
    objective = nx.mean(surrogate_terms(ratio, batch.advantages, eps_theta))
    entropy = -nx.mean(nx.tsum(nx.exp(logp_all) * logp_all, axis=1))
    return objective, entropy


def value_loss(batch: UpdateBatch, critic, eps_phi: float = 0.2) -> Tensor:
    v_new = critic_values(critic, batch.states, batch.globals_)
    return nx.mean(value_terms(v_new, batch.old_values, batch.returns, eps_phi))


# ---------------------------------------------------------------------------
# update steps
# ---------------------------------------------------------------------------


class Optimizers:
    def __init__(self, model: ViTModel | None, policy: Policy, config: TrainConfig):
        g = config.max_grad_norm
        self.actor = Adam(policy.actor.parameters(), lr=config.actor_lr, max_grad_norm=g) if policy.actor else None
        self.critic = Adam(policy.critic.parameters(), lr=config.critic_lr, max_grad_norm=g) if policy.critic else None
        self.vit = Adam(model.parameters(), lr=config.vit_lr, max_grad_norm=g) if model is not None else None


def rl_update(trajectories, policy: Policy, config: TrainConfig, opt: Optimizers) -> dict:
    """K clipped-PPO iterations on one mini-batch; ViT parameters are never touched."""
    if not policy.mode.learnable:
        return {"L_theta": float("nan"), "L_phi": float("nan")}
    batch = UpdateBatch.from_trajectories(trajectories, config.normalize_advantages, policy.actor.params["actor.fc1.weight"].dtype)
    if len(batch) == 0:
        return {"L_theta": float("nan"), "L_phi": float("nan")}
    lt, lp = [], []
    for _ in range(config.K):
        opt.actor.zero_grad()
        objective, entropy = policy_objective(batch, policy.actor, config.eps_theta)
        loss = -(objective + config.entropy_coef * entropy) if config.entropy_coef else -objective
        loss.backward()
        opt.actor.step()
        lt.append(float(objective.data))

        opt.critic.zero_grad()
        vl = value_loss(batch, policy.critic, config.eps_phi)
        vl.backward()
        opt.critic.step()
        lp.append(float(vl.data))
    return {"L_theta": float(np.mean(lt)), "L_phi": float(np.mean(lp))}


def finetune_step(images: np.ndarray, labels: np.ndarray, model: ViTModel, policy: Policy | None,
                  config: TrainConfig, opt: Optimizers, rng=None) -> dict:
    """One Adam step on all ViT parameters through the pruned forward pass.

    Masks come from deterministic policy actions; the policy is not updated.
    """
    model.zero_grad()
    logits, trajectories = vit_forward(images, model, policy, mode="eval", rng=rng)
    loss = nx.cross_entropy(logits, labels)
    loss.backward()
    opt.vit.step()
    return {"loss": float(loss.data), "logits": logits.data, "trajectories": trajectories}


def collect(images: np.ndarray, labels: np.ndarray, model: ViTModel, policy: Policy, config: TrainConfig,
            rng, image_ids=None, mode: str = "train"):
    """Forward pass gathering trajectories, then rewards and advantages."""
    with nx.no_grad():
        logits, trajectories = vit_forward(images, model, policy, mode=mode, rng=rng, image_ids=image_ids)
    finish_trajectories(trajectories, logits.data, labels, config, with_gae=(mode == "train"))
    return logits.data, trajectories


def finish_trajectories(trajectories, logits: np.ndarray, labels: np.ndarray, config: TrainConfig,
                        with_gae: bool = True):
    cfg = config.reward
    for b, tr in enumerate(trajectories):
        tr.gamma_correct = compute_gamma(logits[b], labels[b])
        compute_rewards(tr, cfg)
        if with_gae:
            gae(tr, config.gamma_d, config.lam)
    return trajectories


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------


def metric_columns(n_layers: int) -> list:
    return (["epoch", "phase", "top1"] + [f"mean_retention_l{i + 1}" for i in range(n_layers)]
            + ["L_theta", "L_phi", "mean_reward"])


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.10g}"


def write_metrics(rows: Sequence[dict], path, columns: Sequence[str]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def policy_accuracy(model: ViTModel, policy: Policy | None, dataset: Dataset, batch_size: int = 256,
                    seed: int = 0) -> tuple[float, np.ndarray]:
    """Deterministic top-1 and per-layer mean retention of ``policy`` on ``dataset``."""
    n_layers = len(model.config.prune_after)
    correct = 0
    kept = np.zeros(n_layers)
    rng = np.random.default_rng([seed, STREAM_ACTIONS, 0])
    N = model.config.num_patches
    with nx.no_grad():
        for s in range(0, len(dataset), batch_size):
            imgs = dataset.images[s:s + batch_size]
            logits, trajs = vit_forward(imgs, model, policy, mode="eval", rng=rng)
            correct += int((np.argmax(logits.data, axis=1) == dataset.labels[s:s + batch_size]).sum())
            if policy is not None:
                for tr in trajs:
                    kept += np.asarray(tr.n_kept) / N
    if policy is None:
        kept[:] = len(dataset)
    return correct / len(dataset), kept / len(dataset)


@dataclass
class TrainResult:
    metrics: list
    timings: list
    columns: list


def train_loop(dataset: Dataset, model: ViTModel, policy: Policy, config: TrainConfig,
               eval_dataset: Dataset | None = None, out_dir=None,
               on_epoch_end: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Alternate RL epochs (odd) and fine-tuning epochs (even).

    With fine-tuning disabled every epoch is an RL epoch.  When ``out_dir``
    is given, ``metrics.csv`` and ``timings.csv`` are rewritten after each
    epoch and checkpoints are saved every ``checkpoint_every`` epochs.
    """
    opt = Optimizers(model, policy, config)
    n_layers = len(model.config.prune_after)
    N = model.config.num_patches
    columns = metric_columns(n_layers)
    rows, timings = [], []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if config.checkpoint_every:
            _save_state(out / "checkpoints" / "epoch_0", model, policy, config)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        phase = "rl" if (epoch % 2 == 1 or not config.finetune_enabled) else "finetune"
        correct = 0
        kept = np.zeros(n_layers)
        rewards_sum, rewards_n = 0.0, 0
        lt, lp = [], []
        batches = minibatches(dataset, config.batch_size, config.seed, epoch)
        for bi, idx in enumerate(batches):
            rng = np.random.default_rng([config.seed, STREAM_ACTIONS, epoch, bi])
            imgs, labels = dataset.images[idx], dataset.labels[idx]
            if phase == "rl":
                logits, trajs = collect(imgs, labels, model, policy, config, rng, image_ids=idx)
                stats = rl_update(trajs, policy, config, opt)
                lt.append(stats["L_theta"])
                lp.append(stats["L_phi"])
            else:
                res = finetune_step(imgs, labels, model, policy, config, opt, rng)
                logits, trajs = res["logits"], res["trajectories"]
                finish_trajectories(trajs, logits, labels, config, with_gae=False)
            correct += int((np.argmax(logits, axis=1) == labels).sum())
            for tr in trajs:
                kept += np.asarray(tr.n_kept, dtype=float) / N if tr.layers else 1.0
                for rec in tr.layers:
                    rewards_sum += float(rec.rewards.sum())
                    rewards_n += len(rec)
        row = {"epoch": epoch, "phase": phase}
        if eval_dataset is not None:
            top1, ret = policy_accuracy(model, policy, eval_dataset, seed=config.seed)
        else:
            top1, ret = correct / len(dataset), kept / len(dataset)
        row["top1"] = top1
        for i in range(n_layers):
            row[f"mean_retention_l{i + 1}"] = ret[i]
        row["L_theta"] = float(np.nanmean(lt)) if lt and not np.all(np.isnan(lt)) else None
        row["L_phi"] = float(np.nanmean(lp)) if lp and not np.all(np.isnan(lp)) else None
        row["mean_reward"] = rewards_sum / rewards_n if rewards_n else None
        rows.append(row)
        timings.append({"epoch": epoch, "phase": phase, "wall_seconds": time.perf_counter() - t0})
        log.info("epoch %d %s top1=%.4f retention=%s", epoch, phase, top1, np.round(ret, 3).tolist())
        if out is not None:
            write_metrics(rows, out / "metrics.csv", columns)
            write_metrics(timings, out / "timings.csv", ["epoch", "phase", "wall_seconds"])
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                _save_state(out / "checkpoints" / f"epoch_{epoch}", model, policy, config)
        if on_epoch_end is not None:
            on_epoch_end(epoch, row)
    return TrainResult(rows, timings, columns)


def state_arrays(model: ViTModel | None, policy: Policy | None) -> dict:
    arrays = {}
    if model is not None:
        arrays.update({f"vit.{k}": v for k, v in model.state_dict().items()})
    if policy is not None:
        arrays.update(policy.state_dict())
    return arrays


def _save_state(prefix, model, policy, config: TrainConfig):
    save_checkpoint(prefix, state_arrays(model, policy),
                    {"vit": model.config.to_dict(), "train": config.to_dict()})


# ---------------------------------------------------------------------------
# supervised pretraining (no pruning)
# ---------------------------------------------------------------------------


@dataclass
class PretrainConfig:
    epochs: int = 15
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    max_grad_norm: float = 10.0


def pretrain(model: ViTModel, dataset: Dataset, config: PretrainConfig, eval_dataset: Dataset | None = None,
             on_epoch_end=None) -> list:
    opt = Adam(model.parameters(), lr=config.lr, max_grad_norm=config.max_grad_norm)
    rows = []
    for epoch in range(1, config.epochs + 1):
        losses, correct = [], 0
        for idx in minibatches(dataset, config.batch_size, config.seed + STREAM_PRETRAIN, epoch):
            opt.zero_grad()
            logits, _ = run_model(dataset.images[idx], model)
            loss = nx.cross_entropy(logits, dataset.labels[idx])
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
            correct += int((np.argmax(logits.data, axis=1) == dataset.labels[idx]).sum())
        row = {"epoch": epoch, "phase": "pretrain", "loss": float(np.mean(losses)),
               "train_top1": correct / len(dataset)}
        if eval_dataset is not None:
            row["top1"] = policy_accuracy(model, None, eval_dataset)[0]
        rows.append(row)
        log.info("pretrain epoch %d loss=%.4f top1=%s", epoch, row["loss"], row.get("top1"))
        if on_epoch_end is not None:
            on_epoch_end(epoch, row)
    return rows
