"""Token pruning for small Vision Transformers with per-token MAPPO agents."""
from .data import Dataset, load_raw, minibatches, synth_blobs
from .evalkit import EvalReport, benchmark_throughput, evaluate, flops_estimate, sweep_alpha_beta, visualize_masks
from .game import RewardConfig, Trajectory, compute_gamma, compute_rewards, gae, normalize_advantages
from .numerics import Tensor, grad_check, masked_softmax
from .pruning import ActorNet, CriticNet, Policy, PolicyMode, apply_prune, sample_actions
from .rl_train import PretrainConfig, TrainConfig, finetune_step, pretrain, rl_update, train_loop
from .vit import TokenBatch, ViTConfig, ViTModel, compact_inference, vit_forward

__version__ = "0.1.0"
