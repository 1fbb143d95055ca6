"""A small Vision Transformer whose attention honours a per-image keep mask."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class ConfigError(ValueError):
    pass


@dataclass
class ViTConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 1
    embed_dim: int = 32
    depth: int = 4
    num_heads: int = 4
    ffn_mult: int = 4
    num_classes: int = 4
    prune_after: tuple = (2, 3)
    ln_eps: float = 1e-6

    def __post_init__(self):
        self.prune_after = tuple(sorted(int(i) for i in self.prune_after))
        self.validate()

    def validate(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if any(i < 1 or i > self.depth for i in self.prune_after):
            raise ConfigError(f"prune_after {self.prune_after} outside 1..{self.depth}")
        if len(set(self.prune_after)) != len(self.prune_after):
            raise ConfigError("prune_after has duplicates")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prune_after"] = list(self.prune_after)
        return d

    @classmethod
    def benchmark(cls) -> "ViTConfig":
        """197-token geometry (224px / 16px patches), tiny width."""
        return cls(image_size=224, patch_size=16, channels=3, embed_dim=192, depth=12, num_heads=3,
                   num_classes=1000, prune_after=(3, 6, 9))


@dataclass
class TokenBatch:
    """Token features ``[B, n, D]`` (class token at index 0) and a keep mask ``[B, n]``.

    ``token_ids`` maps each position to its original token index, which only
    differs from ``arange(n)`` after compaction.
    """

    features: Tensor
    keep_mask: np.ndarray
    token_ids: np.ndarray | None = None

    def __post_init__(self):
        B, n = self.keep_mask.shape
        if self.token_ids is None:
            self.token_ids = np.broadcast_to(np.arange(n), (B, n)).copy()
        if not np.all(self.keep_mask[:, 0]):
            raise AssertionError("class token must never be pruned")

    @property
    def batch_size(self) -> int:
        return self.keep_mask.shape[0]

    @property
    def length(self) -> int:
        return self.keep_mask.shape[1]

    def n_kept(self) -> np.ndarray:
        """Kept non-class tokens per image."""
        return self.keep_mask[:, 1:].sum(axis=1)


def _init(rng, shape, std, dtype):
    w = rng.normal(0.0, std, size=shape)
    return np.clip(w, -2 * std, 2 * std).astype(dtype)


class ViTModel:
    """Parameter container; the forward functions below read ``params`` by name."""

    def __init__(self, config: ViTConfig, rng=None, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(0) if rng is None else rng
        c = config
        D, F = c.embed_dim, c.embed_dim * c.ffn_mult
        pdim = c.channels * c.patch_size**2
        p = {}
        p["patch.weight"] = _init(rng, (pdim, D), 0.02, dtype)
        p["patch.bias"] = np.zeros(D, dtype)
        p["cls_token"] = _init(rng, (D,), 0.02, dtype)
        p["pos_embed"] = _init(rng, (c.num_tokens, D), 0.02, dtype)
        for i in range(1, c.depth + 1):
            b = f"blocks.{i}."
            p[b + "norm1.gain"] = np.ones(D, dtype)
            p[b + "norm1.bias"] = np.zeros(D, dtype)
            p[b + "attn.qkv.weight"] = _init(rng, (D, 3 * D), 0.02, dtype)
            p[b + "attn.qkv.bias"] = np.zeros(3 * D, dtype)
            p[b + "attn.proj.weight"] = _init(rng, (D, D), 0.02, dtype)
            p[b + "attn.proj.bias"] = np.zeros(D, dtype)
            p[b + "norm2.gain"] = np.ones(D, dtype)
            p[b + "norm2.bias"] = np.zeros(D, dtype)
            p[b + "mlp.fc1.weight"] = _init(rng, (D, F), 0.02, dtype)
            p[b + "mlp.fc1.bias"] = np.zeros(F, dtype)
            p[b + "mlp.fc2.weight"] = _init(rng, (F, D), 0.02, dtype)
            p[b + "mlp.fc2.bias"] = np.zeros(D, dtype)
        p["norm.gain"] = np.ones(D, dtype)
        p["norm.bias"] = np.zeros(D, dtype)
        p["head.weight"] = _init(rng, (D, c.num_classes), 0.02, dtype)
        p["head.bias"] = np.zeros(c.num_classes, dtype)
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    def block(self, i: int) -> dict:
        prefix = f"blocks.{i}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def parameters(self) -> list:
        return list(self.params.values())

    def state_dict(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict):
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(self.dtype, copy=True)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    B, C, H, W = images.shape
    g = H // patch_size
    x = images.reshape(B, C, g, patch_size, g, patch_size)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(B, g * g, C * patch_size * patch_size)


def patch_embed(images: np.ndarray, model: ViTModel) -> TokenBatch:
    c = model.config
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1:] != (c.channels, c.image_size, c.image_size):
        raise ConfigError(
            f"expected images [B, {c.channels}, {c.image_size}, {c.image_size}], got {images.shape}"
        )
    p = model.params
    B = images.shape[0]
    patches = Tensor(patchify(images, c.patch_size).astype(model.dtype))
    tok = nx.linear(patches, p["patch.weight"], p["patch.bias"])
    cls = nx.broadcast_to(nx.reshape(p["cls_token"], (1, 1, c.embed_dim)), (B, 1, c.embed_dim))
    x = nx.add(nx.concat([cls, tok], axis=1), p["pos_embed"])
    return TokenBatch(x, np.ones((B, c.num_tokens), dtype=bool))


def attention(x: Tensor, bp: dict, num_heads: int, mask_add: np.ndarray | None) -> Tensor:
    B, n, D = x.shape
    d = D // num_heads
    qkv = nx.linear(x, bp["attn.qkv.weight"], bp["attn.qkv.bias"])
    qkv = nx.transpose(nx.reshape(qkv, (B, n, 3, num_heads, d)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = nx.matmul(q, nx.swap_last(k)) * (1.0 / np.sqrt(d))
    probs = nx.masked_softmax(scores, mask_add)
    out = nx.matmul(probs, v)
    out = nx.reshape(nx.transpose(out, (0, 2, 1, 3)), (B, n, D))
    return nx.linear(out, bp["attn.proj.weight"], bp["attn.proj.bias"])


def block_forward(tokens: TokenBatch, bp: dict, num_heads: int, eps: float = 1e-6) -> TokenBatch:
    """Pre-norm transformer block; pruned keys get -1000 before the softmax."""
    x = tokens.features
    mask_add = None
    if not tokens.keep_mask.all():
        mask_add = nx.additive_mask(tokens.keep_mask, x.dtype)
    h = nx.layer_norm(x, bp["norm1.gain"], bp["norm1.bias"], eps)
    x = nx.add(x, attention(h, bp, num_heads, mask_add))
    h = nx.layer_norm(x, bp["norm2.gain"], bp["norm2.bias"], eps)
    h = nx.gelu(nx.linear(h, bp["mlp.fc1.weight"], bp["mlp.fc1.bias"]))
    x = nx.add(x, nx.linear(h, bp["mlp.fc2.weight"], bp["mlp.fc2.bias"]))
    return TokenBatch(x, tokens.keep_mask, tokens.token_ids)


def classify(tokens: TokenBatch, model: ViTModel) -> Tensor:
    p = model.params
    cls = tokens.features[:, 0, :]
    h = nx.layer_norm(cls, p["norm.gain"], p["norm.bias"], model.config.ln_eps)
    return nx.linear(h, p["head.weight"], p["head.bias"])


def compact_inference(tokens: TokenBatch) -> TokenBatch:
    """Physically drop pruned tokens, keeping the survivors in order.

    Every image in the batch must keep the same number of tokens.
    """
    keep = tokens.keep_mask
    counts = keep.sum(axis=1)
    if np.any(counts != counts[0]):
        raise ValueError("compaction needs identical kept counts across the batch")
    if counts[0] == keep.shape[1]:
        return tokens
    B = keep.shape[0]
    pos = np.nonzero(keep)[1].reshape(B, counts[0])
    rows = np.arange(B)[:, None]
    feats = nx.getitem(tokens.features, (rows, pos))
    return TokenBatch(feats, np.ones((B, counts[0]), dtype=bool), tokens.token_ids[rows, pos])


# ---------------------------------------------------------------------------
# full forward with a pruning policy
# ---------------------------------------------------------------------------

Decider = Callable[[int, TokenBatch], np.ndarray]


def run_model(images: np.ndarray, model: ViTModel, decide: Decider | None = None,
              compact: bool = False) -> tuple[Tensor, list]:
    """Blocks in order, calling ``decide(block_index, tokens)`` after each pruning block.

    ``decide`` returns the updated keep mask.  Returns the logits and the
    list of keep masks seen after every pruning block (mapped back to
    original token ids, shape ``[B, num_tokens]``).
    """
    c = model.config
    tokens = patch_embed(images, model)
    masks = []
    for i in range(1, c.depth + 1):
        tokens = block_forward(tokens, model.block(i), c.num_heads, c.ln_eps)
        if decide is not None and i in c.prune_after:
            keep = decide(i, tokens)
            tokens = TokenBatch(tokens.features, keep, tokens.token_ids)
            full = np.zeros((tokens.batch_size, c.num_tokens), dtype=bool)
            np.put_along_axis(full, tokens.token_ids, keep, axis=1)
            masks.append(full)
            if compact:
                tokens = compact_inference(tokens)
    return classify(tokens, model), masks


def forward_with_masks(images: np.ndarray, model: ViTModel, layer_masks, compact: bool = False):
    """Forward pass applying fixed per-pruning-layer keep masks ``[B, num_tokens]``.

    Later masks are intersected with earlier ones so monotonicity holds.
    """
    c = model.config
    layer_masks = [np.asarray(m, dtype=bool) for m in layer_masks]
    if len(layer_masks) != len(c.prune_after):
        raise ValueError(f"need {len(c.prune_after)} masks, got {len(layer_masks)}")
    order = {blk: j for j, blk in enumerate(c.prune_after)}

    def decide(i, tokens):
        m = np.take_along_axis(layer_masks[order[i]], tokens.token_ids, axis=1)
        keep = tokens.keep_mask & m
        keep[:, 0] = True
        return keep

    return run_model(images, model, decide, compact=compact)


def compact_forward(images: np.ndarray, model: ViTModel, layer_masks) -> np.ndarray:
    """Per-image inference with pruned tokens removed; returns logits ``[B, classes]``."""
    out = []
    with nx.no_grad():
        for b in range(len(images)):
            logits, _ = forward_with_masks(images[b:b + 1], model, [m[b:b + 1] for m in layer_masks],
                                           compact=True)
            out.append(logits.data[0])
    return np.stack(out) if out else np.zeros((0, model.config.num_classes), model.dtype)


def vit_forward(images: np.ndarray, model: ViTModel, policy=None, mode: str = "train", rng=None,
                image_ids=None) -> tuple[Tensor, list]:
    """Masked forward pass with the pruning policy consulted after each pruning block.

    Returns logits and one :class:`~marlprune.game.Trajectory` per image.
    In ``eval`` mode actions are deterministic (argmax) and values are skipped.
    """
    from .game import LayerRecord, Trajectory
    from .pruning import apply_prune

    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    B = len(images)
    ids = np.arange(B) if image_ids is None else np.asarray(image_ids)
    trajectories = [Trajectory(int(i)) for i in ids]
    if policy is None:
        logits, _ = run_model(images, model)
        return logits, trajectories
    rng = np.random.default_rng(0) if rng is None else rng

    def decide(block, tokens):
        feats = tokens.features.data
        dec = policy.act(feats, tokens.keep_mask, train, rng)
        keep = tokens.keep_mask.copy()
        starts = np.searchsorted(dec.batch, np.arange(B + 1))
        for b in range(B):
            s, e = starts[b], starts[b + 1]
            pos = dec.pos[s:e]
            keep[b], n = apply_prune(keep[b], dec.actions[s:e], pos)
            trajectories[b].layers.append(LayerRecord(
                layer=block,
                tokens=tokens.token_ids[b, pos],
                states=dec.states[s:e],
                global_feature=feats[b, 0],
                actions=dec.actions[s:e],
                log_probs=None if dec.log_probs is None else dec.log_probs[s:e],
                values=None if dec.values is None else dec.values[s:e],
                n_kept=n,
            ))
        return keep

    logits, _ = run_model(images, model, decide)
    return logits, trajectories
