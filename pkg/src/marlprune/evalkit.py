"""Accuracy, retention, FLOPs, throughput, α/β sweeps and mask images."""
from __future__ import annotations

import contextlib
import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import Dataset
from .pruning import Policy, PolicyMode
from .vit import ViTConfig, ViTModel, forward_with_masks, vit_forward

STREAM_EVAL = 51
STREAM_BENCH = 52


@dataclass
class EvalReport:
    top1: float
    retention: list
    gflops: float
    images_per_second: float | None = None
    policy_mode: str = "mappo"
    alpha_over_beta: float | None = None
    num_images: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")


# ---------------------------------------------------------------------------
# FLOPs
# ---------------------------------------------------------------------------


def block_token_counts(config: ViTConfig, kept_after_prune: Sequence[int] | None = None) -> list:
    """Per-block token counts (class token included) from kept non-class counts per pruning layer."""
    n = config.num_tokens
    if kept_after_prune is None:
        return [n] * config.depth
    if len(kept_after_prune) != len(config.prune_after):
        raise ValueError("one kept count per pruning layer required")
    counts = []
    j = 0
    for i in range(1, config.depth + 1):
        counts.append(n)
        if j < len(config.prune_after) and config.prune_after[j] == i:
            n = int(kept_after_prune[j]) + 1
            j += 1
    return counts


def flops_estimate(config: ViTConfig, token_counts: Sequence[float] | None = None) -> float:
    """GFLOPs with one multiply-accumulate counted as one FLOP.

    ``token_counts`` holds the token count (class token included) entering
    each block; ``None`` means no pruning.
    """
    D = config.embed_dim
    counts = [config.num_tokens] * config.depth if token_counts is None else list(token_counts)
    if len(counts) != config.depth:
        raise ValueError(f"need {config.depth} per-block token counts, got {len(counts)}")
    total = config.num_patches * config.channels * config.patch_size**2 * D
    total += D * config.num_classes
    for n in counts:
        total += 4 * n * D * D + 2 * n * n * D + 2 * config.ffn_mult * n * D * D
    return total / 1e9


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(model: ViTModel, policy: Policy | None, dataset: Dataset, batch_size: int = 256,
             seed: int = 0, alpha_over_beta: float | None = None) -> EvalReport:
    """Deterministic pass: argmax actions (seeded draws for random/single-agent modes)."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    c = model.config
    N = c.num_patches
    rng = np.random.default_rng([seed, STREAM_EVAL])
    correct = 0
    kept = np.zeros(len(c.prune_after))
    gflops = 0.0
    with nx.no_grad():
        for s in range(0, len(dataset), batch_size):
            imgs = dataset.images[s:s + batch_size]
            logits, trajs = vit_forward(imgs, model, policy, mode="eval", rng=rng)
            correct += int((np.argmax(logits.data, axis=1) == dataset.labels[s:s + batch_size]).sum())
            for tr in trajs:
                ks = tr.n_kept if policy is not None else [N] * len(c.prune_after)
                kept += np.asarray(ks, dtype=float) / N
                gflops += flops_estimate(c, block_token_counts(c, ks))
    m = len(dataset)
    mode = "none" if policy is None else str(policy.mode)
    return EvalReport(correct / m, [float(x) for x in kept / m], gflops / m, None, mode, alpha_over_beta, m)


def match_random_keep_prob(target_mean_retention: float, n_layers: int, tol: float = 1e-9) -> float:
    """keep_prob p whose expected mean retention mean(p, p^2, ..., p^L) hits the target."""
    lo, hi = 0.0, 1.0
    f = lambda p: float(np.mean([p ** (k + 1) for k in range(n_layers)]))
    target = min(max(target_mean_retention, 0.0), 1.0)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# throughput
# ---------------------------------------------------------------------------


def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


def retention_masks(config: ViTConfig, retention: float, rng, batch: int = 1) -> list:
    """Keep masks realising ``retention`` at the first pruning layer, unchanged afterwards."""
    N = config.num_patches
    k = int(round(retention * N))
    masks = []
    keep = np.zeros((batch, config.num_tokens), dtype=bool)
    keep[:, 0] = True
    for b in range(batch):
        keep[b, 1 + rng.choice(N, size=k, replace=False)] = True
    for _ in config.prune_after:
        masks.append(keep.copy())
    return masks


def counted_gflops(model: ViTModel, masks) -> float:
    """GFLOPs counted by instrumenting the matmuls of one compacted forward pass."""
    img = np.zeros((1, model.config.channels, model.config.image_size, model.config.image_size), model.dtype)
    with nx.no_grad(), nx.count_macs() as box:
        forward_with_masks(img, model, masks, compact=True)
    return box[0] / 1e9


def benchmark_throughput(config: ViTConfig, retention_targets: Sequence[float] = (0.5,), trials: int = 20,
                         warmup: int = 3, seed: int = 0, include_masked: bool = False) -> list:
    """Median images/s at batch size 1, single-threaded, random float32 weights.

    Rows: no pruning, then compacted (and optionally masked) execution per
    retention target.  Masks are drawn once per target and reused.
    """
    rng = np.random.default_rng([seed, STREAM_BENCH])
    model = ViTModel(config, rng, np.float32)
    image = rng.random((1, config.channels, config.image_size, config.image_size)).astype(np.float32)
    full = [np.ones((1, config.num_tokens), dtype=bool) for _ in config.prune_after]

    def timed(masks, compact):
        times = []
        with nx.no_grad():
            for t in range(warmup + trials):
                t0 = time.perf_counter()
                forward_with_masks(image, model, masks, compact=compact)
                dt = time.perf_counter() - t0
                if t >= warmup:
                    times.append(dt)
        return 1.0 / float(np.median(times))

    rows = []
    with _single_thread():
        base = timed(full, compact=True)
        rows.append({"execution": "none", "retention": 1.0, "images_per_second": base, "speedup": 1.0,
                     "gflops": flops_estimate(config), "counted_gflops": counted_gflops(model, full)})
        for r in retention_targets:
            masks = retention_masks(config, r, rng)
            kept = [int(m[0, 1:].sum()) for m in masks]
            est = flops_estimate(config, block_token_counts(config, kept))
            variants = [("compacted", True)] + ([("masked", False)] if include_masked else [])
            for name, compact in variants:
                ips = timed(masks, compact)
                rows.append({"execution": name, "retention": float(r), "images_per_second": ips,
                             "speedup": ips / base, "gflops": est if compact else flops_estimate(config),
                             "counted_gflops": counted_gflops(model, masks) if compact else None})
    return rows


def format_table(rows: Sequence[dict]) -> str:
    head = f"{'execution':<10} {'retention':>9} {'images/s':>10} {'speedup':>8} {'GFLOPs':>8}"
    lines = [head]
    for r in rows:
        lines.append(f"{r['execution']:<10} {r['retention']:>9.3f} {r['images_per_second']:>10.1f} "
                     f"{r['speedup']:>8.3f} {r['gflops']:>8.4f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# α/β sweep
# ---------------------------------------------------------------------------


def sweep_alpha_beta(ratios: Sequence[float], vit_state: dict, vit_config: ViTConfig, train_config,
                     dataset: Dataset, eval_dataset: Dataset, beta: float = 1.0, out_csv=None,
                     dtype=np.float32) -> list:
    """Train the RL policy once per α/β ratio from the same ViT weights and seed.

    β is held fixed; only α varies between grid points.
    """
    from dataclasses import replace

    from .rl_train import STREAM_POLICY_INIT, train_loop

    rows = []
    for ratio in ratios:
        cfg = replace(train_config, alpha=float(ratio) * beta, beta=beta)
        model = ViTModel(vit_config, dtype=dtype)
        model.load_state_dict(vit_state)
        policy = Policy.create(vit_config.embed_dim, cfg.policy_mode,
                               np.random.default_rng([cfg.seed, STREAM_POLICY_INIT]), dtype)
        train_loop(dataset, model, policy, cfg)
        rep = evaluate(model, policy, eval_dataset, seed=cfg.seed, alpha_over_beta=float(ratio))
        row = {"ratio": float(ratio)}
        for i, r in enumerate(rep.retention):
            row[f"retention_l{i + 1}"] = r
        row["gflops"] = rep.gflops
        row["top1"] = rep.top1
        rows.append(row)
    if out_csv is not None:
        write_sweep_csv(rows, out_csv, len(vit_config.prune_after))
    return rows


def write_sweep_csv(rows, path, n_layers: int):
    cols = ["ratio"] + [f"retention_l{i + 1}" for i in range(n_layers)] + ["gflops", "top1"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([f"{r[c]:.10g}" for c in cols])


# ---------------------------------------------------------------------------
# mask images
# ---------------------------------------------------------------------------


def write_pgm(path, pixels: np.ndarray):
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(x) for x in fields[1:])
    if maxval != 255:
        raise ValueError("only maxval 255 supported")
    pos += 1
    return np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()


def mask_overlay(image: np.ndarray, keep_mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Grayscale uint8 copy of ``image`` ``[C, H, W]`` with pruned patches painted white."""
    gray = np.asarray(image, dtype=np.float64).mean(axis=0)
    out = np.clip(np.rint(gray * 255.0), 0, 255).astype(np.uint8)
    grid = out.shape[0] // patch_size
    for t in np.nonzero(~np.asarray(keep_mask, dtype=bool)[1:])[0]:
        r, c = divmod(int(t), grid)
        out[r * patch_size:(r + 1) * patch_size, c * patch_size:(c + 1) * patch_size] = 255
    return out


def visualize_masks(image: np.ndarray, layer_masks: Sequence[np.ndarray], patch_size: int, out_dir,
                    stem: str = "image", layer_names: Sequence | None = None) -> list:
    """One PGM per pruning layer; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = layer_names if layer_names is not None else range(1, len(layer_masks) + 1)
    paths = []
    for name, m in zip(names, layer_masks):
        p = out / f"{stem}_l{name}.pgm"
        write_pgm(p, mask_overlay(image, m, patch_size))
        paths.append(p)
    return paths
