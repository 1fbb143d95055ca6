"""``marlprune`` command line: pretrain, train, eval, sweep, bench, visualize.

Configuration is resolved in three layers: built-in defaults, an optional
JSON file (``--config FILE``) with sections ``vit``, ``train``, ``pretrain``,
``data`` and ``run``, then ``--section.key=value`` flags.  Every run writes
the resolved configuration to ``<out_dir>/config.json``.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, load_raw, synth_blobs
from .evalkit import (benchmark_throughput, evaluate, format_table, sweep_alpha_beta, visualize_masks)
from .pruning import Policy, PolicyMode
from .rl_train import (STREAM_POLICY_INIT, STREAM_VIT_INIT, PretrainConfig, TrainConfig, pretrain,
                       state_arrays, train_loop, write_metrics)
from .vit import ViTConfig, ViTModel, vit_forward

log = logging.getLogger("marlprune")

COMMANDS = ("pretrain", "train", "eval", "sweep", "bench", "visualize")

USAGE = """\
usage: marlprune COMMAND [--config FILE] [--section.key=value ...]

commands:
  pretrain   supervised training of the ViT without pruning
  train      alternating RL / fine-tuning epochs from a pretrained checkpoint
  eval       accuracy, retention and GFLOPs report (report.json)
  sweep      one RL training run per alpha/beta ratio (sweep.csv)
  bench      single-threaded images/s with and without token compaction
  visualize  write per-layer pruning masks as PGM images

sections: vit, train, pretrain, data, run
shortcuts:
  --out DIR            run.out_dir
  --checkpoint PREFIX  run.checkpoint
  --seed N             train.seed, pretrain.seed and data.seed
  --finetune BOOL      train.finetune_enabled
  --policy MODE        run.policy (none, preserve, mappo, single_agent, random:P)
  --tokens N           run.bench_tokens
  --retention R[,R]    run.retention
  --ratios R[,R]       run.ratios
"""

ALIASES = {
    "out": ["run.out_dir"],
    "checkpoint": ["run.checkpoint"],
    "seed": ["train.seed", "pretrain.seed", "data.seed"],
    "finetune": ["train.finetune_enabled"],
    "policy": ["run.policy"],
    "tokens": ["run.bench_tokens"],
    "retention": ["run.retention"],
    "ratios": ["run.ratios"],
}


class UsageError(Exception):
    """Bad flag, key or value; maps to exit code 1."""


@dataclasses.dataclass
class DataConfig:
    source: str = "synth_blobs"
    seed: int = 0
    train_count: int = 8000
    test_count: int = 2000
    noise: float = 0.2
    amplitude: float = 0.9
    sigma: float = 1.0
    path: str = ""
    test_path: str = ""


@dataclasses.dataclass
class RunSettings:
    out_dir: str = "runs/latest"
    checkpoint: str = ""
    policy: str = ""
    dtype: str = "float32"
    ratios: tuple = (0.25, 0.5, 1.0)
    bench_tokens: int = 197
    retention: tuple = (0.5,)
    trials: int = 20
    warmup: int = 3
    include_masked: bool = False
    images: tuple = (0, 1, 2, 3)
    log_level: str = "INFO"


SECTIONS = {
    "vit": ViTConfig,
    "train": TrainConfig,
    "pretrain": PretrainConfig,
    "data": DataConfig,
    "run": RunSettings,
}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _defaults() -> dict:
    out = {}
    for name, cls in SECTIONS.items():
        d = dataclasses.asdict(cls())
        out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
    return out


def _coerce(section: str, key: str, raw: Any, template: Any) -> Any:
    """Convert ``raw`` (string from a flag, or a JSON value) to the type of ``template``."""
    where = f"{section}.{key}"
    if isinstance(template, bool):
        if isinstance(raw, bool):
            return raw
        s = str(raw).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{where}: expected a boolean, got {raw!r}")
    if isinstance(template, (list, tuple)):
        items = raw if isinstance(raw, (list, tuple)) else [x for x in str(raw).split(",") if x.strip()]
        elem = template[0] if template else 0.0
        return [_coerce(section, key, x, elem) for x in items]
    try:
        if isinstance(template, int):
            f = float(raw)
            if f != int(f):
                raise ValueError
            return int(f)
        if isinstance(template, float):
            return float(raw)
    except (TypeError, ValueError):
        raise UsageError(f"{where}: expected a {type(template).__name__}, got {raw!r}") from None
    return str(raw)


def _set(cfg: dict, dotted: str, raw: Any) -> None:
    section, _, key = dotted.partition(".")
    if section not in cfg or not key:
        raise UsageError(f"unknown option --{dotted}")
    if key not in cfg[section]:
        raise UsageError(f"unknown key {dotted}")
    cfg[section][key] = _coerce(section, key, raw, cfg[section][key])


def parse_args(argv: Sequence[str]) -> tuple[str, dict]:
    """Returns ``(command, resolved_config_dict)``; raises :class:`UsageError`."""
    argv = list(argv)
    if not argv or argv[0] in ("-h", "--help"):
        raise UsageError("")
    command, rest = argv[0], argv[1:]
    if command not in COMMANDS:
        raise UsageError(f"unknown command {command!r}")
    pairs = []
    config_file = None
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--") or tok == "--":
            raise UsageError(f"unexpected argument {tok!r}")
        name, eq, value = tok[2:].partition("=")
        if name in ("help", "h"):
            raise UsageError("")
        if not eq:
            if i + 1 >= len(rest):
                raise UsageError(f"--{name} needs a value")
            value = rest[i + 1]
            i += 1
        i += 1
        if name == "config":
            config_file = value
        elif name in ALIASES:
            pairs.extend((target, value) for target in ALIASES[name])
        elif "." in name:
            pairs.append((name, value))
        else:
            raise UsageError(f"unknown option --{name}")

    cfg = _defaults()
    if config_file is not None:
        try:
            file_cfg = json.loads(Path(config_file).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_file}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        for section, values in file_cfg.items():
            if section not in cfg or not isinstance(values, dict):
                raise UsageError(f"unknown config section {section!r}")
            for key, v in values.items():
                _set(cfg, f"{section}.{key}", v)
    for dotted, value in pairs:
        _set(cfg, dotted, value)
    return command, cfg


def build(cfg: dict) -> dict:
    """Instantiate the typed config objects; invalid values raise :class:`UsageError`."""
    try:
        out = {name: cls(**cfg[name]) for name, cls in SECTIONS.items()}
        np.dtype(out["run"].dtype)
        if out["run"].dtype not in ("float32", "float64"):
            raise ValueError("run.dtype must be float32 or float64")
        if out["data"].source not in ("synth_blobs", "raw"):
            raise ValueError("data.source must be synth_blobs or raw")
        if out["run"].policy and out["run"].policy not in ("none", "preserve"):
            PolicyMode.parse(out["run"].policy)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return out


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def load_datasets(dc: DataConfig, vc: ViTConfig) -> tuple[Dataset, Dataset]:
    if dc.source == "raw":
        if not dc.path:
            raise UsageError("data.path is required for data.source=raw")
        train = load_raw(dc.path, vc.num_classes)
        test = load_raw(dc.test_path, vc.num_classes) if dc.test_path else train
    else:
        if vc.channels != 1:
            raise UsageError("synth_blobs images are single-channel; set vit.channels=1")
        kw = dict(noise=dc.noise, amplitude=dc.amplitude, sigma=dc.sigma)
        train = synth_blobs(dc.seed, dc.train_count, vc.image_size, vc.num_classes, **kw)
        test = synth_blobs(dc.seed, dc.test_count, vc.image_size, vc.num_classes, start=dc.train_count, **kw)
    return train, test


def _load_state(prefix: str, vc: ViTConfig, dtype, seed: int, mode: str, need_policy: bool):
    if not prefix:
        raise UsageError("run.checkpoint is required for this command")
    arrays, meta = load_checkpoint(prefix)
    model = ViTModel(vc, dtype=dtype)
    model.load_state_dict({k[4:]: v for k, v in arrays.items() if k.startswith("vit.")})
    policy = Policy.create(vc.embed_dim, mode, np.random.default_rng([seed, STREAM_POLICY_INIT]), dtype)
    has_policy = any(k.startswith("actor.") for k in arrays)
    if has_policy:
        policy.load_state_dict(arrays)
    elif need_policy and PolicyMode.parse(mode).learnable:
        raise UsageError(f"checkpoint {prefix} holds no actor/critic for policy {mode}")
    return model, policy, meta


def _eval_policy(run: RunSettings, train: TrainConfig, policy: Policy):
    name = run.policy or train.policy_mode
    if name == "none":
        return None, name
    if name == "preserve":
        return policy.with_mode("random:1"), name
    return policy.with_mode(name), name


def _write_config(out: Path, command: str, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain(c: dict, out: Path) -> None:
    vc, dtype = c["vit"], np.dtype(c["run"].dtype)
    train, test = load_datasets(c["data"], vc)
    model = ViTModel(vc, np.random.default_rng([c["pretrain"].seed, STREAM_VIT_INIT]), dtype)
    rows = pretrain(model, train, c["pretrain"], eval_dataset=test)
    write_metrics(rows, out / "metrics.csv", ["epoch", "phase", "loss", "train_top1", "top1"])
    save_checkpoint(out / "checkpoint", state_arrays(model, None), {"vit": vc.to_dict()})
    print(f"pretrain top1={rows[-1]['top1'] if rows else float('nan'):.4f} -> {out / 'checkpoint.json'}")


def cmd_train(c: dict, out: Path) -> None:
    vc, tc, dtype = c["vit"], c["train"], np.dtype(c["run"].dtype)
    train, test = load_datasets(c["data"], vc)
    model, policy, _ = _load_state(c["run"].checkpoint, vc, dtype, tc.seed, tc.policy_mode, need_policy=False)
    train_loop(train, model, policy, tc, eval_dataset=test, out_dir=out)
    save_checkpoint(out / "checkpoint", state_arrays(model, policy), {"vit": vc.to_dict(), "train": tc.to_dict()})
    rep = evaluate(model, policy, test, seed=tc.seed, alpha_over_beta=_ratio(tc))
    rep.save(out / "report.json")
    print(rep.to_json())


def _ratio(tc: TrainConfig):
    return tc.alpha / tc.beta if tc.beta else None


def cmd_eval(c: dict, out: Path) -> None:
    vc, tc, run, dtype = c["vit"], c["train"], c["run"], np.dtype(c["run"].dtype)
    _, test = load_datasets(c["data"], vc)
    name = run.policy or tc.policy_mode
    model, policy, meta = _load_state(run.checkpoint, vc, dtype, tc.seed,
                                      "random" if name in ("none", "preserve") else name,
                                      need_policy=name not in ("none", "preserve"))
    pol, _ = _eval_policy(run, tc, policy)
    # the ratio describes how the policy was trained, so it comes from the checkpoint
    trained = meta.get("train")
    ratio = None
    if pol is not None and pol.mode.learnable and trained:
        ratio = _ratio(TrainConfig(**trained))
    rep = evaluate(model, pol, test, seed=tc.seed, alpha_over_beta=ratio)
    if name in ("none", "preserve"):
        rep.policy_mode = name
    rep.save(out / "report.json")
    cols = ["top1"] + [f"retention_l{i + 1}" for i in range(len(rep.retention))] + ["gflops"]
    row = {"top1": rep.top1, "gflops": rep.gflops}
    row.update({f"retention_l{i + 1}": r for i, r in enumerate(rep.retention)})
    write_metrics([row], out / "metrics.csv", cols)
    print(rep.to_json())


def cmd_sweep(c: dict, out: Path) -> None:
    vc, tc, run, dtype = c["vit"], c["train"], c["run"], np.dtype(c["run"].dtype)
    train, test = load_datasets(c["data"], vc)
    model, _, _ = _load_state(run.checkpoint, vc, dtype, tc.seed, tc.policy_mode, need_policy=False)
    rows = sweep_alpha_beta(run.ratios, model.state_dict(), vc, tc, train, test, beta=tc.beta,
                            out_csv=out / "sweep.csv", dtype=dtype)
    (out / "metrics.csv").write_text((out / "sweep.csv").read_text())
    for r in rows:
        print(json.dumps(r, sort_keys=True))


def bench_config(tokens: int, base: ViTConfig) -> ViTConfig:
    """Benchmark geometry with ``tokens`` = grid^2 + 1 at 16-pixel patches."""
    if tokens == 197:
        return ViTConfig.benchmark()
    g = int(round(np.sqrt(tokens - 1)))
    if g < 1 or g * g + 1 != tokens:
        raise UsageError(f"run.bench_tokens must be a square plus one, got {tokens}")
    b = ViTConfig.benchmark()
    return dataclasses.replace(b, image_size=16 * g)


def cmd_bench(c: dict, out: Path) -> None:
    run = c["run"]
    cfg = bench_config(run.bench_tokens, c["vit"])
    rows = benchmark_throughput(cfg, run.retention, trials=run.trials, warmup=run.warmup,
                                seed=c["train"].seed, include_masked=run.include_masked)
    cols = ["execution", "retention", "images_per_second", "speedup", "gflops"]
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r["execution"]] + [f"{r[k]:.6g}" for k in cols[1:]])
    print(format_table(rows))


def cmd_visualize(c: dict, out: Path) -> None:
    vc, tc, run, dtype = c["vit"], c["train"], c["run"], np.dtype(c["run"].dtype)
    _, test = load_datasets(c["data"], vc)
    name = run.policy or tc.policy_mode
    model, policy, _ = _load_state(run.checkpoint, vc, dtype, tc.seed,
                                   "random" if name in ("none", "preserve") else name,
                                   need_policy=name not in ("none", "preserve"))
    pol, _ = _eval_policy(run, tc, policy)
    idx = [i for i in run.images if 0 <= i < len(test)]
    if not idx:
        raise UsageError("run.images selects no test image")
    rng = np.random.default_rng([tc.seed, 51])
    _, trajs = vit_forward(test.images[idx], model, pol, mode="eval", rng=rng, image_ids=idx)
    rows = []
    for b, (i, tr) in enumerate(zip(idx, trajs)):
        keep = np.ones(vc.num_tokens, dtype=bool)
        masks = []
        for rec in tr.layers:
            # agents at this layer are exactly the tokens still kept before it
            keep = keep.copy()
            keep[rec.tokens[rec.actions == 0]] = False
            masks.append(keep)
        if not masks:
            masks = [keep for _ in vc.prune_after]
        visualize_masks(test.images[i], masks, vc.patch_size, out / "masks", stem=f"img{i:05d}",
                        layer_names=vc.prune_after)
        rows.append({"image": i, **{f"kept_l{j + 1}": int(m[1:].sum()) for j, m in enumerate(masks)}})
    cols = ["image"] + [f"kept_l{j + 1}" for j in range(len(vc.prune_after))]
    write_metrics(rows, out / "metrics.csv", cols)
    print(f"wrote {len(idx) * len(vc.prune_after)} masks to {out / 'masks'}")


HANDLERS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
    "visualize": cmd_visualize,
}


def run(argv: Sequence[str] | None = None) -> int:
    """Entry point; returns 0 on success, 1 on usage/config errors, 2 on runtime errors."""
    argv = sys.argv[1:] if argv is None else argv
    try:
        command, raw = parse_args(argv)
        typed = build(raw)
    except UsageError as exc:
        if str(exc):
            print(f"error: {exc}", file=sys.stderr)
        print(USAGE, file=sys.stderr, end="")
        return 1
    logging.basicConfig(level=getattr(logging, typed["run"].log_level.upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    out = Path(typed["run"].out_dir)
    try:
        _write_config(out, command, raw)
        HANDLERS[command](typed, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 2
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
