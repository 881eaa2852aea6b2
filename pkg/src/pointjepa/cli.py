"""Command-line entry points: synth-data, pretrain, probe, fewshot, sequence, info.

Exit codes: 0 ok, 2 config/argument error, 3 I/O or file-format error,
4 numeric failure, 5 checkpoint/config model mismatch.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from pointjepa import data as data_mod
from pointjepa.config import RunConfig, dump_config, load_config
from pointjepa.errors import ConfigError, FormatError, InvalidArgument, ModelMismatch, NumericFailure
from pointjepa.eval import collapse_metric, extract_features, few_shot_eval, linear_probe
from pointjepa.geom import tokenize
from pointjepa.sequencer import SEQUENCERS, contiguity_score, order_centers
from pointjepa.train import (
    checkpoint_model_config,
    config_hash,
    epoch_means,
    init_state,
    load_checkpoint,
    pretrain,
    read_checkpoint_entries,
    save_checkpoint,
    write_loss_csv,
)

log = logging.getLogger("pointjepa")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_MISMATCH = 0, 2, 3, 4, 5
CHECKPOINT_NAME = "checkpoint.pjck"
LOSS_NAME = "loss.csv"
METRICS_NAME = "metrics.csv"
EFFECTIVE_CONFIG_NAME = "effective_config.cfg"


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value.strip()
    if args.seed is not None:
        out["run.seed"] = args.seed
    return out


def _config(args) -> RunConfig:
    return load_config(args.config, _overrides(args))


def _require_data_dir(cfg: RunConfig) -> Path:
    if not cfg.data.out_dir:
        raise ConfigError("missing config key data.out_dir")
    return Path(cfg.data.out_dir)


def _run_dir(args) -> Path:
    if not args.out:
        raise ConfigError("--out DIR is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out: Path, cfg: RunConfig):
    (out / EFFECTIVE_CONFIG_NAME).write_text(dump_config(cfg), encoding="utf-8")


def read_metrics(path) -> dict:
    metrics = {}
    p = Path(path)
    if p.exists():
        for line in p.read_text(encoding="utf-8").splitlines()[1:]:
            key, _, value = line.partition(",")
            metrics[key] = value
    return metrics


def update_metrics(path, values: dict):
    metrics = read_metrics(path)
    metrics.update({k: str(v) for k, v in values.items()})
    lines = ["metric,value"] + [f"{k},{v}" for k, v in metrics.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_index(cfg: RunConfig):
    return data_mod.read_index(_require_data_dir(cfg) / "index.txt")


# Commands -----------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    cfg = _config(args)
    if args.out:
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, out_dir=args.out))
    out = _require_data_dir(cfg)
    d = cfg.data
    index = data_mod.build_dataset(out, d.per_class, d.n_points, d.split_ratio, cfg.run.seed,
                                   d.jitter, d.rotate)
    _echo_config(out, cfg)
    print(f"index: {out / 'index.txt'}")
    print(f"classes: {len(index.classes)} train: {len(index.split('train'))} "
          f"test: {len(index.split('test'))}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _run_dir(args)
    _echo_config(out, cfg)
    tcfg = cfg.train_config()
    chash = config_hash(cfg.model, tcfg, cfg.mask, cfg.run.sequencer)
    ckpt = out / CHECKPOINT_NAME
    if args.resume and ckpt.exists():
        state = load_checkpoint(ckpt, tcfg, expect_model=cfg.model)
        if state.config_hash != chash:
            raise ModelMismatch("checkpoint was trained with a different configuration")
        log.info("resuming from epoch %d", state.epoch)
    else:
        state = init_state(cfg.model, tcfg, chash)
    clouds, _ = _load_index(cfg).load("train")

    def on_epoch(st, mean):
        save_checkpoint(st, ckpt)
        write_loss_csv(out / LOSS_NAME, st.loss_log)

    t0 = time.perf_counter()
    state = pretrain(clouds, state, tcfg, cfg.mask, cfg.run.sequencer, cfg.run.bits,
                     until_epoch=args.stop_after, on_epoch=on_epoch)
    save_checkpoint(state, ckpt)
    write_loss_csv(out / LOSS_NAME, state.loss_log)
    means = epoch_means(state.loss_log)
    update_metrics(out / METRICS_NAME, {
        "sequencer": cfg.run.sequencer,
        "mask_strategy": cfg.mask.strategy.value,
        "target_count": cfg.mask.target_count,
        "epochs_completed": state.epoch,
        "first_epoch_loss": means[0] if means else "nan",
        "final_epoch_loss": means[-1] if means else "nan",
        "pretrain_seconds": round(time.perf_counter() - t0, 3),
    })
    print(f"final epoch-mean loss: {means[-1]:.6f}" if means else "no epochs run")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def _model_for_eval(args, cfg: RunConfig):
    if args.random_init:
        return init_state(cfg.model, cfg.train_config()).model
    path = Path(args.checkpoint) if args.checkpoint else (Path(args.out) / CHECKPOINT_NAME if args.out else None)
    if path is None:
        raise ConfigError("--checkpoint PATH (or --out with a checkpoint inside) is required")
    entries = read_checkpoint_entries(path)
    if checkpoint_model_config(entries) != cfg.model:
        raise ModelMismatch(
            f"checkpoint model {checkpoint_model_config(entries)} does not match configured {cfg.model}"
        )
    return load_checkpoint(path, cfg.train_config()).model


def cmd_probe(args) -> int:
    cfg = _config(args)
    model = _model_for_eval(args, cfg)
    index = _load_index(cfg)
    tr, ytr = index.load("train")
    te, yte = index.load("test")
    ftr = extract_features(model, tr, cfg.run.sequencer, cfg.run.bits)
    fte = extract_features(model, te, cfg.run.sequencer, cfg.run.bits)
    acc = linear_probe(ftr, ytr, fte, yte, cfg.eval.reg)
    spread = collapse_metric(fte)
    prefix = "random_" if args.random_init else ""
    if args.out:
        out = _run_dir(args)
        _echo_config(out, cfg)
        update_metrics(out / METRICS_NAME, {f"{prefix}linear_accuracy": acc,
                                            f"{prefix}collapse_std": spread})
    print(f"linear probe accuracy: {acc:.4f}")
    print(f"feature std (collapse metric): {spread:.6f}")
    return EXIT_OK


def cmd_fewshot(args) -> int:
    cfg = _config(args)
    m = args.m if args.m is not None else cfg.eval.fewshot_m
    n = args.n if args.n is not None else cfg.eval.fewshot_n
    trials = args.trials if args.trials is not None else cfg.eval.fewshot_trials
    model = _model_for_eval(args, cfg)
    index = _load_index(cfg)
    tr, ytr = index.load("train")
    te, yte = index.load("test")
    feats = extract_features(model, tr + te, cfg.run.sequencer, cfg.run.bits)
    labels = np.concatenate([ytr, yte])
    mean, std, accs = few_shot_eval(feats, labels, m, n, trials, cfg.run.seed, cfg.eval.reg)
    prefix = "random_" if args.random_init else ""
    if args.out:
        out = _run_dir(args)
        _echo_config(out, cfg)
        update_metrics(out / METRICS_NAME, {
            f"{prefix}fewshot_{m}way_{n}shot_mean": mean,
            f"{prefix}fewshot_{m}way_{n}shot_std": std,
            f"{prefix}fewshot_trials": len(accs),
        })
    print(f"{m}-way {n}-shot over {len(accs)} trials: {100 * mean:.2f} +- {100 * std:.2f}")
    return EXIT_OK


def cmd_sequence(args) -> int:
    cfg = _config(args)
    pts = data_mod.read_cloud(args.cloud)
    c = args.c if args.c is not None else cfg.model.c
    k = args.k if args.k is not None else cfg.model.k
    method = args.sequencer or cfg.run.sequencer
    bits = args.bits if args.bits is not None else cfg.run.bits
    c, k = min(c, pts.shape[0]), min(k, pts.shape[0])
    patches = tokenize(pts, c, k)
    order = order_centers(patches.centers, method, bits)
    # first line: the ordering itself; then centers in visit order
    print(" ".join(str(int(i)) for i in order))
    for i in order:
        x, y, z = patches.centers[i]
        print(f"center {int(i)} {x:.6f} {y:.6f} {z:.6f}")
    print(f"contiguity {contiguity_score(patches.centers, order):.6f}")
    return EXIT_OK


def cmd_info(args) -> int:
    cfg = _config(args)
    sys.stdout.write(dump_config(cfg))
    if args.checkpoint:
        entries = read_checkpoint_entries(args.checkpoint)
        mcfg = checkpoint_model_config(entries)
        n_params = sum(int(np.prod(v.shape)) for k, v in entries.items() if k.startswith("model."))
        print(f"# checkpoint epoch={int(entries['meta.epoch'][0])} step={int(entries['meta.step'][0])} "
              f"params={n_params} dim={mcfg.dim} depth={mcfg.depth}")
    return EXIT_OK


COMMANDS = {
    "synth-data": cmd_synth_data,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "fewshot": cmd_fewshot,
    "sequence": cmd_sequence,
    "info": cmd_info,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (section.key = value lines)")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. --set model.dim=32")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pointjepa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth-data", parents=[common], help="generate the synthetic shape dataset")
    p = sub.add_parser("pretrain", parents=[common], help="JEPA pretraining")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.pjck")
    p.add_argument("--stop-after", type=int, metavar="EPOCH",
                   help="stop once this many epochs are complete (schedules still span all epochs)")
    for name in ("probe", "fewshot"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--checkpoint")
        p.add_argument("--random-init", action="store_true", help="evaluate an untrained encoder")
        if name == "fewshot":
            p.add_argument("--m", type=int, help="classes per episode")
            p.add_argument("--n", type=int, help="support examples per class")
            p.add_argument("--trials", type=int)
    p = sub.add_parser("sequence", parents=[common], help="print the patch-center visit order")
    p.add_argument("cloud")
    p.add_argument("--sequencer", choices=SEQUENCERS)
    p.add_argument("--c", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--bits", type=int)
    p = sub.add_parser("info", parents=[common], help="print the effective config")
    p.add_argument("--checkpoint")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InvalidArgument) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelMismatch as e:
        print(f"model mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except (OSError, FormatError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericFailure as e:
        print(f"numeric failure at step {e.step}: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
