"""Command-line entry points tying the modules into runnable experiments."""

import argparse
import csv
import dataclasses
import os
import sys

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import (collect_finetune_state, collect_pretrain_state,
                         load_checkpoint, save_checkpoint)
from .config import dump_config, load_config, to_flat
from .data import gen_shapes, load_dataset, save_dataset
from .finetune import FinetuneModel, evaluate, few_shot, finetune_loop
from .geometry import group
from .pretrain import PretrainModel, pretrain_loop
from .rng import make_rng

COMMANDS = ("gen-data", "pretrain", "finetune", "eval", "fewshot", "inspect-codebook")

# per-command shorthand flags mapping onto dotted config keys
ALIASES = {
    "pretrain": {"steps": "pretrain.steps", "batch-size": "pretrain.batch_size"},
    "finetune": {"steps": "finetune.steps", "batch-size": "finetune.batch_size"},
    "fewshot": {"runs": "fewshot.runs", "way": "fewshot.way", "shot": "fewshot.shot"},
    "gen-data": {"dir": "data.dir"},
    "eval": {},
    "inspect-codebook": {},
}


def _parse_overrides(command, extra):
    overrides = {}
    i = 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--"):
            raise ValueError(f"unexpected argument '{arg}'")
        key = arg[2:]
        if key == "from-scratch":
            overrides["finetune.from_scratch"] = True
            i += 1
            continue
        key = ALIASES.get(command, {}).get(key, key)
        if i + 1 >= len(extra):
            raise ValueError(f"flag '{arg}' needs a value")
        overrides[key] = extra[i + 1]
        i += 2
    return overrides


def _datasets(cfg):
    d = cfg.data
    if d.dir:
        return (load_dataset(os.path.join(d.dir, "train"), "train"),
                load_dataset(os.path.join(d.dir, "test"), "test"))
    train = gen_shapes(d.families, d.per_class_train, d.points, make_rng(cfg.seed, 50), "train")
    test = gen_shapes(d.families, d.per_class_test, d.points, make_rng(cfg.seed, 51), "test")
    return train, test


def _prepare_out(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    dump_config(cfg, os.path.join(cfg.out_dir, "config.json"))


def _student_arrays(ckpt_path):
    tensors, ck_cfg = load_checkpoint(ckpt_path)
    return ({k[len("student."):]: v for k, v in tensors.items()
             if k.startswith("student.")}, ck_cfg)


def cmd_gen_data(cfg):
    out = cfg.data.dir or os.path.join(cfg.out_dir, "data")
    d = cfg.data
    train = gen_shapes(d.families, d.per_class_train, d.points, make_rng(cfg.seed, 50), "train")
    test = gen_shapes(d.families, d.per_class_test, d.points, make_rng(cfg.seed, 51), "test")
    save_dataset(os.path.join(out, "train"), train)
    save_dataset(os.path.join(out, "test"), test)
    print(f"wrote {len(train.items)} train / {len(test.items)} test clouds to {out}")
    return 0


def cmd_pretrain(cfg):
    _prepare_out(cfg)
    train, _ = _datasets(cfg)
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    model, teacher, opt, metrics = pretrain_loop(
        train, cfg.model, cfg.pretrain, seed=cfg.seed,
        metrics_path=metrics_path, log_every=25)
    ckpt = cfg.checkpoint or os.path.join(cfg.out_dir, "pretrain.ckpt")
    save_checkpoint(ckpt, collect_pretrain_state(model, teacher, opt), to_flat(cfg))
    last = metrics[-1]
    print(f"pretrained {cfg.pretrain.steps} steps: l_total={last['l_total']:.4f} "
          f"perplexity={last['perplexity']:.1f}")
    print(f"checkpoint: {ckpt}")
    print(f"metrics: {metrics_path}")
    return 0


def cmd_finetune(cfg):
    _prepare_out(cfg)
    train, test = _datasets(cfg)
    init_arrays = None
    if not cfg.finetune.from_scratch:
        if not cfg.checkpoint:
            raise FileNotFoundError("finetune needs --checkpoint, or pass --from-scratch")
        init_arrays, _ = _student_arrays(cfg.checkpoint)
    metrics_path = os.path.join(cfg.out_dir, "finetune_metrics.csv")
    model, _, test_acc = finetune_loop(
        train, test, cfg.model, cfg.finetune, seed=cfg.seed,
        init_arrays=init_arrays, metrics_path=metrics_path, log_every=50)
    snapshot = to_flat(cfg)
    snapshot["n_classes"] = len(train.class_names)
    out_ckpt = os.path.join(cfg.out_dir, "finetune.ckpt")
    save_checkpoint(out_ckpt, collect_finetune_state(model), snapshot)
    print(f"test accuracy: {test_acc:.4f}")
    print(f"checkpoint: {out_ckpt}")
    return 0


def _load_finetuned(cfg):
    tensors, ck_cfg = load_checkpoint(cfg.checkpoint)
    n_classes = int(ck_cfg.get("n_classes", 4))
    from .config import RunConfig, apply_flat
    saved = RunConfig()
    apply_flat(saved, {k: v for k, v in ck_cfg.items() if k != "n_classes"})
    model = FinetuneModel(make_rng(saved.seed, 10), saved.model, n_classes,
                          hidden=saved.finetune.hidden, dropout=saved.finetune.dropout)
    model.load_params({k[len("model."):]: v for k, v in tensors.items()
                       if k.startswith("model.")})
    return model, saved


def cmd_eval(cfg):
    if not cfg.checkpoint:
        raise FileNotFoundError("eval needs --checkpoint pointing at a finetune checkpoint")
    model, saved = _load_finetuned(cfg)
    data_cfg = cfg if cfg.data.dir else saved
    _, test = _datasets(data_cfg)
    acc = evaluate(model, test, saved.model, saved.finetune)
    print(f"test accuracy: {acc:.4f}")
    return 0


def cmd_fewshot(cfg):
    _prepare_out(cfg)
    _, test = _datasets(cfg)
    init_arrays = None
    if cfg.checkpoint:
        init_arrays, _ = _student_arrays(cfg.checkpoint)
    fs = cfg.fewshot
    ep_cfg = dataclasses.replace(cfg.finetune, steps=fs.steps, lr=fs.lr,
                                 layers=fs.layers)
    records, mean, std = few_shot(test, fs.way, fs.shot, fs.runs, cfg.model,
                                  ep_cfg, seed=cfg.seed, query=fs.query,
                                  init_arrays=init_arrays)
    report = os.path.join(cfg.out_dir, "fewshot.csv")
    with open(report, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "seed", "accuracy"])
        for r in records:
            writer.writerow([r["run"], r["seed"], f"{r['accuracy']:.6f}"])
        writer.writerow([f"{mean:.6f}", f"{std:.6f}"])
    print(f"{fs.way}-way {fs.shot}-shot over {fs.runs} runs: "
          f"{100 * mean:.2f}% +/- {100 * std:.2f}%")
    print(f"report: {report}")
    return 0


def cmd_inspect_codebook(cfg):
    if not cfg.checkpoint:
        raise FileNotFoundError("inspect-codebook needs --checkpoint (pretrain checkpoint)")
    arrays, ck_cfg = _student_arrays(cfg.checkpoint)
    from .config import RunConfig, apply_flat
    saved = RunConfig()
    apply_flat(saved, {k: v for k, v in ck_cfg.items() if k != "n_classes"})
    model = PretrainModel(make_rng(saved.seed, 0), saved.model)
    model.load_params(arrays)
    data_cfg = cfg if cfg.data.dir else saved
    _, test = _datasets(data_cfg)
    limit = min(8, len(test.items))
    writer = csv.writer(sys.stdout)
    writer.writerow(["x", "y", "z", "token_id"])
    with ad.no_grad():
        for cloud, _ in test.items[:limit]:
            if cloud.n > saved.model.n_points:
                idx = make_rng(saved.seed, 60).choice(cloud.n, saved.model.n_points, replace=False)
                from .geometry import PointCloud
                cloud = PointCloud(points=cloud.points[idx])
            ps = group(cloud, saved.model.g, saved.model.s, start=0)
            tokens, pos = model.embed(ps.groups, ps.centers)
            enc = model.encoder.final(tokens, pos)
            ids = model.quantizer.token_ids(enc)
            for center, tid in zip(ps.centers, np.atleast_1d(ids)):
                writer.writerow([f"{center[0]:.6f}", f"{center[1]:.6f}",
                                 f"{center[2]:.6f}", int(tid)])
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "fewshot": cmd_fewshot,
    "inspect-codebook": cmd_inspect_codebook,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="m3cs",
        description="Multi-target masked point modeling at desk scale")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", default=None, help="JSON config (flat dotted keys)")
    parser.add_argument("--preset", choices=["desk", "paper"], default="desk")
    parser.add_argument("--checkpoint", default=None)
    parser.add_argument("--out-dir", default=None)
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = _parse_overrides(args.command, extra)
        if args.checkpoint:
            overrides["checkpoint"] = args.checkpoint
        if args.out_dir:
            overrides["out_dir"] = args.out_dir
        cfg = load_config(args.config,
                          overrides=overrides,
                          preset="paper" if args.preset == "paper" else None)
        return HANDLERS[args.command](cfg)
    except (ValueError, KeyError, OSError, FloatingPointError) as exc:
        print(f"m3cs {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
