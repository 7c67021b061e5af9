"""Command line entry point: ``xmdistill <command> [options]``.

Every command reads one JSON config (defaults when ``--config`` is omitted),
writes its outputs under ``--out`` and leaves a ``manifest.json`` recording
the config hash, seed and library versions.

Exit codes: 0 success, 2 invalid input, 3 numerical check failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from importlib import metadata
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ConfigError, DistillConfig
from .encoders import TeacherEncoder, load_checkpoint, save_checkpoint
from .experiments import ABLATIONS, ablate, summarize
from .gradcheck import TOL, run_suite
from .objective import DistillModel, evaluate, forward_step, pretrain_teacher, split_roles, train
from .synthgen import Dataset, SpecError, generate, mix_audio
from .tensor import NonFiniteError

log = logging.getLogger("xmdistill")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERIC = 3

ABLATE_FIELDS = ("variant", "seed", "acc", "r1", "map100", "map500")


class UsageError(Exception):
    """Bad paths or arguments; maps to exit code 2."""


# ------------------------------------------------------------------ helpers


def load_config(args) -> DistillConfig:
    cfg = DistillConfig.load(args.config) if args.config else DistillConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.lam is not None:
        over["lam"] = args.lam
    if args.delta is not None:
        over["delta"] = args.delta
    if args.margin is not None:
        over["margin"] = args.margin
    cfg = replace(cfg, **over)
    cfg = replace(cfg, data=replace(cfg.data, seed=cfg.seed))
    return cfg.validate()


def versions() -> dict:
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"artifact": own, "numpy": np.__version__, "python": platform.python_version()}


def write_manifest(out: Path, command: str, cfg: DistillConfig, extra: Optional[dict] = None) -> None:
    manifest = {
        "command": command,
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "versions": versions(),
        "config": cfg.to_dict(),
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def need_file(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def dataset_for(args, cfg: DistillConfig) -> Dataset:
    if getattr(args, "data", None):
        return Dataset.load(need_file(args.data, "dataset"))
    return generate(cfg.data)


def load_teacher(path, cfg: DistillConfig) -> TeacherEncoder:
    teacher = TeacherEncoder(cfg.d_raw_teacher, cfg.teacher_hidden, cfg.d_a, np.random.default_rng(0))
    try:
        teacher.load_state_dict(load_checkpoint(need_file(path, "teacher checkpoint")))
    except (KeyError, ValueError) as e:
        raise UsageError(f"teacher checkpoint does not fit the config: {e}") from e
    return teacher.freeze()


def load_model(args, cfg: DistillConfig) -> DistillModel:
    model = DistillModel(cfg, load_teacher(args.teacher, cfg))
    state = load_checkpoint(need_file(args.checkpoint, "student checkpoint"))
    params = model.trainable()
    missing = sorted(set(params) - set(state))
    if missing:
        raise UsageError(f"student checkpoint lacks {missing}")
    for k, p in params.items():
        if state[k].shape != p.shape:
            raise UsageError(f"student checkpoint: {k} has shape {state[k].shape}, expected {p.shape}")
        p.data = state[k].copy()
    return model


def write_metrics(out: Path, report) -> None:
    (out / "metrics.json").write_text(report.to_json())
    (out / "metrics.csv").write_text(report.to_csv())


def n_workers(n_jobs: int) -> int:
    raw = os.environ.get("XMDL_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise UsageError(f"XMDL_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(cap, n_jobs))


# ------------------------------------------------------------------ commands


def cmd_gen(args) -> int:
    cfg = load_config(args)
    out = out_dir(args)
    data = generate(cfg.data)
    data.save(out / "dataset.xmds")
    write_manifest(out, "gen", cfg, {"n": len(data), "noise_channels": data.noise_channels.tolist()})
    print(f"wrote {len(data)} samples to {out / 'dataset.xmds'}")
    return EXIT_OK


def cmd_mix_audio(args) -> int:
    cfg = load_config(args)
    out = out_dir(args)
    data = dataset_for(args, cfg)
    mixed = mix_audio(data, args.mix_fraction, seed=cfg.seed)
    mixed.save(out / "dataset_mixed.xmds")
    write_manifest(out, "mix-audio", cfg, {"mix_fraction": args.mix_fraction, "n_mixed": int(mixed.is_mixed.sum())})
    print(f"mixed {int(mixed.is_mixed.sum())}/{len(mixed)} samples")
    return EXIT_OK


def cmd_pretrain_teacher(args) -> int:
    cfg = load_config(args)
    out = out_dir(args)
    tr, _ = dataset_for(args, cfg).split(cfg.test_fraction, seed=cfg.seed)
    teacher = pretrain_teacher(tr, cfg)
    save_checkpoint(out / "teacher.xmdl", teacher.state_dict())
    write_manifest(out, "pretrain-teacher", cfg, {"teacher_train_accuracy": teacher.train_accuracy})
    print(f"teacher train accuracy {teacher.train_accuracy:.2f}%")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    teacher = load_teacher(args.teacher, cfg)
    out = out_dir(args)
    tr, te = dataset_for(args, cfg).split(cfg.test_fraction, seed=cfg.seed)
    if args.mix_fraction:
        tr = mix_audio(tr, args.mix_fraction, seed=cfg.seed)
    model = DistillModel(cfg, teacher)
    state = train(model, tr)
    save_checkpoint(out / "student.xmdl", {k: p.data for k, p in model.trainable().items()})
    (out / "history.jsonl").write_text(state.to_jsonl())
    report = evaluate(model, te)
    write_metrics(out, report)
    write_manifest(out, "train", cfg, {"mix_fraction": args.mix_fraction, "steps": state.step})
    print(f"test accuracy {report.accuracy:.2f}%  R@1 {report.r_at[1]:.2f}  mAP@100 {report.map_at[100]:.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args)
    model = load_model(args, cfg)
    out = out_dir(args)
    _, te = dataset_for(args, cfg).split(cfg.test_fraction, seed=cfg.seed)
    report = evaluate(model, te)
    write_metrics(out, report)
    write_manifest(out, "eval", cfg)
    print(report.to_json(), end="")
    return EXIT_OK


def _ablate_one(cfg: DistillConfig, seed: int, mix_fraction: float) -> list[dict]:
    return ablate(cfg, [seed], mix_fraction=mix_fraction)


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    out = out_dir(args)
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    workers = n_workers(len(seeds))
    if workers == 1:
        rows = ablate(cfg, seeds, mix_fraction=args.mix_fraction)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = pool.map(_ablate_one, [cfg] * len(seeds), seeds, [args.mix_fraction] * len(seeds))
            rows = [r for part in parts for r in part]
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATE_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    summary = summarize(rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    write_manifest(out, "ablate", cfg, {"seeds": seeds, "mix_fraction": args.mix_fraction})
    print(f"{'variant':16s} {'Acc':>7s} {'R@1':>7s} {'mAP@100':>8s}")
    for name, _, _ in ABLATIONS:
        s = summary[name]
        print(f"{name:16s} {s['acc']:7.2f} {s['r1']:7.2f} {s['map100']:8.2f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args)
    reports = run_suite(args.n_configs, seed=cfg.seed, role=cfg.role)
    worst = max(r.max_error for r in reports)
    for i, r in enumerate(reports):
        log.info("config %d: %s", i, {k: f"{v:.2e}" for k, v in r.errors.items()})
    print(f"gradcheck: {len(reports)} configs, max rel. err {worst:.3e} (tol {TOL:g})")
    return EXIT_OK if worst < TOL else EXIT_NUMERIC


def _test_forward(args):
    cfg = load_config(args)
    model = load_model(args, cfg)
    _, te = dataset_for(args, cfg).split(cfg.test_fraction, seed=cfg.seed)
    x_t, x_s = split_roles(te, cfg)
    state, _ = forward_step(model, x_t, x_s, te.labels)
    return cfg, state


def cmd_dump_mask(args) -> int:
    cfg, state = _test_forward(args)
    out = out_dir(args)
    mask = state.mask.data
    with open(out / "mask.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "channel_index", "mask_value"])
        for i, row in enumerate(mask):
            w.writerows((i, c, repr(float(v))) for c, v in enumerate(row))
    write_manifest(out, "dump-mask", cfg)
    print(f"wrote {mask.shape[0]} x {mask.shape[1]} mask values")
    return EXIT_OK


def cmd_dump_attention(args) -> int:
    cfg, state = _test_forward(args)
    out = out_dir(args)
    weights = state.attention.data.reshape(-1, cfg.t_dim, cfg.h_dim, cfg.w_dim)
    with open(out / "attention.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "t", "h", "w", "weight"])
        for i, grid in enumerate(weights):
            for (t, h, ww), v in np.ndenumerate(grid):
                w.writerow([i, t, h, ww, repr(float(v))])
    write_manifest(out, "dump-attention", cfg)
    print(f"wrote attention for {weights.shape[0]} samples")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "pretrain-teacher": cmd_pretrain_teacher,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "mix-audio": cmd_mix_audio,
    "gradcheck": cmd_gradcheck,
    "dump-mask": cmd_dump_mask,
    "dump-attention": cmd_dump_attention,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--lambda", dest="lam", type=float, help="weight of the distillation terms")
    common.add_argument("--delta", type=float, help="temperature offset, must exceed 1")
    common.add_argument("--margin", type=float, help="triplet margin")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="xmdistill", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = {name: sub.add_parser(name, parents=[common]) for name in COMMANDS}

    for name in ("pretrain-teacher", "train", "eval", "mix-audio", "dump-mask", "dump-attention"):
        p[name].add_argument("--data", help="XMDS dataset file instead of generating from the config")
    for name in ("train", "eval", "dump-mask", "dump-attention"):
        p[name].add_argument("--teacher", help="teacher checkpoint from pretrain-teacher")
    for name in ("eval", "dump-mask", "dump-attention"):
        p[name].add_argument("--checkpoint", help="student checkpoint from train")
    p["train"].add_argument("--mix-fraction", type=float, default=0.0, help="mix this share of training audio")
    p["mix-audio"].add_argument("--mix-fraction", type=float, default=1.0)
    p["ablate"].add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")
    p["ablate"].add_argument("--mix-fraction", type=float, default=1.0, help="mix share for the mixed-input rows")
    p["gradcheck"].add_argument("--n-configs", type=int, default=20)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        for err in e.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (UsageError, SpecError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except NonFiniteError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
