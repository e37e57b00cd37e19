"""``corrprune`` command line: gen, train, eval, predict, gradcheck, bench.

Exit codes: 0 success, 1 other failure, 2 invalid configuration, 3
checkpoint version mismatch, 4 gradient check failure.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import audit, checkpoint, config as config_mod, ssm, training
from .correspondence import CorrespondenceSet
from .exceptions import CheckpointVersionError, ConfigError, MatchFileError, TrainingDiverged
from .model import inlier_probability
from .synthdata import generate_scene, read_matches, scene_seeds, write_matches, write_predictions

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_VERSION, EXIT_GRADCHECK = 0, 1, 2, 3, 4
SPLITS = ("train", "val", "test")


def _out(args, default):
    return Path(args.out) if args.out else Path(default)


def _load_config(args):
    cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def load_split(cfg, split, data_dir=None):
    """Scenes of ``split``: match files under ``data_dir`` or generated in memory."""
    data_dir = data_dir or cfg.run.data_dir
    if data_dir:
        return training.SceneBank.from_directory(Path(data_dir) / split)
    count = cfg.split_size(split)
    if count < 1:
        raise ConfigError(f"n_{split} must be positive to use the {split} split", key="n_" + split)
    return training.SceneBank.synthetic(cfg.scene, count, cfg.split_seed(split))


def _checkpoint_path(args, cfg):
    if getattr(args, "checkpoint", None):
        return Path(args.checkpoint)
    if cfg.run.checkpoint:
        return Path(cfg.run.checkpoint)
    return Path(cfg.run.run_dir) / "final.cmck"


# ------------------------------------------------------------- commands

def cmd_gen(args):
    cfg = _load_config(args)
    root = _out(args, cfg.run.data_dir or "data")
    lines = ["split\tfile\tseed"]
    for split in SPLITS:
        folder = root / split
        folder.mkdir(parents=True, exist_ok=True)
        for i, seed in enumerate(scene_seeds(cfg.split_seed(split), cfg.split_size(split))):
            scene = generate_scene(replace(cfg.scene, seed=seed))
            name = f"scene_{i:05d}.corr"
            write_matches(folder / name, scene.corr)
            lines.append(f"{split}\t{split}/{name}\t{seed}")
    (root / "manifest.tsv").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines) - 1} scenes to {root}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args)
    run_dir = _out(args, cfg.run.run_dir)
    data = load_split(cfg, "train", args.data)
    resume = checkpoint.load(args.resume) if args.resume else None

    def progress(it, loss, acc):
        if it % max(1, cfg.train.log_every * 50) == 0:
            print(f"iter {it}\tloss {loss:.5f}\tcls_acc {acc:.4f}", flush=True)

    result = training.train(cfg.train, cfg.model, data, out_dir=run_dir,
                            metrics_path=run_dir / "metrics.tsv", resume=resume,
                            progress=progress)
    (run_dir / "run.cfg").write_text(cfg.dumps())
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        print(f"final\titer {last[0]}\tloss {last[1]:.6f}\tcls_acc {last[2]:.4f}")
    print(f"checkpoint\t{run_dir / 'final.cmck'}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_config(args)
    ckpt = checkpoint.load(_checkpoint_path(args, cfg))
    split = args.split or cfg.run.split
    estimator = args.estimator or cfg.run.estimator
    data = load_split(cfg, split, args.data)
    report = training.evaluate(ckpt, data, estimator, seed=cfg.seed,
                               batch_size=cfg.run.eval_batch)
    lines = ["metric\tvalue"] + [f"{k}\t{v!r}" for k, v in report.rows()]
    print("\n".join(lines))
    print(f"# {split} split, {len(data)} scenes, estimator {estimator}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.tsv").write_text("\n".join(lines) + "\n")
        curve = training.cumulative_curve(report.pose_errors)
        (out / "curve.tsv").write_text(
            "error_deg\trecall\n" + "".join(f"{e!r}\t{r!r}\n" for e, r in curve))
        (out / "pose_errors.tsv").write_text(
            "scene\tpose_error_deg\n"
            + "".join(f"{i}\t{e!r}\n" for i, e in enumerate(report.pose_errors)))
    return EXIT_OK


def cmd_predict(args):
    cfg = _load_config(args)
    if not args.input:
        raise ConfigError("predict needs --input <match file>", key="input")
    ckpt = checkpoint.load(_checkpoint_path(args, cfg))
    corr = read_matches(args.input)
    logits = training.predict_logits(ckpt, corr.coords[None], labels=None if corr.labels is None
                                     else corr.labels[None])[0]
    keep = logits > 0
    probs = inlier_probability(logits)
    pruned = CorrespondenceSet(corr.coords[keep],
                               None if corr.labels is None else corr.labels[keep],
                               corr.essential)
    out = _out(args, Path(args.input).with_suffix(".pruned.corr"))
    write_predictions(out, pruned, probs[keep])
    print(f"kept\t{int(keep.sum())}\tof\t{len(corr)}\t{out}")
    return EXIT_OK


def cmd_gradcheck(args):
    report = audit.run(args.scope)
    print(report.table())
    failures = report.failures()
    if failures:
        names = ", ".join(e.name for e in failures)
        print(f"gradcheck {args.scope}: {len(failures)} failing entries: {names}", file=sys.stderr)
        return EXIT_GRADCHECK
    print(f"# gradcheck {args.scope}: {len(report.entries)} entries pass "
          f"(rtol {report.rtol:g}, atol {report.atol:g})")
    return EXIT_OK


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def cmd_bench(args):
    rows = ssm.benchmark(args.lengths, args.block_sizes, channels=args.channels,
                         n_state=args.n_state, seed=args.seed or 0)
    print("length\tblock_size\tnaive_s\tblocked_s\tspeedup\tmax_abs_diff")
    ok = True
    for length, bs, tn, tb, diff in rows:
        ok &= diff <= 1e-9
        print(f"{length}\t{bs}\t{tn:.6f}\t{tb:.6f}\t{tn / tb:.2f}\t{diff:.3e}")
    if not ok:
        print("blocked and naive scans disagree", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "gradcheck": cmd_gradcheck, "bench": cmd_bench}


def build_parser():
    parser = argparse.ArgumentParser(prog="corrprune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value run configuration file")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="output path (directory or file, per command)")
        return p

    common(sub.add_parser("gen", help="write train/val/test match files and a manifest"))
    p = common(sub.add_parser("train", help="train a model; writes checkpoints and metrics.tsv"))
    p.add_argument("--data", help="directory with train/val/test splits")
    p.add_argument("--resume", help="checkpoint to continue from")
    p = common(sub.add_parser("eval", help="score a checkpoint on a split"))
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", choices=SPLITS)
    p.add_argument("--estimator", choices=("weighted", "ransac_post"))
    p = common(sub.add_parser("predict", help="prune one match file"))
    p.add_argument("--checkpoint")
    p.add_argument("--input", help="match file to prune")
    p = common(sub.add_parser("gradcheck", help="finite-difference gradient audit"))
    p.add_argument("scope", choices=audit.SCOPES)
    p = common(sub.add_parser("bench", help="naive vs blocked scan timings"))
    p.add_argument("--lengths", type=_int_list, default=[256, 1024, 4096])
    p.add_argument("--block-sizes", type=_int_list, default=[1, 16, 64, 256])
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--n-state", type=int, default=16)
    return parser


@contextlib.contextmanager
def _thread_cap():
    """Honour ``CORRPRUNE_THREADS`` for BLAS and compiled kernels."""
    value = os.environ.get("CORRPRUNE_THREADS")
    if not value:
        yield
        return
    try:
        n = max(1, int(value))
    except ValueError:
        raise ConfigError(f"CORRPRUNE_THREADS must be an integer, got {value!r}",
                          key="CORRPRUNE_THREADS") from None
    import numba
    from threadpoolctl import threadpool_limits

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    with threadpool_limits(limits=n):
        yield


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with _thread_cap():
            return COMMANDS[args.command](args)
    except ConfigError as exc:
        key = f" (key: {exc.key})" if exc.key else ""
        print(f"config error: {exc}{key}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointVersionError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_VERSION
    except (MatchFileError, OSError, ValueError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
