"""Command-line entry point: ``stmaml {train,eval,dump-preds,ingest-gsod,gen-tasks}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import gsod
from .experiment import dump_predictions, load_config, run_eval, run_train
from .tasks import EpisodeConfig, FAMILIES, sample_episode_batch, write_tasks_jsonl


def _train(args) -> int:
    overrides = {
        "training.seed": args.seed,
        "algorithm": args.algorithm,
        "training.iterations": args.iterations,
        "output_dir": args.output_dir,
    }
    cfg = load_config(args.config, overrides)
    path = run_train(cfg, resume_from=args.resume)
    print(path)
    return 0


def _eval(args) -> int:
    cfg = None
    if args.config:
        cfg = load_config(args.config, {"output_dir": args.output_dir})
    report = run_eval(args.checkpoint, cfg, n_tasks=args.tasks, n_samples=args.samples, write=False)
    out = Path(args.output_dir or (cfg.output_dir if cfg else Path(args.checkpoint).parent.parent))
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    print(f"{report.metric} {report.mean_mse:.4f} +/- {report.std_error:.4f} over {report.n_tasks} tasks")
    return 0


def _dump(args) -> int:
    cfg = load_config(args.config, {"output_dir": args.output_dir}) if args.config else None
    path = dump_predictions(args.checkpoint, cfg, n_tasks=args.tasks, n_samples=args.samples, path=args.out)
    print(path)
    return 0


def _ingest(args) -> int:
    files = gsod.load_gsod_dir(args.gsod_dir)
    if not files:
        print(f"no eligible station-year files under {args.gsod_dir}", file=sys.stderr)
        return 1
    splits = gsod.split_files(files, args.seed, args.train, args.val, args.test)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for name, part in zip(("train", "val", "test"), splits):
        tasks = [gsod.sample_weather_task(f, args.shots, args.queries, rng) for f in part]
        write_tasks_jsonl(tasks, out / f"{name}.jsonl")
        (out / f"{name}_files.txt").write_text("".join(f.identifier + "\n" for f in part))
        print(f"{name}: {len(part)} station-year files")
    return 0


def _gen_tasks(args) -> int:
    families = tuple(args.families.split(",")) if args.families else FAMILIES
    cfg = EpisodeConfig(args.shots, args.queries, args.noise_std, families, args.seed)
    tasks = sample_episode_batch(cfg, args.n, args.seed)
    write_tasks_jsonl(tasks, args.out)
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stmaml", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="meta-train a model")
    t.add_argument("--config", help="JSON config with flat dotted keys")
    t.add_argument("--seed", type=int)
    t.add_argument("--algorithm", choices=("maml", "stmaml"))
    t.add_argument("--iterations", type=int)
    t.add_argument("--output-dir")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on fresh tasks")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")
    e.add_argument("--tasks", type=int)
    e.add_argument("--samples", type=int)
    e.add_argument("--output-dir")
    e.set_defaults(func=_eval)

    d = sub.add_parser("dump-preds", help="write sampled prediction curves as JSON lines")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--config")
    d.add_argument("--tasks", type=int, default=4)
    d.add_argument("--samples", type=int, default=10)
    d.add_argument("--out")
    d.add_argument("--output-dir")
    d.set_defaults(func=_dump)

    g = sub.add_parser("ingest-gsod", help="turn GSOD CSVs into task dumps")
    g.add_argument("--gsod-dir", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=42000)
    g.add_argument("--val", type=int, default=5000)
    g.add_argument("--test", type=int, default=1000)
    g.add_argument("--shots", type=int, default=10)
    g.add_argument("--queries", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_ingest)

    s = sub.add_parser("gen-tasks", help="sample 2D regression tasks to JSON lines")
    s.add_argument("--out", required=True)
    s.add_argument("-n", type=int, default=100)
    s.add_argument("--shots", type=int, default=10)
    s.add_argument("--queries", type=int, default=100)
    s.add_argument("--noise-std", type=float, default=0.3)
    s.add_argument("--families", help=f"comma-separated subset of {','.join(FAMILIES)}")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_gen_tasks)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
