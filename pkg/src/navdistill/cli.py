"""Command-line front end: one subcommand per pipeline stage plus the studies.

Exit codes: 0 on success, 2 for configuration problems (including usage
errors), 3 for runtime failures such as missing upstream artifacts.
"""

import argparse
import json
import os
import sys

from . import checkpoint as C
from . import metrics as X
from . import pipeline as P
from .model import ConfigError


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="JSON experiment config (defaults baked in otherwise)")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", metavar="DIR", help="override the run directory")
    common.add_argument("--resume", action="store_true",
                        help="skip phases whose artifacts already exist")
    return common


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="navdistill",
        description="Two-stage distillation of a dual-scale graph navigator.")
    common = _common()
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-world", parents=[common],
                   help="generate the world and episode artifacts")
    sub.add_parser("train-teacher", parents=[common],
                   help="train the teacher on the generated world")
    sub.add_parser("distill-pretrain", parents=[common],
                   help="stage-1 distillation (feature pre-training)")
    sub.add_parser("distill-finetune", parents=[common],
                   help="stage-2 distillation (policy fine-tuning)")
    sub.add_parser("eval", parents=[common],
                   help="evaluate teacher and student on both splits")
    bench = sub.add_parser("bench", parents=[common],
                           help="single-threaded rollout latency benchmark")
    bench.add_argument("--episodes", type=int, default=50)
    bench.add_argument("--repeats", type=int, default=1)
    ablate = sub.add_parser("ablate", parents=[common],
                            help="stage-ablation study over several seeds")
    ablate.add_argument("--arm", default="all",
                        choices=sorted(P.ARMS) + ["all"])
    sub.add_parser("sweep", parents=[common],
                   help="KD-weight and objective-subset sweeps")
    sub.add_parser("run", parents=[common],
                   help="full five-phase pipeline in one go")
    return ap


STEP_PHASES = {"gen-world": "worlds", "train-teacher": "teacher",
               "distill-pretrain": "student_pretrain",
               "distill-finetune": "student_finetune"}


def _load_config(args) -> P.ExperimentConfig:
    if args.config:
        cfg = P.load_config(args.config)
    elif args.command in ("ablate", "sweep"):
        cfg = P.ablation_config()
    else:
        cfg = P.default_config()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg.validate()


def _print_eval(summary: dict):
    for split, models in sorted(summary.get("splits", {}).items()):
        for model, m in sorted(models.items()):
            print(f"{split:10s} {model:8s} sr={m['sr']:.4f} spl={m['spl']:.4f} "
                  f"rgs={m['rgs']:.4f} rgspl={m['rgspl']:.4f}")
    params = summary.get("params", {})
    if "ratio" in params:
        print(f"params     student/teacher = {params['student']}/{params['teacher']}"
              f" = {params['ratio']:.5f}")


def _cmd_step(cfg, args) -> int:
    phase = STEP_PHASES[args.command]
    ran = P.run_phase(cfg, cfg.out_dir, phase, resume=args.resume)
    print(f"{phase}: {'done' if ran else 'already complete, skipped'}")
    return 0


def _cmd_eval(cfg, args) -> int:
    P.run_phase(cfg, cfg.out_dir, "eval", resume=args.resume)
    _, summary_path = P.export_metrics(cfg.out_dir)
    with open(summary_path) as fh:
        _print_eval(json.load(fh))
    return 0


def _cmd_bench(cfg, args) -> int:
    data = P.load_world_artifacts(cfg, cfg.out_dir)
    teacher = P._load_teacher(cfg, cfg.out_dir)
    student_path = os.path.join(cfg.out_dir, "checkpoints", "student.ckpt")
    if not os.path.exists(student_path):
        raise P.PhaseError(f"missing {student_path}; run distill-finetune first")
    student, _ = C.load_model(student_path, cfg.student)
    student.freeze()
    episodes = data["val_seen"][:args.episodes]
    report = X.compare_latency(teacher, student, episodes, data["g"],
                               repeats=args.repeats, t_max=cfg.train.t_max)
    path = os.path.join(cfg.out_dir, "bench.json")
    with open(path, "w") as fh:
        fh.write(json.dumps(report, indent=2, sort_keys=True))
    n = len(report["teacher"]["per_episode_ms"])
    print(f"teacher median {report['teacher']['median_ms']:.2f} ms, "
          f"student median {report['student']['median_ms']:.2f} ms, "
          f"speedup {report['speedup']:.2f}x (n={n})")
    print(f"wrote {path}")
    return 0


def _cmd_ablate(cfg, args) -> int:
    arms = None if args.arm == "all" else args.arm
    res = P.run_ablation(cfg, arms=arms)
    for entry in res["table"]:
        print(f"{entry['arm']:14s} sr={entry['mean_sr']:.4f}±{entry['std_sr']:.4f} "
              f"spl={entry['mean_spl']:.4f}±{entry['std_spl']:.4f} (n={entry['n']})")
    print(f"teacher checkpoint sha256 {res['teacher_digest'][:12]}…")
    return 0


def _cmd_sweep(cfg, args) -> int:
    res = P.run_sweep(cfg)
    for row in res["rows"]:
        print(f"{row['sweep']:9s} {row['arm']:12s} w={row['kd_weight']:<5g} "
              f"sr={row['sr']:.4f} spl={row['spl']:.4f}")
    print(f"pretrain checkpoint sha256 {res['pretrain_digest'][:12]}…")
    return 0


def _cmd_run(cfg, args) -> int:
    res = P.run_pipeline(cfg, resume=args.resume)
    print(f"phases run: {', '.join(res['phases_run']) or 'none'}")
    if res["phases_skipped"]:
        print(f"phases skipped: {', '.join(res['phases_skipped'])}")
    _print_eval(res["summary"])
    if res["latency"]:
        print(f"latency speedup {res['latency']['speedup']:.2f}x "
              f"(see {res['out_dir']}/bench.json)")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command in STEP_PHASES:
            return _cmd_step(cfg, args)
        handler = {"eval": _cmd_eval, "bench": _cmd_bench, "ablate": _cmd_ablate,
                   "sweep": _cmd_sweep, "run": _cmd_run}[args.command]
        return handler(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary maps to exit code
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
