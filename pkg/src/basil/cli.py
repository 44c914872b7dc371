"""Command-line surface: `basil synth | run | report`.

Exit codes: 0 success, 1 runtime fault, 2 usage/config error. A TOML
config file can supply any run option; command-line flags win.
"""

from __future__ import annotations

import argparse
import json
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path

from .orderings import OrderingKind, save_embeddings, save_manifest, synth_dataset
from .report import generate_report
from .runner import ExperimentConfig, SynthSpec, run_experiment
from .trainer import Mode, ReplacementPolicy, ReplayStrategy, TrainerConfig


class UsageError(ValueError):
    pass


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="basil",
        description="Streaming class-incremental learning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic embedding dataset")
    p_synth.add_argument("--classes", type=int, default=10)
    p_synth.add_argument("--instances", type=int, default=3)
    p_synth.add_argument("--frames", type=int, default=200)
    p_synth.add_argument("--dim", type=int, default=32)
    p_synth.add_argument("--drift", type=float, default=0.2)
    p_synth.add_argument("--noise", type=float, default=0.5)
    p_synth.add_argument("--class-sep", type=float, default=2.0)
    p_synth.add_argument("--spread", type=float, default=0.5,
                         help="instance spread around the class center")
    p_synth.add_argument("--momentum", type=float, default=0.9,
                         help="random-walk momentum of the frame trajectory")
    p_synth.add_argument("--test-frames", type=int, default=None)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--force", action="store_true",
                         help="overwrite existing output files")

    p_run = sub.add_parser("run", help="run the streaming protocol")
    p_run.add_argument("--config", help="TOML config file; flags override it")
    p_run.add_argument("--run-id")
    p_run.add_argument("--data", help="directory produced by `basil synth`")
    p_run.add_argument("--ordering",
                       choices=[k.value for k in OrderingKind])
    p_run.add_argument("--mode", choices=[m.value for m in Mode])
    p_run.add_argument("--replay", choices=[s.value for s in ReplayStrategy])
    p_run.add_argument("--replace", choices=[p.value for p in ReplacementPolicy])
    p_run.add_argument("--lambda1", type=float)
    p_run.add_argument("--lambda2", type=float)
    p_run.add_argument("--buffer", type=int)
    p_run.add_argument("--lr", type=float)
    p_run.add_argument("--hidden", help="comma-separated hidden layer sizes")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--seeds", help="comma-separated list of seeds")
    p_run.add_argument("--jobs", type=int)
    p_run.add_argument("--resume", action="store_true")
    p_run.add_argument("--out", required=True)

    p_report = sub.add_parser("report", help="summarize result CSVs")
    p_report.add_argument("--results", required=True,
                          help="directory containing results_*.csv")
    p_report.add_argument("--out", help="report output directory "
                                        "(default: RESULTS/report)")
    return parser


def _parse_int_list(text: str, what: str) -> list:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise UsageError(f"bad {what} list: {text!r}")


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = ["train_manifest.json", "train_embeddings.bin",
             "test_manifest.json", "test_embeddings.bin"]
    existing = [n for n in names if (out / n).exists()]
    if existing and not args.force:
        raise UsageError(
            f"refusing to overwrite {', '.join(existing)} in {out} (use --force)")
    try:
        tm, te, sm, se = synth_dataset(
            args.classes, args.instances, args.frames, args.dim,
            args.drift, args.noise, args.seed,
            test_frames_per_instance=args.test_frames,
            class_sep=args.class_sep, instance_spread=args.spread,
            walk_momentum=args.momentum)
    except ValueError as exc:
        raise UsageError(str(exc))
    save_manifest(tm, out / "train_manifest.json")
    save_embeddings(te, out / "train_embeddings.bin")
    save_manifest(sm, out / "test_manifest.json")
    save_embeddings(se, out / "test_embeddings.bin")
    print(f"wrote {len(tm.samples)} train / {len(sm.samples)} test samples to {out}")
    return 0


def _load_config_file(path) -> dict:
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"bad config file {path}: {exc}")


def build_run_config(args) -> ExperimentConfig:
    file_cfg = _load_config_file(args.config) if args.config else {}
    known_top = {"run_id", "ordering", "seeds", "hidden_dims",
                 "classes_per_increment", "num_events", "data_dir",
                 "offline_epochs", "offline_lr", "offline_batch",
                 "eval_seed", "jobs", "trainer", "synth"}
    unknown = set(file_cfg) - known_top
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")

    trainer_kwargs = dict(file_cfg.get("trainer", {}))
    if args.mode:
        trainer_kwargs["mode"] = args.mode
    if args.replay:
        trainer_kwargs["replay_strategy"] = args.replay
    if args.replace:
        trainer_kwargs["replacement_policy"] = args.replace
    if args.lambda1 is not None:
        trainer_kwargs["lambda1"] = args.lambda1
    if args.lambda2 is not None:
        trainer_kwargs["lambda2"] = args.lambda2
    if args.buffer is not None:
        trainer_kwargs["buffer_capacity"] = args.buffer
    if args.lr is not None:
        trainer_kwargs["learning_rate"] = args.lr
    try:
        trainer = TrainerConfig(**trainer_kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad trainer config: {exc}")

    top = {k: v for k, v in file_cfg.items() if k not in ("trainer", "synth")}
    if args.run_id:
        top["run_id"] = args.run_id
    if args.ordering:
        top["ordering"] = args.ordering
    if args.data:
        top["data_dir"] = args.data
    if args.seeds:
        top["seeds"] = _parse_int_list(args.seeds, "seeds")
    elif args.seed is not None:
        top["seeds"] = [args.seed]
    if args.hidden:
        top["hidden_dims"] = _parse_int_list(args.hidden, "hidden sizes")
    if args.jobs is not None:
        top["jobs"] = args.jobs

    synth = None
    if "data_dir" not in top or top.get("data_dir") is None:
        top.pop("data_dir", None)
        try:
            synth = SynthSpec(**file_cfg.get("synth", {}))
        except TypeError as exc:
            raise UsageError(f"bad [synth] config: {exc}")
    top.setdefault("run_id", "run")
    try:
        return ExperimentConfig(trainer=trainer, synth=synth, **top)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad run config: {exc}")


def cmd_run(args) -> int:
    cfg = build_run_config(args)
    if cfg.data_dir is not None and not Path(cfg.data_dir).is_dir():
        raise UsageError(f"data directory not found: {cfg.data_dir}")
    summary = run_experiment(cfg, args.out, resume=args.resume)
    print(json.dumps(summary, sort_keys=True, indent=1))
    return 0


def cmd_report(args) -> int:
    out = args.out if args.out else str(Path(args.results) / "report")
    written = generate_report(args.results, out)
    for path in written:
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {"synth": cmd_synth, "run": cmd_run, "report": cmd_report}
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"fault: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
