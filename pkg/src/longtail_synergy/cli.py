"""Command-line entry point: ``make-lt``, ``train``, ``eval`` and ``ga``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from importlib import resources
from pathlib import Path

from .config import ConfigError, ExperimentConfig, dump_config, load_config

OUTPUT_ROOT_ENV = "LTS_OUTPUT_ROOT"
log = logging.getLogger("longtail_synergy")


def bundled_configs() -> list[str]:
    root = resources.files("longtail_synergy") / "configs"
    return sorted(p.name[: -len(".yaml")] for p in root.iterdir() if p.name.endswith(".yaml"))


def resolve_config_path(name: str) -> Path:
    """A file path, or the name of a bundled config such as ``smoke``."""
    p = Path(name)
    if p.exists():
        return p
    bundled = resources.files("longtail_synergy") / "configs" / f"{name}.yaml"
    if bundled.is_file():
        return Path(str(bundled))
    raise FileNotFoundError(f"config not found: {name} (bundled: {', '.join(bundled_configs())})")


def resolve_config(args) -> tuple[ExperimentConfig, str]:
    path = resolve_config_path(args.config)
    cfg = load_config(path)
    if args.seed is not None:
        cfg = cfg.replace(train=dataclasses.replace(cfg.train, seed=args.seed),
                          ga=dataclasses.replace(cfg.ga, seed=args.seed))
    if getattr(args, "epochs", None) is not None:
        if args.epochs < 0:
            raise ConfigError("--epochs must be >= 0")
        cfg = cfg.replace(train=cfg.train.with_epochs(args.epochs))
    return cfg.validate(), path.stem


def output_dir(args, cfg: ExperimentConfig | None, name: str) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / name


def _write_meta(out: Path, command: str, started: float, extra: dict | None = None) -> None:
    # timestamps live only here so every other artifact stays byte-stable
    meta = {"command": command, "started": started, "finished": time.time(), "argv": sys.argv[1:]}
    meta.update(extra or {})
    (out / "run_meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_make_lt(args) -> int:
    from . import data as D
    from .trainer import load_source

    started = time.time()
    cfg, name = resolve_config(args)
    source, _ = load_source(cfg)
    spec = D.LongTailSpec.build(cfg.longtail.n_max, cfg.longtail.beta, source.num_classes)
    split = D.build_longtail_split(source, spec, cfg.data.split_seed, cfg.data.class_order)
    out = output_dir(args, cfg, name)
    out.mkdir(parents=True, exist_ok=True)
    manifest = D.manifest_for(split, cfg.data.split_seed, {"task": cfg.task, "root": cfg.data.root},
                              cfg.data.class_order)
    manifest.save(out / "manifest.json")
    summary = {"counts": split.class_counts(), "groups": D.group_classes(split.class_counts()).to_dict(),
               "total": len(split)}
    _write_json(out / "summary.json", summary)
    _write_meta(out, "make-lt", started)
    print(json.dumps({"manifest": str(out / "manifest.json"), **summary}, sort_keys=True))
    return 0


def _render_training(out: Path, history: list[dict]) -> None:
    from .plots import plot_accuracy, plot_losses

    plot_accuracy(history, out / "accuracy.png")
    plot_losses(history, out / "losses.png")


def cmd_train(args) -> int:
    from .trainer import build_task_data, evaluate, fit

    started = time.time()
    cfg, name = resolve_config(args)
    out = output_dir(args, cfg, name)
    data = build_task_data(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    result = fit(cfg, out, resume=args.resume, data=data)
    report = result.report or evaluate(result.state, data.test, data.image, result.state.epoch)
    (out / "report.json").write_text(report.to_json())
    _render_training(out, result.history)
    _write_meta(out, "train", started, {"checkpoint": str(result.checkpoint)})
    print(json.dumps({"out": str(out), "epoch": report.epoch, "overall_top1": report.overall_top1,
                      "group_top1": report.group_top1}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from .config import from_dict
    from .metrics import format_icd_table
    from .trainer import build_task_data, evaluate, load_checkpoint, restore_state

    started = time.time()
    ckpt = load_checkpoint(args.checkpoint)
    if args.config:
        cfg, name = resolve_config(args)
    else:
        cfg, name = from_dict(ExperimentConfig, ckpt["config"]).validate(), Path(args.checkpoint).stem
    data = build_task_data(cfg)
    counts = ckpt.get("counts") or data.counts
    if len(counts) != data.train.num_classes:
        raise ValueError(f"checkpoint has {len(counts)} classes, data has {data.train.num_classes}")
    state = restore_state(ckpt, counts, from_dict(ExperimentConfig, ckpt["config"]))
    split = {"test": data.test, "train": data.train, "val": data.val}[args.split]
    report = evaluate(state, split, data.image, state.epoch)
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent.parent / f"eval_{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    table = format_icd_table(counts, {"ICD": report.per_class_icd})
    (out / "icd_table.txt").write_text(table)
    _write_meta(out, "eval", started, {"checkpoint": str(args.checkpoint)})
    sys.stdout.write(report.to_json())
    sys.stdout.write(table)
    return 0


def cmd_ga(args) -> int:
    from . import ga
    from .plots import plot_ga_top

    started = time.time()
    eval_epochs, args.epochs = args.epochs, None  # --epochs means fine-tune length here
    cfg, name = resolve_config(args)
    gcfg = cfg.ga
    if eval_epochs is not None:
        gcfg = dataclasses.replace(gcfg, eval_epochs=eval_epochs)
    out = output_dir(args, cfg, name)
    if gcfg.surrogate == "quadratic":
        fitness = ga.quadratic_surrogate(gcfg.surrogate_optimum)
        mode = "surrogate"
    else:
        from .trainer import build_task_data

        if not gcfg.pretrained_checkpoint:
            raise ConfigError("ga.pretrained_checkpoint is required unless ga.surrogate is set")
        if not Path(gcfg.pretrained_checkpoint).exists():
            raise FileNotFoundError(f"pretrained checkpoint not found: {gcfg.pretrained_checkpoint}")
        fitness = ga.training_fitness(gcfg.pretrained_checkpoint, build_task_data(cfg),
                                      gcfg.eval_epochs, gcfg.fine_tune_lr)
        mode = "training"
    out.mkdir(parents=True, exist_ok=True)
    result = ga.search(gcfg, fitness, out / "ga_log.jsonl")
    ga.write_top_csv(result, out / "ga_top10.csv", gcfg.top_k)
    plot_ga_top([(i.alpha, i.lambda_, i.fitness) for i in result.top(gcfg.top_k)], out / "ga_top10.png")
    summary = {
        "mode": mode,
        "evaluation": "sequential",
        "best": {"alpha": result.best.alpha, "lambda": result.best.lambda_, "fitness": result.best.fitness},
        "best_per_generation": result.best_per_generation,
        "n_evaluations": len(result.records),
    }
    _write_json(out / "ga_result.json", summary)
    _write_meta(out, "ga", started)
    print(json.dumps(summary["best"], sort_keys=True))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="longtail-synergy", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="YAML file or bundled config name")
        sp.add_argument("--seed", type=int, help="override train.seed (and ga.seed)")
        sp.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<config name>)")
        sp.add_argument("--epochs", type=int, help="override train.epochs (ga: eval_epochs)")
        return sp

    common(sub.add_parser("make-lt", help="write a long-tailed split manifest")).set_defaults(fn=cmd_make_lt)
    t = common(sub.add_parser("train", help="train and evaluate"))
    t.add_argument("--resume", action="store_true", help="continue from <out>/checkpoints/last.pt")
    t.set_defaults(fn=cmd_train)
    e = common(sub.add_parser("eval", help="evaluate a checkpoint"), config_required=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("test", "train", "val"), default="test")
    e.set_defaults(fn=cmd_eval)
    common(sub.add_parser("ga", help="genetic search over (alpha, lambda)")).set_defaults(fn=cmd_ga)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a JSON error record
        code = 2 if isinstance(exc, (ConfigError, FileNotFoundError)) else 1
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        if args.verbose:
            log.exception("command failed")
        return code


if __name__ == "__main__":
    sys.exit(main())
