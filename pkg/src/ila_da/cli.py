"""Command line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import torch

from .core import ConfigError, ExperimentConfig, config_from_mapping, load_config, validate_config
from .data import DatasetNotFoundError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("ila_da")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _csv(kind):
    def parse(text: str):
        try:
            return [kind(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None
    return parse


def _add_config_flags(p: argparse.ArgumentParser, skip: Sequence[str] = ()) -> None:
    p.add_argument("--config", help="flat key = value config document")
    group = p.add_argument_group("config overrides (flag wins over file)")
    for f in fields(ExperimentConfig):
        if f.name in skip:
            continue
        group.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar="VALUE")


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return validate_config(config_from_mapping(overrides, cfg))


def _run_dir(out: Path, cfg: ExperimentConfig) -> Path:
    from .trainer import RunReport

    variant = RunReport(cfg.task, cfg.method, cfg.instance_loss, cfg.pseudo_mode, cfg.k, cfg.mu, cfg.seed,
                        cfg.fingerprint(), config=cfg.to_dict()).variant
    return out / f"{cfg.task}_{variant}_s{cfg.seed}_{cfg.fingerprint()}"


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ila-da", description="Instance-affinity domain adaptation on digit benchmarks")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fetch", help="download and checksum-verify datasets")
    p.add_argument("--datasets", type=_csv(str), default=["mnist", "usps", "svhn"])
    p.add_argument("--data-root")
    p.add_argument("--from", dest="source_dir", help="install from a local directory instead of downloading")

    p = sub.add_parser("train", help="run one configuration")
    _add_config_flags(p)
    p.add_argument("--out", default="runs")
    p.add_argument("--data-root")
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("evaluate", help="target accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"))
    p.add_argument("--data-root")

    p = sub.add_parser("ablate", help="grid of runs plus one comparative table")
    _add_config_flags(p, skip=("mu", "k", "instance_loss", "pseudo_mode", "seed"))
    p.add_argument("--mu", dest="grid_mu", type=_csv(float))
    p.add_argument("--k", dest="grid_k", type=_csv(int))
    p.add_argument("--instance-loss", dest="grid_instance_loss", type=_csv(str))
    p.add_argument("--pseudo-mode", dest="grid_pseudo_mode", type=_csv(str))
    p.add_argument("--seeds", type=_csv(int))
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--data-root")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("export-affinity", help="write affinity grids for one batch of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-seed", type=int, default=0)
    p.add_argument("--data-root")
    p.add_argument("--plot", action="store_true", help="also render a PNG (needs matplotlib)")

    p = sub.add_parser("export-embeddings", help="write source/target features for tSNE")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--per-domain", type=int, default=1000)
    p.add_argument("--data-root")
    p.add_argument("--plot", action="store_true", help="also render a tSNE PNG (needs scikit-learn, matplotlib)")

    p = sub.add_parser("report", help="aggregate run reports into a task x method table")
    p.add_argument("--runs", default="runs")
    p.add_argument("--out")
    p.add_argument("--metric", choices=("final_accuracy", "best_accuracy"), default="final_accuracy")
    return parser


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_fetch(args) -> int:
    from .data import fetch

    installed = fetch(args.datasets, root=args.data_root, source_dir=args.source_dir)
    for name, paths in installed.items():
        print(f"{name}: " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import run_experiment

    cfg = _resolve_config(args)
    run_dir = _run_dir(Path(args.out), cfg)
    report = run_experiment(cfg, run_dir=run_dir, data_root=args.data_root, resume=args.resume)
    print(f"{report.variant} {cfg.task} seed={cfg.seed}: final {100 * report.final_accuracy:.2f}% "
          f"best {100 * report.best_accuracy:.2f}%  -> {run_dir / 'report.json'}")
    return EXIT_OK


def _model_from_checkpoint(path: str):
    from .core import config_from_mapping
    from .data import task_geometry
    from .nets import DigitModel, load_checkpoint

    payload = load_checkpoint(path)
    cfg = validate_config(config_from_mapping(payload["config"]))
    side, channels = task_geometry(cfg.task, cfg.domains)
    model = DigitModel(channels, side, cfg.num_classes, method=cfg.method, seed=cfg.seed)
    model.load_state_dict(payload["params"])
    model.eval()
    return cfg, model, payload


def cmd_evaluate(args) -> int:
    from .trainer import evaluate, load_task_data

    cfg, model, payload = _model_from_checkpoint(args.checkpoint)
    if args.split:
        cfg = cfg.replace(eval_split=args.split)
    _, _, target_eval = load_task_data(cfg, args.data_root)
    acc = evaluate(model, target_eval)
    print(json.dumps({"checkpoint": args.checkpoint, "iteration": payload["iteration"],
                      "split": cfg.eval_split, "accuracy": acc}))
    return EXIT_OK


def _ablation_worker(job):
    from .trainer import run_experiment, set_single_threaded

    cfg, run_dir, data_root = job
    set_single_threaded()
    report_path = Path(run_dir) / "report.json"
    if report_path.is_file():
        from .trainer import RunReport

        existing = RunReport.load(report_path)
        if existing.status == "completed":
            return existing
    return run_experiment(cfg, run_dir=run_dir, data_root=data_root)


def ablation_configs(base: ExperimentConfig, mu=None, k=None, instance_loss=None, pseudo_mode=None,
                     seeds=None) -> list[ExperimentConfig]:
    grid = {
        "mu": mu or [base.mu],
        "k": k or [base.k],
        "instance_loss": instance_loss or [base.instance_loss],
        "pseudo_mode": pseudo_mode or [base.pseudo_mode],
        "seed": seeds or [base.seed],
    }
    keys = list(grid)
    return [validate_config(base.replace(**dict(zip(keys, combo))))
            for combo in itertools.product(*(grid[k] for k in keys))]


def cmd_ablate(args) -> int:
    from .report import ablation_table, render_ablation

    base = _resolve_config(args)
    configs = ablation_configs(base, args.grid_mu, args.grid_k, args.grid_instance_loss,
                               args.grid_pseudo_mode, args.seeds)
    out = Path(args.out)
    jobs = [(cfg, _run_dir(out, cfg), args.data_root) for cfg in configs]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            reports = list(pool.map(_ablation_worker, jobs))
    else:
        reports = [_ablation_worker(job) for job in jobs]
    table = render_ablation(ablation_table(reports))
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.md").write_text(table)
    print(table)
    return EXIT_OK


def cmd_export_affinity(args) -> int:
    from . import affinity as aff
    from .data import class_balanced_batches, random_target_batches
    from .report import export_affinity
    from .trainer import load_task_data

    cfg, model, payload = _model_from_checkpoint(args.checkpoint)
    source, target_train, _ = load_task_data(cfg, args.data_root)
    src_idx = torch.from_numpy(class_balanced_batches(source.labels.numpy(), cfg.per_class, args.batch_seed,
                                                      num_classes=cfg.num_classes).batches[0])
    tgt_idx = torch.from_numpy(random_target_batches(len(target_train), cfg.target_batch, args.batch_seed).batches[0])
    with torch.no_grad():
        f_s = model.G(source.images[src_idx])
        f_t = model.G(target_train.images[tgt_idx])
        y_s = source.labels[src_idx]
        if cfg.pseudo_mode == "knn":
            filtered, record, raw = aff.affinity_step(f_s, y_s, f_t, cfg)
        else:
            probs = torch.softmax(model.C(f_t).double(), dim=1)
            filtered, record, raw = aff.classifier_affinity_step(y_s, probs, cfg)
    step = {"filtered": filtered, "unfiltered": raw, "record": record, "source_labels": y_s}
    summary = export_affinity(step, args.out, iteration=payload["iteration"], task=cfg.task,
                              target_labels=target_train.labels[tgt_idx] if target_train.labels is not None else None)
    if args.plot:
        from .plots import plot_affinity_dir

        plot_affinity_dir(args.out, Path(args.out) / "affinity.png")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    from .report import export_embeddings
    from .trainer import load_task_data

    cfg, model, _ = _model_from_checkpoint(args.checkpoint)
    source, target_train, _ = load_task_data(cfg, args.data_root)
    gen = torch.Generator().manual_seed(0)
    pick = lambda ds: ds.subset(torch.randperm(len(ds), generator=gen)[: args.per_domain])
    rows = export_embeddings(model, [("source", pick(source)), ("target", pick(target_train))], args.out)
    if args.plot:
        from .plots import plot_tsne

        plot_tsne(args.out, Path(args.out).with_suffix(".png"))
    print(f"wrote {rows} rows to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import accuracy_table, load_reports, render_markdown

    reports = load_reports(args.runs)
    text = render_markdown(accuracy_table(reports, args.metric))
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "fetch": cmd_fetch,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "export-affinity": cmd_export_affinity,
    "export-embeddings": cmd_export_embeddings,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"ila-da: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except DatasetNotFoundError as exc:
        print(f"ila-da: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except FileNotFoundError as exc:
        print(f"ila-da: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print("ila-da: invalid configuration:\n  " + "\n  ".join(exc.errors), file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure, reported not raised
        log.exception("command failed")
        print(f"ila-da: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
