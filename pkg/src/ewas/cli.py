"""Command-line entry point: train, eval, ablate, export-activations.

Every command validates its config fully before doing work, writes a
resolved-config snapshot into the output directory, and never mutates
its input files. Exit codes: 0 success, 1 usage or config error,
2 runtime abort (non-finite loss), 3 IO or checkpoint error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .analysis import ActivationStats, export_stats
from .attacks import pgd
from .config import RunConfig, load_run_config
from .errors import CheckpointError, ConfigError, DataFormatError, TrainingDivergedError
from .models import load_checkpoint
from .tensor import no_grad
from .training import evaluate, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ABORT = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise SystemExit((EXIT_USAGE, f"error: {message}"))


def _prepare_out(cfg: RunConfig, out_override: str | None) -> Path:
    out_dir = Path(out_override) if out_override else Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(cfg.snapshot_json() + "\n")
    return out_dir


def _train_one(cfg: RunConfig, out_dir: Path):
    if cfg.train is None:
        raise ConfigError("train: required section is missing")
    model = cfg.model.build(cfg.seed)
    train_set = cfg.data.load("train", cfg.seed)
    return train(model, train_set, cfg.train, out_dir=out_dir,
                 config_digest=cfg.digest())


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    out_dir = _prepare_out(cfg, args.out)
    _train_one(cfg, out_dir)
    print(f"wrote {out_dir / 'checkpoint.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    out_dir = _prepare_out(cfg, args.out)
    model = load_checkpoint(args.checkpoint)
    test_set = cfg.data.load("test", cfg.seed)
    report = evaluate(model, test_set, list(cfg.attack_presets.values()))
    report.write_csv(out_dir / "eval.csv")
    print(f"wrote {out_dir / 'eval.csv'}")
    return EXIT_OK


def _parse_values(axis: str, raw: str) -> list:
    vals = [v.strip() for v in raw.split(",") if v.strip()]
    if not vals:
        raise ConfigError("--values: at least one value is required")
    if axis == "position":
        return vals
    try:
        return [float(v) for v in vals]
    except ValueError as exc:
        raise ConfigError(f"--values: expected numbers for axis {axis!r}: {exc}") from exc


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    if args.axis not in ("lambda", "position", "attack_lambda"):
        raise ConfigError(f"--axis: must be lambda|position|attack_lambda, got {args.axis!r}")
    values = _parse_values(args.axis, args.values)
    out_dir = _prepare_out(cfg, args.out)
    if cfg.train is None:
        raise ConfigError("train: required section is missing")
    preset_names = sorted(cfg.attack_presets)
    rows = []

    if args.axis == "attack_lambda":
        # one checkpoint, sweep only the evaluation attack's lambda
        if args.checkpoint:
            model = load_checkpoint(args.checkpoint)
        else:
            model, _ = _train_one(cfg, out_dir)
        test_set = cfg.data.load("test", cfg.seed)
        for v in values:
            attacks = [replace(cfg.attack_presets[n], lambda_attack=v)
                       for n in preset_names]
            report = evaluate(model, test_set, attacks)
            rows.append([v, report.natural_acc]
                        + [r.robust_acc for r in report.rows])
    else:
        test_set = cfg.data.load("test", cfg.seed)
        for v in values:
            point = cfg.train
            point_model_section = cfg.model
            if args.axis == "lambda":
                point = replace(cfg.train, lam=v,
                                attack=replace(cfg.train.attack, lambda_attack=v))
            else:  # position
                point_model_section = replace(cfg.model, insertion_points=(v,))
            model = point_model_section.build(cfg.seed)
            train_set = cfg.data.load("train", cfg.seed)
            sub_dir = out_dir / f"{args.axis}_{v}"
            sub_dir.mkdir(parents=True, exist_ok=True)
            train(model, train_set, point, out_dir=sub_dir, config_digest=cfg.digest())
            report = evaluate(model, test_set,
                              [cfg.attack_presets[n] for n in preset_names])
            rows.append([v, report.natural_acc]
                        + [r.robust_acc for r in report.rows])

    table = out_dir / "ablation.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([args.axis, "natural_acc"] + preset_names)
        for row in rows:
            w.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])
    print(f"wrote {table}")
    return EXIT_OK


def _collect_activations(model, images, labels, layer: str) -> list[np.ndarray]:
    acts = []
    batch = 64
    for start in range(0, len(images), batch):
        xb = images[start:start + batch]
        yb = labels[start:start + batch]
        with no_grad():
            out = model.forward(xb, labels=yb, train=False,
                                mask_mode="inference", capture=(layer,))
        acts.extend(np.asarray(a) for a in out.captured[layer].data)
    return acts


def cmd_export_activations(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    if cfg.analysis is None:
        raise ConfigError("analysis: required section is missing for export-activations")
    out_dir = _prepare_out(cfg, args.out)
    model = load_checkpoint(args.checkpoint)
    layer = cfg.analysis.layer
    if layer not in model.insertion_points():
        raise ConfigError(
            f"analysis.layer: unknown hook {layer!r}; valid hooks: "
            f"{', '.join(model.insertion_points())}"
        )
    dataset = cfg.data.load(cfg.analysis.split, cfg.seed)
    keep = dataset.labels == cfg.analysis.class_label
    images, labels = dataset.images[keep], dataset.labels[keep]
    if len(images) == 0:
        raise ConfigError(
            f"analysis.class_label: no {cfg.analysis.split} samples of class "
            f"{cfg.analysis.class_label}"
        )
    natural = ActivationStats.collect(
        _collect_activations(model, images, labels, layer),
        cfg.analysis.class_label, "natural", cfg.analysis.scope,
    )
    adversarial = None
    if cfg.analysis.attack is not None:
        acfg = cfg.attack_presets[cfg.analysis.attack]
        adv_images = np.concatenate([
            pgd(model, images[s:s + 64], labels[s:s + 64],
                replace(acfg, seed=acfg.seed + i)).x_adv
            for i, s in enumerate(range(0, len(images), 64))
        ])
        adversarial = ActivationStats.collect(
            _collect_activations(model, adv_images, labels, layer),
            cfg.analysis.class_label, "adversarial", cfg.analysis.scope,
        )
    path = out_dir / "activations.csv"
    export_stats(natural, adversarial, path, layer)
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ewas", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint path")

    common(sub.add_parser("train", help="adversarially train a model"))
    common(sub.add_parser("eval", help="evaluate a checkpoint under attack presets"),
           checkpoint=True)
    ablate = sub.add_parser("ablate", help="sweep lambda, position, or attack lambda")
    common(ablate)
    ablate.add_argument("--axis", required=True,
                        choices=("lambda", "position", "attack_lambda"))
    ablate.add_argument("--values", required=True,
                        help="comma-separated sweep values")
    ablate.add_argument("--checkpoint", default=None,
                        help="reuse a trained checkpoint (attack_lambda axis)")
    common(sub.add_parser("export-activations",
                          help="export per-channel activation statistics"),
           checkpoint=True)
    return parser


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export-activations": cmd_export_activations,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except SystemExit as exc:  # raised by _Parser.error
        if isinstance(exc.code, tuple):
            code, message = exc.code
            print(message, file=sys.stderr)
            return code
        return EXIT_USAGE if exc.code else EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (CheckpointError, DataFormatError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
