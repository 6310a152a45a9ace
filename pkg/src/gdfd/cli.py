"""``gdfd`` command line: teacher training, statistics, generators, distillation and ablations.

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
errors raised while running. Everything a command writes goes under ``--out``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import checkpoint, pipeline
from .config import ConfigError, format_config, gen_train_config, loss_weights, parse_config
from .data import Dataset, image_grid, load_idx, write_image
from .distill import evaluate, write_metrics_csv
from .generators import sample_ensemble, train_generator
from .models import Classifier, Generator, LatentSpec
from .stats import ClassAssignment, extract_running_moments, group_classes, synthesize_images_direct

log = logging.getLogger("gdfd")

COMMANDS = ("train-teacher", "estimate-stats", "train-generator", "train-ensemble", "synth-direct",
            "distill", "eval", "export-samples", "ablate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers


def _datasets(args, cfg) -> tuple[Dataset, Dataset]:
    if args.train_idx:
        train = load_idx(*args.train_idx, num_classes=cfg["num_classes"], split="train")
        if not args.test_idx:
            raise UsageError("--train-idx needs --test-idx")
        test = load_idx(*args.test_idx, num_classes=cfg["num_classes"], split="test")
        return train, test
    return pipeline.make_data(cfg)


def _classes(text: Optional[str], num_classes: int) -> tuple[int, ...]:
    if not text:
        return tuple(range(num_classes))
    try:
        classes = tuple(int(c) for c in text.split(","))
    except ValueError:
        raise UsageError(f"--classes expects comma-separated integers, got {text!r}") from None
    if any(not 0 <= c < num_classes for c in classes) or len(set(classes)) != len(classes):
        raise UsageError(f"--classes must be distinct values in [0, {num_classes})")
    return classes


def _load_teacher(path: str) -> Classifier:
    model = checkpoint.load_model(path)
    if not isinstance(model, Classifier):
        raise UsageError(f"{path} does not hold a classifier")
    return model.freeze()


def _image_ext(channels: int) -> str:
    return "pgm" if channels == 1 else "ppm"


def _write_grid(images: np.ndarray, path: str) -> None:
    write_image(image_grid(images), path, _image_ext(images.shape[1]))


def _write_rows(path: str, fields: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _manifest(args, cfg, outputs: Sequence[str], summary: Optional[dict] = None) -> None:
    flags = {k: v for k, v in sorted(vars(args).items())
             if k not in ("func", "command", "out", "seed", "set", "config", "verbose")}
    doc = {"command": args.command, "seed": args.seed, "flags": flags,
           "config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()},
           "outputs": sorted(outputs)}
    if summary:
        doc["summary"] = summary
    with open(os.path.join(args.out, "run.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out(args, name: str) -> str:
    return os.path.join(args.out, name)


# ---------------------------------------------------------------- commands


def cmd_train_teacher(args, cfg):
    train, test = _datasets(args, cfg)
    teacher, history = pipeline.train_teacher(cfg, args.seed, train, test)
    acc = evaluate(teacher, test)
    checkpoint.save_model(teacher, _out(args, "teacher.gdfd"))
    write_metrics_csv(history, _out(args, "metrics.csv"))
    print(f"teacher test accuracy {acc:.4f}")
    return ["teacher.gdfd", "metrics.csv"], {"test_accuracy": acc}


def cmd_estimate_stats(args, cfg):
    teacher = _load_teacher(args.teacher)
    train = _datasets(args, cfg)[0] if cfg["stats"] == "real" else None
    assignment = group_classes(cfg["num_classes"], cfg["k"])
    outputs = []
    for g, targets in enumerate(pipeline.moment_targets(teacher, assignment, cfg, args.seed, train)):
        name = f"moments_{g:04d}.gdfd"
        checkpoint.save_moments(targets, _out(args, name))
        outputs.append(name)
    print(f"wrote {len(outputs)} {cfg['stats']} moment sets")
    return outputs, {"groups": [list(s) for s in assignment.subsets]}


def cmd_train_generator(args, cfg):
    teacher = _load_teacher(args.teacher)
    classes = _classes(args.classes, teacher.num_classes)
    if args.moments:
        targets = checkpoint.load_moments(args.moments)
    else:
        train = _datasets(args, cfg)[0] if cfg["stats"] == "real" else None
        targets = pipeline.moment_targets(teacher, ClassAssignment((classes,)), cfg, args.seed, train)[0]
    gen, history = train_generator(teacher, targets, classes, gen_train_config(cfg, args.seed),
                                   return_parts=True)
    checkpoint.save_model(gen, _out(args, "generator.gdfd"))
    checkpoint.save_moments(targets, _out(args, "moments.gdfd"))
    _write_rows(_out(args, "generator_metrics.csv"), ("step", "inceptionism", "moments", "total"),
                [dict(step=i, **row) for i, row in enumerate(history)])
    rng = np.random.default_rng([args.seed, 2])
    local = np.repeat(np.arange(len(classes)), 8)
    images = gen.forward(LatentSpec(gen.latent_dim).sample(len(local), rng), local, mode="eval").data
    grid = f"samples.{_image_ext(images.shape[1])}"
    _write_grid(images, _out(args, grid))
    agree = float(np.mean(teacher.predict(images) == np.asarray(classes)[local]))
    print(f"generator final loss {history[-1]['total']:.4f}, teacher agreement {agree:.3f}")
    return ["generator.gdfd", "moments.gdfd", "generator_metrics.csv", grid], {"teacher_agreement": agree}


def cmd_train_ensemble(args, cfg):
    teacher = _load_teacher(args.teacher)
    train = _datasets(args, cfg)[0] if cfg["stats"] == "real" else None
    ensemble = pipeline.build_ensemble(teacher, cfg, args.seed, train, workers=args.workers)
    checkpoint.save_ensemble(ensemble, _out(args, "ensemble"))
    rows = [{"generator": g, "step": i, "total": loss}
            for g, member in enumerate(ensemble.members) for i, loss in enumerate(member.history)]
    _write_rows(_out(args, "generator_metrics.csv"), ("generator", "step", "total"), rows)
    images, labels, _ = sample_ensemble(ensemble, 100, seed=[args.seed, 2])
    order = np.argsort(labels, kind="stable")
    grid = f"samples.{_image_ext(images.shape[1])}"
    _write_grid(images[order], _out(args, grid))
    agree = float(np.mean(teacher.predict(images) == labels))
    print(f"trained {ensemble.k} generators, teacher agreement {agree:.3f}")
    members = [f"ensemble/{f}" for f in sorted(os.listdir(_out(args, "ensemble")))]
    return members + ["generator_metrics.csv", grid], {"teacher_agreement": agree}


def cmd_synth_direct(args, cfg):
    teacher = _load_teacher(args.teacher)
    classes = _classes(args.classes, teacher.num_classes)
    labels = np.repeat(np.asarray(classes, dtype=np.int64), args.per_class)
    if args.moments:
        targets = checkpoint.load_moments(args.moments)
    else:
        targets = extract_running_moments(teacher)
    images, history = synthesize_images_direct(teacher, labels, targets, loss_weights(cfg),
                                               steps=cfg["synth_steps"], seed=args.seed,
                                               lr=cfg["synth_lr"], return_history=True)
    checkpoint.save_checkpoint({"images": images, "labels": labels}, _out(args, "images.gdfd"),
                               {"kind": "images"})
    _write_rows(_out(args, "synth_metrics.csv"), ("step", "loss"),
                [{"step": i, "loss": v} for i, v in enumerate(history)])
    grid = f"samples.{_image_ext(images.shape[1])}"
    _write_grid(images, _out(args, grid))
    agree = float(np.mean(teacher.predict(images) == labels))
    print(f"synthesised {len(images)} images, teacher agreement {agree:.3f}")
    return ["images.gdfd", "synth_metrics.csv", grid], {"teacher_agreement": agree}


def cmd_distill(args, cfg):
    teacher = _load_teacher(args.teacher)
    train, test = _datasets(args, cfg)
    ensemble = None
    if args.source == "ensemble":
        if not args.ensemble:
            raise UsageError("--source ensemble needs --ensemble MANIFEST")
        ensemble = checkpoint.load_ensemble(args.ensemble)
    source = pipeline.make_source(args.source, ensemble, train, teacher.input_shape)
    student, history = pipeline.distill_student(teacher, source, cfg, args.seed, test)
    acc = evaluate(student, test)
    checkpoint.save_model(student, _out(args, "student.gdfd"))
    write_metrics_csv(history, _out(args, "metrics.csv"))
    _write_rows(_out(args, "summary.csv"), ("source", "accuracy"), [{"source": args.source, "accuracy": acc}])
    print(f"student test accuracy {acc:.4f} ({args.source} source)")
    return ["student.gdfd", "metrics.csv", "summary.csv"], {"test_accuracy": acc}


def cmd_eval(args, cfg):
    model = checkpoint.load_model(args.model)
    if not isinstance(model, Classifier):
        raise UsageError(f"{args.model} does not hold a classifier")
    _, test = _datasets(args, cfg)
    acc = evaluate(model, test)
    print(f"accuracy {acc:.4f}")
    if args.out:
        _write_rows(_out(args, "eval.csv"), ("model", "accuracy"), [{"model": args.model, "accuracy": acc}])
        return ["eval.csv"], {"accuracy": acc}
    return None, None


def cmd_export_samples(args, cfg):
    if bool(args.ensemble) == bool(args.generator):
        raise UsageError("give exactly one of --ensemble or --generator")
    if args.ensemble:
        ensemble = checkpoint.load_ensemble(args.ensemble)
        images, labels, _ = sample_ensemble(ensemble, args.n, seed=args.seed)
    else:
        gen = checkpoint.load_model(args.generator)
        if not isinstance(gen, Generator):
            raise UsageError(f"{args.generator} does not hold a generator")
        rng = np.random.default_rng(args.seed)
        local = rng.integers(0, gen.num_classes, size=args.n)
        images = gen.forward(LatentSpec(gen.latent_dim).sample(args.n, rng), local, mode="eval").data
        labels = local
    order = np.argsort(labels, kind="stable")
    ext = _image_ext(images.shape[1])
    _write_grid(images[order], _out(args, f"grid.{ext}"))
    outputs = [f"grid.{ext}"]
    if args.individual:
        for i, idx in enumerate(order):
            name = f"sample_{i:04d}_class{int(labels[idx])}.{ext}"
            write_image(images[idx], _out(args, name), ext)
            outputs.append(name)
    _write_rows(_out(args, "labels.csv"), ("index", "label"),
                [{"index": i, "label": int(labels[j])} for i, j in enumerate(order)])
    print(f"exported {args.n} samples")
    return outputs + ["labels.csv"], None


def cmd_ablate(args, cfg):
    train, test = _datasets(args, cfg)
    outputs = []
    if args.teacher:
        teacher = _load_teacher(args.teacher)
    else:
        teacher, history = pipeline.train_teacher(cfg, args.seed, train, test)
        checkpoint.save_model(teacher, _out(args, "teacher.gdfd"))
        write_metrics_csv(history, _out(args, "teacher_metrics.csv"))
        outputs += ["teacher.gdfd", "teacher_metrics.csv"]
    rows = []
    for seed in range(args.seed, args.seed + args.seeds):
        if args.mode == "losses":
            rows += pipeline.ablate_losses(teacher, cfg, seed, train, test)
        else:
            rows += pipeline.ablate_generators(teacher, cfg, seed, train, test)
    _write_rows(_out(args, "summary.csv"), ("variant", "seed", "accuracy"), rows)
    for row in rows:
        print(f"{row['variant']:>8} seed {row['seed']}: {row['accuracy']:.4f}")
    return outputs + ["summary.csv"], {"rows": rows}


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--out", required=out_required, metavar="DIR", help="directory for every output file")
    p.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
    p.add_argument("--config", metavar="FILE", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable, wins over --config")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train-idx", nargs=2, metavar=("IMAGES", "LABELS"),
                   help="IDX training pair instead of the procedural dataset")
    p.add_argument("--test-idx", nargs=2, metavar=("IMAGES", "LABELS"), help="IDX test pair")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gdfd", description="Data-free knowledge distillation with conditional generators.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train-teacher", help="train the teacher classifier with labels")
    _common(p)
    _data_flags(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("estimate-stats", help="write per-group moment targets from a teacher")
    _common(p)
    _data_flags(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.set_defaults(func=cmd_estimate_stats)

    p = sub.add_parser("train-generator", help="train one conditional generator")
    _common(p)
    _data_flags(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--classes", help="comma-separated classes served (default all)")
    p.add_argument("--moments", help="moment-target checkpoint (default: estimated per config)")
    p.set_defaults(func=cmd_train_generator)

    p = sub.add_parser("train-ensemble", help="train k generators over a class partition")
    _common(p)
    _data_flags(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--workers", type=int, default=1, help="parallel member trainings (default 1)")
    p.set_defaults(func=cmd_train_ensemble)

    p = sub.add_parser("synth-direct", help="optimise images directly against the teacher")
    _common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--classes", help="comma-separated classes (default all)")
    p.add_argument("--per-class", type=int, default=8, help="images per class (default 8)")
    p.add_argument("--moments", help="moment-target checkpoint (default: teacher running stats)")
    p.set_defaults(func=cmd_synth_direct)

    p = sub.add_parser("distill", help="distil the teacher into a student")
    _common(p)
    _data_flags(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--source", choices=("ensemble", "dataset", "noise"), default="ensemble",
                   help="where student inputs come from (default ensemble)")
    p.add_argument("--ensemble", metavar="MANIFEST", help="ensemble.json for --source ensemble")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="test accuracy of a classifier checkpoint")
    _common(p, out_required=False)
    _data_flags(p)
    p.add_argument("--model", required=True, help="classifier checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-samples", help="write generator samples as PGM/PPM")
    _common(p)
    p.add_argument("--ensemble", metavar="MANIFEST", help="ensemble.json to sample")
    p.add_argument("--generator", help="single generator checkpoint to sample")
    p.add_argument("--n", type=int, default=100, help="number of samples (default 100)")
    p.add_argument("--individual", action="store_true", help="also write one file per sample")
    p.set_defaults(func=cmd_export_samples)

    p = sub.add_parser("ablate", help="compare generator objectives or generator counts")
    _common(p)
    _data_flags(p)
    p.add_argument("--mode", choices=("losses", "generators"), required=True,
                   help="losses: CE-only / moments-only / both; generators: k = 1, K/2, K")
    p.add_argument("--teacher", help="teacher checkpoint (default: train one)")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds (default 1)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        text = ""
        if args.config:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        cfg = parse_config(text, args.set)
        if getattr(args, "workers", 1) < 1 or getattr(args, "seeds", 1) < 1 or getattr(args, "n", 1) < 1:
            raise UsageError("counts must be positive")
    except (ConfigError, UsageError, OSError) as exc:
        parser.print_usage(sys.stderr)
        print(f"gdfd: error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.out:
            os.makedirs(args.out, exist_ok=True)
        outputs, summary = args.func(args, cfg)
        if outputs is not None:
            with open(_out(args, "config.txt"), "w") as fh:
                fh.write(format_config(cfg))
            _manifest(args, cfg, list(outputs) + ["config.txt", "run.json"], summary)
    except UsageError as exc:
        print(f"gdfd: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        print(f"gdfd: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
