"""Command-line interface.

Exit codes: 0 success, 2 usage/config, 3 I/O, 4 numeric failure,
5 verification failure.  Settings resolve as flag > config file > default,
and the effective configuration is printed to stderr at startup.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .data import SynthConfig, export_dot, load_dataset, save_dataset, synth_generate
from .errors import (ConfigError, EvaluationError, NumericError, ParseError, TrainingError,
                     ValidationError)
from .evaluation import TASKS, EvalConfig, evaluate, format_report, image_triplets
from .experiments import ablation_grid, format_ablation_table, run_gradcheck, split_dataset
from .autodiff import no_grad
from .model import POOLING_MODES, forward
from .training import TrainConfig, fit

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4, 5
GRADCHECK_THRESHOLD = 1e-4


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # synthetic data
    images: int = 100
    min_objects: int = 3
    max_objects: int = 6
    classes: int = 6
    predicates: int = 5
    features: int = 16
    noise: float = 0.1
    ambiguity: float = 0.5
    world_seed: int = -1          # -1: same as seed
    # model and training
    hidden: int = 32
    iters: int = 2
    pooling: str = "weighted"
    lr: float = 1e-3
    epochs: int = 100
    optimizer: str = "adam"
    max_boxes: int = 128
    max_edges: int = 128
    bbox_weight: float = 1.0
    seed: int = 0
    # evaluation
    task: str = "predcls"
    holdout: float = 0.3
    top_k: int = 100
    # paths
    data: str = ""
    test_data: str = ""
    out: str = ""
    checkpoint: str = ""
    report: str = ""
    log: str = ""

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            num_images=self.images, min_objects=self.min_objects, max_objects=self.max_objects,
            num_classes=self.classes, num_predicates=self.predicates, feature_dim=self.features,
            feature_noise_sigma=self.noise, context_ambiguity=self.ambiguity, seed=self.seed,
            world_seed=None if self.world_seed < 0 else self.world_seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.lr, epochs=self.epochs, T=self.iters, pooling_mode=self.pooling,
            max_boxes=self.max_boxes, max_edges=self.max_edges, bbox_loss_weight=self.bbox_weight,
            seed=self.seed, optimizer=self.optimizer,
        )

    def tasks(self) -> tuple[str, ...]:
        names = tuple(t.strip().lower() for t in self.task.split(",") if t.strip())
        bad = [t for t in names if t not in TASKS]
        if bad or not names:
            raise ConfigError(f"unknown task name(s) {bad or self.task!r}; expected among {TASKS}")
        return names


_FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _convert(name: str, raw: str):
    typ = _FIELD_TYPES[name]
    try:
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r} as {typ.__name__}") from exc


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        parser = configparser.ConfigParser()
        try:
            with open(args.config, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file {args.config}: {exc}") from exc
        section = parser["sgmp"] if parser.has_section("sgmp") else parser.defaults()
        for key, raw in section.items():
            name = key.replace("-", "_")
            if name not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, name, _convert(name, raw))
    for name in _FIELD_TYPES:
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    return cfg


def _print_config(cmd: str, cfg: RunConfig) -> None:
    print(f"# sgmp {cmd} " + json.dumps(dataclasses.asdict(cfg), sort_keys=True), file=sys.stderr)


def _require(cfg: RunConfig, *names: str) -> None:
    for name in names:
        if not getattr(cfg, name):
            raise UsageError(f"--{name.replace('_', '-')} is required")


# -- commands -------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> int:
    _require(cfg, "out")
    ds = synth_generate(cfg.synth_config())
    save_dataset(ds, cfg.out)
    edges = sum(len(s.gt_predicates) for s in ds.samples)
    print(f"wrote {len(ds)} samples with {edges} labelled edges to {cfg.out}")
    return EXIT_OK


def _checkpoint_meta(cfg: RunConfig, ds) -> dict:
    return {
        "T": cfg.iters,
        "pooling": cfg.pooling,
        "seed": cfg.seed,
        "class_names": list(ds.vocab.class_names),
        "predicate_names": list(ds.vocab.predicate_names),
    }


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "data", "out")
    ds = load_dataset(cfg.data)
    tcfg = cfg.train_config()
    log_path = cfg.log or cfg.out + ".log.jsonl"
    with open(log_path, "w", encoding="utf-8") as log:
        def on_epoch(rec):
            log.write(rec.to_json() + "\n")
            print(f"epoch {rec.epoch}: total {rec.total:.6f}", file=sys.stderr)

        result = fit(ds.samples, tcfg, num_classes=ds.vocab.num_classes,
                     num_predicates=ds.vocab.num_predicates, hidden=cfg.hidden, on_epoch=on_epoch)
    save_checkpoint(cfg.out, result.params, _checkpoint_meta(cfg, ds))
    print(f"wrote checkpoint {cfg.out} ({result.params.num_parameters()} parameters)")
    return EXIT_OK


def _load_model_for(cfg: RunConfig, ds, args: argparse.Namespace):
    params, meta = load_checkpoint(cfg.checkpoint)
    if (list(ds.vocab.class_names) != meta.get("class_names")
            or list(ds.vocab.predicate_names) != meta.get("predicate_names")
            or params.feature_dim != ds.feature_dim):
        raise ValidationError("vocabulary or feature size of checkpoint and dataset do not match")
    # inference settings default to those the checkpoint was trained with
    T = args.iters if args.iters is not None else meta.get("T", cfg.iters)
    pooling = args.pooling if args.pooling is not None else meta.get("pooling", cfg.pooling)
    return params, T, pooling


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    _require(cfg, "data", "checkpoint")
    tasks = cfg.tasks()
    ds = load_dataset(cfg.data)
    params, T, pooling = _load_model_for(cfg, ds, args)
    reports = evaluate(ds.samples, params, EvalConfig(T=T, pooling_mode=pooling, tasks=tasks))
    text = format_report(reports, ds.vocab)
    if cfg.report:
        Path(cfg.report).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_predict(cfg: RunConfig, args: argparse.Namespace) -> int:
    _require(cfg, "data", "checkpoint", "out")
    tasks = cfg.tasks()
    ds = load_dataset(cfg.data)
    params, T, pooling = _load_model_for(cfg, ds, args)
    ecfg = EvalConfig(T=T, pooling_mode=pooling, tasks=tasks)
    dot_dir = Path(args.dot_dir) if args.dot_dir else None
    if dot_dir is not None:
        dot_dir.mkdir(parents=True, exist_ok=True)
    with open(cfg.out, "w", encoding="utf-8") as fh:
        for s in ds.samples:
            with no_grad():
                pred = forward(s, params, T, pooling)
            for task in tasks:
                ranked = image_triplets(pred, s, task, ecfg)[: cfg.top_k]
                rec = {"image_id": s.image_id, "task": task, "triplets": [
                    {"subj": t.subj, "pred": ds.vocab.predicate_names[t.pred], "obj": t.obj,
                     "subj_class": ds.vocab.class_names[t.subj_class],
                     "obj_class": ds.vocab.class_names[t.obj_class], "score": t.score,
                     "subj_box": list(t.subj_box.as_tuple()), "obj_box": list(t.obj_box.as_tuple())}
                    for t in ranked]}
                fh.write(json.dumps(rec) + "\n")
            if dot_dir is not None:
                (dot_dir / f"{s.image_id}.dot").write_text(export_dot(s, ds.vocab, pred), encoding="utf-8")
    print(f"wrote predictions for {len(ds)} images to {cfg.out}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args: argparse.Namespace) -> int:
    hidden = args.hidden if args.hidden is not None else 8
    features = args.features if args.features is not None else 6
    err, name, idx = run_gradcheck(T=cfg.iters, mode=cfg.pooling, hidden=hidden, feature_dim=features,
                                   num_classes=cfg.classes, num_predicates=cfg.predicates,
                                   seed=cfg.seed, eps=args.eps)
    ok = err < GRADCHECK_THRESHOLD
    print(f"gradcheck T={cfg.iters} pooling={cfg.pooling} hidden={hidden} features={features}: "
          f"max_rel_error={err:.3e} worst={name}[{idx}] {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_ablate(cfg: RunConfig, args: argparse.Namespace) -> int:
    _require(cfg, "data")
    ds = load_dataset(cfg.data)
    if cfg.test_data:
        train, test = ds.samples, load_dataset(cfg.test_data).samples
    else:
        train, test = split_dataset(ds.samples, cfg.holdout)
    iters = [int(x) for x in args.grid_iters.split(",")]
    modes = [m.strip() for m in args.grid_modes.split(",")]
    bad = [m for m in modes if m not in POOLING_MODES]
    if bad:
        raise ConfigError(f"unknown pooling mode(s) {bad}")
    rows = ablation_grid(train, test, cfg.train_config(), num_classes=ds.vocab.num_classes,
                         num_predicates=ds.vocab.num_predicates, hidden=cfg.hidden,
                         iters=iters, modes=modes,
                         progress=lambda r: print(f"T={r['T']} {r['pooling']}: R@100={r['r_at_100']:.4f}",
                                                  file=sys.stderr))
    table = format_ablation_table(rows)
    if cfg.out:
        Path(cfg.out).write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def cmd_export_dot(cfg: RunConfig, args: argparse.Namespace) -> int:
    _require(cfg, "data")
    ds = load_dataset(cfg.data)
    if not 0 <= args.index < len(ds):
        raise UsageError(f"--index {args.index} out of range for {len(ds)} samples")
    s = ds.samples[args.index]
    pred = None
    if cfg.checkpoint:
        params, T, pooling = _load_model_for(cfg, ds, args)
        with no_grad():
            pred = forward(s, params, T, pooling)
    text = export_dot(s, ds.vocab, pred)
    if cfg.out:
        Path(cfg.out).write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------

def _add(p: argparse.ArgumentParser, *names: str) -> None:
    for name in names:
        typ = _FIELD_TYPES[name]
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgmp", description="Scene graph inference by iterative message passing.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="INI file with an [sgmp] section")
        return p

    p = command("synth", "generate a synthetic dataset")
    _add(p, "out", "seed", "world_seed", "min_objects", "max_objects", "classes", "predicates",
         "features", "noise", "ambiguity")
    p.add_argument("--images", dest="images", type=int, default=None)

    p = command("train", "train a model and write a checkpoint")
    _add(p, "data", "out", "log", "seed", "hidden", "iters", "pooling", "lr", "epochs", "optimizer",
         "max_boxes", "max_edges", "bbox_weight")

    for name, help_text in (("eval", "evaluate a checkpoint"), ("predict", "write ranked triplets")):
        p = command(name, help_text)
        _add(p, "data", "checkpoint", "task", "report", "iters", "pooling", "out", "top_k")
        if name == "predict":
            p.add_argument("--dot-dir", default=None)

    p = command("gradcheck", "finite-difference check of the full model gradient")
    _add(p, "iters", "pooling", "hidden", "features", "seed", "classes", "predicates")
    p.add_argument("--eps", type=float, default=1e-5)

    p = command("ablate", "train/evaluate the iteration x pooling grid")
    _add(p, "data", "test_data", "holdout", "out", "seed", "hidden", "lr", "epochs", "optimizer",
         "max_boxes", "max_edges", "bbox_weight")
    p.add_argument("--grid-iters", default="0,1,2,4")
    p.add_argument("--grid-modes", default=",".join(POOLING_MODES))

    p = command("export-dot", "write a Graphviz rendering of one sample")
    _add(p, "data", "checkpoint", "out", "iters", "pooling")
    p.add_argument("--index", type=int, default=0)
    return parser


_COMMANDS = {
    "synth": lambda cfg, args: cmd_synth(cfg),
    "train": lambda cfg, args: cmd_train(cfg),
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "export-dot": cmd_export_dot,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        if cfg.pooling not in POOLING_MODES:
            raise ConfigError(f"unknown pooling mode {cfg.pooling!r}")
        _print_config(args.command, cfg)
        return _COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError, ValidationError) as exc:
        print(f"sgmp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ParseError) as exc:
        print(f"sgmp {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingError, NumericError) as exc:
        print(f"sgmp {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except EvaluationError as exc:
        print(f"sgmp {args.command}: evaluation failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
