"""Command-line pipeline: gen, train, eval, ablate, heatmap.

Every subcommand reads an optional JSON config (sections: model, train,
synth, eval), applies flag overrides on top, echoes the effective config to
run_config.json in the output directory, and is deterministic under a fixed
seed. Exit codes: 0 success, 2 usage or config error, 3 I/O error,
4 numeric failure (non-finite values).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .autodiff import NonFiniteError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .evaluation import evaluate_model, run_ablation
from .heatmap import cam, export_heatmap, gradcam, logit_heatmap, plan_tiles, tiled_heatmap, LogitHeatmap
from .model import ModelConfig, ToyBagNet
from .netpbm import NetpbmError, read_ppm
from .synthdata import CorpusError, SynthConfig, dequantize, export_corpus, generate_corpus, import_corpus
from .trainer import AblationMode, TrainConfig, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

VERBOSE_ENV = "BAGMIL_VERBOSE"


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class EvalSettings:
    folds: int = 5
    dilation_radius: float = 5.0
    iou_quantile: float = 0.9
    modes: tuple = ("joint", "sil", "mil")


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    synth: SynthConfig
    eval: EvalSettings

    def to_dict(self) -> dict:
        return {
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
            "synth": dataclasses.asdict(self.synth),
            "eval": dataclasses.asdict(self.eval),
        }


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "synth": SynthConfig,
    "eval": EvalSettings,
}


def _build_section(cls, section: str, values: dict):
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key '{section}.{key}'")
    coerced = {}
    for key, value in values.items():
        if isinstance(value, list):
            value = tuple(value)
        coerced[key] = value
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config section '{section}': {exc}") from exc


def load_run_config(config_path, overrides: dict) -> RunConfig:
    """Defaults, then JSON file values, then flag overrides; unknown keys rejected."""
    file_values = {}
    if config_path:
        try:
            file_values = json.loads(Path(config_path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {config_path} is not valid JSON: {exc}") from exc
        if not isinstance(file_values, dict):
            raise ConfigError(f"config {config_path} must be a JSON object")
        for section in file_values:
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section '{section}'")
    sections = {}
    for section, cls in _SECTIONS.items():
        merged = dict(file_values.get(section, {}))
        merged.update(overrides.get(section, {}))
        sections[section] = _build_section(cls, section, merged)
    return RunConfig(**sections)


def _echo_config(config: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(
        json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n"
    )


def _verbose() -> bool:
    return os.environ.get(VERBOSE_ENV, "") not in ("", "0")


def cmd_gen(args) -> int:
    overrides = {"synth": {}}
    for key in ("seed", "n_bags", "image_size", "patch_grid", "malignant_fraction"):
        value = getattr(args, key)
        if value is not None:
            overrides["synth"][key] = value
    config = load_run_config(args.config, overrides)
    out_dir = Path(args.out)
    _echo_config(config, out_dir)
    samples = generate_corpus(config.synth)
    export_corpus(samples, out_dir, seed=config.synth.seed, patch_grid=config.synth.patch_grid)
    n_malignant = sum(s.bag.bag_label for s in samples)
    print(f"wrote {len(samples)} bags to {out_dir} "
          f"({n_malignant} malignant, {len(samples) - n_malignant} benign)")
    return EXIT_OK


def _train_overrides(args) -> dict:
    overrides = {"train": {}, "model": {}}
    for key in ("seed", "epochs", "lambda_sil", "bags_per_step"):
        value = getattr(args, key)
        if value is not None:
            overrides["train"][key] = value
    if args.lr is not None:
        overrides["train"]["lr0"] = args.lr
    for key in ("channels", "n3", "n1"):
        value = getattr(args, key)
        if value is not None:
            overrides["model"][key] = value
    return overrides


def cmd_train(args) -> int:
    config = load_run_config(args.config, _train_overrides(args))
    out_dir = Path(args.out)
    samples = import_corpus(Path(args.corpus))
    if not samples:
        raise CorpusError(f"{args.corpus}: corpus is empty")
    _echo_config(config, out_dir)
    mode = AblationMode.from_name(args.mode)
    model = ToyBagNet(config.model, seed=config.train.seed)
    progress = None
    if _verbose():
        def progress(row):
            print(f"epoch {row.epoch}: lr={row.lr:.3g} loss={row.loss:.4f} "
                  f"bag_acc={row.bag_acc:.3f} inst_acc={row.inst_acc:.3f}", file=sys.stderr)
    result = train(model, [s.bag for s in samples], config.train, mode=mode,
                   out_dir=out_dir, progress=progress)
    if result.metrics:
        last = result.metrics[-1]
        print(f"trained {config.train.epochs} epochs ({mode.value}); "
              f"final val bag_acc={last.bag_acc:.4f} inst_acc={last.inst_acc:.4f}")
    else:
        print("trained 0 epochs; checkpoint equals initialization")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = load_run_config(args.config, {})
    out_dir = Path(args.out)
    model = load_checkpoint(args.checkpoint)
    samples = import_corpus(Path(args.corpus))
    if not samples:
        raise CorpusError(f"{args.corpus}: corpus is empty")
    _echo_config(config, out_dir)
    report = evaluate_model(model, samples,
                            dilation_radius=config.eval.dilation_radius,
                            iou_quantile=config.eval.iou_quantile)
    def fmt(v):
        return "" if v is None else f"{v:.6f}"
    lines = ["bag_acc,inst_acc_weak,inst_acc_true,pointing,iou",
             ",".join([fmt(report.bag_accuracy), fmt(report.instance_accuracy_weak),
                       fmt(report.instance_accuracy_true), fmt(report.pointing_game_hit_rate),
                       fmt(report.iou_at_threshold)])]
    (out_dir / "eval_metrics.csv").write_text("\n".join(lines) + "\n")
    print(f"bag_acc={fmt(report.bag_accuracy)} inst_acc_weak={fmt(report.instance_accuracy_weak)} "
          f"inst_acc_true={fmt(report.instance_accuracy_true)} "
          f"pointing={fmt(report.pointing_game_hit_rate)} iou={fmt(report.iou_at_threshold)}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    overrides = _train_overrides(args)
    overrides["eval"] = {}
    if args.folds is not None:
        overrides["eval"]["folds"] = args.folds
    config = load_run_config(args.config, overrides)
    out_dir = Path(args.out)
    samples = import_corpus(Path(args.corpus))
    if not samples:
        raise CorpusError(f"{args.corpus}: corpus is empty")
    _echo_config(config, out_dir)
    modes = [AblationMode.from_name(name) for name in config.eval.modes]
    result = run_ablation(samples, config.eval.folds, modes, config.model, config.train,
                          out_dir=out_dir, dilation_radius=config.eval.dilation_radius,
                          iou_quantile=config.eval.iou_quantile)
    for mode_name, metrics in result.summary.items():
        mean, std = metrics["bag_acc"]
        spread = "" if std is None else f" +- {std:.4f}"
        print(f"{mode_name}: bag_acc {mean:.4f}{spread}")
    return EXIT_OK


def cmd_heatmap(args) -> int:
    model = load_checkpoint(args.checkpoint)
    image = dequantize(read_ppm(args.image))
    rf = model.receptive_field
    if image.shape[1] < rf or image.shape[2] < rf:
        print(f"error: image {image.shape[1]}x{image.shape[2]} is smaller than the "
              f"receptive field {rf}x{rf}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    k = args.class_index
    bounds = tuple(args.bounds) if args.bounds else None
    if args.baseline == "cam":
        maps = cam(model, image, k)[None]
        hm = LogitHeatmap(maps=maps, offset=(rf - 1) // 2, class_names=[f"cam_{k}"])
        out_path = out_dir / f"cam_class{k}.pgm"
        export_heatmap(hm, 0, out_path, args.normalization, bounds)
    elif args.baseline == "gradcam":
        maps = gradcam(model, image, k)[None]
        hm = LogitHeatmap(maps=maps, offset=(rf - 1) // 2, class_names=[f"gradcam_{k}"])
        out_path = out_dir / f"gradcam_class{k}.pgm"
        export_heatmap(hm, 0, out_path, args.normalization, bounds)
    else:
        if args.tile and args.tile > 0:
            plan = plan_tiles(image.shape[1], image.shape[2], rf, tile=args.tile)
            hm = tiled_heatmap(model, image, plan)
        else:
            hm = logit_heatmap(model, image)
        out_path = out_dir / f"logit_class{k}.pgm"
        export_heatmap(hm, k, out_path, args.normalization, bounds)
    print(f"wrote {out_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bagmil",
        description="Weakly-supervised bag/patch classifier with dense logit heatmaps",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")

    p_gen = sub.add_parser("gen", help="generate a synthetic corpus",
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    add_common(p_gen)
    p_gen.add_argument("--seed", type=int, default=None, help="corpus seed (default 0)")
    p_gen.add_argument("--n-bags", dest="n_bags", type=int, default=None, help="bag count (default 400)")
    p_gen.add_argument("--image-size", dest="image_size", type=int, default=None,
                       help="square image side (default 200)")
    p_gen.add_argument("--patch-grid", dest="patch_grid", type=int, default=None,
                       help="patches per side (default 2)")
    p_gen.add_argument("--malignant-fraction", dest="malignant_fraction", type=float, default=None,
                       help="expected malignant share (default 0.5)")
    p_gen.set_defaults(func=cmd_gen)

    def add_train_flags(p):
        p.add_argument("--seed", type=int, default=None, help="training seed (default 0)")
        p.add_argument("--epochs", type=int, default=None, help="epoch count (default 30)")
        p.add_argument("--lr", type=float, default=None, help="initial learning rate (default 1e-4)")
        p.add_argument("--lambda-sil", dest="lambda_sil", type=float, default=None,
                       help="instance-loss weight (default 1.0)")
        p.add_argument("--bags-per-step", dest="bags_per_step", type=int, default=None,
                       help="bags per optimizer step (default 1)")
        p.add_argument("--channels", type=int, default=None, help="backbone width (default 64)")
        p.add_argument("--n3", type=int, default=None, help="3x3 conv layers (default 4)")
        p.add_argument("--n1", type=int, default=None, help="1x1 conv layers (default 2)")

    p_train = sub.add_parser("train", help="train on an exported corpus",
                             formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    add_common(p_train)
    p_train.add_argument("--corpus", required=True, help="corpus directory from 'gen'")
    p_train.add_argument("--mode", choices=["joint", "sil", "mil"], default="joint",
                         help="which branches to train")
    add_train_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a corpus",
                            formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--corpus", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="k-fold ablation over branch modes",
                              formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    add_common(p_ablate)
    p_ablate.add_argument("--corpus", required=True)
    p_ablate.add_argument("--folds", type=int, default=None, help="fold count (default 5)")
    add_train_flags(p_ablate)
    p_ablate.set_defaults(func=cmd_ablate)

    p_heat = sub.add_parser("heatmap", help="export a dense logit heatmap for one image",
                            formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    add_common(p_heat)
    p_heat.add_argument("--checkpoint", required=True)
    p_heat.add_argument("--image", required=True, help="input PPM image")
    p_heat.add_argument("--class", dest="class_index", type=int, default=1,
                        help="class index to render")
    p_heat.add_argument("--tile", type=int, default=0,
                        help="tile size for tiled inference; 0 = single pass")
    p_heat.add_argument("--baseline", choices=["none", "cam", "gradcam"], default="none",
                        help="render a baseline map instead of the logit map")
    p_heat.add_argument("--normalization", choices=["minmax", "fixed"], default="minmax")
    p_heat.add_argument("--bounds", type=float, nargs=2, default=None,
                        help="lo hi bounds for fixed normalization")
    p_heat.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NetpbmError, CorpusError, CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
