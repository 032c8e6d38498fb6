"""Command-line entry point.

One strict JSON config document drives every command; unknown keys are
rejected so archived configs replay exactly. Command-line flags override
config values. Exit codes are stable for scripting: 0 success, 2 usage or
config error, 3 corrupted artifact, 4 non-finite numerics.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import adapters, data, evaluation, model, training
from .errors import (
    ConfigError,
    CorruptionError,
    LrclError,
    NumericError,
)
from .tensor_core import Rng

log = logging.getLogger("lrcl")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CORRUPTION = 3
EXIT_NUMERIC = 4

_SYNTH_DEFAULTS = {
    "n_classes": 6,
    "windows_per_class": 100,
    "window_len": 60,
    "sample_rate_hz": 30.0,
    "noise_sigma": 0.1,
    "phase_jitter": 0.3,
    "amplitude_jitter": 0.25,
    "null_amplitude": 0.25,
    "subjects": 4,
    "mirror": [-1.0, 1.0, 1.0],
    "seed": 0,
}

_PRETRAIN_DEFAULTS = {
    "batch_size": 64,
    "temperature": 0.05,
    "base_lr": 0.004,
    "epochs": 200,
    "seed": 0,
    "momentum": 0.0,
    "simclr_side": "left",
}

_FINETUNE_DEFAULTS = {
    "lr": 0.0001,
    "epochs": 50,
    "patience": 5,
    "batch_size": 64,
    "seed": 0,
    "freeze_policy": "last_conv",
    "input_policy": "both",
    "labels_per_class": None,
    "checkpoint": None,
}

_EVAL_DEFAULTS = {
    "side": "left",
    "repeats": 10,
    "seeds": None,
    "counts": [1, 5, 10, 50, 100],
    "batch_sizes": [16, 32, 64, 128],
    "latent_sizes": [32, 64, 96, 128],
    "latent_size": 96,
    "checkpoint": None,
}

_DATA_DEFAULTS = {
    "path": None,
    "val_path": None,
    "test_path": None,
    "synth": _SYNTH_DEFAULTS,
    "adapter": None,  # validated per adapter kind
}

CONFIG_DEFAULTS = {
    "data": _DATA_DEFAULTS,
    "pretrain": _PRETRAIN_DEFAULTS,
    "finetune": _FINETUNE_DEFAULTS,
    "eval": _EVAL_DEFAULTS,
    "output": {"directory": "out"},
}


def _merge_strict(defaults: dict, doc: dict, path: str) -> dict:
    out = {}
    for key, value in doc.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key '{path}{key}'")
        base = defaults[key]
        if isinstance(base, dict) and key != "adapter":
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{path}{key}' must be an object")
            out[key] = _merge_strict(base, value, f"{path}{key}.")
        else:
            out[key] = value
    for key, base in defaults.items():
        if key not in out:
            out[key] = {k: v for k, v in base.items()} if isinstance(base, dict) else base
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return _merge_strict(CONFIG_DEFAULTS, {}, "")
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    return _merge_strict(CONFIG_DEFAULTS, doc, "")


def _config_help() -> str:
    lines = ["config keys and defaults:"]
    for section, defaults in CONFIG_DEFAULTS.items():
        for key, value in defaults.items():
            if isinstance(value, dict):
                for sub, subval in value.items():
                    lines.append(f"  {section}.{key}.{sub} = {subval!r}")
            else:
                lines.append(f"  {section}.{key} = {value!r}")
    return "\n".join(lines)


def _apply_overrides(cfg: dict, args: argparse.Namespace) -> None:
    """Flags win over the config document."""
    mapping = [
        ("seed", "pretrain", "seed"),
        ("seed", "finetune", "seed"),
        ("seed", "data", ("synth", "seed")),
        ("epochs", "pretrain", "epochs"),
        ("epochs", "finetune", "epochs"),
        ("batch_size", "pretrain", "batch_size"),
        ("batch_size", "finetune", "batch_size"),
        ("temperature", "pretrain", "temperature"),
        ("lr", "pretrain", "base_lr"),
        ("lr", "finetune", "lr"),
        ("labels_per_class", "finetune", "labels_per_class"),
        ("side", "eval", "side"),
        ("checkpoint", "finetune", "checkpoint"),
        ("checkpoint", "eval", "checkpoint"),
    ]
    for flag, section, key in mapping:
        value = getattr(args, flag, None)
        if value is None:
            continue
        if isinstance(key, tuple):
            cfg[section][key[0]][key[1]] = value
        else:
            cfg[section][key] = value


def _outdir(cfg: dict, args: argparse.Namespace) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else Path(cfg["output"]["directory"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _synth_config(doc: dict) -> tuple[data.SynthConfig, int]:
    doc = dict(doc)
    seed = int(doc.pop("seed"))
    doc["mirror"] = tuple(doc["mirror"])
    return data.SynthConfig(**doc), seed


def _require_dataset(cfg: dict, key: str) -> data.WindowedDataset:
    path = cfg["data"][key]
    if path is None:
        raise ConfigError(f"data.{key} must point to a canonical dataset file")
    return data.read_canonical(path)


def _pretrain_config(cfg: dict) -> training.PretrainConfig:
    return training.PretrainConfig(**cfg["pretrain"])


def _finetune_config(cfg: dict) -> training.FinetuneConfig:
    doc = {k: v for k, v in cfg["finetune"].items()
           if k not in ("labels_per_class", "checkpoint")}
    return training.FinetuneConfig(**doc)


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    synth_cfg, seed = _synth_config(cfg["data"]["synth"])
    dataset = data.synth_generate(synth_cfg, Rng(seed))
    out = Path(args.out) if args.out else _outdir(cfg, args) / "synth.lrw"
    out.parent.mkdir(parents=True, exist_ok=True)
    data.write_canonical(dataset, out)
    print(f"wrote {out}: {len(dataset)} pairs, {dataset.n_classes} classes, "
          f"T={dataset.window_len}")
    return EXIT_OK


def cmd_ingest(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    adapter = cfg["data"]["adapter"]
    if not isinstance(adapter, dict) or "kind" not in adapter:
        raise ConfigError("data.adapter must be an object with a 'kind'")
    doc = {k: v for k, v in adapter.items() if k != "kind"}
    if adapter["kind"] == "mmfit":
        splits = adapters.adapt_mmfit(adapters.mmfit_config_from_json(doc))
    elif adapter["kind"] == "opportunity":
        splits = adapters.adapt_opportunity(adapters.opportunity_config_from_json(doc))
    else:
        raise ConfigError(f"unknown adapter kind {adapter['kind']!r}")
    out = _outdir(cfg, args)
    manifest = {}
    for role, dataset in splits.items():
        path = out / f"{role}.lrw"
        data.write_canonical(dataset, path)
        manifest[role] = {
            "path": path.name,
            "pairs": len(dataset),
            "subjects": dataset.subjects().tolist(),
            "provenance": dataset.provenance,
        }
        print(f"wrote {path}: {len(dataset)} pairs")
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2)
    )
    return EXIT_OK


def _run_pretrain(args: argparse.Namespace, simclr: bool) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    dataset = _require_dataset(cfg, "path")
    p_cfg = _pretrain_config(cfg)
    root = Rng(p_cfg.seed)
    encoder = model.init_encoder(root.derive(3))
    head = model.init_head(root.derive(3).derive(1),
                           latent_size=int(cfg["eval"]["latent_size"]))
    if simclr:
        _, _, trace = training.pretrain_simclr(dataset, encoder, head, p_cfg)
    else:
        _, _, trace = training.pretrain_lr_ssl(dataset, encoder, head, p_cfg)
    out = _outdir(cfg, args)
    ckpt_path = out / "checkpoint.lrck"
    model.save_checkpoint(
        ckpt_path,
        config={"pretrain": dataclasses.asdict(p_cfg),
                "method": "simclr_rotation" if simclr else "left_right"},
        seed=p_cfg.seed,
        encoder=encoder,
        head=head,
    )
    trace.to_csv(out / "pretrain_loss.csv")
    print(f"wrote {ckpt_path} and pretrain_loss.csv "
          f"(final epoch loss {trace.epoch_means[-1]:.4f})")
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace) -> int:
    return _run_pretrain(args, simclr=False)


def cmd_pretrain_simclr(args: argparse.Namespace) -> int:
    return _run_pretrain(args, simclr=True)


def _evaluate_and_write(encoder, classifier, test_set, cfg, out, seed,
                        best_epoch, echo) -> None:
    report = evaluation.evaluate(
        encoder, classifier, test_set, cfg["eval"]["side"], seed=seed, config=echo
    )
    report.best_epoch = best_epoch
    (out / "report.json").write_text(report.to_json())
    report.confusion.to_csv(out / "confusion.csv")
    print(f"accuracy {report.accuracy:.4f}  macro_f1 {report.macro_f1:.4f}  "
          f"weighted_f1 {report.weighted_f1:.4f}")


def cmd_finetune(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    ckpt_path = cfg["finetune"]["checkpoint"]
    if ckpt_path is None:
        raise ConfigError("finetune.checkpoint must name a pretrained checkpoint")
    ckpt = model.load_checkpoint(ckpt_path)
    if ckpt.encoder is None:
        raise ConfigError(f"{ckpt_path} holds no encoder to finetune")
    train_set = _require_dataset(cfg, "path")
    val_set = _require_dataset(cfg, "val_path")
    test_set = _require_dataset(cfg, "test_path")
    if ckpt.classifier is not None and ckpt.classifier.n_classes != train_set.n_classes:
        raise ConfigError(
            f"checkpoint classifier has {ckpt.classifier.n_classes} classes, "
            f"dataset has {train_set.n_classes}"
        )
    f_cfg = _finetune_config(cfg)
    labels_per_class = cfg["finetune"]["labels_per_class"]
    if labels_per_class is not None:
        train_set = data.subsample_labels(
            train_set, int(labels_per_class), Rng(f_cfg.seed).derive(5)
        )
    encoder = model.copy_encoder(ckpt.encoder)
    classifier = model.init_classifier(Rng(f_cfg.seed).derive(3), train_set.n_classes)
    _, _, trace, best_epoch = training.finetune(
        encoder, classifier, train_set, val_set, f_cfg
    )
    out = _outdir(cfg, args)
    echo = {"finetune": dataclasses.asdict(f_cfg),
            "labels_per_class": labels_per_class, "pretrained": str(ckpt_path)}
    model.save_checkpoint(out / "model.lrck", config=echo, seed=f_cfg.seed,
                          encoder=encoder, classifier=classifier)
    trace.to_csv(out / "finetune_loss.csv")
    _evaluate_and_write(encoder, classifier, test_set, cfg, out, f_cfg.seed,
                        best_epoch, echo)
    return EXIT_OK


def cmd_supervised(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    train_set = _require_dataset(cfg, "path")
    val_set = _require_dataset(cfg, "val_path")
    test_set = _require_dataset(cfg, "test_path")
    f_cfg = _finetune_config(cfg)
    labels_per_class = cfg["finetune"]["labels_per_class"]
    if labels_per_class is not None:
        train_set = data.subsample_labels(
            train_set, int(labels_per_class), Rng(f_cfg.seed).derive(5)
        )
    f_cfg = dataclasses.replace(f_cfg, freeze_policy="none")
    encoder, classifier, trace, best_epoch = training.train_supervised(
        train_set, val_set, f_cfg
    )
    out = _outdir(cfg, args)
    echo = {"supervised": dataclasses.asdict(f_cfg),
            "labels_per_class": labels_per_class}
    model.save_checkpoint(out / "model.lrck", config=echo, seed=f_cfg.seed,
                          encoder=encoder, classifier=classifier)
    trace.to_csv(out / "supervised_loss.csv")
    _evaluate_and_write(encoder, classifier, test_set, cfg, out, f_cfg.seed,
                        best_epoch, echo)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    ckpt_path = cfg["eval"]["checkpoint"]
    if ckpt_path is None:
        raise ConfigError("eval.checkpoint must name a finetuned model")
    ckpt = model.load_checkpoint(ckpt_path)
    if ckpt.encoder is None or ckpt.classifier is None:
        raise ConfigError(f"{ckpt_path} does not hold an encoder+classifier model")
    test_set = (_require_dataset(cfg, "test_path")
                if cfg["data"]["test_path"] else _require_dataset(cfg, "path"))
    if ckpt.classifier.n_classes != test_set.n_classes:
        raise ConfigError(
            f"checkpoint classifier has {ckpt.classifier.n_classes} classes, "
            f"dataset has {test_set.n_classes}"
        )
    out = _outdir(cfg, args)
    _evaluate_and_write(ckpt.encoder, ckpt.classifier, test_set, cfg, out,
                        ckpt.seed, None, ckpt.config)
    return EXIT_OK


def cmd_experiment(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    train_set = _require_dataset(cfg, "path")
    val_set = _require_dataset(cfg, "val_path")
    test_set = _require_dataset(cfg, "test_path")
    out = _outdir(cfg, args)
    e_cfg = cfg["eval"]
    f_cfg = _finetune_config(cfg)
    p_cfg = _pretrain_config(cfg)
    side = e_cfg["side"]
    repeats = int(e_cfg["repeats"])
    base_seed = f_cfg.seed

    if args.kind == "reduced_labels":
        ckpt_path = cfg["finetune"]["checkpoint"]
        if ckpt_path is None:
            raise ConfigError("experiment reduced_labels needs finetune.checkpoint")
        ckpt = model.load_checkpoint(ckpt_path)
        if ckpt.encoder is None:
            raise ConfigError(f"{ckpt_path} holds no encoder")
        points = evaluation.reduced_label_curve(
            ckpt.encoder, train_set, val_set, test_set, f_cfg,
            counts=tuple(int(c) for c in e_cfg["counts"]),
            repeats=repeats, seed=base_seed, side=side,
        )
        evaluation.curve_to_csv(points, out / "reduced_labels.csv")
        print(f"wrote {out / 'reduced_labels.csv'} ({len(points)} rows)")
        return EXIT_OK

    if args.kind == "sweep":
        cells = evaluation.sweep(
            train_set, val_set, test_set, p_cfg, f_cfg,
            batch_sizes=tuple(int(b) for b in e_cfg["batch_sizes"]),
            latent_sizes=tuple(int(s) for s in e_cfg["latent_sizes"]),
            repeats=repeats, seed=base_seed, side=side, jobs=args.jobs,
        )
        evaluation.sweep_to_csv(cells, out / "sweep.csv")
        print(f"wrote {out / 'sweep.csv'} ({len(cells)} cells)")
        return EXIT_OK

    if args.kind == "repeats":
        seeds = e_cfg["seeds"] or [base_seed + i for i in range(repeats)]
        reports = []
        for s in seeds:
            reports.append(
                evaluation.run_cell(train_set, val_set, test_set, p_cfg, f_cfg,
                                    int(e_cfg["latent_size"]), side, int(s))
            )
        agg = evaluation.aggregate(reports)
        with open(out / "repeats.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["metric", "mean", "std", "runs"])
            for name in evaluation.METRIC_NAMES:
                writer.writerow([name, f"{agg.mean[name]:.6f}",
                                 f"{agg.std[name]:.6f}", agg.runs])
        print(f"wrote {out / 'repeats.csv'} over {len(seeds)} seeds")
        return EXIT_OK

    raise ConfigError(f"unknown experiment kind {args.kind!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lrcl",
        description="Left-right contrastive pretraining for wearable sensors",
        epilog=_config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_help: str) -> None:
        p.add_argument("--config", help="JSON config file (defaults apply without it)")
        p.add_argument("--out", help=out_help)
        p.add_argument("--seed", type=int, help="override every seed field")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--temperature", type=float)
        p.add_argument("--lr", type=float)
        p.add_argument("--labels-per-class", dest="labels_per_class", type=int)
        p.add_argument("--side", choices=["left", "right"])
        p.add_argument("--checkpoint", help="override the checkpoint path")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel cells for experiment grids")
        p.epilog = _config_help()
        p.formatter_class = argparse.RawDescriptionHelpFormatter

    for name, fn, out_help in (
        ("synth", cmd_synth, "output dataset file (.lrw)"),
        ("ingest", cmd_ingest, "output directory for split files"),
        ("pretrain", cmd_pretrain, "output directory"),
        ("pretrain-simclr", cmd_pretrain_simclr, "output directory"),
        ("finetune", cmd_finetune, "output directory"),
        ("supervised", cmd_supervised, "output directory"),
        ("evaluate", cmd_evaluate, "output directory"),
    ):
        p = sub.add_parser(name)
        common(p, out_help)
        p.set_defaults(fn=fn)

    p = sub.add_parser("experiment")
    p.add_argument("kind", choices=["reduced_labels", "sweep", "repeats"])
    common(p, "output directory")
    p.set_defaults(fn=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("LRCL_LOG", "info").lower()
    if level not in ("error", "info", "debug"):
        print(f"LRCL_LOG must be error, info or debug, not {level!r}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=getattr(logging, level.upper()))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CorruptionError as exc:
        log.error("%s", exc)
        return EXIT_CORRUPTION
    except NumericError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except LrclError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
