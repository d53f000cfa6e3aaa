"""Command line driver: train, attack, analyze, and report in one harness.

Configuration is a JSON file deep-merged over built-in defaults, with flat
flags overriding both. Every artifact embeds the same provenance triple
(build id, hash of the resolved config, seed), so a rerun with identical
inputs writes byte-identical files; nothing is overwritten without --force.

Exit codes: 0 success, 2 usage or configuration, 3 data or artifact I/O,
4 numeric failure.
"""

import argparse
import copy
import csv
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__, analysis
from .attacks import ATTACKS, GRADIENT_PRECISIONS, AttackConfig
from .checkpoint import save_checkpoint
from .data import resolve_corpus
from .defenses import (
    TEACHER_NAME,
    VARIANTS,
    ZooProtocol,
    build_zoo,
    distill,
    load_zoo,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataFormatError,
    DomainError,
    ProtocolError,
    ShapeError,
    TrainingDiverged,
)
from . import nn

SURFACE_MODES = ("gradient", "random")

DEFAULT_CONFIG = {
    "dataset": {
        "name": "auto",
        "train_count": 10000,
        "test_count": 1000,
        "seed": 101,
        "mnist_dir": None,
    },
    "protocol": {
        "temperature": 20.0,
        "widths": [8, 8, 16, 16],
        "dense": [50, 50],
        "dropout_p": 0.25,
        "seed": 0,
        "batch_size": 128,
        "epochs": 8,
        "learning_rate": 0.001,
        "squeezed_epochs": 12,
        "squeezed_learning_rate": 0.003,
    },
    "attacks": [
        {"name": "fgsm", "epsilon": 0.1},
        {"name": "tgsm", "epsilon": 0.1},
        {"name": "bim", "epsilon": 0.1},
        {"name": "bim-targeted", "epsilon": 0.1},
        {"name": "deepfool", "epsilon": 1.355},
        {"name": "cw-l2", "epsilon": 1.355},
    ],
    "pool_size": 1000,
    "target_class": 2,
    "gradient_precision": "single",
    "surface": {
        "span": 0.1,
        "steps": 41,
        "samples": 5,
        "modes": ["gradient", "random"],
        "indices": None,
    },
    "seed": 0,
    "jobs": 1,
    "out": "runs/desk",
    "force": False,
    "variant": None,
}

# Execution knobs that never change what an experiment computes; they stay
# out of the config hash so moving or parallelizing a run keeps its identity.
_UNHASHED_KEYS = ("out", "force", "jobs")


# --------------------------------------------------------------------------
# configuration


def _merge(base, override, path=""):
    """Deep-merge dict `override` into `base`, rejecting unknown keys."""
    merged = dict(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            merged[key] = _merge(base[key], value, path + key + ".")
        else:
            merged[key] = value
    return merged


def _validate(config):
    if config["jobs"] < 1:
        raise ConfigError("jobs must be at least 1")
    if config["pool_size"] < 1:
        raise ConfigError("pool_size must be at least 1")
    if config["gradient_precision"] not in GRADIENT_PRECISIONS:
        raise ConfigError(
            f"gradient_precision must be one of {GRADIENT_PRECISIONS}")
    if config["variant"] is not None and config["variant"] not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}")
    if not config["attacks"]:
        raise ConfigError("the attack list is empty")
    seen = set()
    for entry in config["attacks"]:
        if not isinstance(entry, dict) or "name" not in entry:
            raise ConfigError("each attack entry needs at least a \"name\"")
        if entry["name"] not in ATTACKS:
            raise ConfigError(
                f"unknown attack {entry['name']!r}; have {sorted(ATTACKS)}")
        entry_id = entry.get("id", entry["name"])
        if entry_id in seen:
            raise ConfigError(
                f"duplicate attack id {entry_id!r}; give repeated attacks "
                f"distinct \"id\" values")
        seen.add(entry_id)
    surface = config["surface"]
    if surface["samples"] < 1:
        raise ConfigError("surface.samples must be at least 1")
    for mode in surface["modes"]:
        if mode not in SURFACE_MODES:
            raise ConfigError(f"surface mode must be one of {SURFACE_MODES}")


def resolve_config(args):
    """Defaults <- config file <- flags, validated."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    if args.config is not None:
        try:
            with open(args.config, encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"config file {args.config} is not valid JSON: {exc}"
            ) from None
        if not isinstance(user, dict):
            raise ConfigError("the config file must hold a JSON object")
        config = _merge(config, user)
    if args.seed is not None:
        config["seed"] = args.seed
    if args.jobs is not None:
        config["jobs"] = args.jobs
    if args.out is not None:
        config["out"] = args.out
    if args.force:
        config["force"] = True
    if args.variant is not None:
        config["variant"] = args.variant
    if args.temperature is not None:
        config["protocol"]["temperature"] = args.temperature
    if args.epsilon is not None:
        for entry in config["attacks"]:
            entry["epsilon"] = args.epsilon
    if args.target_class is not None:
        config["target_class"] = args.target_class
    if args.dataset is not None:
        config["dataset"]["name"] = args.dataset
    if args.epochs is not None:
        config["protocol"]["epochs"] = args.epochs
        config["protocol"]["squeezed_epochs"] = args.epochs
    _validate(config)
    return config


def config_hash(config):
    """12-hex digest of the experiment-defining part of the config."""
    hashed = {k: v for k, v in config.items() if k not in _UNHASHED_KEYS}
    canonical = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def build_provenance(config):
    return {
        "build": f"gradmask-{__version__}",
        "config_hash": config_hash(config),
        "seed": config["seed"],
    }


# --------------------------------------------------------------------------
# shared plumbing


def _protocol_from(config):
    p = config["protocol"]
    return ZooProtocol(
        temperature=p["temperature"],
        widths=tuple(p["widths"]),
        dense=tuple(p["dense"]),
        dropout_p=p["dropout_p"],
        seed=p["seed"],
        batch_size=p["batch_size"],
        epochs=p["epochs"],
        learning_rate=p["learning_rate"],
        squeezed_epochs=p["squeezed_epochs"],
        squeezed_learning_rate=p["squeezed_learning_rate"],
    )


def _load_data(config):
    d = config["dataset"]
    return resolve_corpus(d["name"], d["seed"], d["train_count"],
                          d["test_count"], mnist_dir=d["mnist_dir"])


def _fresh(path, force):
    if os.path.exists(path) and not force:
        raise ConfigError(f"{path} already exists (use --force to overwrite)")
    return path


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _attack_entries(config):
    """(id, name, AttackConfig) triples from the config's attack list."""
    entries = []
    for entry in config["attacks"]:
        kwargs = {k: v for k, v in entry.items() if k not in ("name", "id")}
        kwargs.setdefault("gradient_precision", config["gradient_precision"])
        try:
            attack_config = AttackConfig(**kwargs)
        except TypeError as exc:
            raise ConfigError(
                f"attack {entry['name']!r}: {exc}") from None
        entries.append((entry.get("id", entry["name"]), entry["name"],
                        attack_config))
    return entries


def _zoo(config):
    zoo_dir = os.path.join(config["out"], "zoo")
    return load_zoo(zoo_dir)


def _selected_variants(config, bounded_only=False):
    if config["variant"] is not None:
        return [config["variant"]]
    if bounded_only:
        return [v for v in VARIANTS if v.startswith("squeezed")]
    return list(VARIANTS)


# --------------------------------------------------------------------------
# subcommands


def cmd_train(config):
    variant = config["variant"]
    if variant is None:
        raise ConfigError("train needs a variant (--variant or config)")
    out_dir = os.path.join(config["out"], "train")
    ckpt_path = os.path.join(out_dir, f"{variant}.ckpt")
    metrics_path = os.path.join(out_dir, f"{variant}-metrics.json")
    planned = [ckpt_path, metrics_path]
    if variant == "distilled":
        planned.append(os.path.join(out_dir, f"{TEACHER_NAME}.ckpt"))
    for path in planned:
        _fresh(path, config["force"])

    train_ds, test_ds = _load_data(config)
    protocol = _protocol_from(config)
    spec = protocol.spec_for(variant, train_ds.images.shape[1:],
                             train_ds.num_classes)
    cfg = protocol.train_config_for(variant)
    os.makedirs(out_dir, exist_ok=True)
    metrics = {
        "variant": variant,
        "seed": protocol.seed,
        "temperature": spec.train_temperature,
        "provenance": build_provenance(config),
    }
    if variant == "distilled":
        result = distill(spec, train_ds.images, train_ds.labels, cfg)
        model = result.student
        save_checkpoint(result.teacher, planned[2])
        metrics["epoch_losses"] = result.student_metrics["epoch_losses"]
        metrics["teacher"] = {
            "clean_accuracy": nn.accuracy(result.teacher, test_ds.images,
                                          test_ds.labels),
            "file": os.path.basename(planned[2]),
        }
    else:
        model, train_metrics = nn.train(spec, train_ds.images,
                                        train_ds.labels, cfg)
        metrics["epoch_losses"] = train_metrics["epoch_losses"]
    metrics["clean_accuracy"] = nn.accuracy(model, test_ds.images,
                                            test_ds.labels)
    metrics["train_accuracy"] = nn.accuracy(model, train_ds.images,
                                            train_ds.labels)
    save_checkpoint(model, ckpt_path)
    _write_json(metrics_path, metrics)
    print(f"[train] {variant}: clean accuracy "
          f"{metrics['clean_accuracy']:.4f} -> {ckpt_path}")
    return 0


def cmd_zoo(config):
    train_ds, test_ds = _load_data(config)
    zoo_dir = os.path.join(config["out"], "zoo")
    manifest, _ = build_zoo(zoo_dir, train_ds, test_ds,
                            protocol=_protocol_from(config),
                            force=config["force"],
                            provenance=build_provenance(config))
    for variant in VARIANTS:
        info = manifest["variants"][variant]
        print(f"[zoo] {variant}: test accuracy {info['test_accuracy']:.4f}")
    print(f"[zoo] manifest -> {os.path.join(zoo_dir, 'manifest.json')}")
    return 0


def cmd_attack(config):
    provenance = build_provenance(config)
    out = config["out"]
    records_dir = os.path.join(out, "records")
    report_csv = os.path.join(out, "report.csv")
    report_json = os.path.join(out, "report.json")
    _, models = _zoo(config)
    entries = _attack_entries(config)

    planned = [report_csv, report_json]
    for entry_id, _, _ in entries:
        for variant in VARIANTS:
            stem = os.path.join(records_dir, f"{variant}--{entry_id}")
            planned.extend([f"{stem}.jsonl", f"{stem}.meta.json"])
    for path in planned:
        _fresh(path, config["force"])

    _, test_ds = _load_data(config)
    os.makedirs(records_dir, exist_ok=True)
    rows = []
    sequence = 0
    for entry_id, name, attack_config in entries:
        for variant in VARIANTS:
            model = models[variant]
            evaluation = analysis.evaluate_attack(
                model, name, test_ds.images, test_ds.labels, attack_config,
                pool_size=config["pool_size"], seed=config["seed"],
                target_class=config["target_class"], model_name=variant,
                jobs=config["jobs"])
            stem = os.path.join(records_dir, f"{variant}--{entry_id}")
            evaluation.write_records(f"{stem}.jsonl")
            meta = {
                "sequence": sequence,
                "id": entry_id,
                "model": variant,
                "attack": name,
                "norm": evaluation.norm,
                "epsilon": evaluation.epsilon,
                "gradient_precision": evaluation.gradient_precision,
                "pool_seed": config["seed"],
                "target_class": (config["target_class"]
                                 if ATTACKS[name].targeted else None),
                "records_file": f"{variant}--{entry_id}.jsonl",
                "provenance": provenance,
            }
            if model.spec.head.startswith("squeezed"):
                audit = analysis.score_bound_audit(
                    model, evaluation.outcome.adversarial)
                meta["adversarial_bound_audit"] = audit.to_dict()
            _write_json(f"{stem}.meta.json", meta)
            rows.append(evaluation.summary_row())
            print(f"[attack] {entry_id} vs {variant}: "
                  f"success {evaluation.success_rate:.1%}")
            sequence += 1
    analysis.write_report(rows, report_csv, report_json,
                          provenance=provenance)
    print(f"[attack] {len(rows)} rows -> {report_csv}")
    return 0


def cmd_report(config):
    out = config["out"]
    records_dir = os.path.join(out, "records")
    if not os.path.isdir(records_dir):
        raise ConfigError(f"no records at {records_dir}; run attack first")
    metas = []
    for fname in sorted(os.listdir(records_dir)):
        if fname.endswith(".meta.json"):
            with open(os.path.join(records_dir, fname),
                      encoding="utf-8") as fh:
                metas.append(json.load(fh))
    if not metas:
        raise ConfigError(f"no attack metadata under {records_dir}")
    metas.sort(key=lambda meta: meta["sequence"])
    rows = []
    for meta in metas:
        records = analysis.read_records(
            os.path.join(records_dir, meta["records_file"]))
        row = {
            "model": meta["model"],
            "attack": meta["attack"],
            "norm": meta["norm"],
            "epsilon": meta["epsilon"],
            "gradient_precision": meta["gradient_precision"],
        }
        row.update(analysis.summary_from_records(records))
        rows.append(row)
    report_csv = _fresh(os.path.join(out, "report.csv"), config["force"])
    report_json = _fresh(os.path.join(out, "report.json"), config["force"])
    analysis.write_report(rows, report_csv, report_json,
                          provenance=build_provenance(config))
    print(f"[report] {len(rows)} rows -> {report_csv}")
    return 0


def _surface_csv(path, surface, provenance):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(analysis.provenance_comment(provenance))
        writer = csv.writer(fh)
        writer.writerow(["alpha", "beta", "loss"])
        for i, alpha in enumerate(surface.alphas):
            for j, beta in enumerate(surface.betas):
                writer.writerow([repr(float(alpha)), repr(float(beta)),
                                 repr(float(surface.values[i, j]))])


def cmd_surface(config):
    provenance = build_provenance(config)
    surf_cfg = config["surface"]
    out_dir = os.path.join(config["out"], "surface")
    _, models = _zoo(config)
    _, test_ds = _load_data(config)
    variants = _selected_variants(config)

    jobs_of = {}
    for variant in variants:
        model = models[variant]
        if surf_cfg["indices"] is not None:
            indices = []
            for index in surf_cfg["indices"]:
                if not 0 <= index < len(test_ds):
                    raise ConfigError(
                        f"surface sample index {index} out of range "
                        f"[0, {len(test_ds)})")
                indices.append(index)
        else:
            indices = analysis.select_attack_pool(
                model, test_ds.images, test_ds.labels,
                surf_cfg["samples"], seed=config["seed"]).tolist()
        jobs_of[variant] = indices
        for index in indices:
            for mode in surf_cfg["modes"]:
                stem = os.path.join(out_dir, f"{variant}-s{index}-{mode}")
                _fresh(f"{stem}.csv", config["force"])
                _fresh(f"{stem}.json", config["force"])

    os.makedirs(out_dir, exist_ok=True)
    for variant in variants:
        model = models[variant]
        for index in jobs_of[variant]:
            label = int(test_ds.labels[index])
            for mode in surf_cfg["modes"]:
                surface = analysis.loss_surface(
                    model, test_ds.images[index], label,
                    span=surf_cfg["span"], steps=surf_cfg["steps"],
                    seed=config["seed"], mode=mode)
                stem = os.path.join(out_dir, f"{variant}-s{index}-{mode}")
                _surface_csv(f"{stem}.csv", surface, provenance)
                payload = {
                    "model": variant,
                    "sample_index": index,
                    "label": label,
                    "span": surf_cfg["span"],
                    "steps": surf_cfg["steps"],
                    "value_range": float(surface.values.max()
                                         - surface.values.min()),
                    "surface": surface.to_dict(),
                    "provenance": provenance,
                }
                _write_json(f"{stem}.json", payload)
            print(f"[surface] {variant} sample {index}: "
                  f"{len(surf_cfg['modes'])} grids -> {out_dir}")
    return 0


def cmd_bounds(config):
    provenance = build_provenance(config)
    out_dir = os.path.join(config["out"], "bounds")
    _, models = _zoo(config)
    variants = _selected_variants(config, bounded_only=True)
    for variant in variants:
        _fresh(os.path.join(out_dir, f"{variant}.json"), config["force"])
    _, test_ds = _load_data(config)
    os.makedirs(out_dir, exist_ok=True)
    for variant in variants:
        audit = analysis.score_bound_audit(models[variant], test_ds.images)
        payload = {
            "model": variant,
            "count": len(test_ds),
            "audit": audit.to_dict(),
            "provenance": provenance,
        }
        _write_json(os.path.join(out_dir, f"{variant}.json"), payload)
        print(f"[bounds] {variant}: within_bounds={audit.within_bounds} "
              f"top_prob_max={audit.observed_top_prob_max:.6f}")
    return 0


def _finite_or_inf(value):
    return value if np.isfinite(value) else "inf"


def cmd_gradstats(config):
    provenance = build_provenance(config)
    out_dir = os.path.join(config["out"], "gradstats")
    _, models = _zoo(config)
    variants = _selected_variants(config)
    for variant in variants:
        _fresh(os.path.join(out_dir, f"{variant}.json"), config["force"])
    summary_path = os.path.join(out_dir, "summary.json")
    write_summary = config["variant"] is None
    if write_summary:
        _fresh(summary_path, config["force"])
    _, test_ds = _load_data(config)
    os.makedirs(out_dir, exist_ok=True)

    stats = {}
    for variant in variants:
        model = models[variant]
        untargeted = analysis.gradient_mask_stats(
            model, test_ds.images, test_ds.labels)
        targeted = analysis.gradient_mask_stats(
            model, test_ds.images, test_ds.labels,
            target_class=config["target_class"])
        stats[variant] = (untargeted, targeted)
        payload = {
            "model": variant,
            "target_class": config["target_class"],
            "untargeted": untargeted.to_dict(),
            "targeted": targeted.to_dict(),
            "provenance": provenance,
        }
        _write_json(os.path.join(out_dir, f"{variant}.json"), payload)
        print(f"[gradstats] {variant}: median |grad|_inf "
              f"{untargeted.median_grad_linf:.3e}")

    if write_summary:
        reference_untargeted, reference_targeted = stats["normal"]
        ratios = {}
        for variant in variants:
            if variant == "normal":
                continue
            untargeted, targeted = stats[variant]
            ratios[variant] = {
                "untargeted": _finite_or_inf(
                    analysis.masking_ratio(reference_untargeted, untargeted)),
                "targeted": _finite_or_inf(
                    analysis.masking_ratio(reference_targeted, targeted)),
            }
        _write_json(summary_path, {
            "reference": "normal",
            "target_class": config["target_class"],
            "masking_ratios": ratios,
            "provenance": provenance,
        })
        print(f"[gradstats] ratios -> {summary_path}")
    return 0


# --------------------------------------------------------------------------
# entry point


COMMANDS = {
    "train": cmd_train,
    "zoo": cmd_zoo,
    "attack": cmd_attack,
    "surface": cmd_surface,
    "bounds": cmd_bounds,
    "gradstats": cmd_gradstats,
    "report": cmd_report,
}

_SUBCOMMAND_HELP = {
    "train": "train one model variant and write checkpoint plus metrics",
    "zoo": "train all four variants and write the zoo manifest",
    "attack": "run the configured attack table against the zoo",
    "surface": "sample loss surfaces around correctly classified inputs",
    "bounds": "audit bounded-head probability limits on the test set",
    "gradstats": "measure input-gradient magnitudes and masking ratios",
    "report": "rebuild the summary table from stored per-sample records",
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE",
                        help="JSON config file; flags override its values")
    common.add_argument("--seed", type=int,
                        help="pool and analysis sampling seed")
    common.add_argument("--jobs", type=int,
                        help="worker threads for per-sample attack work")
    common.add_argument("--out", metavar="DIR",
                        help="output directory for all artifacts")
    common.add_argument("--force", action="store_true", default=None,
                        help="overwrite existing output files")
    common.add_argument("--variant", choices=VARIANTS,
                        help="restrict the command to one model variant")
    common.add_argument("--temperature", type=float,
                        help="training temperature for distilled and "
                             "squeezed variants")
    common.add_argument("--epsilon", type=float,
                        help="override every configured attack budget")
    common.add_argument("--target-class", type=int, dest="target_class",
                        help="fixed class targeted attacks aim at")
    common.add_argument("--dataset",
                        help="dataset name: auto, mnist, synthetic-digits, "
                             "or blobs")
    common.add_argument("--epochs", type=int,
                        help="override training epochs for every variant")
    parser = argparse.ArgumentParser(
        prog="gradmask",
        description="Train bounded-head image classifiers and probe them "
                    "with white-box gradient attacks.")
    parser.add_argument("--version", action="version",
                        version=f"gradmask {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True,
                                       metavar="command")
    for name, help_text in _SUBCOMMAND_HELP.items():
        subparsers.add_parser(name, parents=[common], help=help_text,
                              description=help_text)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        return COMMANDS[args.command](config)
    except ConfigError as exc:
        print(f"gradmask: error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, DataFormatError, ProtocolError, ShapeError,
            OSError) as exc:
        print(f"gradmask: data error: {exc}", file=sys.stderr)
        return 3
    except (TrainingDiverged, DomainError, FloatingPointError,
            OverflowError, ZeroDivisionError) as exc:
        print(f"gradmask: numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
