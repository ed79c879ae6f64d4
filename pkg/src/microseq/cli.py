"""Command line interface: ``microseq {gen-synth,preprocess,train,eval,infer}``.

Settings come from an optional JSON file with the sections ``synth``,
``split``, ``preprocess``, ``train`` and ``eval``; command-line flags win
over the file, which wins over built-in defaults.  ``MICROSEQ_SEED``
overrides every seed.  Exit codes: 0 ok, 2 configuration, 3 I/O, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data_io import (
    SynthConfig,
    generate_synthetic_dataset,
    load_manifest,
    read_feature_sequence,
    save_manifest,
    split_dataset,
)
from .exceptions import ConfigError, FormatError, IoFailure, MicroseqError, TrainingDiverged
from .inference import KnnBank, build_bank, evaluate, predict_cases
from .preprocessing import adjacent_differences, dedup_indices, select_tau
from .training import (
    TrainConfig,
    fit_prepared,
    load_bank,
    load_checkpoint,
    prepare_cases,
    save_bank,
    save_checkpoint,
)

log = logging.getLogger("microseq")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

SPLIT_DEFAULTS = {"test_frac": 0.2, "val_frac": 0.15, "seed": 0}
PREPROCESS_DEFAULTS = {"duplicate_fraction": 0.25, "tau": None}
EVAL_DEFAULTS = {"split": "test", "jobs": 1}
SECTIONS = ("synth", "split", "preprocess", "train", "eval")

ABLATIONS = {
    "use_wavelet": "--no-wavelet",
    "use_implicit_target": "--no-implicit-target",
    "use_ideal_reference": "--no-ideal-reference",
    "use_align": "--no-align",
    "use_attention": "--no-attention",
    "use_ap": "--no-ap",
}


@dataclasses.dataclass
class RunConfig:
    synth: SynthConfig
    split: dict
    preprocess: dict
    train: TrainConfig
    eval: dict


def _check_keys(section, payload, allowed):
    if not isinstance(payload, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    unknown = sorted(set(payload) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in section {section!r}: {', '.join(unknown)}")


def load_run_config(path=None, overrides=None) -> RunConfig:
    """Merge defaults, the JSON file and flag overrides (in that order) and validate."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise IoFailure(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    merged = {s: dict(raw.get(s, {})) for s in SECTIONS}
    for section, values in (overrides or {}).items():
        merged[section].update({k: v for k, v in values.items() if v is not None})

    synth_fields = [f.name for f in dataclasses.fields(SynthConfig)]
    train_fields = [f.name for f in dataclasses.fields(TrainConfig)]
    _check_keys("synth", merged["synth"], synth_fields)
    _check_keys("split", merged["split"], SPLIT_DEFAULTS)
    _check_keys("preprocess", merged["preprocess"], PREPROCESS_DEFAULTS)
    _check_keys("train", merged["train"], train_fields)
    _check_keys("eval", merged["eval"], EVAL_DEFAULTS)

    env_seed = os.environ.get("MICROSEQ_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"MICROSEQ_SEED must be an integer, got {env_seed!r}") from exc
        for section in ("synth", "split", "train"):
            merged[section]["seed"] = seed

    preprocess = {**PREPROCESS_DEFAULTS, **merged["preprocess"]}
    train_values = dict(merged["train"])
    train_values.setdefault("duplicate_fraction", preprocess["duplicate_fraction"])
    train_values.setdefault("tau", preprocess["tau"])
    try:
        synth = SynthConfig(**merged["synth"])
        synth.validate()
        train = TrainConfig(**train_values).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    split = {**SPLIT_DEFAULTS, **merged["split"]}
    evaluation = {**EVAL_DEFAULTS, **merged["eval"]}
    if evaluation["split"] not in ("train", "val", "test"):
        raise ConfigError(f"eval split must be train, val or test, got {evaluation['split']!r}")
    return RunConfig(synth, split, {"duplicate_fraction": train.duplicate_fraction, "tau": train.tau},
                     train, evaluation)


def _emit(payload, stream=None):
    stream = stream or sys.stdout
    stream.write(json.dumps(payload, sort_keys=True) + "\n")
    stream.flush()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    cfg = load_run_config(args.config, {"synth": {"seed": args.seed}})
    out_dir = Path(args.out)
    manifest = generate_synthetic_dataset(cfg.synth, out_dir)
    manifest = split_dataset(manifest, cfg.split["test_frac"], cfg.split["val_frac"], cfg.split["seed"])
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest, manifest_path)
    stats = manifest.synth_stats
    _emit({
        "manifest": str(manifest_path),
        "cases": stats["cases"],
        "frames": stats["frames"],
        "duplicate_fraction": stats["duplicates"] / max(1, stats["frames"]),
        "splits": {s: len(manifest.split(s)) for s in ("train", "val", "test")},
    })
    return EXIT_OK


def _calibrate_tau(manifest, train_cfg):
    if train_cfg.tau is not None:
        return float(train_cfg.tau)
    seqs = [s.features for s in manifest.load_split("train") + manifest.load_split("val")]
    return select_tau(seqs, train_cfg.duplicate_fraction)


def cmd_preprocess(args) -> int:
    cfg = load_run_config(args.config, {"preprocess": {"duplicate_fraction": args.duplicate_fraction,
                                                       "tau": args.tau}})
    manifest = load_manifest(args.manifest)
    tau = _calibrate_tau(manifest, cfg.train)
    splits = {}
    for name in ("train", "val", "test"):
        before = after = 0
        diffs = []
        for seq in manifest.load_split(name):
            x = np.asarray(seq.features, dtype=np.float64)
            before += x.shape[0]
            after += len(dedup_indices(x, tau))
            diffs.append(adjacent_differences(x))
        pooled = np.concatenate(diffs) if diffs else np.zeros(0)
        splits[name] = {
            "cases": len(manifest.split(name)),
            "frames_before": before,
            "frames_after": after,
            "removed_fraction": (before - after) / before if before else 0.0,
            "median_adjacent_difference": float(np.median(pooled)) if pooled.size else None,
        }
    _emit({"tau": tau, "duplicate_fraction": cfg.train.duplicate_fraction, "splits": splits})
    return EXIT_OK


def _train_overrides(args) -> dict:
    values = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name in ABLATIONS:
            if getattr(args, f.name, False):
                values[f.name] = False
            continue
        values[f.name] = getattr(args, f.name, None)
    return {"train": values}


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _bank_path(ckpt) -> Path:
    return Path(str(ckpt) + ".bank")


def _cache_bank(bank: KnnBank, ckpt) -> None:
    save_bank(bank, _bank_path(ckpt))
    meta_path = Path(str(ckpt) + ".bank.json")
    meta_path.write_text(json.dumps({"checkpoint_sha256": _file_digest(ckpt)}) + "\n", encoding="utf-8")


def _cached_bank(ckpt):
    path = _bank_path(ckpt)
    meta_path = Path(str(ckpt) + ".bank.json")
    if not (path.exists() and meta_path.exists()):
        return None
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("checkpoint_sha256") != _file_digest(ckpt):
        return None
    return load_bank(path)


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, _train_overrides(args))
    train_cfg = cfg.train
    manifest = load_manifest(args.manifest)
    tau = _calibrate_tau(manifest, train_cfg)
    train = manifest.load_split("train")
    val = manifest.load_split("val")
    prep = lambda seqs: prepare_cases([s.features for s in seqs], [s.label for s in seqs], tau, train_cfg,
                                      [s.case_id for s in seqs])
    train_cases, val_cases = prep(train), prep(val)

    def report(stats):
        val_acc = stats.val["overall"]["accuracy"] if stats.val else None
        print(f"epoch {stats.epoch}: loss {stats.total:.4f} val_accuracy {val_acc}", file=sys.stderr)

    result = fit_prepared(train_cases, val_cases, manifest.num_classes, train_cfg, tau, on_epoch=report)
    ckpt = Path(args.out)
    extra = {"tau": tau, "best_epoch": result.best_epoch, "num_classes": manifest.num_classes}
    save_checkpoint(result.params, result.state, train_cfg, ckpt, extra)
    history_path = Path(str(ckpt) + ".history.json")
    history_path.write_text(json.dumps([s.to_dict() for s in result.history], indent=1, sort_keys=True) + "\n",
                            encoding="utf-8")
    if result.bank is not None:
        _cache_bank(result.bank, ckpt)
    best = next((s for s in result.history if s.epoch == result.best_epoch), result.history[-1])
    _emit({"checkpoint": str(ckpt), "history": str(history_path), "epochs_run": len(result.history),
           "best_epoch": result.best_epoch, "tau": tau, "val": best.val})
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, {"eval": {"split": args.split, "jobs": args.jobs}})
    ckpt = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    train_cfg = ckpt.config
    tau = ckpt.extra["tau"]
    prep = lambda seqs: prepare_cases([s.features for s in seqs], [s.label for s in seqs], tau, train_cfg,
                                      [s.case_id for s in seqs])
    bank = None
    if ckpt.params.use_attention:
        bank = _cached_bank(args.checkpoint)
        if bank is None:
            bank = build_bank(ckpt.params, prep(manifest.load_split("train")))
            _cache_bank(bank, args.checkpoint)
    cases = prep(manifest.load_split(cfg.eval["split"]))
    cases.sort(key=lambda c: c.case_id)
    preds = predict_cases(ckpt.params, cases, bank, target_len=train_cfg.target_len, gamma=train_cfg.gamma,
                          target_kind=train_cfg.effective_target_kind, k=train_cfg.knn_k, jobs=cfg.eval["jobs"])
    report = evaluate(preds, [c.label for c in cases], ckpt.params.n_classes)
    _emit(report.to_dict())
    return EXIT_OK


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    seq = read_feature_sequence(args.file)
    train_cfg = ckpt.config
    bank = _cached_bank(args.checkpoint) if ckpt.params.use_attention else None
    if ckpt.params.use_attention and bank is None:
        raise IoFailure(f"no KNN bank cached beside {args.checkpoint}; run train or eval first")
    cases = prepare_cases([seq.features], [None], ckpt.extra["tau"], train_cfg, [seq.case_id])
    pred = predict_cases(ckpt.params, cases, bank, target_len=train_cfg.target_len, gamma=train_cfg.gamma,
                         target_kind=train_cfg.effective_target_kind, k=train_cfg.knn_k)[0]
    _emit({"case_id": pred.case_id, "ap": pred.ap_class, "dtw": pred.dtw_class, "knn": pred.knn_class,
           "vote": pred.vote_class})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_train_flags(parser):
    defaults = TrainConfig()
    for f in dataclasses.fields(TrainConfig):
        if f.name in ABLATIONS:
            parser.add_argument(ABLATIONS[f.name], dest=f.name, action="store_true",
                                help=f"ablate: set {f.name}=false (default: {f.default})")
            continue
        default = getattr(defaults, f.name)
        flag = "--" + f.name.replace("_", "-")
        if isinstance(default, bool):
            parser.add_argument(flag, dest=f.name, type=_parse_bool, default=None, metavar="BOOL",
                                help=f"(default: {default})")
        elif f.name == "tau":
            parser.add_argument(flag, dest=f.name, type=float, default=None,
                                help="fixed differencing threshold (default: calibrated from --duplicate-fraction)")
        else:
            parser.add_argument(flag, dest=f.name, type=type(default), default=None, help=f"(default: {default})")


def _parse_bool(text):
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="microseq", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic dataset and its manifest")
    p.add_argument("--config", help="JSON run configuration (default: built-in defaults)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="generator seed (default: 0)")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("preprocess", help="calibrate tau and report deduplication statistics")
    p.add_argument("--manifest", required=True, help="dataset manifest (JSON)")
    p.add_argument("--config", help="JSON run configuration (default: built-in defaults)")
    p.add_argument("--duplicate-fraction", type=float, default=None,
                   help="quantile of adjacent differences used as tau (default: 0.25)")
    p.add_argument("--tau", type=float, default=None, help="fixed threshold overriding calibration")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model and write the best checkpoint")
    p.add_argument("--manifest", required=True, help="dataset manifest (JSON)")
    p.add_argument("--config", help="JSON run configuration (default: built-in defaults)")
    p.add_argument("--out", required=True, help="checkpoint path (.mckpt)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score all four strategies on one split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train (.mckpt)")
    p.add_argument("--config", help="JSON run configuration (default: built-in defaults)")
    p.add_argument("--split", choices=("train", "val", "test"), default=None, help="(default: test)")
    p.add_argument("--jobs", type=int, default=None, help="worker threads for per-case prediction (default: 1)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="classify a single .fseq file")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train (.mckpt)")
    p.add_argument("file", help="feature sequence (.fseq)")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IoFailure, FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MicroseqError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
