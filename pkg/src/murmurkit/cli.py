"""Command-line surface for the murmur-detection pipeline.

Commands mirror the pipeline stages::

    synth      generate a deterministic synthetic dataset
    featurize  extract and cache log-Mel features for every recording
    train      fit the encoder, checkpointing every validation-loss minimum
    predict    MC-dropout prediction dump for one split
    calibrate  fit the temperature on validation predictions
    evaluate   metrics at segment/record/patient levels, before/after scaling
    report     reliability and confidence-histogram CSVs for plotting

Configuration values come from built-in defaults, then an optional
``--config`` file of ``key=value`` lines, then ``MURMURKIT_*`` environment
variables, then ``--set key=value`` flags (rightmost wins). The resolved
configuration is written into every output directory, so any artifact can
be reproduced from its recorded config. All randomness derives from the
single ``seed`` key.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import calibration, metrics, pipeline
from .dataio import load_audio, load_manifest, synth_dataset
from .features import extract_recording, read_feature_cache, write_feature_cache
from .model import ModelConfig, init_state, load_checkpoint
from .training import TrainConfig, collect_segments, train
from .uncertainty import mc_logits

ENV_PREFIX = "MURMURKIT_"
PREDICT_CHUNK = 64


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(","))


def _parse_opt_int(text: str) -> int | None:
    return None if text.strip() == "" else int(text)


# key -> (default, parser, help)
KEY_SPECS: dict[str, tuple] = {
    "seed": (0, int, "global seed; all random streams derive from it"),
    "synth.patients": (24, int, "number of synthetic patients"),
    "synth.mix": ((0.6, 0.3, 0.1), _parse_floats,
                  "absent,present,unknown patient proportions"),
    "synth.split_fractions": ((2 / 3, 1 / 6, 1 / 6), _parse_floats,
                              "train,validation,test patient fractions"),
    "features.hop_seconds": (2.0, float, "segment hop (3 s windows)"),
    "features.normalize": (False, _parse_bool,
                           "per-map mean/variance normalisation"),
    "model.layers": (6, int, "encoder layers"),
    "model.heads": (4, int, "attention heads"),
    "model.head_dim": (128, int, "per-head dimension (width = heads*head_dim)"),
    "model.conv_kernel": (31, int, "depthwise kernel length (odd)"),
    "model.mlp_expand": (2, int, "conv-branch expansion ratio"),
    "model.dropout_p": (0.1, float, "dropout rate"),
    "model.subsample_channels": (32, int, "front-end conv channels"),
    "model.rel_offset_max": (64, int, "relative-position bias clip"),
    "train.lr0": (1e-4, float, "initial learning rate"),
    "train.weight_decay": (1e-5, float, "decoupled weight decay"),
    "train.batch": (128, int, "training batch size"),
    "train.epochs": (30, int, "training epochs"),
    "train.plateau_patience": (5, int, "stale epochs before LR halving"),
    "train.lr_factor": (0.5, float, "LR multiplier on plateau"),
    "train.class_weights": ((1.0, 5.0, 3.0), _parse_floats,
                            "absent,present,unknown loss weights"),
    "train.max_steps": (None, _parse_opt_int,
                        "optional hard cap on optimizer steps"),
    "mc.passes": (30, int, "MC-dropout forward passes"),
}


class CliError(RuntimeError):
    pass


def _env_name(key: str) -> str:
    return ENV_PREFIX + key.replace(".", "_").upper()


def resolve_config(config_file: str | None,
                   sets: list[str]) -> tuple[dict, set[str]]:
    """defaults < config file < environment < --set; returns (values, explicit)."""
    values = {key: default for key, (default, _, _) in KEY_SPECS.items()}
    explicit: set[str] = set()

    def apply(key: str, raw: str, origin: str) -> None:
        if key not in KEY_SPECS:
            raise CliError(f"{origin}: unknown config key {key!r}")
        parser = KEY_SPECS[key][1]
        try:
            values[key] = parser(raw)
        except ValueError as exc:
            raise CliError(f"{origin}: bad value for {key}: {exc}") from None
        explicit.add(key)

    if config_file:
        path = Path(config_file)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(),
                                      start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise CliError(f"{path}:{lineno}: expected key=value")
            key, _, raw = stripped.partition("=")
            apply(key.strip(), raw.strip(), f"{path}:{lineno}")
    for key in KEY_SPECS:
        env_value = os.environ.get(_env_name(key))
        if env_value is not None:
            apply(key, env_value, _env_name(key))
    for item in sets:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        apply(key.strip(), raw.strip(), "--set")
    return values, explicit


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(f"{v:g}" for v in value)
    return f"{value:g}" if isinstance(value, float) else str(value)


def write_resolved_config(out_dir: Path, command: str, cfg: dict,
                          inputs: dict[str, str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# murmurkit {command}"]
    lines += [f"# input {name}={value}" for name, value in sorted(inputs.items())]
    lines += [f"{key}={_format_value(cfg[key])}" for key in sorted(cfg)]
    (out_dir / "config.resolved").write_text("\n".join(lines) + "\n",
                                             encoding="utf-8")


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        layers=cfg["model.layers"], heads=cfg["model.heads"],
        head_dim=cfg["model.head_dim"], conv_kernel=cfg["model.conv_kernel"],
        mlp_expand=cfg["model.mlp_expand"], dropout_p=cfg["model.dropout_p"],
        subsample_channels=cfg["model.subsample_channels"],
        rel_offset_max=cfg["model.rel_offset_max"])


def train_config(cfg: dict) -> TrainConfig:
    weights = cfg["train.class_weights"]
    if len(weights) != 3:
        raise CliError("train.class_weights needs exactly three values")
    return TrainConfig(
        class_weights=tuple(weights), lr0=cfg["train.lr0"],
        weight_decay=cfg["train.weight_decay"], batch=cfg["train.batch"],
        epochs=cfg["train.epochs"],
        plateau_patience=cfg["train.plateau_patience"],
        lr_factor=cfg["train.lr_factor"], seed=cfg["seed"],
        max_steps=cfg["train.max_steps"])


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _feature_cache_path(features_dir: Path, manifest_root: Path,
                        wav_path: Path) -> Path:
    return (features_dir / wav_path.relative_to(manifest_root)).with_suffix(".feat")


def _cache_loader(features_dir: Path, manifest_root: Path):
    def loader(entry):
        cache = _feature_cache_path(features_dir, manifest_root, entry.path)
        if not cache.is_file():
            raise CliError(f"missing feature cache {cache}; run featurize first")
        return read_feature_cache(cache)
    return loader


def cmd_synth(args, cfg: dict, explicit: set[str]) -> None:
    out = Path(args.out)
    manifest = synth_dataset(out, seed=cfg["seed"],
                             n_patients=cfg["synth.patients"],
                             class_mix=tuple(cfg["synth.mix"]),
                             split_fractions=tuple(cfg["synth.split_fractions"]))
    write_resolved_config(out, "synth", cfg, {"out": str(out)})
    counts = manifest.counts()
    for split in ("train", "validation", "test"):
        row = counts[split]
        _log(f"{split}: {row['patients']} patients, {row['recordings']} recordings")


def cmd_featurize(args, cfg: dict, explicit: set[str]) -> None:
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    total_segments = 0
    for entry in manifest.entries:
        offsets, maps = extract_recording(
            load_audio(entry), hop_seconds=cfg["features.hop_seconds"],
            source=entry, normalize=cfg["features.normalize"])
        cache = _feature_cache_path(out, manifest.root, entry.path)
        cache.parent.mkdir(parents=True, exist_ok=True)
        write_feature_cache(cache, offsets, maps)
        total_segments += len(offsets)
    index = {"recordings": len(manifest.entries), "segments": total_segments,
             "hop_seconds": cfg["features.hop_seconds"],
             "normalize": cfg["features.normalize"]}
    (out / "index.json").write_text(json.dumps(index, sort_keys=True) + "\n",
                                    encoding="utf-8")
    write_resolved_config(out, "featurize", cfg,
                          {"manifest": args.manifest, "out": str(out)})
    _log(f"cached {total_segments} segments from {len(manifest.entries)} recordings")


def cmd_train(args, cfg: dict, explicit: set[str]) -> None:
    manifest = load_manifest(args.manifest)
    features_dir = Path(args.features)
    loader = _cache_loader(features_dir, manifest.root)
    train_set = collect_segments(manifest, "train", loader)
    val_set = collect_segments(manifest, "validation", loader)
    _log(f"train: {len(train_set)} segments, validation: {len(val_set)} segments")
    state = init_state(model_config(cfg), seed=cfg["seed"])
    out = Path(args.out)
    result = train(state, train_set, val_set, train_config(cfg), out_dir=out)
    write_resolved_config(out, "train", cfg, {
        "manifest": args.manifest, "features": str(features_dir),
        "out": str(out)})
    for entry in result.log:
        marker = " *" if entry.is_best else ""
        _log(f"epoch {entry.epoch}: train {entry.train_loss:.4f} "
             f"val {entry.val_loss:.4f} lr {entry.lr:g}{marker}")
    _log(f"best epoch {result.best_epoch} (val loss {result.best_val_loss:.4f})")


def _check_model_overrides(cfg: dict, explicit: set[str],
                           checkpoint_config: ModelConfig) -> None:
    stored = asdict(checkpoint_config)
    for key in explicit:
        if not key.startswith("model."):
            continue
        field = key.split(".", 1)[1]
        if stored.get(field) != cfg[key]:
            raise CliError(
                f"checkpoint/config mismatch: {key}={cfg[key]} but the "
                f"checkpoint was built with {field}={stored.get(field)}")


def cmd_predict(args, cfg: dict, explicit: set[str]) -> None:
    manifest = load_manifest(args.manifest)
    state = load_checkpoint(args.checkpoint)
    _check_model_overrides(cfg, explicit, state.config)
    loader = _cache_loader(Path(args.features), manifest.root)
    segs = collect_segments(manifest, args.split, loader)
    passes = cfg["mc.passes"]
    chunks = [
        mc_logits(state, segs.features[start:start + PREDICT_CHUNK], passes,
                  cfg["seed"])
        for start in range(0, len(segs), PREDICT_CHUNK)
    ]
    logits = np.concatenate(chunks, axis=1).transpose(1, 0, 2)  # (S, N, C)
    out = Path(args.out)
    pipeline.write_predictions(
        out, segs.patient_ids, segs.paths, segs.offsets, logits,
        meta={"split": args.split, "passes": passes, "seed": cfg["seed"],
              "config_hash": state.config.hash(), "segments": len(segs)})
    write_resolved_config(out, "predict", cfg, {
        "manifest": args.manifest, "checkpoint": args.checkpoint,
        "features": args.features, "split": args.split, "out": str(out)})
    _log(f"wrote {len(segs)} segment predictions ({passes} passes)")


def _load_temperatures(calibration_dir: str | None) -> tuple[float, float]:
    """(segment_T, patient_T); both 1.0 when no calibration is supplied."""
    if calibration_dir is None:
        return 1.0, 1.0
    path = Path(calibration_dir) / "temperature.json"
    if not path.is_file():
        raise CliError(f"missing {path}; run calibrate first")
    data = json.loads(path.read_text(encoding="utf-8"))
    temperature = float(data["temperature"])
    patient_t = float(data.get("patient_temperature") or temperature)
    return temperature, patient_t


def cmd_calibrate(args, cfg: dict, explicit: set[str]) -> None:
    manifest = load_manifest(args.manifest)
    preds = pipeline.read_predictions(args.predictions, manifest)
    n_segments, n_passes, n_classes = preds.logits.shape
    flat_logits = preds.logits.reshape(n_segments * n_passes, n_classes)
    flat_labels = np.repeat(preds.truths, n_passes)
    temperature = calibration.fit_temperature(flat_logits, flat_labels)
    patient_t = pipeline.fit_patient_temperature(preds) if args.refit_patient else None

    before = pipeline.assemble_levels(preds, 1.0)
    after = pipeline.assemble_levels(preds, temperature)
    after_patient = (pipeline.assemble_levels(preds, patient_t)
                     if patient_t is not None else after)
    reports = [
        calibration.build_report("segment", temperature,
                                 before.segment_conf, before.segment_correct,
                                 after.segment_conf, after.segment_correct),
        calibration.build_report(
            "patient",
            patient_t if patient_t is not None else temperature,
            before.patient_conf, before.patient_correct,
            after_patient.patient_conf, after_patient.patient_correct),
    ]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "temperature.json").write_text(json.dumps({
        "temperature": temperature,
        "patient_temperature": patient_t,
        "fit_on": {"split": preds.meta.get("split"), "segments": n_segments,
                   "passes": n_passes},
    }, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    (out / "calibration_report.json").write_text(
        calibration.report_to_json(reports), encoding="utf-8")
    write_resolved_config(out, "calibrate", cfg, {
        "predictions": args.predictions, "manifest": args.manifest,
        "out": str(out)})
    for report in reports:
        _log(f"{report.level}: ECE {report.ece_before:.4f} -> "
             f"{report.ece_after:.4f} (T={report.temperature:.4f})")


def _level_metrics(levels: pipeline.LevelDecisions,
                   truths: np.ndarray) -> dict:
    seg_cm = metrics.confusion_matrix(levels.segment_labels.tolist(),
                                      truths.tolist())
    rec_cm = metrics.confusion_matrix(
        [int(r["decision"].label) for r in levels.records],
        [r["truth"] for r in levels.records])
    pat_cm = metrics.confusion_matrix(
        [int(p["decision"].label) for p in levels.patients],
        [p["truth"] for p in levels.patients])
    return {
        "segment": metrics.metrics_report(seg_cm),
        "record": metrics.metrics_report(rec_cm),
        "patient": metrics.metrics_report(pat_cm),
        "ece_segment": calibration.ece(levels.segment_conf,
                                       levels.segment_correct),
        "ece_patient": calibration.ece(levels.patient_conf,
                                       levels.patient_correct),
        "temperature": levels.temperature,
    }


def cmd_evaluate(args, cfg: dict, explicit: set[str]) -> None:
    manifest = load_manifest(args.manifest)
    preds = pipeline.read_predictions(args.predictions, manifest)
    temperature, patient_t = _load_temperatures(args.calibration)
    before = pipeline.assemble_levels(preds, 1.0)
    after = pipeline.assemble_levels(preds, temperature)
    report = {
        "split": preds.meta.get("split"),
        "before": _level_metrics(before, preds.truths),
        "after": _level_metrics(after, preds.truths),
    }
    if patient_t != temperature:
        after_patient = pipeline.assemble_levels(preds, patient_t)
        report["after"]["ece_patient"] = calibration.ece(
            after_patient.patient_conf, after_patient.patient_correct)
        report["after"]["patient_temperature"] = patient_t
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(metrics.report_to_json(report),
                                      encoding="utf-8")
    pipeline.write_patient_decisions(out / "patient_decisions.csv", after)
    write_resolved_config(out, "evaluate", cfg, {
        "predictions": args.predictions, "manifest": args.manifest,
        "calibration": args.calibration or "", "out": str(out)})
    for phase in ("before", "after"):
        patient = report[phase]["patient"]
        _log(f"{phase}: patient weighted accuracy "
             f"{patient['weighted_accuracy']:.4f}, macro-F1 "
             f"{patient['macro_f1']:.4f}, ECE {report[phase]['ece_patient']:.4f}")


def _write_histogram_csv(path: Path, bins) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for b in bins:
            writer.writerow([f"{b.lo:.6f}", f"{b.hi:.6f}", b.count])


def cmd_report(args, cfg: dict, explicit: set[str]) -> None:
    manifest = load_manifest(args.manifest)
    preds = pipeline.read_predictions(args.predictions, manifest)
    temperature, patient_t = _load_temperatures(args.calibration)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"temperature": temperature, "patient_temperature": patient_t,
               "split": preds.meta.get("split"), "levels": {}}
    cases = {
        ("segment", "before"): (1.0, "segment"),
        ("segment", "after"): (temperature, "segment"),
        ("patient", "before"): (1.0, "patient"),
        ("patient", "after"): (patient_t, "patient"),
    }
    assembled: dict[float, pipeline.LevelDecisions] = {}
    for (level, phase), (t, _) in cases.items():
        if t not in assembled:
            assembled[t] = pipeline.assemble_levels(preds, t)
        decisions = assembled[t]
        if level == "segment":
            conf, correct = decisions.segment_conf, decisions.segment_correct
        else:
            conf, correct = decisions.patient_conf, decisions.patient_correct
        bins = calibration.reliability_data(conf, correct)
        calibration.write_bins_csv(out / f"reliability_{level}_{phase}.csv", bins)
        _write_histogram_csv(out / f"confidence_histogram_{level}_{phase}.csv",
                             bins)
        summary["levels"][f"{level}_{phase}"] = {
            "n": len(conf),
            "ece": calibration.ece_from_bins(bins),
            "accuracy": float(np.asarray(correct, dtype=float).mean()),
            "mean_confidence": float(np.mean(conf)),
        }
    (out / "report_summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    write_resolved_config(out, "report", cfg, {
        "predictions": args.predictions, "manifest": args.manifest,
        "calibration": args.calibration or "", "out": str(out)})
    _log(f"wrote reliability and histogram CSVs to {out}")


def _config_help() -> str:
    lines = ["configuration keys (--set key=value, config file, or "
             f"{ENV_PREFIX}<KEY> env vars):"]
    for key, (default, _, help_text) in KEY_SPECS.items():
        lines.append(f"  {key:<26} {help_text} (default {_format_value(default)!r})")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="murmurkit",
        description="Heart-murmur detection pipeline with calibrated "
                    "MC-dropout uncertainty.",
        epilog=_config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", dest="sets", action="append", default=[],
                       metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=N")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int,
                   help="shorthand for --set synth.patients=N")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", help="extract and cache log-Mel features")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train the classifier")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="MC-dropout predictions for one split")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True,
                   choices=["train", "validation", "test"])
    p.add_argument("--out", required=True)
    p.add_argument("--passes", type=int, help="shorthand for --set mc.passes=N")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("calibrate", help="fit the softmax temperature")
    common(p)
    p.add_argument("--predictions", required=True,
                   help="prediction directory for the validation split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--refit-patient", action="store_true",
                   help="also fit a separate patient-level temperature")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="score predictions at all levels")
    common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--calibration", help="calibrate output directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="plot-ready reliability CSVs")
    common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--calibration", help="calibrate output directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    sets = list(args.sets)
    if getattr(args, "seed", None) is not None:
        sets.append(f"seed={args.seed}")
    if getattr(args, "patients", None) is not None:
        sets.append(f"synth.patients={args.patients}")
    if getattr(args, "passes", None) is not None:
        sets.append(f"mc.passes={args.passes}")
    try:
        cfg, explicit = resolve_config(args.config, sets)
        args.func(args, cfg, explicit)
    except Exception as exc:  # fail fast with a one-line cause
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
