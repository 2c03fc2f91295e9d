"""Command-line entry point.

Subcommands: synth, augment, train, kfold, crosseval, report. Training and
evaluation commands resolve their settings from preset defaults, an optional
INI config file, and explicit flags (in increasing precedence), dump the
effective configuration into the output directory, and write delimited
reports plus PNG figures there. Exit codes: 0 success, 2 configuration error,
3 I/O error, 4 numerical abort. Failures emit one machine-parseable line on
stderr: ``wmhseg-error<TAB>code=N<TAB>kind=K<TAB>msg=...``.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__, figures, nets
from .augment import AugmentPolicy, SynthConfig, augment_dataset, synth_generate
from .datamodel import (
    DataFormatError,
    DatasetManifest,
    ManifestError,
    Mask2D,
    load_checkpoint,
    load_manifest,
    write_mask,
)
from .harness import (
    GainRow,
    GainTable,
    ProtocolError,
    ScoreRow,
    ScoreTable,
    dsc_gain,
    render_report,
    run_crossdataset,
    run_kfold,
    write_scores,
)
from .nets import ConfigError, ModelConfig, config_from_dict, preset_config
from .objective import MODEL_KINDS, binarize
from .trainer import (
    HyperParams,
    NonFiniteLossError,
    load_arrays,
    predict_logits,
    restore_model,
    time_epochs,
    train,
)

log = logging.getLogger(__name__)

_FORMAT_EXT = {"aligned-text": "txt", "comma-separated": "csv", "markdown": "md"}

_PRESET_HYPER = {
    "paper": dict(epochs=500, learning_rate=0.001, batch_size=8),
    "desk": dict(epochs=12, learning_rate=0.001, batch_size=8),
}

_MODEL_KEYS = (
    "kind",
    "input_size",
    "unet_filters",
    "trans_filters",
    "n_transformer_layers",
    "hidden_dim",
    "n_heads",
    "mlp_dim",
    "latent_dim",
    "combiner",
)
_HYPER_KEYS = ("epochs", "learning_rate", "batch_size", "beta_kl", "threshold", "seed", "grad_clip")
_DATA_KEYS = ("train_manifest", "val_manifest", "eval_manifests", "checkpoint")
_RUN_KEYS = ("experiment", "output_dir", "report_format", "preset", "k", "fold_by")


class CliConfigError(ValueError):
    """Run configuration file or flag combination is invalid."""


@dataclass
class RunConfig:
    model: ModelConfig
    hyper: HyperParams
    train_manifest: str | None
    val_manifest: str | None
    eval_manifests: list[str]
    checkpoint: str | None
    experiment: str
    output_dir: str
    report_format: str
    preset: str
    k: int
    fold_by: str


# ---------------------------------------------------------------------------
# Config file handling
# ---------------------------------------------------------------------------


def _parse_ini(path: Path) -> dict[str, dict[str, str]]:
    if not path.exists():
        raise ManifestError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(path.read_text(encoding="utf-8"), source=str(path))
    except configparser.Error as exc:
        raise CliConfigError(f"cannot parse config {path}: {exc}") from exc
    known = {"model": _MODEL_KEYS, "hyper": _HYPER_KEYS, "data": _DATA_KEYS, "run": _RUN_KEYS}
    out: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        if section not in known:
            raise CliConfigError(f"{path}: unknown config section [{section}]")
        out[section] = {}
        for key, value in parser.items(section):
            if key not in known[section]:
                raise CliConfigError(f"{path}: unknown key {key!r} in section [{section}]")
            out[section][key] = value
    return out


def _parse_int_list(text: str, what: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise CliConfigError(f"bad {what} {text!r}: expected comma-separated integers") from exc


def _typed(section: str, key: str, text: str):
    text = text.strip()
    if text == "":
        return None
    if key in ("unet_filters", "trans_filters"):
        return _parse_int_list(text, key)
    if key in ("input_size", "n_transformer_layers", "hidden_dim", "n_heads", "mlp_dim", "latent_dim",
               "epochs", "batch_size", "seed", "k"):
        try:
            return int(text)
        except ValueError as exc:
            raise CliConfigError(f"[{section}] {key}={text!r}: expected an integer") from exc
    if key in ("learning_rate", "beta_kl", "threshold", "grad_clip"):
        try:
            return float(text)
        except ValueError as exc:
            raise CliConfigError(f"[{section}] {key}={text!r}: expected a number") from exc
    if key == "eval_manifests":
        return [p for p in text.split(",") if p.strip()]
    return text


def resolve_run_config(args: argparse.Namespace, experiment: str) -> RunConfig:
    """Merge preset defaults, config-file values, and CLI flags (that order)."""
    file_cfg = _parse_ini(Path(args.config)) if getattr(args, "config", None) else {}

    def file_val(section: str, key: str):
        raw = file_cfg.get(section, {}).get(key)
        return None if raw is None else _typed(section, key, raw)

    preset = getattr(args, "preset", None) or file_val("run", "preset") or "desk"
    if preset not in _PRESET_HYPER:
        raise CliConfigError(f"unknown preset {preset!r}; choose 'paper' or 'desk'")
    kind = getattr(args, "model", None) or file_val("model", "kind") or "prob-transunet"
    if kind not in MODEL_KINDS:
        raise CliConfigError(f"unknown model {kind!r}; choose one of {MODEL_KINDS}")

    model_dict = preset_config(kind, preset).to_dict()
    model_dict.pop("patch_grid", None)  # derived
    model_dict["scale_preset"] = preset
    for key in _MODEL_KEYS:
        if key == "kind":
            continue
        value = file_val("model", key)
        if value is not None:
            model_dict[key] = value
    flag_map = {
        "input_size": "input_size",
        "latent_dim": "latent_dim",
        "combiner": "combiner",
        "unet_filters": "unet_filters",
        "trans_filters": "trans_filters",
        "layers": "n_transformer_layers",
        "hidden_dim": "hidden_dim",
        "heads": "n_heads",
        "mlp_dim": "mlp_dim",
    }
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            model_dict[key] = value
    try:
        model = config_from_dict(model_dict)
    except TypeError as exc:
        raise CliConfigError(f"bad model configuration: {exc}") from exc

    hyper_dict = dict(_PRESET_HYPER[preset])
    for key in _HYPER_KEYS:
        value = file_val("hyper", key)
        if value is not None:
            hyper_dict[key] = value
    for flag, key in (
        ("epochs", "epochs"),
        ("lr", "learning_rate"),
        ("batch_size", "batch_size"),
        ("beta_kl", "beta_kl"),
        ("threshold", "threshold"),
        ("seed", "seed"),
        ("grad_clip", "grad_clip"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            hyper_dict[key] = value
    hyper = HyperParams(**hyper_dict)

    eval_flag = getattr(args, "eval", None)
    eval_manifests = [p for p in eval_flag.split(",") if p.strip()] if eval_flag else None
    out_dir = getattr(args, "out", None) or file_val("run", "output_dir")
    if not out_dir:
        raise CliConfigError("an output directory is required (--out or [run] output_dir)")
    return RunConfig(
        model=model,
        hyper=hyper,
        train_manifest=getattr(args, "data", None) or file_val("data", "train_manifest"),
        val_manifest=getattr(args, "val", None) or file_val("data", "val_manifest"),
        eval_manifests=eval_manifests or file_val("data", "eval_manifests") or [],
        checkpoint=getattr(args, "checkpoint", None) or file_val("data", "checkpoint"),
        experiment=experiment,
        output_dir=str(out_dir),
        report_format=getattr(args, "report_format", None) or file_val("run", "report_format") or "aligned-text",
        preset=preset,
        k=getattr(args, "k", None) or file_val("run", "k") or 5,
        fold_by=getattr(args, "fold_by", None) or file_val("run", "fold_by") or "slice",
    )


def dump_run_config(rc: RunConfig, path: Path) -> None:
    m = rc.model.to_dict()
    lines = ["[model]"]
    for key in _MODEL_KEYS:
        value = m[key]
        if key in ("unet_filters", "trans_filters"):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {'' if value is None else value}")
    lines += ["", "[hyper]"]
    h = rc.hyper
    for key in _HYPER_KEYS:
        value = getattr(h, key)
        lines.append(f"{key} = {'' if value is None else value}")
    lines += ["", "[data]"]
    lines.append(f"train_manifest = {rc.train_manifest or ''}")
    lines.append(f"val_manifest = {rc.val_manifest or ''}")
    lines.append(f"eval_manifests = {','.join(rc.eval_manifests)}")
    lines.append(f"checkpoint = {rc.checkpoint or ''}")
    lines += ["", "[run]"]
    lines.append(f"experiment = {rc.experiment}")
    lines.append(f"output_dir = {rc.output_dir}")
    lines.append(f"report_format = {rc.report_format}")
    lines.append(f"preset = {rc.preset}")
    lines.append(f"k = {rc.k}")
    lines.append(f"fold_by = {rc.fold_by}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Table persistence (for `report` re-rendering and gain computation)
# ---------------------------------------------------------------------------


def _tables_to_json(tables: list[tuple[str, object]]) -> str:
    payload = []
    for title, table in tables:
        if isinstance(table, ScoreTable):
            payload.append(
                {
                    "title": title,
                    "type": "score",
                    "aggregation": table.aggregation,
                    "rows": [
                        {
                            "model_kind": r.model_kind,
                            "dataset_name": r.dataset_name,
                            "mean_dsc": r.mean_dsc,
                            "std_dsc": r.std_dsc,
                            "n": r.n,
                        }
                        for r in table.rows
                    ],
                }
            )
        elif isinstance(table, GainTable):
            payload.append(
                {
                    "title": title,
                    "type": "gain",
                    "label": table.label,
                    "rows": [{"dataset_name": r.dataset_name, "delta": r.delta} for r in table.rows],
                }
            )
        else:
            raise TypeError(f"cannot persist table of type {type(table).__name__}")
    return json.dumps({"tables": payload}, indent=1, sort_keys=True)


def _tables_from_json(text: str) -> list[tuple[str, object]]:
    data = json.loads(text)
    out: list[tuple[str, object]] = []
    for entry in data["tables"]:
        if entry["type"] == "score":
            rows = [ScoreRow(**r) for r in entry["rows"]]
            out.append((entry["title"], ScoreTable(rows=rows, aggregation=entry["aggregation"])))
        elif entry["type"] == "gain":
            rows = [GainRow(**r) for r in entry["rows"]]
            out.append((entry["title"], GainTable(label=entry["label"], rows=rows)))
        else:
            raise CliConfigError(f"unknown table type {entry['type']!r} in tables.json")
    return out


def _write_report_bundle(out_dir: Path, tables: list[tuple[str, object]], fmt: str) -> None:
    ext = _FORMAT_EXT[fmt]
    (out_dir / f"report.{ext}").write_text(render_report(tables, fmt), encoding="utf-8")
    (out_dir / "tables.json").write_text(_tables_to_json(tables) + "\n", encoding="utf-8")


def _save_prediction_rasters(model, manifest: DatasetManifest, hp: HyperParams, out_dir: Path, limit: int = 4):
    pred_dir = out_dir / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    images, masks, ids = load_arrays(manifest)
    images, masks, ids = images[:limit], masks[:limit], ids[:limit]
    logits = predict_logits(model, images, hp.batch_size)
    preds = []
    for i, sid in enumerate(ids):
        pred = binarize(logits[i, 0].numpy(), hp.threshold)
        write_mask(Mask2D(values=pred.values), pred_dir / f"{sid}.wmhs")
        preds.append(pred.values)
    figures.save_prediction_panel(
        images[:, 0].numpy(), masks[:, 0].numpy(), np.stack(preds), out_dir / "predictions.png"
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _parse_range(text: str, what: str) -> tuple[float, float]:
    parts = text.split(":")
    if len(parts) != 2:
        raise CliConfigError(f"bad {what} {text!r}: expected MIN:MAX")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError as exc:
        raise CliConfigError(f"bad {what} {text!r}: expected numbers") from exc


def cmd_synth(args: argparse.Namespace) -> int:
    lesions = _parse_range(args.lesions, "--lesions")
    radius = _parse_range(args.radius, "--radius")
    config = SynthConfig(
        n_patients=args.patients,
        slices_per_patient=args.slices,
        lesion_count_range=(int(lesions[0]), int(lesions[1])),
        lesion_radius_range=radius,
        ambiguity_jitter=args.jitter,
        image_size=args.size,
        dataset_name=args.dataset,
        seed=args.seed,
    )
    manifest = synth_generate(config, args.out)
    counts = ", ".join(f"{k}={v}" for k, v in sorted(manifest.dataset_counts().items()))
    print(f"wrote {len(manifest)} records to {Path(args.out) / 'manifest.tsv'} ({counts})")
    return 0


def cmd_augment(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    rotations = tuple(float(a) for a in args.rotations.split(",") if a.strip()) if args.rotations else ()
    policy = AugmentPolicy(
        do_hflip=not args.no_hflip,
        rotation_degrees=rotations,
        target_size=args.target_size,
        zscore=not args.no_zscore,
    )
    out = augment_dataset(manifest, policy, args.out, seed=args.seed)
    print(f"wrote {len(out)} records to {Path(args.out) / 'manifest.tsv'}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    rc = resolve_run_config(args, "single")
    if not rc.train_manifest:
        raise CliConfigError("train requires a training manifest (--data)")
    out_dir = Path(rc.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_run_config(rc, out_dir / "config.ini")
    train_m = load_manifest(rc.train_manifest)
    val_m = load_manifest(rc.val_manifest) if rc.val_manifest else train_m
    model = nets.build_model(rc.model, seed=rc.hyper.seed)
    print(f"training {rc.model.kind} ({nets.parameter_count(model)} parameters, "
          f"{rc.model.input_size}px, {rc.hyper.epochs} epochs)")
    report = train(model, train_m, val_m, rc.hyper, out_dir)
    (out_dir / "timing.txt").write_text(
        render_report([("Training time per epoch", time_epochs({rc.model.kind: report}))], "aligned-text"),
        encoding="utf-8",
    )
    figures.save_training_curves([report], out_dir / "training_curves.png", labels=[rc.model.kind])
    best = restore_model(load_checkpoint(report.checkpoint_path))
    _save_prediction_rasters(best, val_m, rc.hyper, out_dir)
    print(f"best val DSC {report.best_val_dsc:.4f} at epoch {report.best_epoch}; "
          f"checkpoint: {report.checkpoint_path}")
    return 0


def cmd_kfold(args: argparse.Namespace) -> int:
    rc = resolve_run_config(args, "kfold")
    if not rc.train_manifest:
        raise CliConfigError("kfold requires a training manifest (--data)")
    out_dir = Path(rc.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_run_config(rc, out_dir / "config.ini")
    manifest = load_manifest(rc.train_manifest)
    result = run_kfold(rc.model, manifest, rc.hyper, rc.k, rc.hyper.seed, out_dir, fold_by=rc.fold_by)
    tables = [
        ("K-fold cross-validation (per-fold aggregation)", result.per_fold),
        ("K-fold cross-validation (per-slice aggregation)", result.per_slice),
    ]
    _write_report_bundle(out_dir, tables, rc.report_format)
    write_scores(result.slice_scores, out_dir / "scores.tsv")
    timing = time_epochs({f"{rc.model.kind}-fold{i}": r for i, r in enumerate(result.fold_reports)})
    (out_dir / "timing.txt").write_text(
        render_report([("Training time per epoch", timing)], "aligned-text"), encoding="utf-8"
    )
    figures.save_training_curves(
        result.fold_reports, out_dir / "training_curves.png",
        labels=[f"fold {i}" for i in range(len(result.fold_reports))],
    )
    figures.save_score_bars(result.per_fold, out_dir / "scores.png", title="K-fold DSC (per-fold)")
    row = result.per_fold.rows[0]
    print(f"k-fold ({rc.k} folds) {rc.model.kind}: DSC {row.mean_dsc:.3f} ({row.std_dsc:.3f})")
    return 0


def cmd_crosseval(args: argparse.Namespace) -> int:
    rc = resolve_run_config(args, "crossdataset")
    if not rc.checkpoint:
        raise CliConfigError("crosseval requires --checkpoint")
    if not rc.eval_manifests:
        raise CliConfigError("crosseval requires --eval with at least one manifest")
    out_dir = Path(rc.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_run_config(rc, out_dir / "config.ini")
    manifests = [load_manifest(p) for p in rc.eval_manifests]
    result = run_crossdataset(rc.checkpoint, manifests, rc.hyper)
    tables = [("Cross-dataset robustness", result.table)]
    _write_report_bundle(out_dir, tables, rc.report_format)
    write_scores(result.slice_scores, out_dir / "scores.tsv")
    figures.save_score_bars(result.table, out_dir / "scores.png", title="Cross-dataset DSC")
    print(render_report(tables, "aligned-text"), end="")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    tables_path = run_dir / "tables.json"
    if not tables_path.exists():
        raise ManifestError(f"no tables.json under {run_dir}")
    tables = _tables_from_json(tables_path.read_text(encoding="utf-8"))
    if args.gain_against:
        other = _tables_from_json((Path(args.gain_against) / "tables.json").read_text(encoding="utf-8"))
        own_scores = [t for _, t in tables if isinstance(t, ScoreTable)]
        other_scores = [t for _, t in other if isinstance(t, ScoreTable)]
        if not own_scores or not other_scores:
            raise CliConfigError("gain computation needs score tables in both run directories")
        gain = dsc_gain(own_scores[0], other_scores[0])
        tables = tables + [("DSC gain", gain)]
    out_dir = Path(args.out) if args.out else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    fmt = args.format or "aligned-text"
    if fmt not in _FORMAT_EXT:
        raise CliConfigError(f"unknown report format {fmt!r}")
    _write_report_bundle(out_dir, tables, fmt)
    score_tables = [t for _, t in tables if isinstance(t, ScoreTable)]
    if score_tables:
        figures.save_score_bars(score_tables[0], out_dir / "scores.png")
    print(render_report(tables, fmt), end="")
    return 0


# ---------------------------------------------------------------------------
# Parser / dispatch
# ---------------------------------------------------------------------------


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI run configuration file")
    p.add_argument("--model", choices=MODEL_KINDS, help="model kind (default prob-transunet)")
    p.add_argument("--preset", choices=("paper", "desk"), help="hyperparameter preset (default desk)")
    p.add_argument("--input-size", dest="input_size", type=int, help="square input size in pixels")
    p.add_argument("--latent-dim", dest="latent_dim", type=int, help="latent dimensionality")
    p.add_argument("--combiner", choices=("tile", "deconv"), help="latent injection scheme")
    p.add_argument("--unet-filters", dest="unet_filters", type=lambda s: _parse_int_list(s, "--unet-filters"))
    p.add_argument("--trans-filters", dest="trans_filters", type=lambda s: _parse_int_list(s, "--trans-filters"))
    p.add_argument("--layers", type=int, help="transformer layer count")
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--mlp-dim", dest="mlp_dim", type=int)


def _add_hyper_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--beta-kl", dest="beta_kl", type=float, help="KL weight in the loss")
    p.add_argument("--threshold", type=float, help="binarization threshold")
    p.add_argument("--seed", type=int)
    p.add_argument("--grad-clip", dest="grad_clip", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wmhseg",
        description="Train and evaluate (probabilistic) UNet/TransUNet lesion segmentation models.",
    )
    parser.add_argument(
        "--version", action="version",
        version=f"wmhseg {__version__} (torch {torch.__version__})",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic lesion dataset")
    p.add_argument("--patients", type=int, default=4)
    p.add_argument("--slices", type=int, default=8, help="slices per patient")
    p.add_argument("--lesions", default="1:3", help="lesion count range MIN:MAX")
    p.add_argument("--radius", default="1:4", help="lesion radius range MIN:MAX (pixels)")
    p.add_argument("--jitter", type=float, default=0.0, help="rater-ambiguity boundary jitter (pixels)")
    p.add_argument("--size", type=int, default=128, help="image side length")
    p.add_argument("--dataset", default="SYNTH", help="dataset name recorded in metadata")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", help="materialize preprocessing/augmentation variants")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-hflip", action="store_true")
    p.add_argument("--rotations", default="-10,10",
                   help="comma-separated angles in degrees (use --rotations=-10,10 for negative angles)")
    p.add_argument("--target-size", dest="target_size", type=int, default=128)
    p.add_argument("--no-zscore", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train one model on a manifest")
    _add_model_flags(p)
    _add_hyper_flags(p)
    p.add_argument("--data", help="training manifest")
    p.add_argument("--val", help="validation manifest (defaults to the training manifest)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--report-format", dest="report_format", choices=sorted(_FORMAT_EXT))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("kfold", help="k-fold cross-validation protocol")
    _add_model_flags(p)
    _add_hyper_flags(p)
    p.add_argument("--data", help="training manifest")
    p.add_argument("--k", type=int, help="fold count (default 5)")
    p.add_argument("--fold-by", dest="fold_by", choices=("slice", "patient"),
                   help="split granularity (default slice; patient avoids cross-fold leakage)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--report-format", dest="report_format", choices=sorted(_FORMAT_EXT))
    p.set_defaults(func=cmd_kfold)

    p = sub.add_parser("crosseval", help="cross-dataset robustness of a trained checkpoint")
    _add_model_flags(p)
    _add_hyper_flags(p)
    p.add_argument("--checkpoint", help="trained checkpoint file")
    p.add_argument("--eval", help="comma-separated evaluation manifests")
    p.add_argument("--out", help="output directory")
    p.add_argument("--report-format", dest="report_format", choices=sorted(_FORMAT_EXT))
    p.set_defaults(func=cmd_crosseval)

    p = sub.add_parser("report", help="re-render a run's tables, optionally with DSC gains")
    p.add_argument("--run", required=True, help="run directory containing tables.json")
    p.add_argument("--gain-against", dest="gain_against", help="baseline run directory for DSC-gain deltas")
    p.add_argument("--format", choices=sorted(_FORMAT_EXT))
    p.add_argument("--out", help="output directory (defaults to the run directory)")
    p.set_defaults(func=cmd_report)

    return parser


def _fail(code: int, kind: str, exc: BaseException) -> int:
    msg = str(exc).replace("\t", " ").replace("\n", " ")
    print(f"wmhseg-error\tcode={code}\tkind={kind}\tmsg={msg}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    # Single-threaded torch keeps runs bit-deterministic.
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        return _fail(4, "numerical", exc)
    except (ManifestError, DataFormatError, OSError) as exc:
        return _fail(3, "io", exc)
    except (CliConfigError, ConfigError, ProtocolError, ValueError) as exc:
        return _fail(2, "config", exc)


if __name__ == "__main__":
    sys.exit(main())
