"""Experiment protocols and report tables.

k-fold cross-validation trains one model per fold and scores its best
checkpoint on the held-out fold; cross-dataset robustness evaluates a trained
checkpoint against sites unseen during training. Score tables render as
aligned text, comma-separated values, or markdown, with the best score per
dataset column marked.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import nets
from .augment import preprocess_for_eval
from .datamodel import Checkpoint, DatasetManifest, kfold_split, load_checkpoint, read_mask, read_slice
from .trainer import HyperParams, TrainReport, load_arrays, per_slice_dsc, predict_logits, restore_model, train

log = logging.getLogger(__name__)


class ProtocolError(ValueError):
    """Experiment precondition violated (roles, disjointness, row alignment)."""


@dataclass(frozen=True)
class ScoreRow:
    model_kind: str
    dataset_name: str
    mean_dsc: float
    std_dsc: float
    n: int

    def __post_init__(self) -> None:
        if not (0.0 <= self.mean_dsc <= 1.0 and 0.0 <= self.std_dsc <= 1.0):
            raise ValueError(f"scores must lie in [0,1]: mean={self.mean_dsc}, std={self.std_dsc}")
        if self.n < 1:
            raise ValueError("n must be >= 1")


@dataclass
class ScoreTable:
    rows: list[ScoreRow]
    aggregation: str  # per_fold | per_slice

    def datasets(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            if r.dataset_name not in seen:
                seen.append(r.dataset_name)
        return seen

    def kinds(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            if r.model_kind not in seen:
                seen.append(r.model_kind)
        return seen


def with_average(rows: list[ScoreRow]) -> list[ScoreRow]:
    """Append one 'Average' row per model kind: unweighted mean of the
    per-dataset means (and of the stds)."""
    out = list(rows)
    for kind in dict.fromkeys(r.model_kind for r in rows):
        members = [r for r in rows if r.model_kind == kind and r.dataset_name != "Average"]
        out.append(
            ScoreRow(
                model_kind=kind,
                dataset_name="Average",
                mean_dsc=float(np.mean([r.mean_dsc for r in members])),
                std_dsc=float(np.mean([r.std_dsc for r in members])),
                n=sum(r.n for r in members),
            )
        )
    return out


def merge_tables(tables: list[ScoreTable]) -> ScoreTable:
    """Concatenate rows of same-aggregation tables (one per model kind)."""
    aggs = {t.aggregation for t in tables}
    if len(aggs) != 1:
        raise ProtocolError(f"cannot merge tables with mixed aggregations {sorted(aggs)}")
    return ScoreTable(rows=[r for t in tables for r in t.rows], aggregation=aggs.pop())


@dataclass(frozen=True)
class GainRow:
    dataset_name: str
    delta: float


@dataclass
class GainTable:
    label: str
    rows: list[GainRow]


@dataclass
class SliceScore:
    slice_id: str
    model_kind: str
    dsc: float


@dataclass
class KFoldResult:
    per_fold: ScoreTable
    per_slice: ScoreTable
    fold_reports: list[TrainReport]
    slice_scores: list[SliceScore]
    checkpoint_paths: list[str]


@dataclass
class CrossDatasetResult:
    table: ScoreTable
    slice_scores: list[SliceScore]


# ---------------------------------------------------------------------------
# Protocols
# ---------------------------------------------------------------------------


def _population_std(values) -> float:
    return float(np.std(values))


def _patient_folds(manifest: DatasetManifest, k: int, seed: int) -> list[tuple[list[int], list[int]]]:
    patients = list(dict.fromkeys(rec.meta.patient_id for rec in manifest))
    folds = []
    for train_p, test_p in kfold_split(len(patients), k, seed):
        train_set = {patients[i] for i in train_p}
        test_set = {patients[i] for i in test_p}
        train_idx = [i for i, rec in enumerate(manifest.records) if rec.meta.patient_id in train_set]
        test_idx = [i for i, rec in enumerate(manifest.records) if rec.meta.patient_id in test_set]
        folds.append((train_idx, test_idx))
    return folds


def run_kfold(
    config: nets.ModelConfig,
    manifest: DatasetManifest,
    hp: HyperParams,
    k: int,
    seed: int,
    out_dir: str | Path,
    fold_by: str = "slice",
) -> KFoldResult:
    """Train/evaluate across k folds; each fold's held-out split doubles as
    the validation set for best-checkpoint selection.

    fold_by='slice' splits individual records (the reference protocol's
    image-count split; adjacent slices of one patient can land on both sides).
    fold_by='patient' holds out whole patients per fold.
    """
    roles = {rec.meta.role for rec in manifest}
    if roles != {"training"}:
        raise ProtocolError(f"k-fold requires a training-role manifest, found roles {sorted(roles)}")
    if fold_by not in ("slice", "patient"):
        raise ProtocolError(f"fold_by must be 'slice' or 'patient', got {fold_by!r}")
    out_dir = Path(out_dir)
    folds = kfold_split(len(manifest), k, seed) if fold_by == "slice" else _patient_folds(manifest, k, seed)
    _assert_partition(folds, len(manifest))
    dataset_label = "+".join(sorted(manifest.dataset_names()))

    fold_means: list[float] = []
    all_scores: list[float] = []
    slice_scores: list[SliceScore] = []
    fold_reports: list[TrainReport] = []
    checkpoint_paths: list[str] = []
    for i, (train_idx, test_idx) in enumerate(folds):
        fold_seed = seed ^ i
        model = nets.build_model(config, seed=fold_seed)
        fold_hp = replace(hp, seed=fold_seed)
        train_m = manifest.subset(train_idx)
        test_m = manifest.subset(test_idx)
        report = train(model, train_m, test_m, fold_hp, out_dir / f"fold{i}")
        fold_reports.append(report)
        checkpoint_paths.append(report.checkpoint_path)

        best = restore_model(load_checkpoint(report.checkpoint_path))
        images, masks, ids = load_arrays(test_m)
        logits = predict_logits(best, images, hp.batch_size)
        scores = per_slice_dsc(logits, masks, hp.threshold)
        fold_means.append(float(np.mean(scores)))
        all_scores.extend(scores)
        slice_scores.extend(SliceScore(sid, config.kind, s) for sid, s in zip(ids, scores))
        log.info("fold %d/%d: test DSC %.4f over %d slices", i + 1, k, fold_means[-1], len(scores))

    per_fold = ScoreTable(
        rows=[ScoreRow(config.kind, dataset_label, float(np.mean(fold_means)), _population_std(fold_means), k)],
        aggregation="per_fold",
    )
    per_slice = ScoreTable(
        rows=[
            ScoreRow(config.kind, dataset_label, float(np.mean(all_scores)), _population_std(all_scores), len(all_scores))
        ],
        aggregation="per_slice",
    )
    return KFoldResult(per_fold, per_slice, fold_reports, slice_scores, checkpoint_paths)


def _assert_partition(folds, n: int) -> None:
    seen: set[int] = set()
    for train_idx, test_idx in folds:
        test = set(test_idx)
        if test & seen:
            raise ProtocolError("fold isolation violated: overlapping test folds")
        if test & set(train_idx):
            raise ProtocolError("fold isolation violated: id in both train and test")
        seen |= test
    if seen != set(range(n)):
        raise ProtocolError("fold isolation violated: test folds do not cover the dataset")


def _eval_manifest_arrays(manifest: DatasetManifest, size: int) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
    # Evaluation-time preprocessing only (z-score + rescale/pad); never
    # geometric augmentation.
    images, masks, ids = [], [], []
    for rec in manifest:
        slc = read_slice(manifest.image_file(rec))
        msk = read_mask(manifest.mask_file(rec))
        slc, msk = preprocess_for_eval(slc, msk, size)
        images.append(torch.from_numpy(slc.pixels.copy()))
        masks.append(torch.from_numpy(msk.values.astype(np.float32)))
        ids.append(rec.id)
    return torch.stack(images)[:, None], torch.stack(masks)[:, None], ids


def run_crossdataset(
    checkpoint: Checkpoint | str | Path,
    eval_manifests: list[DatasetManifest],
    hp: HyperParams | None = None,
) -> CrossDatasetResult:
    """Score one trained checkpoint against held-out site manifests; emits
    per-dataset mean (std) per-slice DSC plus the unweighted average row."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    hp = hp or HyperParams()
    model = restore_model(checkpoint)
    train_datasets = set(checkpoint.meta.get("train_datasets", []))

    rows: list[ScoreRow] = []
    slice_scores: list[SliceScore] = []
    for manifest in eval_manifests:
        if len(manifest) == 0:
            raise ProtocolError("cross-dataset evaluation received an empty manifest")
        names = manifest.dataset_names()
        overlap = names & train_datasets
        if overlap:
            raise ProtocolError(
                f"evaluation datasets {sorted(overlap)} overlap the checkpoint's training datasets"
            )
        images, masks, ids = _eval_manifest_arrays(manifest, model.config.input_size)
        logits = predict_logits(model, images, hp.batch_size)
        scores = per_slice_dsc(logits, masks, hp.threshold)
        label = "+".join(sorted(names))
        rows.append(ScoreRow(model.kind, label, float(np.mean(scores)), _population_std(scores), len(scores)))
        slice_scores.extend(SliceScore(sid, model.kind, s) for sid, s in zip(ids, scores))
    return CrossDatasetResult(
        table=ScoreTable(rows=with_average(rows), aggregation="per_slice"),
        slice_scores=slice_scores,
    )


def dsc_gain(prob_table: ScoreTable, det_table: ScoreTable) -> GainTable:
    """Per-dataset mean-DSC deltas (probabilistic minus deterministic) plus
    their average; tables must carry the same dataset rows in order."""
    prob_rows = [r for r in prob_table.rows if r.dataset_name != "Average"]
    det_rows = [r for r in det_table.rows if r.dataset_name != "Average"]
    if [r.dataset_name for r in prob_rows] != [r.dataset_name for r in det_rows]:
        raise ProtocolError(
            f"dataset rows differ: {[r.dataset_name for r in prob_rows]} vs {[r.dataset_name for r in det_rows]}"
        )
    if not prob_rows:
        raise ProtocolError("gain requires at least one dataset row")
    rows = [GainRow(p.dataset_name, p.mean_dsc - d.mean_dsc) for p, d in zip(prob_rows, det_rows)]
    rows.append(GainRow("Average", float(np.mean([r.delta for r in rows]))))
    prob_kind = prob_rows[0].model_kind
    det_kind = det_rows[0].model_kind
    return GainTable(label=f"{prob_kind} vs {det_kind}", rows=rows)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

REPORT_FORMATS = ("aligned-text", "comma-separated", "markdown")


def _fmt(x: float) -> str:
    return f"{x:.3f}"


def _fmt_signed(x: float) -> str:
    return f"{x:+.3f}"


def _score_grid(table: ScoreTable) -> tuple[list[str], list[str], dict[tuple[str, str], ScoreRow]]:
    kinds = table.kinds()
    datasets = table.datasets()
    if "Average" in datasets:
        datasets = [d for d in datasets if d != "Average"] + ["Average"]
    cells = {(r.model_kind, r.dataset_name): r for r in table.rows}
    return kinds, datasets, cells


def _best_means(kinds, datasets, cells) -> dict[str, float]:
    best: dict[str, float] = {}
    for ds in datasets:
        means = [cells[(k, ds)].mean_dsc for k in kinds if (k, ds) in cells]
        if means:
            best[ds] = max(means)
    return best


def _render_score(table: ScoreTable, fmt: str) -> list[str]:
    kinds, datasets, cells = _score_grid(table)
    mark = len(kinds) > 1
    best = _best_means(kinds, datasets, cells)

    if fmt == "comma-separated":
        header = ["model"]
        for ds in datasets:
            header += [f"{ds}_mean", f"{ds}_std", f"{ds}_n"]
        lines = [",".join(header)]
        for kind in kinds:
            row = [kind]
            for ds in datasets:
                r = cells.get((kind, ds))
                row += ["", "", ""] if r is None else [_fmt(r.mean_dsc), _fmt(r.std_dsc), str(r.n)]
            lines.append(",".join(row))
        return lines

    def cell_text(kind: str, ds: str) -> str:
        r = cells.get((kind, ds))
        if r is None:
            return "-"
        text = f"{_fmt(r.mean_dsc)} ({_fmt(r.std_dsc)})"
        if mark and r.mean_dsc == best[ds]:
            text = f"**{text}**" if fmt == "markdown" else f"{text}*"
        return text

    header = ["model"] + datasets
    body = [[kind] + [cell_text(kind, ds) for ds in datasets] for kind in kinds]
    if fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "|".join(" --- " for _ in header) + "|"]
        lines += ["| " + " | ".join(row) + " |" for row in body]
        return lines
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in body]
    return lines


def _render_gain(tables: list[GainTable], fmt: str) -> list[str]:
    datasets = [r.dataset_name for r in tables[0].rows]
    for t in tables:
        if [r.dataset_name for r in t.rows] != datasets:
            raise ProtocolError("gain tables carry different dataset rows")
    header = ["model pair"] + datasets
    body = [[t.label] + [_fmt_signed(r.delta) for r in t.rows] for t in tables]
    if fmt == "comma-separated":
        return [",".join(header)] + [",".join(row) for row in body]
    if fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "|".join(" --- " for _ in header) + "|"]
        lines += ["| " + " | ".join(row) + " |" for row in body]
        return lines
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in body]
    return lines


def _render_timing(rows: list[tuple[str, float, float, int]], fmt: str) -> list[str]:
    header = ["model", "mean_seconds", "median_seconds", "epochs"]
    body = [[kind, f"{mean:.3f}", f"{med:.3f}", str(n)] for kind, mean, med, n in rows]
    if fmt == "comma-separated":
        return [",".join(header)] + [",".join(row) for row in body]
    if fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "|".join(" --- " for _ in header) + "|"]
        lines += ["| " + " | ".join(row) + " |" for row in body]
        return lines
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in body]
    return lines


def render_report(tables: list[tuple[str, object]], fmt: str = "aligned-text") -> str:
    """Render (title, table) sections into one document; deterministic bytes
    for fixed input. The best mean per dataset column is marked when more
    than one model row is present."""
    if fmt not in REPORT_FORMATS:
        raise ValueError(f"unknown format {fmt!r}; choose one of {REPORT_FORMATS}")
    if not tables:
        raise ValueError("render_report needs at least one table")
    chunks: list[str] = []
    for title, table in tables:
        if fmt == "markdown":
            lines = [f"## {title}", ""]
        else:
            lines = [f"# {title}"]
        if isinstance(table, ScoreTable):
            lines += _render_score(table, fmt)
        elif isinstance(table, GainTable):
            lines += _render_gain([table], fmt)
        elif isinstance(table, list) and table and isinstance(table[0], GainTable):
            lines += _render_gain(table, fmt)
        elif isinstance(table, list):
            lines += _render_timing(table, fmt)
        else:
            raise TypeError(f"cannot render table of type {type(table).__name__}")
        chunks.append("\n".join(lines))
    return "\n\n".join(chunks) + "\n"


_FLOAT_RE = re.compile(r"[-+]?\d+\.\d+")


def parse_report_numbers(document: str) -> list[float]:
    """Extract the numeric content of a rendered report (markers stripped),
    for cross-format equality checks."""
    out: list[float] = []
    for line in document.splitlines():
        if line.startswith("#") or line.startswith("| ---") or line.startswith("|---"):
            continue
        out.extend(float(m) for m in _FLOAT_RE.findall(line))
    return out


def write_scores(scores: list[SliceScore], path: str | Path) -> None:
    lines = [f"{s.slice_id}\t{s.model_kind}\t{s.dsc:.6f}" for s in scores]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_scores(path: str | Path) -> list[SliceScore]:
    scores = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        sid, kind, value = line.split("\t")
        scores.append(SliceScore(sid, kind, float(value)))
    return scores


__all__ = [
    "ProtocolError",
    "ScoreRow",
    "ScoreTable",
    "GainRow",
    "GainTable",
    "SliceScore",
    "KFoldResult",
    "CrossDatasetResult",
    "with_average",
    "merge_tables",
    "run_kfold",
    "run_crossdataset",
    "dsc_gain",
    "REPORT_FORMATS",
    "render_report",
    "parse_report_numbers",
    "write_scores",
    "read_scores",
]
