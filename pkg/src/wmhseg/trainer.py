"""Training loop: minibatch Adam, per-epoch timing, best-val-DSC checkpointing.

The loop is a pure function of (model parameters at entry, data, hyperparams):
shuffling, latent sampling, and initialization all run off seeded generators,
so two single-threaded runs produce identical reports.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import nets
from .datamodel import Checkpoint, DatasetManifest, Mask2D, read_mask, read_slice, save_checkpoint
from .objective import binarize, confusion, cross_entropy, dsc, kl_divergence, total_loss

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    """Training aborted because the loss left the finite range."""


@dataclass(frozen=True)
class HyperParams:
    epochs: int = 500
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    beta_kl: float = 1.0
    threshold: float = 0.5
    seed: int = 0
    grad_clip: float | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    ce: float
    kl: float
    total: float
    val_dsc: float
    seconds: float


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_dsc: float = float("-inf")
    checkpoint_path: str = ""
    # (epoch, val_dsc) at each checkpoint save; strictly increasing in val_dsc
    checkpoint_history: list[tuple[int, float]] = field(default_factory=list)

    def to_lines(self) -> str:
        header = "epoch\tce\tkl\ttotal\tval_dsc\tseconds"
        rows = [
            f"{r.epoch}\t{r.ce:.6f}\t{r.kl:.6f}\t{r.total:.6f}\t{r.val_dsc:.6f}\t{r.seconds:.3f}"
            for r in self.records
        ]
        return "\n".join([header, *rows]) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_lines(), encoding="utf-8")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_update(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamState,
    hp: HyperParams,
) -> bool:
    """One bias-corrected Adam step, in place. Returns False (step skipped,
    state untouched) if any gradient is non-finite."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"shape mismatch for {name!r}: param {tuple(params[name].shape)} vs grad {tuple(g.shape)}")
        if not bool(torch.isfinite(g).all()):
            log.warning("non-finite gradient in %r; skipping update step %d", name, state.step + 1)
            return False
    state.step += 1
    t = state.step
    bc1 = 1.0 - hp.beta1**t
    bc2 = 1.0 - hp.beta2**t
    with torch.no_grad():
        for name, g in grads.items():
            if name not in state.m:
                state.m[name] = torch.zeros_like(params[name])
                state.v[name] = torch.zeros_like(params[name])
            m, v = state.m[name], state.v[name]
            m.mul_(hp.beta1).add_(g, alpha=1.0 - hp.beta1)
            v.mul_(hp.beta2).addcmul_(g, g, value=1.0 - hp.beta2)
            params[name].addcdiv_(m / bc1, (v / bc2).sqrt().add_(hp.eps), value=-hp.learning_rate)
    return True


# ---------------------------------------------------------------------------
# Data loading
# ---------------------------------------------------------------------------


def load_arrays(manifest: DatasetManifest) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
    """Materialize a manifest as (images, masks) tensors of shape (N,1,H,W)."""
    if len(manifest) == 0:
        raise ValueError("manifest is empty")
    images, masks, ids = [], [], []
    for rec in manifest:
        slc = read_slice(manifest.image_file(rec))
        msk = read_mask(manifest.mask_file(rec))
        if (slc.height, slc.width) != (msk.height, msk.width):
            raise ValueError(f"record {rec.id!r}: slice/mask dimensions differ")
        images.append(torch.from_numpy(slc.pixels.copy()))
        masks.append(torch.from_numpy(msk.values.astype(np.float32)))
        ids.append(rec.id)
    return torch.stack(images)[:, None], torch.stack(masks)[:, None], ids


def _check_spatial(model: nets.SegModel, images: torch.Tensor, what: str) -> None:
    size = model.config.input_size
    if images.shape[2:] != (size, size):
        raise ValueError(
            f"{what} data is {images.shape[2]}x{images.shape[3]} but the model expects {size}x{size}"
        )


# ---------------------------------------------------------------------------
# Training / validation
# ---------------------------------------------------------------------------


def _batch_loss(model, xb, yb, hp: HyperParams, generator):
    if model.config.is_probabilistic:
        (logits,), prior, posterior = nets.forward_probabilistic(
            model, xb, masks=yb, phase="train", generator=generator
        )
        ce = cross_entropy(logits, yb)
        kl = kl_divergence(posterior, prior)
        return ce + hp.beta_kl * kl, ce.detach().item(), kl.detach().item()
    logits = model(xb)
    ce = cross_entropy(logits, yb)
    return ce, ce.detach().item(), 0.0


def predict_logits(model: nets.SegModel, images: torch.Tensor, batch_size: int = 8) -> torch.Tensor:
    """Deterministic prediction logits (prior mean latent for probabilistic
    kinds); no gradients."""
    outs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            outs.append(model(images[start : start + batch_size]))
    return torch.cat(outs)


def per_slice_dsc(logits: torch.Tensor, masks: torch.Tensor, threshold: float) -> list[float]:
    scores = []
    for i in range(logits.shape[0]):
        pred = binarize(logits[i, 0].numpy(), threshold)
        truth = Mask2D(values=masks[i, 0].numpy().astype(np.uint8))
        scores.append(dsc(confusion(pred, truth)))
    return scores


def validate_arrays(model, images, masks, hp: HyperParams) -> float:
    if images.shape[0] == 0:
        raise ValueError("validation set is empty")
    logits = predict_logits(model, images, hp.batch_size)
    return float(np.mean(per_slice_dsc(logits, masks, hp.threshold)))


def validate(model: nets.SegModel, val_manifest: DatasetManifest, hp: HyperParams) -> float:
    """Mean per-slice DSC over the manifest, thresholded at hp.threshold."""
    images, masks, _ = load_arrays(val_manifest)
    _check_spatial(model, images, "validation")
    return validate_arrays(model, images, masks, hp)


def make_checkpoint(model: nets.SegModel, epoch: int, val_dsc: float, train_datasets: list[str]) -> Checkpoint:
    params = {name: p.detach().numpy().astype(np.float32) for name, p in model.state_dict().items()}
    meta = {
        "epoch": epoch,
        "val_dsc": float(np.float32(val_dsc)),
        "model_config_hash": nets.config_hash(model.config),
        "model_config": model.config.to_dict(),
        "train_datasets": sorted(train_datasets),
    }
    return Checkpoint(params=params, meta=meta)


def restore_model(ckpt: Checkpoint) -> nets.SegModel:
    """Rebuild the model a checkpoint was saved from and load its parameters."""
    config = nets.config_from_dict(ckpt.meta["model_config"])
    if nets.config_hash(config) != ckpt.model_config_hash:
        raise ValueError("checkpoint config hash does not match its stored config")
    model = nets.build_model(config, seed=0)
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ckpt.params.items()})
    return model


def train(
    model: nets.SegModel,
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    hp: HyperParams,
    out_dir: str | Path,
) -> TrainReport:
    """Run hp.epochs of minibatch Adam; checkpoint whenever validation DSC
    strictly improves. Aborts with NonFiniteLossError on a non-finite loss."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images, masks, _ = load_arrays(train_manifest)
    val_images, val_masks, _ = load_arrays(val_manifest)
    _check_spatial(model, images, "training")
    _check_spatial(model, val_images, "validation")

    n = images.shape[0]
    data_gen = torch.Generator().manual_seed(hp.seed)
    latent_gen = torch.Generator().manual_seed(hp.seed + 1)
    params = dict(model.named_parameters())
    state = AdamState()
    report = TrainReport(checkpoint_path=str(out_dir / "best.ckpt"))
    train_datasets = sorted(train_manifest.dataset_names())

    for epoch in range(1, hp.epochs + 1):
        t0 = time.perf_counter()
        perm = torch.randperm(n, generator=data_gen)
        ce_sum = kl_sum = total_sum = 0.0
        n_batches = 0
        for start in range(0, n, hp.batch_size):
            idx = perm[start : start + hp.batch_size]
            xb, yb = images[idx], masks[idx]
            loss, ce_val, kl_val = _batch_loss(model, xb, yb, hp, latent_gen)
            if not bool(torch.isfinite(loss)):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches + 1}: "
                    f"ce={ce_val}, kl={kl_val}"
                )
            model.zero_grad(set_to_none=True)
            loss.backward()
            grads = {name: p.grad for name, p in params.items() if p.grad is not None}
            if hp.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_([params[k] for k in grads], hp.grad_clip)
            adam_update(params, grads, state, hp)
            breakdown = total_loss(ce_val, kl_val, hp.beta_kl, model.kind)
            ce_sum += breakdown.ce
            kl_sum += breakdown.kl
            total_sum += breakdown.total
            n_batches += 1

        val_dsc = validate_arrays(model, val_images, val_masks, hp)
        seconds = time.perf_counter() - t0
        report.records.append(
            EpochRecord(
                epoch=epoch,
                ce=ce_sum / n_batches,
                kl=kl_sum / n_batches,
                total=total_sum / n_batches,
                val_dsc=val_dsc,
                seconds=seconds,
            )
        )
        if val_dsc > report.best_val_dsc:
            report.best_val_dsc = val_dsc
            report.best_epoch = epoch
            report.checkpoint_history.append((epoch, val_dsc))
            save_checkpoint(make_checkpoint(model, epoch, val_dsc, train_datasets), report.checkpoint_path)
        log.info("epoch %d/%d: total=%.4f val_dsc=%.4f (%.2fs)", epoch, hp.epochs,
                 total_sum / n_batches, val_dsc, seconds)

    report.save(out_dir / "train_log.tsv")
    return report


# ---------------------------------------------------------------------------
# Timing
# ---------------------------------------------------------------------------


def time_epochs(reports: dict[str, TrainReport]) -> list[tuple[str, float, float, int]]:
    """Per-model epoch timing rows: (kind, mean_seconds, median_seconds, n)."""
    rows = []
    for kind, report in reports.items():
        secs = [r.seconds for r in report.records]
        if not secs:
            continue
        rows.append((kind, float(np.mean(secs)), float(np.median(secs)), len(secs)))
    return rows


__all__ = [
    "NonFiniteLossError",
    "HyperParams",
    "EpochRecord",
    "TrainReport",
    "AdamState",
    "adam_update",
    "load_arrays",
    "predict_logits",
    "per_slice_dsc",
    "validate",
    "validate_arrays",
    "make_checkpoint",
    "restore_model",
    "train",
    "time_epochs",
]
