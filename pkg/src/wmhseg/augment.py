"""Preprocessing, geometric augmentation, and a synthetic lesion dataset generator.

Pipeline order for materialized datasets: geometric ops first, then z-score
normalization, then rescale-and-pad to the square target size. All operations
are pure functions of their inputs and the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .datamodel import (
    DatasetManifest,
    ManifestRecord,
    Mask2D,
    Slice2D,
    SliceMeta,
    read_mask,
    read_slice,
    write_manifest,
    write_mask,
    write_slice,
)

ZERO_VARIANCE_EPS = 1e-8


@dataclass(frozen=True)
class AugmentPolicy:
    """Which variants to materialize and how to finish each slice."""

    do_hflip: bool = True
    rotation_degrees: tuple[float, ...] = (-10.0, 10.0)
    target_size: int = 128
    zscore: bool = True

    def __post_init__(self) -> None:
        if self.target_size < 16 or (self.target_size & (self.target_size - 1)) != 0:
            raise ValueError(f"target_size must be a power of two >= 16, got {self.target_size}")
        for a in self.rotation_degrees:
            if not -180.0 <= a <= 180.0:
                raise ValueError(f"rotation angle {a} outside [-180, 180]")

    def variant_tags(self) -> list[str]:
        tags = ["orig"]
        if self.do_hflip:
            tags.append("hflip")
        tags.extend(f"rot{a:+g}" for a in self.rotation_degrees)
        return tags


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic scan generator settings.

    Produces smooth ellipsoidal "brain" backgrounds with small bright lesions
    and exact lesion masks. With ambiguity_jitter > 0, a second rater mask with
    perturbed lesion radii is written per slice and both raters appear as
    separate manifest records sharing the image. Lesions are placed far enough
    apart that jittered disks never merge.
    """

    n_patients: int = 4
    slices_per_patient: int = 8
    lesion_count_range: tuple[int, int] = (1, 3)
    lesion_radius_range: tuple[float, float] = (1.0, 4.0)
    ambiguity_jitter: float = 0.0
    image_size: int = 128
    dataset_name: str = "SYNTH"
    seed: int = 0

    def __post_init__(self) -> None:
        lo, hi = self.lesion_count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad lesion_count_range {self.lesion_count_range}")
        rlo, rhi = self.lesion_radius_range
        if rlo < 1.0 or rhi < rlo:
            raise ValueError(f"lesion radii must be >= 1 px and ordered, got {self.lesion_radius_range}")
        if self.ambiguity_jitter < 0:
            raise ValueError("ambiguity_jitter must be >= 0")
        if self.n_patients < 1 or self.slices_per_patient < 1:
            raise ValueError("n_patients and slices_per_patient must be >= 1")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")


# ---------------------------------------------------------------------------
# Per-slice operations
# ---------------------------------------------------------------------------


def zscore_normalize(slc: Slice2D) -> Slice2D:
    """Zero-mean unit-variance (population std); constant slices map to zeros."""
    x = slc.pixels.astype(np.float64)
    std = x.std()
    if std < ZERO_VARIANCE_EPS:
        out = np.zeros_like(x, dtype=np.float32)
    else:
        out = ((x - x.mean()) / std).astype(np.float32)
    return Slice2D(pixels=out, meta=slc.meta)


def _scaled_shape(h: int, w: int, target: int) -> tuple[int, int]:
    scale = target / max(h, w)
    return max(1, round(h * scale)), max(1, round(w * scale))


def _resize(arr: np.ndarray, shape: tuple[int, int], mode: str) -> np.ndarray:
    if arr.shape == shape:
        return arr.copy()
    t = torch.from_numpy(np.array(arr, dtype=np.float32))[None, None]
    out = F.interpolate(t, size=shape, mode=mode)
    return out[0, 0].numpy()


def rescale_and_pad(slc: Slice2D, target: int) -> Slice2D:
    """Aspect-preserving bilinear rescale so the larger dimension equals
    ``target``, centered on a zero-filled target x target canvas."""
    if target < 1:
        raise ValueError(f"target must be >= 1, got {target}")
    new_h, new_w = _scaled_shape(slc.height, slc.width, target)
    content = _resize(slc.pixels, (new_h, new_w), "bilinear")
    out = np.zeros((target, target), dtype=np.float32)
    top, left = (target - new_h) // 2, (target - new_w) // 2
    out[top : top + new_h, left : left + new_w] = content
    return Slice2D(pixels=out, meta=slc.meta)


def rescale_and_pad_mask(mask: Mask2D, target: int) -> Mask2D:
    """Mask counterpart of rescale_and_pad (nearest-neighbor, re-binarized)."""
    if target < 1:
        raise ValueError(f"target must be >= 1, got {target}")
    new_h, new_w = _scaled_shape(mask.height, mask.width, target)
    content = _resize(mask.values.astype(np.float32), (new_h, new_w), "nearest")
    out = np.zeros((target, target), dtype=np.uint8)
    top, left = (target - new_h) // 2, (target - new_w) // 2
    out[top : top + new_h, left : left + new_w] = (content >= 0.5).astype(np.uint8)
    return Mask2D(values=out)


def _check_paired(slc: Slice2D, mask: Mask2D) -> None:
    if (slc.height, slc.width) != (mask.height, mask.width):
        raise ValueError(
            f"slice {slc.height}x{slc.width} and mask {mask.height}x{mask.width} dimensions differ"
        )


def hflip(slc: Slice2D, mask: Mask2D) -> tuple[Slice2D, Mask2D]:
    _check_paired(slc, mask)
    return (
        Slice2D(pixels=slc.pixels[:, ::-1].copy(), meta=slc.meta),
        Mask2D(values=mask.values[:, ::-1].copy()),
    )


def _rotate_array(arr: np.ndarray, angle_degrees: float, order: int) -> np.ndarray:
    # Inverse-map affine about the array center ((h-1)/2, (w-1)/2). A source
    # pixel p maps forward to center + R(theta) @ (p - center) with
    # R = [[cos, -sin], [sin, cos]] acting on (row, col); exterior fills 0.
    t = math.radians(angle_degrees)
    c, s = math.cos(t), math.sin(t)
    inv = np.array([[c, s], [-s, c]])
    center = (np.array(arr.shape) - 1) / 2.0
    offset = center - inv @ center
    return ndimage.affine_transform(
        arr.astype(np.float32), inv, offset=offset, order=order, mode="constant", cval=0.0
    )


def rotate(slc: Slice2D, mask: Mask2D, angle_degrees: float) -> tuple[Slice2D, Mask2D]:
    """Rotate both rasters about the center; bilinear for the image,
    nearest-neighbor (re-binarized) for the mask; exterior fills with 0."""
    _check_paired(slc, mask)
    if angle_degrees == 0.0:
        return Slice2D(pixels=slc.pixels.copy(), meta=slc.meta), Mask2D(values=mask.values.copy())
    pixels = _rotate_array(slc.pixels, angle_degrees, order=1)
    values = (_rotate_array(mask.values, angle_degrees, order=0) >= 0.5).astype(np.uint8)
    return Slice2D(pixels=pixels, meta=slc.meta), Mask2D(values=values)


# ---------------------------------------------------------------------------
# Dataset materialization
# ---------------------------------------------------------------------------


def _apply_variant(slc: Slice2D, mask: Mask2D, tag: str) -> tuple[Slice2D, Mask2D]:
    if tag == "orig":
        return slc, mask
    if tag == "hflip":
        return hflip(slc, mask)
    if tag.startswith("rot"):
        return rotate(slc, mask, float(tag[3:]))
    raise ValueError(f"unknown variant tag {tag!r}")


def _finish(slc: Slice2D, mask: Mask2D, policy: AugmentPolicy) -> tuple[Slice2D, Mask2D]:
    if policy.zscore:
        slc = zscore_normalize(slc)
    return rescale_and_pad(slc, policy.target_size), rescale_and_pad_mask(mask, policy.target_size)


def augment_dataset(
    manifest: DatasetManifest,
    policy: AugmentPolicy,
    out_dir: str | Path,
    seed: int = 0,
) -> DatasetManifest:
    """Materialize originals plus policy variants into ``out_dir``.

    Every emitted record is geometric-transformed, normalized, then
    rescale-padded, and tagged with its variant name. The seed is part of the
    contract for forward compatibility; the current variant set is
    deterministic without it.
    """
    del seed
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    tags = policy.variant_tags()
    records: list[ManifestRecord] = []
    for rec in manifest:
        slc = read_slice(manifest.image_file(rec))
        mask = read_mask(manifest.mask_file(rec))
        for tag in tags:
            v_slc, v_mask = _apply_variant(slc, mask, tag)
            v_slc, v_mask = _finish(v_slc, v_mask, policy)
            rec_id = f"{rec.id}-{tag}"
            image_path = f"images/{rec_id}.wmhs"
            mask_path = f"masks/{rec_id}.wmhs"
            meta = replace(rec.meta, augmentation_tag=tag)
            write_slice(Slice2D(pixels=v_slc.pixels, meta=meta), out_dir / image_path)
            write_mask(v_mask, out_dir / mask_path)
            records.append(ManifestRecord(id=rec_id, image_path=image_path, mask_path=mask_path, meta=meta))
    out = DatasetManifest(records=records, root=out_dir)
    write_manifest(out, out_dir / "manifest.tsv")
    return out


def preprocess_for_eval(slc: Slice2D, mask: Mask2D, target: int) -> tuple[Slice2D, Mask2D]:
    """Evaluation-time preprocessing: z-score and rescale/pad, no geometry."""
    return rescale_and_pad(zscore_normalize(slc), target), rescale_and_pad_mask(mask, target)


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


def _disk_mask(size: int, centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    mask = np.zeros((size, size), dtype=np.uint8)
    rr, cc = np.mgrid[0:size, 0:size]
    for (cy, cx), r in zip(centers, radii):
        if r <= 0:
            continue
        mask[(rr - cy) ** 2 + (cc - cx) ** 2 <= r * r] = 1
    return mask


def _render_slice(size: int, rng: np.random.Generator, cfg: SynthConfig):
    rr, cc = np.mgrid[0:size, 0:size]
    cy, cx = (size - 1) / 2.0, (size - 1) / 2.0
    ay = size * rng.uniform(0.38, 0.44)
    ax = size * rng.uniform(0.32, 0.40)
    rho2 = ((rr - cy) / ay) ** 2 + ((cc - cx) / ax) ** 2
    brain = rho2 <= 1.0

    fy, fx = rng.uniform(1.0, 3.0, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    texture = 0.5 + 0.25 * np.sin(2 * np.pi * fy * rr / size + phase[0]) * np.cos(
        2 * np.pi * fx * cc / size + phase[1]
    )
    image = np.zeros((size, size), dtype=np.float64)
    image[brain] = np.clip(0.2 + 0.4 * (1.0 - rho2[brain]) * texture[brain], 0.2, 0.6)

    n_lesions = int(rng.integers(cfg.lesion_count_range[0], cfg.lesion_count_range[1] + 1))
    centers: list[tuple[float, float]] = []
    radii: list[float] = []
    max_r = cfg.lesion_radius_range[1]
    min_sep = 2 * (max_r + cfg.ambiguity_jitter) + 3.0
    attempts = 0
    while len(centers) < n_lesions and attempts < 1000:
        attempts += 1
        py = rng.uniform(cy - 0.7 * ay, cy + 0.7 * ay)
        px = rng.uniform(cx - 0.7 * ax, cx + 0.7 * ax)
        if ((py - cy) / ay) ** 2 + ((px - cx) / ax) ** 2 > 0.6:
            continue
        if any((py - qy) ** 2 + (px - qx) ** 2 < min_sep**2 for qy, qx in centers):
            continue
        centers.append((py, px))
        radii.append(float(rng.uniform(*cfg.lesion_radius_range)))

    centers_arr = np.array(centers).reshape(-1, 2)
    radii_arr = np.array(radii)
    mask = _disk_mask(size, centers_arr, radii_arr)
    for (py, px), r in zip(centers_arr, radii_arr):
        sel = (rr - py) ** 2 + (cc - px) ** 2 <= r * r
        image[sel] = rng.uniform(0.8, 1.0)

    mask2 = None
    if cfg.ambiguity_jitter > 0:
        deltas = rng.uniform(-cfg.ambiguity_jitter, cfg.ambiguity_jitter, size=len(radii_arr))
        mask2 = _disk_mask(size, centers_arr, np.maximum(radii_arr + deltas, 0.0))
    return image.astype(np.float32), mask, mask2


def synth_generate(config: SynthConfig, out_dir: str | Path) -> DatasetManifest:
    """Write a synthetic dataset and its manifest under ``out_dir``.

    Image payloads are stored z-score normalized so generated manifests feed
    training and evaluation directly. Deterministic per seed; each slice draws
    from an independent seed sequence, so generation may be parallelized.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    records: list[ManifestRecord] = []
    for p in range(config.n_patients):
        for s in range(config.slices_per_patient):
            rng = np.random.default_rng([config.seed, p, s])
            image, mask, mask2 = _render_slice(config.image_size, rng, config)
            stem = f"p{p:03d}-v0-s{s:03d}"
            meta = SliceMeta(
                dataset_name=config.dataset_name,
                patient_id=f"p{p:03d}",
                volume_id="v0",
                slice_index=s,
                augmentation_tag="orig",
            )
            slc = zscore_normalize(Slice2D(pixels=image, meta=meta))
            image_path = f"images/{stem}.wmhs"
            write_slice(slc, out_dir / image_path)

            raters = [("", mask)] if mask2 is None else [("-r0", mask), ("-r1", mask2)]
            for suffix, m in raters:
                rec_id = f"{stem}{suffix}"
                mask_path = f"masks/{rec_id}.wmhs"
                write_mask(Mask2D(values=m), out_dir / mask_path)
                tag = "orig" if not suffix else f"rater{suffix[-1]}"
                records.append(
                    ManifestRecord(
                        id=rec_id,
                        image_path=image_path,
                        mask_path=mask_path,
                        meta=replace(meta, augmentation_tag=tag),
                    )
                )
    manifest = DatasetManifest(records=records, root=out_dir)
    write_manifest(manifest, out_dir / "manifest.tsv")
    return manifest


__all__ = [
    "AugmentPolicy",
    "SynthConfig",
    "zscore_normalize",
    "rescale_and_pad",
    "rescale_and_pad_mask",
    "hflip",
    "rotate",
    "augment_dataset",
    "preprocess_for_eval",
    "synth_generate",
]
