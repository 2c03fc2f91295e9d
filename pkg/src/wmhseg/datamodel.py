"""Domain types and on-disk formats: slices, masks, manifests, checkpoints, splits.

File formats (all little-endian, bit-exact round-trips):

Slice/mask container, magic ``WMHS``::

    magic     4 bytes  b"WMHS"
    version   u8       currently 1
    dtype     u8       0 = f32 image, 1 = u8 mask
    height    u32
    width     u32
    payload   height*width * (4 bytes f32 | 1 byte u8), row-major
    meta_len  u32
    meta      meta_len bytes, UTF-8 JSON (SliceMeta fields; empty for masks)

Manifest: one record per line, tab-separated::

    id  image_path  mask_path  dataset  patient  volume  slice_index  aug_tag

Paths are stored POSIX-relative to the manifest file's directory.

Checkpoint: a sequence of parameter records followed by one metadata record::

    record:   name_len u32 (>0), name bytes, rank u8, rank*u32 dims,
              prod(dims) * f32 payload
    trailer:  u32 0, meta_len u32, meta UTF-8 JSON
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"WMHS"
FORMAT_VERSION = 1
DTYPE_IMAGE = 0
DTYPE_MASK = 1

DATASET_NAMES = ("ADNI", "Singapore", "GE3T", "Utrecht", "SYNTH")
# ADNI-like data trains; the three challenge sites are held out for
# cross-dataset evaluation; SYNTH stands in for training-grade data.
DATASET_ROLES = {
    "ADNI": "training",
    "SYNTH": "training",
    "Singapore": "evaluation",
    "GE3T": "evaluation",
    "Utrecht": "evaluation",
}


class DataFormatError(Exception):
    """Base error for slice/mask/checkpoint container problems."""


class BadMagicError(DataFormatError):
    """File does not start with the expected magic bytes."""


class TruncatedPayloadError(DataFormatError):
    """File ends before the declared payload/metadata is complete."""


class PayloadMismatchError(DataFormatError):
    """Declared dimensions disagree with the payload or dtype byte."""


class ManifestError(Exception):
    """Manifest parse or validation failure."""


class SplitError(ValueError):
    """Invalid k-fold split request."""


@dataclass(frozen=True)
class SliceMeta:
    dataset_name: str
    patient_id: str
    volume_id: str
    slice_index: int
    augmentation_tag: str = "orig"

    def __post_init__(self) -> None:
        if self.dataset_name not in DATASET_NAMES:
            raise ValueError(f"unknown dataset_name {self.dataset_name!r}")
        if self.slice_index < 0:
            raise ValueError("slice_index must be >= 0")

    @property
    def role(self) -> str:
        return DATASET_ROLES[self.dataset_name]


@dataclass(frozen=True)
class Slice2D:
    """Single-channel 2D image; pixels are row-major float32."""

    pixels: np.ndarray
    meta: SliceMeta

    def __post_init__(self) -> None:
        if self.pixels.ndim != 2 or self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ValueError(f"pixels must be a non-empty 2D array, got shape {self.pixels.shape}")
        if self.pixels.dtype != np.float32:
            object.__setattr__(self, "pixels", self.pixels.astype(np.float32))
        self.pixels.setflags(write=False)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class Mask2D:
    """Binary raster aligned to a Slice2D; values are exactly 0 or 1."""

    values: np.ndarray

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ValueError(f"values must be a non-empty 2D array, got shape {self.values.shape}")
        if self.values.dtype != np.uint8:
            object.__setattr__(self, "values", self.values.astype(np.uint8))
        bad = (self.values > 1).sum()
        if bad:
            raise ValueError(f"mask contains {bad} values outside {{0,1}}")
        self.values.setflags(write=False)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# Slice / mask container IO
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sBBII")


def _meta_to_json(meta: SliceMeta) -> bytes:
    d = {
        "dataset_name": meta.dataset_name,
        "patient_id": meta.patient_id,
        "volume_id": meta.volume_id,
        "slice_index": meta.slice_index,
        "augmentation_tag": meta.augmentation_tag,
    }
    return json.dumps(d, separators=(",", ":")).encode("utf-8")


def _meta_from_json(raw: bytes, path: Path) -> SliceMeta:
    try:
        d = json.loads(raw.decode("utf-8"))
        return SliceMeta(
            dataset_name=d["dataset_name"],
            patient_id=d["patient_id"],
            volume_id=d["volume_id"],
            slice_index=int(d["slice_index"]),
            augmentation_tag=d["augmentation_tag"],
        )
    except (ValueError, KeyError) as exc:
        raise PayloadMismatchError(f"{path}: corrupt metadata block: {exc}") from exc


def write_slice(slc: Slice2D, path: str | Path) -> None:
    path = Path(path)
    meta = _meta_to_json(slc.meta)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_IMAGE, slc.height, slc.width))
        fh.write(np.ascontiguousarray(slc.pixels, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)


def write_mask(mask: Mask2D, path: str | Path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_MASK, mask.height, mask.width))
        fh.write(np.ascontiguousarray(mask.values, dtype=np.uint8).tobytes())
        fh.write(struct.pack("<I", 0))


def _read_exact(fh, n: int, path: Path, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedPayloadError(f"{path}: truncated {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def read_header(path: str | Path) -> tuple[int, int, int]:
    """Parse and validate the container header; returns (dtype, height, width)."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = _read_exact(fh, _HEADER.size, path, "header")
    magic, version, dtype, height, width = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise PayloadMismatchError(f"{path}: unsupported format version {version}")
    if dtype not in (DTYPE_IMAGE, DTYPE_MASK):
        raise PayloadMismatchError(f"{path}: unknown dtype byte {dtype}")
    if height < 1 or width < 1:
        raise PayloadMismatchError(f"{path}: degenerate dimensions {height}x{width}")
    return dtype, height, width


def _read_container(path: Path) -> tuple[int, int, int, bytes, bytes]:
    dtype, height, width = read_header(path)
    itemsize = 4 if dtype == DTYPE_IMAGE else 1
    with open(path, "rb") as fh:
        fh.seek(_HEADER.size)
        payload = _read_exact(fh, height * width * itemsize, path, "payload")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, path, "metadata length"))
        meta = _read_exact(fh, meta_len, path, "metadata block")
    return dtype, height, width, payload, meta


def read_slice(path: str | Path) -> Slice2D:
    path = Path(path)
    dtype, height, width, payload, meta = _read_container(path)
    if dtype != DTYPE_IMAGE:
        raise PayloadMismatchError(f"{path}: expected an image container, found dtype byte {dtype}")
    pixels = np.frombuffer(payload, dtype="<f4").reshape(height, width).astype(np.float32)
    return Slice2D(pixels=pixels, meta=_meta_from_json(meta, path))


def read_mask(path: str | Path) -> Mask2D:
    path = Path(path)
    dtype, height, width, payload, _ = _read_container(path)
    if dtype != DTYPE_MASK:
        raise PayloadMismatchError(f"{path}: expected a mask container, found dtype byte {dtype}")
    values = np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()
    return Mask2D(values=values)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

_MANIFEST_FIELDS = 8


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    image_path: str
    mask_path: str
    meta: SliceMeta


@dataclass
class DatasetManifest:
    """Ordered slice/mask records; order is the canonical split index order."""

    records: list[ManifestRecord]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def image_file(self, rec: ManifestRecord) -> Path:
        return self.root / rec.image_path

    def mask_file(self, rec: ManifestRecord) -> Path:
        return self.root / rec.mask_path

    def dataset_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for rec in self.records:
            counts[rec.meta.dataset_name] = counts.get(rec.meta.dataset_name, 0) + 1
        return counts

    def dataset_names(self) -> set[str]:
        return {rec.meta.dataset_name for rec in self.records}

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest(records=[self.records[i] for i in indices], root=self.root)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    lines = []
    for rec in manifest.records:
        m = rec.meta
        lines.append(
            "\t".join(
                (
                    rec.id,
                    rec.image_path,
                    rec.mask_path,
                    m.dataset_name,
                    m.patient_id,
                    m.volume_id,
                    str(m.slice_index),
                    m.augmentation_tag,
                )
            )
        )
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_manifest(path: str | Path, validate: bool = True) -> DatasetManifest:
    """Load a tab-separated manifest; file paths resolve relative to it.

    Validation checks id uniqueness, dataset names, and that every referenced
    file exists and carries a parseable container header.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    records: list[ManifestRecord] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != _MANIFEST_FIELDS:
            raise ManifestError(f"{path}:{lineno}: expected {_MANIFEST_FIELDS} fields, got {len(fields)}")
        rec_id, image_path, mask_path, dataset, patient, volume, slice_index, aug_tag = fields
        if rec_id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate id {rec_id!r}")
        seen.add(rec_id)
        try:
            meta = SliceMeta(
                dataset_name=dataset,
                patient_id=patient,
                volume_id=volume,
                slice_index=int(slice_index),
                augmentation_tag=aug_tag,
            )
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from exc
        records.append(ManifestRecord(id=rec_id, image_path=image_path, mask_path=mask_path, meta=meta))

    manifest = DatasetManifest(records=records, root=root)
    if validate:
        _validate_files(manifest)
    counts = manifest.dataset_counts()
    if not records:
        log.warning("manifest %s is empty", path)
    else:
        summary = ", ".join(f"{name}={n}" for name, n in sorted(counts.items()))
        log.info("manifest %s: %d records (%s)", path, len(records), summary)
    return manifest


def _validate_files(manifest: DatasetManifest) -> None:
    for rec in manifest.records:
        for label, p in (("image", manifest.image_file(rec)), ("mask", manifest.mask_file(rec))):
            if not p.exists():
                raise ManifestError(f"record {rec.id!r}: missing {label} file {p}")
            try:
                read_header(p)
            except DataFormatError as exc:
                raise ManifestError(f"record {rec.id!r}: unreadable {label} file: {exc}") from exc


# ---------------------------------------------------------------------------
# k-fold splitting
# ---------------------------------------------------------------------------


def kfold_split(n: int, k: int, seed: int) -> list[tuple[list[int], list[int]]]:
    """Partition indices 0..n-1 into k (train, test) pairs.

    Indices are shuffled once with the given seed, then chunked contiguously;
    test folds are disjoint, cover all indices, and differ in size by at most 1.
    """
    if k < 2:
        raise SplitError(f"k must be >= 2, got {k}")
    if n < k:
        raise SplitError(f"need at least k={k} items, got n={n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    base, extra = divmod(n, k)
    folds: list[tuple[list[int], list[int]]] = []
    start = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        test = perm[start : start + size]
        train = np.concatenate([perm[:start], perm[start + size :]])
        folds.append(([int(j) for j in train], [int(j) for j in test]))
        start += size
    return folds


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Named f32 parameter blobs plus selection metadata.

    ``meta`` holds at least epoch, val_dsc and model_config_hash; the trainer
    also stores the full model config and training dataset names so that a
    checkpoint is self-contained for later evaluation.
    """

    params: dict[str, np.ndarray]
    meta: dict

    @property
    def epoch(self) -> int:
        return int(self.meta["epoch"])

    @property
    def val_dsc(self) -> float:
        return float(self.meta["val_dsc"])

    @property
    def model_config_hash(self) -> str:
        return str(self.meta["model_config_hash"])


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        for name, arr in ckpt.params.items():
            a = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", a.ndim))
            for d in a.shape:
                fh.write(struct.pack("<I", d))
            fh.write(a.tobytes())
        meta = json.dumps(ckpt.meta, separators=(",", ":")).encode("utf-8")
        fh.write(struct.pack("<I", 0))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"checkpoint not found: {path}")
    params: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        while True:
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, path, "record header"))
            if name_len == 0:
                (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, path, "metadata length"))
                raw = _read_exact(fh, meta_len, path, "metadata block")
                try:
                    meta = json.loads(raw.decode("utf-8"))
                except ValueError as exc:
                    raise PayloadMismatchError(f"{path}: corrupt checkpoint metadata: {exc}") from exc
                if fh.read(1):
                    raise PayloadMismatchError(f"{path}: trailing bytes after metadata record")
                return Checkpoint(params=params, meta=meta)
            name = _read_exact(fh, name_len, path, "parameter name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, path, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, path, "dims")) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            payload = _read_exact(fh, 4 * count, path, f"payload of {name!r}")
            params[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


__all__ = [
    "MAGIC",
    "DATASET_NAMES",
    "DATASET_ROLES",
    "DataFormatError",
    "BadMagicError",
    "TruncatedPayloadError",
    "PayloadMismatchError",
    "ManifestError",
    "SplitError",
    "SliceMeta",
    "Slice2D",
    "Mask2D",
    "ManifestRecord",
    "DatasetManifest",
    "write_slice",
    "write_mask",
    "read_slice",
    "read_mask",
    "read_header",
    "write_manifest",
    "load_manifest",
    "kfold_split",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
]
