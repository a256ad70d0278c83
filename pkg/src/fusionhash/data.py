"""Embedding records, the MEB1 file format, dataset splits, and a
synthetic clustered-embedding generator for desk-scale verification.

MEB1 layout (little-endian, no padding):
    magic "MEB1" | u32 dim_image | u32 dim_text | u32 num_classes |
    u64 record_count | record_count x [dim_image f32][dim_text f32][u32 class_id]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng
from .errors import (
    BadMagicError,
    ConfigError,
    DataError,
    DatasetTooSmallError,
    HeaderMismatchError,
    ShapeError,
    TruncatedFileError,
)

MAGIC = b"MEB1"
_HEADER = struct.Struct("<4sIIIQ")

IMAGE_DIM = 512
TEXT_DIM = 512
FUSED_DIM = IMAGE_DIM + TEXT_DIM

SPLIT_RATIO = (1, 6, 3)  # query : retrieval : train


@dataclass
class EmbeddingRecord:
    """One (image embedding, text embedding, class label) triple."""

    image: np.ndarray  # float32 [dim_image]
    text: np.ndarray  # float32 [dim_text]
    class_id: int


class RecordSet:
    """Columnar store of embedding records (the pipeline's input atom)."""

    def __init__(self, images: np.ndarray, texts: np.ndarray,
                 class_ids: np.ndarray, num_classes: int):
        images = np.ascontiguousarray(images, dtype=np.float32)
        texts = np.ascontiguousarray(texts, dtype=np.float32)
        class_ids = np.ascontiguousarray(class_ids, dtype=np.uint32)
        if not (len(images) == len(texts) == len(class_ids)):
            raise ShapeError("images, texts and class_ids must have equal length")
        if not np.isfinite(images).all() or not np.isfinite(texts).all():
            raise DataError("embeddings contain non-finite values")
        if len(class_ids) and class_ids.max() >= num_classes:
            raise DataError(
                f"class_id {class_ids.max()} out of range for {num_classes} classes"
            )
        self.images = images
        self.texts = texts
        self.class_ids = class_ids
        self.num_classes = int(num_classes)

    def __len__(self) -> int:
        return len(self.class_ids)

    @property
    def dim_image(self) -> int:
        return self.images.shape[1]

    @property
    def dim_text(self) -> int:
        return self.texts.shape[1]

    def record(self, i: int) -> EmbeddingRecord:
        return EmbeddingRecord(self.images[i], self.texts[i], int(self.class_ids[i]))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, RecordSet)
            and self.num_classes == other.num_classes
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.texts, other.texts)
            and np.array_equal(self.class_ids, other.class_ids)
        )


def concat_embedding(record: EmbeddingRecord) -> np.ndarray:
    """Fuse one record into a float64 [1024] vector: image first, text second."""
    if record.image.shape != (IMAGE_DIM,) or record.text.shape != (TEXT_DIM,):
        raise ShapeError(
            f"expected dims {IMAGE_DIM}+{TEXT_DIM}, "
            f"got {record.image.shape} and {record.text.shape}"
        )
    return np.concatenate([record.image, record.text]).astype(np.float64)


def concat_all(records: RecordSet) -> np.ndarray:
    """Fused float64 [n, 1024] matrix for a whole record set."""
    if records.dim_image != IMAGE_DIM or records.dim_text != TEXT_DIM:
        raise ShapeError(
            f"expected dims {IMAGE_DIM}+{TEXT_DIM}, "
            f"got {records.dim_image}+{records.dim_text}"
        )
    return np.concatenate([records.images, records.texts], axis=1).astype(np.float64)


# ----------------------------------------------------------------------
# MEB1 read / write
# ----------------------------------------------------------------------
def _record_dtype(dim_image: int, dim_text: int) -> np.dtype:
    return np.dtype(
        [("image", "<f4", dim_image), ("text", "<f4", dim_text), ("class_id", "<u4")]
    )


def write_records(path: str | Path, records: RecordSet) -> None:
    dtype = _record_dtype(records.dim_image, records.dim_text)
    payload = np.empty(len(records), dtype=dtype)
    payload["image"] = records.images
    payload["text"] = records.texts
    payload["class_id"] = records.class_ids
    header = _HEADER.pack(
        MAGIC, records.dim_image, records.dim_text, records.num_classes, len(records)
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_records(path: str | Path,
                 expected_dims: tuple[int, int] | None = None) -> RecordSet:
    """Parse an MEB1 file; the round trip with write_records is bit-exact."""
    try:
        raw = Path(path).read_bytes()
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from None
    if len(raw) < _HEADER.size:
        if raw[:4] != MAGIC and len(raw) >= 4:
            raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
        raise TruncatedFileError(f"{path}: header truncated ({len(raw)} bytes)")
    magic, dim_image, dim_text, num_classes, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if expected_dims is not None and (dim_image, dim_text) != expected_dims:
        raise HeaderMismatchError(
            f"{path}: header declares dims {dim_image}/{dim_text}, "
            f"expected {expected_dims[0]}/{expected_dims[1]}"
        )
    dtype = _record_dtype(dim_image, dim_text)
    expected_bytes = count * dtype.itemsize
    body = raw[_HEADER.size:]
    if len(body) < expected_bytes:
        raise TruncatedFileError(
            f"{path}: payload holds {len(body)} bytes, header promises {expected_bytes}"
        )
    if len(body) > expected_bytes:
        raise DataError(f"{path}: {len(body) - expected_bytes} trailing bytes after payload")
    payload = np.frombuffer(body, dtype=dtype, count=count)
    return RecordSet(payload["image"], payload["text"], payload["class_id"], num_classes)


# ----------------------------------------------------------------------
# query / retrieval / train split
# ----------------------------------------------------------------------
@dataclass
class DatasetSplit:
    """Disjoint, exhaustive index lists in ratio ~1:6:3."""

    query: np.ndarray
    retrieval: np.ndarray
    train: np.ndarray

    def sizes(self) -> tuple[int, int, int]:
        return len(self.query), len(self.retrieval), len(self.train)


def split_sizes(n: int, ratio: tuple[int, int, int] = SPLIT_RATIO) -> tuple[int, ...]:
    """Largest-remainder apportionment of n items; ties go to the query set."""
    total = sum(ratio)
    ideal = [n * r / total for r in ratio]
    sizes = [int(x) for x in ideal]
    leftover = n - sum(sizes)
    # Ties broken toward earlier sets (query first).
    order = sorted(range(len(ratio)), key=lambda i: (-(ideal[i] - sizes[i]), i))
    for i in order[:leftover]:
        sizes[i] += 1
    return tuple(sizes)


def split_dataset(n: int, seed: int,
                  ratio: tuple[int, int, int] = SPLIT_RATIO) -> DatasetSplit:
    if n < 10:
        raise DatasetTooSmallError(f"need at least 10 records to split, got {n}")
    perm = rng.stream(seed, "split").permutation(n)
    n_query, n_retrieval, _ = split_sizes(n, ratio)
    return DatasetSplit(
        query=perm[:n_query],
        retrieval=perm[n_query:n_query + n_retrieval],
        train=perm[n_query + n_retrieval:],
    )


# ----------------------------------------------------------------------
# synthetic clustered embeddings
# ----------------------------------------------------------------------
@dataclass
class SyntheticSpec:
    """Parameters for the clustered unit-norm embedding generator."""

    num_classes: int = 10
    samples_per_class: int = 200
    dim: int = 512
    cluster_spread: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes <= 0 or self.samples_per_class <= 0 or self.dim <= 0:
            raise ConfigError("num_classes, samples_per_class and dim must be positive")
        if self.cluster_spread < 0:
            raise ConfigError("cluster_spread must be non-negative")


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def generate_synthetic(spec: SyntheticSpec) -> RecordSet:
    """Per class: unit-norm image/text centroids plus Gaussian noise, renormalized.

    With cluster_spread=0 every sample lands exactly on its class centroid,
    which keeps the degenerate case bit-reproducible.
    """
    spec.validate()
    gen = rng.stream(spec.seed, "synth")
    raw_img = gen.standard_normal((spec.num_classes, spec.dim))
    raw_txt = gen.standard_normal((spec.num_classes, spec.dim))
    n = spec.num_classes * spec.samples_per_class
    class_ids = np.repeat(np.arange(spec.num_classes, dtype=np.uint32),
                          spec.samples_per_class)
    noise_img = gen.standard_normal((n, spec.dim))
    noise_txt = gen.standard_normal((n, spec.dim))
    images = _normalize_rows(raw_img[class_ids] + spec.cluster_spread * noise_img)
    texts = _normalize_rows(raw_txt[class_ids] + spec.cluster_spread * noise_txt)
    return RecordSet(images.astype(np.float32), texts.astype(np.float32),
                     class_ids, spec.num_classes)
