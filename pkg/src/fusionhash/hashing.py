"""Hashing heads, bit-packed codes, Hamming retrieval, mAP, and the
hash-vs-float efficiency benchmark.

Codes pack bit i of a b-bit code into 64-bit word i // 64 at position
i % 64 (little-endian within words), so serialized codes are stable
across languages. Distances use the XOR + popcount identity.

MHC1 dump layout (little-endian):
    magic "MHC1" | u32 code_bits | u64 count |
    count x [ceil(b/64) u64 words][u32 class_id]
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, dropout, kaiming_uniform, relu, tanh
from .errors import (
    BadMagicError,
    ConfigError,
    DataError,
    ShapeError,
    TruncatedFileError,
)
from .rng import stream

VALID_CODE_BITS = (16, 32, 64)
CODE_MAGIC = b"MHC1"
_CODE_HEADER = struct.Struct("<4sIQ")


# ----------------------------------------------------------------------
# hashing head
# ----------------------------------------------------------------------
@dataclass
class HashHeadConfig:
    input_dim: int = 512
    hidden_dim: int = 512
    code_bits: int = 16
    dropout_p: float = 0.2

    def validate(self) -> None:
        if self.code_bits not in VALID_CODE_BITS:
            raise ConfigError(
                f"code_bits must be one of {VALID_CODE_BITS}, got {self.code_bits}"
            )
        if self.input_dim <= 0 or self.hidden_dim <= 0:
            raise ConfigError("head dims must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


class HashHead:
    """Two-layer relaxed-code head: linear, ReLU, dropout, linear, tanh.

    The image and text branches each own an instance (separate parameters).
    """

    def __init__(self, cfg: HashHeadConfig, seed: int = 0, name: str = "hash"):
        cfg.validate()
        self.cfg = cfg
        self.name = name
        init = stream(seed, f"{name}-init")
        self.w1 = Tensor(kaiming_uniform(init, (cfg.input_dim, cfg.hidden_dim),
                                         cfg.input_dim), requires_grad=True)
        self.b1 = Tensor(np.zeros(cfg.hidden_dim), requires_grad=True)
        self.w2 = Tensor(kaiming_uniform(init, (cfg.hidden_dim, cfg.code_bits),
                                         cfg.hidden_dim), requires_grad=True)
        self.b2 = Tensor(np.zeros(cfg.code_bits), requires_grad=True)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{self.name}.{n}", getattr(self, n)) for n in ("w1", "b1", "w2", "b2")]

    def trainable_parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def forward(self, x: Tensor, masks: np.random.Generator | None = None) -> Tensor:
        """Relaxed codes in (-1, 1); dropout applies only when `masks` is given."""
        hidden = relu(x @ self.w1 + self.b1)
        if masks is not None and self.cfg.dropout_p > 0.0:
            hidden = dropout(hidden, self.cfg.dropout_p, masks)
        return tanh(hidden @ self.w2 + self.b2)


# ----------------------------------------------------------------------
# bit-packed codes
# ----------------------------------------------------------------------
@dataclass
class PackedCodes:
    """b-bit codes packed into uint64 words; unused high bits are zero."""

    words: np.ndarray  # uint64 [n, ceil(nbits/64)]
    nbits: int

    def __post_init__(self):
        self.words = np.ascontiguousarray(self.words, dtype=np.uint64)
        if self.words.ndim == 1:
            self.words = self.words[None, :]
        if self.words.shape[1] != words_per_code(self.nbits):
            raise ShapeError(
                f"{self.nbits}-bit codes need {words_per_code(self.nbits)} words, "
                f"got {self.words.shape[1]}"
            )

    def __len__(self) -> int:
        return self.words.shape[0]


def words_per_code(nbits: int) -> int:
    return (nbits + 63) // 64


def pack_bits(bits: np.ndarray, nbits: int) -> np.ndarray:
    """Pack a [..., nbits] 0/1 array into [..., ceil(nbits/64)] uint64 words."""
    bits = np.asarray(bits)
    if bits.shape[-1] != nbits:
        raise ShapeError(f"expected {nbits} bits per code, got {bits.shape[-1]}")
    bits = bits.astype(np.uint64)
    nwords = words_per_code(nbits)
    out = np.zeros(bits.shape[:-1] + (nwords,), dtype=np.uint64)
    for w in range(nwords):
        chunk = bits[..., 64 * w:min(64 * (w + 1), nbits)]
        weights = np.uint64(1) << np.arange(chunk.shape[-1], dtype=np.uint64)
        out[..., w] = (chunk * weights).sum(axis=-1, dtype=np.uint64)
    return out


def unpack_bits(words: np.ndarray, nbits: int) -> np.ndarray:
    """Inverse of pack_bits; returns a [..., nbits] uint8 array."""
    words = np.asarray(words, dtype=np.uint64)
    positions = np.arange(nbits, dtype=np.uint64)
    word_idx = (positions // 64).astype(np.intp)
    bit_idx = positions % np.uint64(64)
    return ((words[..., word_idx] >> bit_idx) & np.uint64(1)).astype(np.uint8)


def sign_quantize(relaxed: Tensor | np.ndarray) -> PackedCodes:
    """Map relaxed codes to bits by sign; exact zeros quantize to bit 1."""
    values = relaxed.data if isinstance(relaxed, Tensor) else np.asarray(relaxed)
    nbits = values.shape[-1]
    single = values.ndim == 1
    if single:
        values = values[None, :]
    return PackedCodes(pack_bits(values >= 0.0, nbits), nbits)


# ----------------------------------------------------------------------
# Hamming distance and retrieval
# ----------------------------------------------------------------------
def hamming(a: PackedCodes | np.ndarray, b: PackedCodes | np.ndarray) -> int:
    """Population count of XOR between two codes of equal length."""
    wa = a.words if isinstance(a, PackedCodes) else np.asarray(a, dtype=np.uint64)
    wb = b.words if isinstance(b, PackedCodes) else np.asarray(b, dtype=np.uint64)
    if isinstance(a, PackedCodes) and isinstance(b, PackedCodes) and a.nbits != b.nbits:
        raise ShapeError(f"code lengths differ: {a.nbits} vs {b.nbits}")
    wa, wb = wa.reshape(-1), wb.reshape(-1)
    if wa.shape != wb.shape:
        raise ShapeError(f"code word counts differ: {wa.shape} vs {wb.shape}")
    return int(np.bitwise_count(wa ^ wb).sum())


def hamming_to_all(query_words: np.ndarray, index_words: np.ndarray) -> np.ndarray:
    """Distances from one query ([W] words) to every row of [n, W] words."""
    return np.bitwise_count(index_words ^ query_words[None, :]).sum(axis=1).astype(np.int64)


@dataclass
class RetrievalIndex:
    """Immutable corpus of codes with parallel class ids and a modality tag."""

    codes: PackedCodes
    class_ids: np.ndarray
    modality: str = ""

    def __post_init__(self):
        self.class_ids = np.asarray(self.class_ids, dtype=np.uint32)
        if len(self.codes) != len(self.class_ids):
            raise ShapeError(
                f"{len(self.codes)} codes vs {len(self.class_ids)} class ids"
            )

    def __len__(self) -> int:
        return len(self.class_ids)


def retrieve(query: PackedCodes | np.ndarray, index: RetrievalIndex) -> np.ndarray:
    """Rank all index items by ascending Hamming distance.

    Ties break by ascending item index (stable sort), giving a total,
    deterministic order.
    """
    qwords = query.words if isinstance(query, PackedCodes) else np.asarray(query, np.uint64)
    qwords = qwords.reshape(-1)
    if isinstance(query, PackedCodes) and query.nbits != index.codes.nbits:
        raise ShapeError(f"code lengths differ: {query.nbits} vs {index.codes.nbits}")
    if qwords.shape[0] != index.codes.words.shape[1]:
        raise ShapeError(
            f"query has {qwords.shape[0]} words, index codes have "
            f"{index.codes.words.shape[1]}"
        )
    distances = hamming_to_all(qwords, index.codes.words)
    return np.argsort(distances, kind="stable")


@dataclass
class MapResult:
    """Mean average precision plus how many queries actually counted."""

    value: float
    evaluated: int
    excluded: int


def average_precision(ranked_relevance: np.ndarray) -> float:
    """AP over a full ranking: mean of precision at each relevant rank."""
    rel = np.asarray(ranked_relevance, dtype=bool)
    total = int(rel.sum())
    if total == 0:
        raise ValueError("average_precision needs at least one relevant item")
    ranks = np.arange(1, rel.size + 1)
    precision_at = np.cumsum(rel) / ranks
    return float(precision_at[rel].sum() / total)


def mean_average_precision(queries: RetrievalIndex, index: RetrievalIndex,
                           direction: str = "") -> MapResult:
    """mAP@all with relevance = identical class_id.

    Queries with no relevant item in the index are excluded from the mean
    and reported in the result. `direction` ("I2T"/"T2I") is carried for
    reporting and sanity-checks the modality tags when both are present.
    """
    if len(index) == 0:
        raise DataError("retrieval index is empty")
    expected = {"I2T": ("image", "text"), "T2I": ("text", "image")}.get(direction)
    if expected and queries.modality and index.modality:
        if (queries.modality, index.modality) != expected:
            raise ConfigError(
                f"direction {direction} expects modalities {expected}, got "
                f"({queries.modality}, {index.modality})"
            )
    ap_values = []
    excluded = 0
    for q in range(len(queries)):
        order = retrieve(queries.codes.words[q], index)
        rel = index.class_ids[order] == queries.class_ids[q]
        if not rel.any():
            excluded += 1
            continue
        ap_values.append(average_precision(rel))
    value = float(np.mean(ap_values)) if ap_values else 0.0
    return MapResult(value=value, evaluated=len(ap_values), excluded=excluded)


# ----------------------------------------------------------------------
# MHC1 code dump
# ----------------------------------------------------------------------
def write_codes(path: str | Path, index: RetrievalIndex) -> None:
    nwords = index.codes.words.shape[1]
    dtype = np.dtype([("words", "<u8", nwords), ("class_id", "<u4")])
    payload = np.empty(len(index), dtype=dtype)
    payload["words"] = index.codes.words
    payload["class_id"] = index.class_ids
    with open(path, "wb") as fh:
        fh.write(_CODE_HEADER.pack(CODE_MAGIC, index.codes.nbits, len(index)))
        fh.write(payload.tobytes())


def read_codes(path: str | Path) -> RetrievalIndex:
    try:
        raw = Path(path).read_bytes()
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from None
    if len(raw) < _CODE_HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated ({len(raw)} bytes)")
    magic, nbits, count = _CODE_HEADER.unpack_from(raw)
    if magic != CODE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    nwords = words_per_code(nbits)
    dtype = np.dtype([("words", "<u8", nwords), ("class_id", "<u4")])
    body = raw[_CODE_HEADER.size:]
    if len(body) != count * dtype.itemsize:
        raise TruncatedFileError(
            f"{path}: payload holds {len(body)} bytes, header promises "
            f"{count * dtype.itemsize}"
        )
    payload = np.frombuffer(body, dtype=dtype, count=count)
    # frombuffer collapses the word axis for single-word codes
    words = payload["words"].reshape(count, nwords)
    return RetrievalIndex(PackedCodes(words, nbits), payload["class_id"])


# ----------------------------------------------------------------------
# efficiency benchmark
# ----------------------------------------------------------------------
@dataclass
class BenchmarkRow:
    corpus_size: int
    code_bits: int
    median_us_hash: float
    median_us_float: float
    ratio: float  # float latency / hash latency
    bytes_hash: int
    bytes_float: int

    def as_dict(self) -> dict:
        return {
            "corpus_size": self.corpus_size,
            "code_bits": self.code_bits,
            "median_us_hash": self.median_us_hash,
            "median_us_float": self.median_us_float,
            "ratio": self.ratio,
            "bytes_hash": self.bytes_hash,
            "bytes_float": self.bytes_float,
        }


def code_storage_bytes(corpus_size: int, code_bits: int) -> int:
    """Exact packed payload bytes (code bits only, no headers or padding)."""
    return corpus_size * code_bits // 8


def rank_hash(query_words: np.ndarray, corpus_words: np.ndarray) -> np.ndarray:
    """The benchmarked hash path: packed distances + stable full sort."""
    return np.argsort(hamming_to_all(query_words, corpus_words), kind="stable")


def rank_float(query_vec: np.ndarray, corpus: np.ndarray) -> np.ndarray:
    """The benchmarked real-valued path: inner products + stable full sort."""
    return np.argsort(-(corpus @ query_vec), kind="stable")


def benchmark(corpus_sizes: list[int], code_bits: list[int], float_dim: int = 512,
              repetitions: int = 5, num_queries: int = 8,
              seed: int = 0) -> list[BenchmarkRow]:
    """Median per-query ranking latency: packed Hamming vs float inner product.

    Both paths produce a full deterministic ranking (distance computation
    plus stable argsort); repetitions affect timing only, never the
    ranking itself.
    """
    gen = stream(seed, "bench")
    rows = []
    for n in corpus_sizes:
        feats = gen.standard_normal((n, float_dim)).astype(np.float32)
        feats /= np.linalg.norm(feats, axis=1, keepdims=True)
        qfeats = gen.standard_normal((num_queries, float_dim)).astype(np.float32)
        qfeats /= np.linalg.norm(qfeats, axis=1, keepdims=True)

        float_times = []
        for _ in range(repetitions):
            for q in range(num_queries):
                t0 = time.perf_counter()
                rank_float(qfeats[q], feats)
                float_times.append(time.perf_counter() - t0)
        median_float = float(np.median(float_times) * 1e6)

        for bits in code_bits:
            nwords = words_per_code(bits)
            mask = np.uint64(0xFFFFFFFFFFFFFFFF) if bits % 64 == 0 else \
                (np.uint64(1) << np.uint64(bits % 64)) - np.uint64(1)
            corpus_words = gen.integers(0, 2**63, size=(n, nwords), dtype=np.uint64)
            corpus_words[:, -1] &= mask
            query_words = gen.integers(0, 2**63, size=(num_queries, nwords),
                                       dtype=np.uint64)
            query_words[:, -1] &= mask

            hash_times = []
            for _ in range(repetitions):
                for q in range(num_queries):
                    t0 = time.perf_counter()
                    rank_hash(query_words[q], corpus_words)
                    hash_times.append(time.perf_counter() - t0)
            median_hash = float(np.median(hash_times) * 1e6)

            rows.append(BenchmarkRow(
                corpus_size=n,
                code_bits=bits,
                median_us_hash=median_hash,
                median_us_float=median_float,
                ratio=median_float / median_hash if median_hash > 0 else float("inf"),
                bytes_hash=code_storage_bytes(n, bits),
                bytes_float=n * float_dim * 4,
            ))
    return rows
