"""Hash head, code packing, Hamming retrieval, mAP, and benchmark tests.

The retrieval engine is checked against independently written brute-force
oracles: a per-bit Hamming loop and a from-the-definition AP computation.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import check_gradient
from fusionhash import rng
from fusionhash.autodiff import Tensor
from fusionhash.errors import BadMagicError, ConfigError, ShapeError, TruncatedFileError
from fusionhash.hashing import (
    HashHead,
    HashHeadConfig,
    PackedCodes,
    RetrievalIndex,
    average_precision,
    benchmark,
    code_storage_bytes,
    hamming,
    mean_average_precision,
    pack_bits,
    rank_float,
    rank_hash,
    read_codes,
    retrieve,
    sign_quantize,
    unpack_bits,
    write_codes,
)


# ----------------------------------------------------------------------
# independent oracles
# ----------------------------------------------------------------------
def oracle_hamming(words_a: np.ndarray, words_b: np.ndarray, nbits: int) -> int:
    """Naive per-bit comparison, no popcount."""
    count = 0
    for i in range(nbits):
        bit_a = (int(words_a[i // 64]) >> (i % 64)) & 1
        bit_b = (int(words_b[i // 64]) >> (i % 64)) & 1
        count += bit_a != bit_b
    return count


def oracle_ranking(query: np.ndarray, corpus: np.ndarray, nbits: int) -> list[int]:
    """Full sort by (distance, index) computed with the naive distance."""
    scored = [(oracle_hamming(query, corpus[j], nbits), j) for j in range(len(corpus))]
    return [j for _, j in sorted(scored)]


def oracle_map(query_words, query_labels, index_words, index_labels, nbits) -> float:
    """mAP@all straight from the definition, on top of the naive ranking."""
    ap_values = []
    for q in range(len(query_words)):
        ranking = oracle_ranking(query_words[q], index_words, nbits)
        relevant_total = 0
        hits = 0
        precision_sum = 0.0
        for rank, j in enumerate(ranking, start=1):
            if index_labels[j] == query_labels[q]:
                hits += 1
                precision_sum += hits / rank
        relevant_total = hits
        if relevant_total:
            ap_values.append(precision_sum / relevant_total)
    return float(np.mean(ap_values))


def random_codes(gen, n, nbits) -> np.ndarray:
    bits = (gen.random((n, nbits)) > 0.5).astype(np.uint8)
    return pack_bits(bits, nbits)


# ----------------------------------------------------------------------
# hash head
# ----------------------------------------------------------------------
def test_head_output_strictly_inside_unit_interval():
    head = HashHead(HashHeadConfig(input_dim=32, hidden_dim=16, code_bits=16), seed=0)
    x = Tensor(rng.stream(0, "x").standard_normal((10, 32)))
    out = head.forward(x).data
    assert (out > -1.0).all() and (out < 1.0).all()


def test_head_zero_parameters_zero_output():
    head = HashHead(HashHeadConfig(input_dim=8, hidden_dim=4, code_bits=16), seed=0)
    for _, p in head.named_parameters():
        p.data = np.zeros_like(p.data)
    out = head.forward(Tensor(np.ones((3, 8)))).data
    assert (out == 0.0).all()


def test_head_gradient_with_fixed_dropout_mask():
    head = HashHead(HashHeadConfig(input_dim=8, hidden_dim=6, code_bits=16,
                                   dropout_p=0.2), seed=1)
    x = Tensor(rng.stream(1, "x").standard_normal((2, 8)), requires_grad=True)
    w = Tensor(rng.stream(2, "w").standard_normal((2, 16)))

    def loss():
        return (head.forward(x, masks=rng.stream(3, "mask")) * w).sum()

    loss().backward()
    check_gradient(x, lambda: loss().item(), tol=1e-5)
    for p in (head.w1, head.b1, head.w2, head.b2):
        check_gradient(p, lambda: loss().item(), tol=1e-5)


def test_head_rejects_bad_code_bits():
    with pytest.raises(ConfigError):
        HashHeadConfig(code_bits=24).validate()


# ----------------------------------------------------------------------
# sign quantization and packing
# ----------------------------------------------------------------------
def test_sign_quantize_basic():
    codes = sign_quantize(np.array([0.3, -0.2]))
    assert unpack_bits(codes.words, 2).tolist() == [[1, 0]]


def test_sign_quantize_tie_rule():
    codes = sign_quantize(np.zeros(16))
    assert (unpack_bits(codes.words, 16) == 1).all()


def test_sign_quantize_scale_invariance():
    g = rng.stream(4, "scale")
    x = g.standard_normal(64)
    x[x == 0] = 0.5
    a = sign_quantize(x).words
    b = sign_quantize(100.0 * x).words
    assert np.array_equal(a, b)


@pytest.mark.parametrize("nbits", [16, 32, 64])
def test_pack_unpack_roundtrip(nbits):
    g = rng.stream(5, f"pack{nbits}")
    bits = (g.random((20, nbits)) > 0.5).astype(np.uint8)
    assert np.array_equal(unpack_bits(pack_bits(bits, nbits), nbits), bits)


def test_packed_codes_unused_bits_zero():
    codes = sign_quantize(np.ones(16))
    assert codes.words[0, 0] == np.uint64(0xFFFF)  # bits above 16 stay clear


# ----------------------------------------------------------------------
# hamming distance
# ----------------------------------------------------------------------
def test_hamming_identity_and_complement():
    ones = sign_quantize(np.ones(16))
    zeros = sign_quantize(-np.ones(16))
    assert hamming(ones, ones) == 0
    assert hamming(ones, zeros) == 16


@pytest.mark.parametrize("nbits", [16, 32, 64])
def test_hamming_matches_bit_loop_oracle(nbits):
    g = rng.stream(6, f"ham{nbits}")
    a = random_codes(g, 10_000, nbits)
    b = random_codes(g, 10_000, nbits)
    packed = np.bitwise_count(a ^ b).sum(axis=1)
    sample = g.choice(10_000, size=200, replace=False)
    for i in sample:
        assert packed[i] == oracle_hamming(a[i], b[i], nbits)
    # Exactness on the full 10k pairs against an unpacked-bit count.
    bits_a = unpack_bits(a, nbits)
    bits_b = unpack_bits(b, nbits)
    assert np.array_equal(packed, (bits_a != bits_b).sum(axis=1))


def test_hamming_length_mismatch():
    with pytest.raises(ShapeError):
        hamming(sign_quantize(np.ones(16)), sign_quantize(np.ones(32)))


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=0, max_value=2**16 - 1),
       st.integers(min_value=0, max_value=2**16 - 1),
       st.integers(min_value=0, max_value=2**16 - 1))
def test_hamming_is_a_metric(a, b, c):
    wa = np.array([[a]], dtype=np.uint64)
    wb = np.array([[b]], dtype=np.uint64)
    wc = np.array([[c]], dtype=np.uint64)
    dab = hamming(wa, wb)
    assert dab >= 0
    assert (dab == 0) == (a == b)
    assert dab == hamming(wb, wa)
    assert dab <= hamming(wa, wc) + hamming(wc, wb)


# ----------------------------------------------------------------------
# retrieval
# ----------------------------------------------------------------------
def test_retrieve_exact_match_first():
    g = rng.stream(7, "idx")
    words = random_codes(g, 50, 16)
    index = RetrievalIndex(PackedCodes(words, 16), np.zeros(50, np.uint32))
    order = retrieve(PackedCodes(words[7:8], 16), index)
    assert hamming(words[order[0]], words[7]) == 0


def test_retrieve_tie_broken_by_index():
    words = np.array([[0b11], [0b01], [0b10]], dtype=np.uint64)  # dists 2,1,1
    index = RetrievalIndex(PackedCodes(words, 16), np.zeros(3, np.uint32))
    order = retrieve(np.array([0], dtype=np.uint64), index)
    assert order.tolist() == [1, 2, 0]


def test_retrieve_matches_full_sort_oracle():
    g = rng.stream(8, "rank")
    corpus = random_codes(g, 100, 32)
    index = RetrievalIndex(PackedCodes(corpus, 32), np.zeros(100, np.uint32))
    for q in random_codes(g, 5, 32):
        engine = retrieve(q, index).tolist()
        assert engine == oracle_ranking(q, corpus, 32)


def test_retrieve_is_deterministic():
    g = rng.stream(9, "det")
    corpus = random_codes(g, 64, 16)
    index = RetrievalIndex(PackedCodes(corpus, 16), np.zeros(64, np.uint32))
    q = random_codes(g, 1, 16)[0]
    assert np.array_equal(retrieve(q, index), retrieve(q, index))


def test_retrieve_length_mismatch():
    index = RetrievalIndex(PackedCodes(np.zeros((4, 1), np.uint64), 16),
                           np.zeros(4, np.uint32))
    with pytest.raises(ShapeError):
        retrieve(PackedCodes(np.zeros((1, 1), np.uint64), 32), index)


# ----------------------------------------------------------------------
# mAP
# ----------------------------------------------------------------------
def test_average_precision_hand_case():
    # Relevant at ranks 1 and 3 with exactly two relevant in the index.
    rel = np.array([1, 0, 1, 0, 0], dtype=bool)
    assert average_precision(rel) == pytest.approx(5.0 / 6.0, abs=1e-15)


def test_map_saturates_when_everything_relevant():
    g = rng.stream(10, "sat")
    index = RetrievalIndex(PackedCodes(random_codes(g, 30, 16), 16),
                           np.full(30, 3, np.uint32))
    queries = RetrievalIndex(PackedCodes(random_codes(g, 5, 16), 16),
                             np.full(5, 3, np.uint32))
    result = mean_average_precision(queries, index)
    assert result.value == pytest.approx(1.0, abs=1e-15)
    assert result.excluded == 0


def test_map_matches_brute_force_oracle():
    g = rng.stream(11, "map")
    query_words = random_codes(g, 50, 16)
    query_labels = g.integers(0, 5, size=50).astype(np.uint32)
    index_words = random_codes(g, 200, 16)
    index_labels = g.integers(0, 5, size=200).astype(np.uint32)
    engine = mean_average_precision(
        RetrievalIndex(PackedCodes(query_words, 16), query_labels),
        RetrievalIndex(PackedCodes(index_words, 16), index_labels),
    )
    expected = oracle_map(query_words, query_labels, index_words, index_labels, 16)
    assert engine.value == pytest.approx(expected, abs=1e-12)


def test_map_random_codes_near_class_prior():
    g = rng.stream(12, "prior")
    queries = RetrievalIndex(
        PackedCodes(random_codes(g, 100, 64), 64),
        np.repeat(np.arange(10, dtype=np.uint32), 10),
    )
    index = RetrievalIndex(
        PackedCodes(random_codes(g, 2000, 64), 64),
        np.repeat(np.arange(10, dtype=np.uint32), 200),
    )
    result = mean_average_precision(queries, index)
    assert abs(result.value - 0.10) < 0.05


def test_map_excludes_queries_without_relevant_items():
    g = rng.stream(13, "excl")
    index = RetrievalIndex(PackedCodes(random_codes(g, 20, 16), 16),
                           np.zeros(20, np.uint32))
    queries = RetrievalIndex(PackedCodes(random_codes(g, 4, 16), 16),
                             np.array([0, 9, 0, 9], np.uint32))
    result = mean_average_precision(queries, index)
    assert result.evaluated == 2
    assert result.excluded == 2


def test_map_direction_modality_check():
    g = rng.stream(14, "dir")
    img = RetrievalIndex(PackedCodes(random_codes(g, 3, 16), 16),
                         np.zeros(3, np.uint32), "image")
    txt = RetrievalIndex(PackedCodes(random_codes(g, 3, 16), 16),
                         np.zeros(3, np.uint32), "text")
    mean_average_precision(img, txt, direction="I2T")
    with pytest.raises(ConfigError):
        mean_average_precision(txt, img, direction="I2T")


# ----------------------------------------------------------------------
# MHC1 dump
# ----------------------------------------------------------------------
def test_code_dump_roundtrip(tmp_path):
    g = rng.stream(15, "dump")
    index = RetrievalIndex(PackedCodes(random_codes(g, 9, 32), 32),
                           g.integers(0, 4, size=9).astype(np.uint32))
    path = tmp_path / "codes.mhc"
    write_codes(path, index)
    again = read_codes(path)
    assert again.codes.nbits == 32
    assert np.array_equal(again.codes.words, index.codes.words)
    assert np.array_equal(again.class_ids, index.class_ids)


def test_code_dump_bad_magic(tmp_path):
    path = tmp_path / "bad.mhc"
    path.write_bytes(b"NOPE" + b"\x00" * 12)
    with pytest.raises(BadMagicError):
        read_codes(path)


def test_code_dump_truncation(tmp_path):
    g = rng.stream(16, "trunc")
    index = RetrievalIndex(PackedCodes(random_codes(g, 5, 16), 16),
                           np.zeros(5, np.uint32))
    path = tmp_path / "codes.mhc"
    write_codes(path, index)
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(TruncatedFileError):
        read_codes(path)


# ----------------------------------------------------------------------
# storage and benchmark
# ----------------------------------------------------------------------
def test_storage_sixteen_bit_is_quarter_of_sixty_four():
    for n in (1, 1000, 50_000):
        assert code_storage_bytes(n, 16) * 4 == code_storage_bytes(n, 64)


def test_benchmark_rankings_pure_across_repetitions():
    g = rng.stream(17, "bench")
    corpus = random_codes(g, 500, 16)
    q = random_codes(g, 1, 16)[0]
    assert np.array_equal(rank_hash(q, corpus), rank_hash(q, corpus))
    feats = g.standard_normal((500, 64)).astype(np.float32)
    vec = g.standard_normal(64).astype(np.float32)
    assert np.array_equal(rank_float(vec, feats), rank_float(vec, feats))
    rows_1 = benchmark([400], [16], float_dim=64, repetitions=1, num_queries=2, seed=3)
    rows_3 = benchmark([400], [16], float_dim=64, repetitions=3, num_queries=2, seed=3)
    for a, b in zip(rows_1, rows_3):
        assert (a.corpus_size, a.code_bits, a.bytes_hash, a.bytes_float) == \
               (b.corpus_size, b.code_bits, b.bytes_hash, b.bytes_float)


def test_benchmark_reports_expected_columns():
    rows = benchmark([300], [16, 64], float_dim=32, repetitions=1, num_queries=2)
    assert len(rows) == 2
    d = rows[0].as_dict()
    assert set(d) == {"corpus_size", "code_bits", "median_us_hash",
                      "median_us_float", "ratio", "bytes_hash", "bytes_float"}
    assert rows[0].bytes_hash * 4 == rows[1].bytes_hash
