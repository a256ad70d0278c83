"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the criterion
report. The full-scale retrieval benchmark and the synthetic learning run
make this module the slowest part of the suite (a few minutes on one CPU).
"""

import time

import numpy as np
import pytest

from conftest import check_gradient
from fusionhash import rng
from fusionhash.autodiff import (
    Adam,
    AdamState,
    Tensor,
    adam_step,
    dropout,
    gelu,
    init_attention,
    layer_norm,
    log_softmax,
    multi_head_self_attention,
    relu,
    softmax,
    tanh,
)
from fusionhash.data import SyntheticSpec
from fusionhash.hashing import (
    PackedCodes,
    RetrievalIndex,
    average_precision,
    benchmark,
    code_storage_bytes,
    mean_average_precision,
    pack_bits,
    unpack_bits,
)
from fusionhash.moe import (
    MoEConfig,
    MoEFusion,
    RoutingBatchStats,
    hybrid_gating_loss,
    switch_loss,
    variance_loss,
)
from fusionhash.objectives import contrastive_loss, total_objective
from fusionhash.training import PipelineModel, TrainConfig, ablate, train
from fusionhash.voting import VotingConfig, VotingMLP

from test_hashing import oracle_hamming, oracle_map, random_codes

# The synthetic learning-signal corpus fixed by the acceptance criteria:
# 10 classes x 200 records, cluster spread 0.1, seed-fixed split 1:6:3.
ACCEPTANCE_SEED = 2


def acceptance_config(**overrides) -> TrainConfig:
    cfg = TrainConfig(
        epochs=5,  # converges well before the 150-epoch budget
        seed=ACCEPTANCE_SEED,
        synthetic=SyntheticSpec(num_classes=10, samples_per_class=200,
                                cluster_spread=0.1, seed=ACCEPTANCE_SEED),
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


@pytest.fixture(scope="module")
def default_run():
    """One default training run shared by several criteria."""
    return train(acceptance_config())


# ----------------------------------------------------------------------
# Criterion: Table 1 values are out of desk-scale reach (documentation)
# ----------------------------------------------------------------------
def test_criterion_paper_table_not_reproduced():
    # The published mAP values require open-i / ROCO plus the pretrained
    # backbone; the property-based criteria below are the acceptance bar.
    print("PASS published-table: property-based substitutes in force")


# ----------------------------------------------------------------------
# Criterion: gradient suite, rel. err < 1e-4, under one minute
# ----------------------------------------------------------------------
def test_criterion_gradient_suite():
    started = time.time()
    g = rng.stream(100, "grad-suite")

    # Primitive operations.
    x = Tensor(g.standard_normal(5), requires_grad=True)
    w = Tensor(g.standard_normal(5))
    for fn in (relu, gelu, tanh):
        x.zero_grad()
        (fn(x) * w).sum().backward()
        check_gradient(x, lambda: (fn(x) * w).sum().item(), tol=1e-4)
    x.zero_grad()
    (softmax(x) * w).sum().backward()
    check_gradient(x, lambda: (softmax(x) * w).sum().item(), tol=1e-4)
    x.zero_grad()
    (log_softmax(x) * w).sum().backward()
    check_gradient(x, lambda: (log_softmax(x) * w).sum().item(), tol=1e-4)

    a = Tensor(g.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(g.standard_normal((4, 2)), requires_grad=True)
    (a @ b).sum().backward()
    check_gradient(a, lambda: (a @ b).sum().item(), tol=1e-4)
    check_gradient(b, lambda: (a @ b).sum().item(), tol=1e-4)

    gam = Tensor(g.standard_normal(6), requires_grad=True)
    bet = Tensor(g.standard_normal(6), requires_grad=True)
    xn = Tensor(g.standard_normal(6), requires_grad=True)
    wn = Tensor(g.standard_normal(6))
    (layer_norm(xn, gam, bet) * wn).sum().backward()
    for p in (xn, gam, bet):
        check_gradient(p, lambda: (layer_norm(xn, gam, bet) * wn).sum().item(),
                       tol=1e-4)

    xd = Tensor(g.standard_normal(6), requires_grad=True)
    (dropout(xd, 0.4, rng.stream(101, "m")) ** 2).sum().backward()
    check_gradient(
        xd, lambda: (dropout(xd, 0.4, rng.stream(101, "m")) ** 2).sum().item(),
        tol=1e-4,
    )

    params = init_attention(8, rng.stream(102, "attn"))
    xa = Tensor(g.standard_normal((2, 8)), requires_grad=True)
    wa = Tensor(g.standard_normal((2, 8)))
    (multi_head_self_attention(xa, 4, params) * wa).sum().backward()
    check_gradient(
        xa, lambda: (multi_head_self_attention(xa, 4, params) * wa).sum().item(),
        tol=1e-4,
    )

    # End-to-end composite objective on a toy pipeline (shrunken widths,
    # gate logits away from routing-decision boundaries).
    cfg = TrainConfig(
        seed=11,
        hash_hidden_dim=12,
        voting=VotingConfig(hidden_dim=16, votes=2, frozen=False, seed=11),
        moe=MoEConfig(num_experts=2, ffn_hidden=16, layers_per_expert=1),
        synthetic=SyntheticSpec(num_classes=2, samples_per_class=5, seed=11),
    )
    model = PipelineModel(cfg)
    model.moe.gate_w.data *= 50.0  # widen the argmax margin
    batch = Tensor(rng.stream(103, "batch").standard_normal((4, 1024)))

    def objective() -> Tensor:
        fused, stats = model.fuse(batch, rng.stream(104, "votes"))
        pair, h_v, h_t = model.relaxed_codes(fused)
        return total_objective(
            contrastive_loss(pair.z_v, pair.z_t, cfg.loss.temperature),
            switch_loss(stats, cfg.moe.switch_lambda),
            variance_loss(stats.mean_scores()),
            contrastive_loss(h_v, h_t, cfg.loss.temperature),
            cfg.loss,
        )

    objective().backward()
    groups = {
        "gate": model.moe.gate_w,
        "expert-attn": model.moe.experts[0].layers[0].attn.wq,
        "expert-ffn": model.moe.experts[1].layers[0].ffn_w1,
        "final-norm": model.moe.out_gamma,
        "voting": model.voting.w1,
        "head-image": model.head_image.w2,
        "head-text": model.head_text.w1,
    }
    worst = 0.0
    for name, param in groups.items():
        # Full finite differences over the big matrices would dominate the
        # minute budget; a fixed random slice of each parameter suffices.
        flat = param.data.ravel()
        picks = rng.stream(105, f"picks-{name}").choice(flat.size,
                                                        size=min(6, flat.size),
                                                        replace=False)
        analytic = param.grad.ravel()
        for i in picks:
            orig = flat[i]
            eps = 1e-6
            flat[i] = orig + eps
            hi = objective().item()
            flat[i] = orig - eps
            lo = objective().item()
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            scale = max(abs(numeric), abs(analytic[i]), 1e-8)
            err = abs(numeric - analytic[i]) / scale
            worst = max(worst, err)
            assert err < 1e-4, f"{name}[{i}]: rel err {err:.2e}"

    elapsed = time.time() - started
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"
    print(f"PASS gradient-suite: worst end-to-end rel err {worst:.2e}, "
          f"{elapsed:.1f}s")


# ----------------------------------------------------------------------
# Criterion: analytic loss oracles, exact within 1e-12
# ----------------------------------------------------------------------
def test_criterion_analytic_loss_oracles():
    balanced = RoutingBatchStats(assignments=np.eye(4),
                                 scores=Tensor(np.full((4, 4), 0.25)))
    rows = np.zeros((4, 4))
    rows[:, 0] = 1.0
    collapsed = RoutingBatchStats(assignments=rows, scores=Tensor(rows.copy()))

    checks = {
        "switch@balance": (switch_loss(balanced, 1e-2).item(), 0.0100),
        "switch@collapse": (switch_loss(collapsed, 1e-2).item(), 0.0400),
        "variance@uniform": (variance_loss(np.full(4, 0.25)).item(), 0.0),
        "variance@onehot": (variance_loss(np.eye(4)[0]).item(), 3.0),
        "hybrid@balance": (hybrid_gating_loss(balanced, MoEConfig()).item(), 0.0085),
        "hybrid@collapse": (hybrid_gating_loss(collapsed, MoEConfig()).item(), 0.484),
        "total(1,1,1,1)": (
            total_objective(Tensor(1.0), Tensor(1.0), Tensor(1.0), Tensor(1.0)).item(),
            2.5,
        ),
    }
    for name, (got, expected) in checks.items():
        assert abs(got - expected) <= 1e-12, f"{name}: {got!r} != {expected!r}"
    print("PASS analytic-loss-oracles:",
          ", ".join(f"{k}={v[0]:.4f}" for k, v in checks.items()))


# ----------------------------------------------------------------------
# Criterion: retrieval oracles
# ----------------------------------------------------------------------
def test_criterion_retrieval_oracles():
    g = rng.stream(106, "retrieval")
    # Hamming: bit-exact against the naive per-bit oracle, 10,000 pairs per width.
    for nbits in (16, 32, 64):
        a = random_codes(g, 10_000, nbits)
        b = random_codes(g, 10_000, nbits)
        packed = np.bitwise_count(a ^ b).sum(axis=1)
        unpacked = (unpack_bits(a, nbits) != unpack_bits(b, nbits)).sum(axis=1)
        assert np.array_equal(packed, unpacked)
        for i in g.choice(10_000, size=50, replace=False):
            assert packed[i] == oracle_hamming(a[i], b[i], nbits)

    # mAP: 50 queries x 200 items vs the independently written oracle.
    qw = random_codes(g, 50, 16)
    ql = g.integers(0, 5, size=50).astype(np.uint32)
    iw = random_codes(g, 200, 16)
    il = g.integers(0, 5, size=200).astype(np.uint32)
    engine = mean_average_precision(
        RetrievalIndex(PackedCodes(qw, 16), ql),
        RetrievalIndex(PackedCodes(iw, 16), il),
    ).value
    brute = oracle_map(qw, ql, iw, il, 16)
    assert abs(engine - brute) <= 1e-12

    # AP hand case: relevant at ranks 1 and 3 of exactly 2 relevant.
    hand = average_precision(np.array([1, 0, 1, 0], dtype=bool))
    assert abs(hand - 5.0 / 6.0) <= 1e-15
    print(f"PASS retrieval-oracles: mAP engine-vs-brute diff "
          f"{abs(engine - brute):.2e}, AP hand case {hand:.6f}")


# ----------------------------------------------------------------------
# Criterion: learning signal on the synthetic corpus
# ----------------------------------------------------------------------
def test_criterion_learning_signal(default_run):
    trained = default_run.report.final_map["16"]["mean"]
    assert default_run.report.config["epochs"] <= 150
    assert trained >= 0.85, f"trained mean mAP {trained:.4f} < 0.85"

    untrained_run = train(acceptance_config(epochs=0))
    untrained = untrained_run.report.final_map["16"]["mean"]
    assert abs(untrained - 0.10) <= 0.05, (
        f"untrained mean mAP {untrained:.4f} outside 0.10 +/- 0.05"
    )
    print(f"PASS learning-signal: trained {trained:.4f} >= 0.85 after "
          f"{default_run.report.config['epochs']} epochs, "
          f"untrained {untrained:.4f} within 0.10 +/- 0.05")


# ----------------------------------------------------------------------
# Criterion: load-balancing behavior
# ----------------------------------------------------------------------
def test_criterion_load_balancing(default_run):
    final_epoch = default_run.report.epochs[-1]
    peak = max(final_epoch.expert_fractions)
    assert peak <= 0.60, f"final-epoch max utilization {peak:.3f} > 0.60"

    # Isolated descent on the variance loss strictly decreases its objective.
    g = rng.stream(107, "gate-gd")
    inputs = Tensor(g.standard_normal((16, 8)))
    gate_w = Tensor(g.standard_normal((8, 4)) * 2.0, requires_grad=True)

    def objective():
        probs = softmax(inputs @ gate_w, axis=-1)
        return variance_loss(probs.mean(axis=0))

    previous = objective().item()
    for _ in range(100):
        gate_w.zero_grad()
        objective().backward()
        gate_w.data -= 0.5 * gate_w.grad
        current = objective().item()
        assert current < previous
        previous = current
    print(f"PASS load-balancing: peak utilization {peak:.3f} <= 0.60, "
          f"variance objective fell to {previous:.2e} over 100 steps")


# ----------------------------------------------------------------------
# Criterion: frozen-voting contract and vote-variance reduction
# ----------------------------------------------------------------------
def test_criterion_frozen_voting(default_run):
    fresh = PipelineModel(acceptance_config())
    assert (fresh.parameter_checksum("voting.") ==
            default_run.model.parameter_checksum("voting."))

    def vote_variance(votes: int, trials: int = 1000) -> float:
        mlp = VotingMLP(VotingConfig(votes=votes, seed=9))
        z = rng.stream(108, "z").standard_normal(1024)
        batch = Tensor(np.tile(z, (trials, 1)))
        out = mlp.forward(batch, rng.stream(109, "masks")).data
        return float(out.var(axis=0).mean())

    var1 = vote_variance(1)
    var5 = vote_variance(5)
    assert var5 < 0.3 * var1, f"var(K=5)={var5:.4g} not < 0.3 x var(K=1)={var1:.4g}"
    print(f"PASS frozen-voting: checksum stable, var(K=5)/var(K=1) = "
          f"{var5 / var1:.3f} < 0.3")


# ----------------------------------------------------------------------
# Criterion: efficiency (storage and latency)
# ----------------------------------------------------------------------
def test_criterion_efficiency():
    corpus = 50_000
    assert code_storage_bytes(corpus, 16) * 4 == code_storage_bytes(corpus, 64)
    rows = benchmark([corpus], [16], repetitions=3, num_queries=4, seed=1)
    row = rows[0]
    assert row.median_us_hash < row.median_us_float, (
        f"hash {row.median_us_hash:.0f}us not faster than float "
        f"{row.median_us_float:.0f}us"
    )
    print(f"PASS efficiency: 16-bit storage {code_storage_bytes(corpus, 16)} B "
          f"= 1/4 of 64-bit {code_storage_bytes(corpus, 64)} B; "
          f"measured float/hash latency ratio {row.ratio:.2f}x on "
          f"{corpus:,} items (paper reports 1.73x as context)")


# ----------------------------------------------------------------------
# Criterion: determinism of metrics.json
# ----------------------------------------------------------------------
def test_criterion_determinism():
    cfg = dict(
        epochs=2,
        batch_size=16,
        seed=5,
        synthetic=SyntheticSpec(num_classes=4, samples_per_class=15,
                                cluster_spread=0.1, seed=5),
        hash_hidden_dim=64,
        voting=VotingConfig(hidden_dim=128, votes=2),
        moe=MoEConfig(num_experts=2, ffn_hidden=128, layers_per_expert=1),
    )
    first = train(TrainConfig(**cfg)).report.to_json()
    second = train(TrainConfig(**cfg)).report.to_json()
    assert first.encode() == second.encode()
    print("PASS determinism: metrics.json bit-identical across two runs")


# ----------------------------------------------------------------------
# Criterion: ablation harness emits the full comparison matrix
# ----------------------------------------------------------------------
def test_criterion_ablation_matrix(tmp_path):
    from fusionhash.report import write_ablation_csv
    from fusionhash.training import LOSS_ABLATION, MODULE_ABLATION

    cfg = TrainConfig(
        epochs=2,
        batch_size=16,
        seed=4,
        synthetic=SyntheticSpec(num_classes=4, samples_per_class=25,
                                cluster_spread=0.1, seed=4),
        hash_hidden_dim=64,
        voting=VotingConfig(hidden_dim=128),
        moe=MoEConfig(ffn_hidden=128, layers_per_expert=1),
    )
    variants = MODULE_ABLATION + LOSS_ABLATION
    rows, reports = ablate(cfg, variants)
    assert len(rows) == 8
    table = write_ablation_csv(tmp_path / "table.csv", rows, [16])
    lines = table.read_text().splitlines()
    assert lines[0] == "variant,i2t_16,t2i_16,mean_16"
    assert len(lines) == 9

    by_name = {r.name: r.per_bits["16"]["mean"] for r in rows}
    # Directional outcomes are reported, not gated.
    voting5 = by_name["+moe+voting5+frozen"]
    voting1 = by_name["+moe+voting1+frozen"]
    direction = ">=" if voting5 >= voting1 else "<"
    print("PASS ablation-matrix: 8 rows emitted;",
          ", ".join(f"{k}={v:.3f}" for k, v in by_name.items()),
          f"| voting5 {direction} voting1 (directional, informational)")
