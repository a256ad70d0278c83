"""Top-1 mixture-of-experts fusion over a 2-token (image, text) sequence.

A linear gate scores N transformer-encoder experts per sample; only the
highest-probability expert runs, its output is scaled by that probability,
and the result goes through a residual layer norm. Batch routing
statistics feed the switch / variance / hybrid load-balancing losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    init_attention,
    kaiming_uniform,
    layer_norm,
    multi_head_self_attention,
    put_rows,
    relu,
    softmax,
)
from .errors import ConfigError, NumericError, ShapeError
from .rng import stream


@dataclass
class MoEConfig:
    num_experts: int = 4
    token_count: int = 2
    token_dim: int = 512
    heads: int = 4
    ffn_hidden: int = 1024
    layers_per_expert: int = 2
    switch_lambda: float = 1e-2
    w_switch: float = 0.85
    w_var: float = 0.15
    enabled: bool = True

    @property
    def model_dim(self) -> int:
        return self.token_count * self.token_dim

    def validate(self) -> None:
        if self.num_experts < 1:
            raise ConfigError(f"num_experts must be >= 1, got {self.num_experts}")
        if self.token_dim % self.heads != 0:
            raise ConfigError(
                f"token_dim {self.token_dim} not divisible by {self.heads} heads"
            )
        if self.switch_lambda <= 0:
            raise ConfigError("switch_lambda must be positive")
        if self.w_switch < 0 or self.w_var < 0:
            raise ConfigError("hybrid weights must be non-negative")


@dataclass
class RoutingBatchStats:
    """Per-batch routing evidence for the load-balancing losses.

    `assignments` holds the one-hot top-1 indicators (constants of the
    backward pass); `scores` holds the pre-top-1 softmax probabilities and
    stays differentiable.
    """

    assignments: np.ndarray  # [batch, N] one-hot, float
    scores: Tensor  # [batch, N]

    @property
    def num_experts(self) -> int:
        return self.assignments.shape[1]

    @property
    def traffic(self) -> np.ndarray:
        """Realized per-expert traffic fractions T (sums to 1)."""
        return self.assignments.mean(axis=0)

    def mean_scores(self) -> Tensor:
        """Per-expert mean softmax scores P (differentiable, sums to 1)."""
        return self.scores.mean(axis=0)

    def counts(self) -> np.ndarray:
        return self.assignments.sum(axis=0).astype(np.int64)


@dataclass
class FusedPair:
    """Post-fusion image and text halves of a batch ([batch, 512] each)."""

    z_v: Tensor
    z_t: Tensor


class EncoderLayer:
    """Post-norm transformer encoder layer: attention and FFN sub-layers,
    each with residual + layer norm."""

    def __init__(self, token_dim: int, heads: int, ffn_hidden: int,
                 init: np.random.Generator):
        self.heads = heads
        self.attn = init_attention(token_dim, init)
        self.ffn_w1 = Tensor(kaiming_uniform(init, (token_dim, ffn_hidden), token_dim),
                             requires_grad=True)
        self.ffn_b1 = Tensor(np.zeros(ffn_hidden), requires_grad=True)
        self.ffn_w2 = Tensor(kaiming_uniform(init, (ffn_hidden, token_dim), ffn_hidden),
                             requires_grad=True)
        self.ffn_b2 = Tensor(np.zeros(token_dim), requires_grad=True)
        self.ln1_gamma = Tensor(np.ones(token_dim), requires_grad=True)
        self.ln1_beta = Tensor(np.zeros(token_dim), requires_grad=True)
        self.ln2_gamma = Tensor(np.ones(token_dim), requires_grad=True)
        self.ln2_beta = Tensor(np.zeros(token_dim), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        attended = multi_head_self_attention(x, self.heads, self.attn)
        x = layer_norm(x + attended, self.ln1_gamma, self.ln1_beta)
        batch, tokens, dim = x.shape
        flat = x.reshape(batch * tokens, dim)  # single GEMM per FFN matmul
        hidden = relu(flat @ self.ffn_w1 + self.ffn_b1) @ self.ffn_w2 + self.ffn_b2
        return layer_norm(x + hidden.reshape(batch, tokens, dim),
                          self.ln2_gamma, self.ln2_beta)

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        named = self.attn.named(f"{prefix}.attn")
        named += [
            (f"{prefix}.ffn_w1", self.ffn_w1), (f"{prefix}.ffn_b1", self.ffn_b1),
            (f"{prefix}.ffn_w2", self.ffn_w2), (f"{prefix}.ffn_b2", self.ffn_b2),
            (f"{prefix}.ln1_gamma", self.ln1_gamma), (f"{prefix}.ln1_beta", self.ln1_beta),
            (f"{prefix}.ln2_gamma", self.ln2_gamma), (f"{prefix}.ln2_beta", self.ln2_beta),
        ]
        return named


class Expert:
    """Stacked encoder layers over the 2-token (image, text) view of x."""

    def __init__(self, cfg: MoEConfig, init: np.random.Generator):
        self.cfg = cfg
        self.layers = [
            EncoderLayer(cfg.token_dim, cfg.heads, cfg.ffn_hidden, init)
            for _ in range(cfg.layers_per_expert)
        ]

    def forward(self, x: Tensor) -> Tensor:
        batch = x.shape[0]
        tokens = x.reshape(batch, self.cfg.token_count, self.cfg.token_dim)
        for layer in self.layers:
            tokens = layer.forward(tokens)
        return tokens.reshape(batch, self.cfg.model_dim)

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        named: list[tuple[str, Tensor]] = []
        for i, layer in enumerate(self.layers):
            named += layer.named_parameters(f"{prefix}.layer{i}")
        return named


def gate(x: Tensor, gate_weights: Tensor) -> tuple[Tensor, np.ndarray]:
    """Softmax gate scores and top-1 indices (ties go to the lowest index)."""
    logits = x @ gate_weights
    probs = softmax(logits, axis=-1)
    top1 = probs.data.argmax(axis=-1)  # argmax takes the first maximum
    return probs, top1


class MoEFusion:
    """The fusion block: gate, experts, mixture scaling, residual norm."""

    # Small gate init keeps early routing near-uniform so the balancing
    # losses can act before any expert monopolizes traffic.
    GATE_INIT_STD = 0.01

    def __init__(self, cfg: MoEConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        init = stream(seed, "moe-init")
        self.gate_w = Tensor(
            init.normal(0.0, self.GATE_INIT_STD, size=(cfg.model_dim, cfg.num_experts)),
            requires_grad=True,
        )
        self.experts = [Expert(cfg, init) for _ in range(cfg.num_experts)]
        self.out_gamma = Tensor(np.ones(cfg.model_dim), requires_grad=True)
        self.out_beta = Tensor(np.zeros(cfg.model_dim), requires_grad=True)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = [("moe.gate_w", self.gate_w)]
        for i, expert in enumerate(self.experts):
            named += expert.named_parameters(f"moe.expert{i}")
        named += [("moe.out_gamma", self.out_gamma), ("moe.out_beta", self.out_beta)]
        return named

    def trainable_parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def expert_forward(self, x: Tensor, index: int) -> Tensor:
        if not 0 <= index < self.cfg.num_experts:
            raise ConfigError(f"expert index {index} out of range "
                              f"[0, {self.cfg.num_experts})")
        return self.experts[index].forward(x)

    def forward(self, x: Tensor) -> tuple[Tensor, RoutingBatchStats]:
        """Route each sample to its top-1 expert; z = LN(p_top1 * E(x) + x)."""
        cfg = self.cfg
        batch = x.shape[0]
        probs, top1 = gate(x, self.gate_w)
        onehot = np.zeros((batch, cfg.num_experts))
        onehot[np.arange(batch), top1] = 1.0
        # Gate confidence of the chosen expert; the only gradient path to
        # the gate besides the balancing losses.
        coeff = (probs * onehot).sum(axis=-1, keepdims=True)

        mixed = None
        for i in range(cfg.num_experts):
            idx = np.flatnonzero(top1 == i)
            if idx.size == 0:
                continue
            routed = self.expert_forward(x.take_rows(idx), i)
            scaled = routed * coeff.take_rows(idx)
            part = put_rows(scaled, idx, batch)
            mixed = part if mixed is None else mixed + part

        z = layer_norm(mixed + x, self.out_gamma, self.out_beta)
        return z, RoutingBatchStats(assignments=onehot, scores=probs)


def split_fused(z: Tensor) -> FusedPair:
    """Split the fused vector back into (image, text) halves, in concat order."""
    if z.shape[-1] != 1024:
        raise ShapeError(f"fused vector must have 1024 features, got {z.shape}")
    if z.ndim == 1:
        return FusedPair(z_v=z[:512], z_t=z[512:])
    return FusedPair(z_v=z[:, :512], z_t=z[:, 512:])


# ----------------------------------------------------------------------
# load-balancing losses
# ----------------------------------------------------------------------
def switch_loss(stats: RoutingBatchStats, lam: float = 1e-2,
                num_experts: int | None = None) -> Tensor:
    """lam * N * sum_i T_i P_i, traffic T held constant in the backward pass."""
    n = stats.num_experts if num_experts is None else num_experts
    traffic = stats.traffic  # plain array: no gradient flows through T
    return (stats.mean_scores() * traffic).sum() * (lam * n)


def variance_loss(mean_scores: Tensor | np.ndarray) -> Tensor:
    """N * sum_i (p_i - 1/N)^2 over batch-mean gate probabilities."""
    p = mean_scores if isinstance(mean_scores, Tensor) else Tensor(mean_scores)
    total = float(p.data.sum())
    if abs(total - 1.0) > 1e-6:
        raise NumericError(f"gate probabilities must sum to 1, got {total}")
    n = p.shape[-1]
    centered = p - 1.0 / n
    return (centered * centered).sum() * float(n)


def hybrid_gating_loss(stats: RoutingBatchStats, cfg: MoEConfig) -> Tensor:
    """Weighted sum of the switch and variance losses (defaults 0.85 / 0.15)."""
    loss = switch_loss(stats, cfg.switch_lambda) * cfg.w_switch
    if cfg.w_var != 0.0:
        loss = loss + variance_loss(stats.mean_scores()) * cfg.w_var
    return loss
