"""Contrastive losses and the composite training objective.

Both the fusion loss (on the post-MoE image/text halves) and the hash
loss (on the pre-quantization relaxed codes) are symmetric
temperature-scaled InfoNCE over in-batch negatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, log_softmax
from .errors import ConfigError, DivergenceError, NumericError, ShapeError

GATING_MODES = ("switch", "variance", "hybrid", "none")


@dataclass
class LossConfig:
    temperature: float = 0.07
    w_fusion: float = 1.0
    w_switch: float = 0.85
    w_var: float = 0.15
    w_hash: float = 0.5
    gating_mode: str = "hybrid"

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.gating_mode not in GATING_MODES:
            raise ConfigError(
                f"gating_mode must be one of {GATING_MODES}, got {self.gating_mode!r}"
            )

    def effective_gating_weights(self) -> tuple[float, float]:
        """(switch weight, variance weight) after applying the gating mode."""
        if self.gating_mode == "hybrid":
            return self.w_switch, self.w_var
        if self.gating_mode == "switch":
            return self.w_switch, 0.0
        if self.gating_mode == "variance":
            return 0.0, self.w_var
        return 0.0, 0.0


@dataclass
class LossBreakdown:
    """Raw loss terms plus the weighted total actually optimized."""

    l_fusion: float
    l_switch: float
    l_var: float
    l_hash: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {
            "l_fusion": self.l_fusion,
            "l_switch": self.l_switch,
            "l_var": self.l_var,
            "l_hash": self.l_hash,
            "total": self.total,
        }


def _normalize_rows(x: Tensor) -> Tensor:
    sq = (x * x).sum(axis=-1, keepdims=True)
    if (sq.data == 0.0).any():
        raise NumericError("cannot normalize a zero-norm row")
    return x * sq**-0.5


def contrastive_loss(a: Tensor, b: Tensor, temperature: float = 0.07) -> Tensor:
    """Symmetric InfoNCE between aligned rows of `a` and `b`.

    Rows are L2-normalized, similarities scaled by 1/temperature, and the
    mean of row-wise and column-wise cross-entropy against the diagonal
    matching is returned. A batch of one has no negatives and scores 0.
    """
    if a.shape != b.shape:
        raise ShapeError(f"batch shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2 or a.shape[0] < 1:
        raise ShapeError(f"expected a non-empty [batch, dim] pair, got {a.shape}")
    batch = a.shape[0]
    an = _normalize_rows(a)
    bn = _normalize_rows(b)
    sims = (an @ bn.transpose(1, 0)) * (1.0 / temperature)
    eye = np.eye(batch)
    row_ce = -(log_softmax(sims, axis=-1) * eye).sum() * (1.0 / batch)
    col_ce = -(log_softmax(sims.transpose(1, 0), axis=-1) * eye).sum() * (1.0 / batch)
    return (row_ce + col_ce) * 0.5


def total_objective(l_fusion: Tensor, l_switch: Tensor, l_var: Tensor,
                    l_hash: Tensor, cfg: LossConfig | None = None) -> Tensor:
    """Weighted sum of the four loss terms (defaults 1 / 0.85 / 0.15 / 0.5)."""
    cfg = cfg or LossConfig()
    w_switch, w_var = cfg.effective_gating_weights()
    parts = {
        "fusion": (l_fusion, cfg.w_fusion),
        "switch": (l_switch, w_switch),
        "variance": (l_var, w_var),
        "hash": (l_hash, cfg.w_hash),
    }
    total = None
    for name, (term, weight) in parts.items():
        term = term if isinstance(term, Tensor) else Tensor(term)
        if not np.isfinite(term.data).all():
            raise DivergenceError(f"loss term {name!r} is non-finite")
        weighted = term * weight
        total = weighted if total is None else total + weighted
    return total
