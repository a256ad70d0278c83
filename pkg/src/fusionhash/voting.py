"""Frozen dropout-voting MLP: K stochastic passes averaged into one feature.

The two weight matrices stay frozen by default and dropout remains active
at inference as well as training, so the module behaves as a fixed
stochastic ensemble over a random projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, gelu, kaiming_uniform
from .errors import ConfigError
from .rng import stream


@dataclass
class VotingConfig:
    input_dim: int = 1024
    hidden_dim: int = 1024
    output_dim: int = 1024
    dropout_p: float = 0.2
    votes: int = 5  # K
    frozen: bool = True
    enabled: bool = True
    seed: int | None = None  # falls back to the experiment seed

    def validate(self) -> None:
        if self.votes < 1:
            raise ConfigError(f"vote count must be >= 1, got {self.votes}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if min(self.input_dim, self.hidden_dim, self.output_dim) <= 0:
            raise ConfigError("voting dims must be positive")


class VotingMLP:
    """f(z) = W2 GELU(Dropout_p(W1 z)), voted K times and averaged."""

    def __init__(self, cfg: VotingConfig, seed: int | None = None):
        cfg.validate()
        self.cfg = cfg
        resolved = cfg.seed if cfg.seed is not None else (seed if seed is not None else 0)
        init = stream(resolved, "voting-init")
        trainable = not cfg.frozen
        self.w1 = Tensor(
            kaiming_uniform(init, (cfg.input_dim, cfg.hidden_dim), cfg.input_dim),
            requires_grad=trainable,
        )
        self.w2 = Tensor(
            kaiming_uniform(init, (cfg.hidden_dim, cfg.output_dim), cfg.hidden_dim),
            requires_grad=trainable,
        )

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("voting.w1", self.w1), ("voting.w2", self.w2)]

    def trainable_parameters(self) -> list[Tensor]:
        return [] if self.cfg.frozen else [self.w1, self.w2]

    def forward(self, z: Tensor, masks: np.random.Generator) -> Tensor:
        """Average of K dropout-perturbed passes over a [batch, 1024] input.

        The K masks come from the caller's stream, one block per call, so a
        fixed stream position makes the vote deterministic.
        """
        cfg = self.cfg
        batch = z.shape[0]
        pre = z @ self.w1  # shared across votes; only the masks differ
        if cfg.dropout_p == 0.0:
            # Every vote is identical, so the average equals a single pass.
            return gelu(pre) @ self.w2
        keep = masks.random((cfg.votes, batch, cfg.hidden_dim)) >= cfg.dropout_p
        scale = keep / (1.0 - cfg.dropout_p)
        voted = gelu(pre.reshape(1, batch, cfg.hidden_dim) * scale)
        out = voted.reshape(cfg.votes * batch, cfg.hidden_dim) @ self.w2
        return out.reshape(cfg.votes, batch, cfg.output_dim).mean(axis=0)
