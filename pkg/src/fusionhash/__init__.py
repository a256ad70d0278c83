"""Cross-modal fusion hashing.

Pipeline: paired 512-d image/text embeddings are concatenated, passed
through a frozen dropout-voting MLP, fused by a top-1 mixture-of-experts
transformer with hybrid load-balancing losses, trained contrastively, and
quantized to bit-packed binary codes searched by Hamming distance.
"""

from .autodiff import Adam, AdamState, Tensor, adam_step
from .data import (
    DatasetSplit,
    EmbeddingRecord,
    RecordSet,
    SyntheticSpec,
    concat_embedding,
    generate_synthetic,
    read_records,
    split_dataset,
    write_records,
)
from .hashing import (
    HashHead,
    HashHeadConfig,
    PackedCodes,
    RetrievalIndex,
    benchmark,
    hamming,
    mean_average_precision,
    retrieve,
    sign_quantize,
)
from .moe import MoEConfig, MoEFusion, RoutingBatchStats, split_fused
from .objectives import LossBreakdown, LossConfig, contrastive_loss, total_objective
from .training import MetricsReport, PipelineModel, TrainConfig, ablate, train
from .voting import VotingConfig, VotingMLP

__version__ = "0.1.0"

__all__ = [
    "Adam", "AdamState", "Tensor", "adam_step",
    "DatasetSplit", "EmbeddingRecord", "RecordSet", "SyntheticSpec",
    "concat_embedding", "generate_synthetic", "read_records", "split_dataset",
    "write_records",
    "HashHead", "HashHeadConfig", "PackedCodes", "RetrievalIndex", "benchmark",
    "hamming", "mean_average_precision", "retrieve", "sign_quantize",
    "MoEConfig", "MoEFusion", "RoutingBatchStats", "split_fused",
    "LossBreakdown", "LossConfig", "contrastive_loss", "total_objective",
    "MetricsReport", "PipelineModel", "TrainConfig", "ablate", "train",
    "VotingConfig", "VotingMLP",
    "__version__",
]
