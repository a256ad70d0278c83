"""Experiment orchestration: configuration, the training loop, retrieval
evaluation, the ablation matrix, and model artifact persistence.

A run is fully determined by (seed, config, data): every stochastic
component draws from its own named stream, so repeated runs emit
bit-identical metrics.
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import rng
from .autodiff import Adam, Tensor
from .data import (
    RecordSet,
    SyntheticSpec,
    concat_all,
    generate_synthetic,
    read_records,
    split_dataset,
    DatasetSplit,
)
from .errors import ConfigError, DataError, DivergenceError, NumericError
from .hashing import (
    HashHead,
    HashHeadConfig,
    PackedCodes,
    RetrievalIndex,
    mean_average_precision,
    sign_quantize,
)
from .moe import MoEConfig, MoEFusion, split_fused, switch_loss, variance_loss
from .objectives import LossBreakdown, LossConfig, contrastive_loss, total_objective
from .voting import VotingConfig, VotingMLP

EVAL_BATCH = 256

ARTIFACT_MAGIC = b"MPD1"


# ----------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------
@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 32
    lr_moe: float = 1e-4
    lr_hash: float = 1e-3
    code_bits: int = 16
    seed: int = 0
    data_path: str | None = None
    synthetic: SyntheticSpec | None = None
    hash_hidden_dim: int = 512
    hash_dropout_p: float = 0.2
    voting: VotingConfig = field(default_factory=VotingConfig)
    moe: MoEConfig = field(default_factory=MoEConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_moe <= 0 or self.lr_hash <= 0:
            raise ConfigError("learning rates must be positive")
        HashHeadConfig(code_bits=self.code_bits).validate()
        self.voting.validate()
        self.moe.validate()
        self.loss.validate()

    def to_dict(self) -> dict:
        out = {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr_moe": self.lr_moe,
            "lr_hash": self.lr_hash,
            "code_bits": self.code_bits,
            "seed": self.seed,
            "data_path": self.data_path,
            "hash_hidden_dim": self.hash_hidden_dim,
            "hash_dropout_p": self.hash_dropout_p,
            "voting": asdict(self.voting),
            "moe": asdict(self.moe),
            "loss": asdict(self.loss),
        }
        out["synthetic"] = asdict(self.synthetic) if self.synthetic else None
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        voting = VotingConfig(**d.pop("voting", {}))
        moe = MoEConfig(**d.pop("moe", {}))
        loss = LossConfig(**d.pop("loss", {}))
        synth = d.pop("synthetic", None)
        synthetic = SyntheticSpec(**synth) if synth else None
        return cls(voting=voting, moe=moe, loss=loss, synthetic=synthetic, **d)


# Flat key=value names accepted in config files and CLI overrides.
_FLAT_KEYS = {
    "epochs": ("epochs", int),
    "batch_size": ("batch_size", int),
    "lr_moe": ("lr_moe", float),
    "lr_hash": ("lr_hash", float),
    "code_bits": ("code_bits", int),
    "seed": ("seed", int),
    "data": ("data_path", str),
    "hash.hidden_dim": ("hash_hidden_dim", int),
    "hash.dropout_p": ("hash_dropout_p", float),
    "voting.k": ("voting.votes", int),
    "voting.dropout_p": ("voting.dropout_p", float),
    "voting.frozen": ("voting.frozen", bool),
    "voting.hidden_dim": ("voting.hidden_dim", int),
    "voting.seed": ("voting.seed", int),
    "voting.enabled": ("voting.enabled", bool),
    "moe.num_experts": ("moe.num_experts", int),
    "moe.layers_per_expert": ("moe.layers_per_expert", int),
    "moe.heads": ("moe.heads", int),
    "moe.ffn_hidden": ("moe.ffn_hidden", int),
    "moe.switch_lambda": ("moe.switch_lambda", float),
    "moe.w_switch": ("moe.w_switch", float),
    "moe.w_var": ("moe.w_var", float),
    "moe.enabled": ("moe.enabled", bool),
    "loss.temperature": ("loss.temperature", float),
    "loss.w_fusion": ("loss.w_fusion", float),
    "loss.w_switch": ("loss.w_switch", float),
    "loss.w_var": ("loss.w_var", float),
    "loss.w_hash": ("loss.w_hash", float),
    "loss.gating_mode": ("loss.gating_mode", str),
    "synth.num_classes": ("synth.num_classes", int),
    "synth.samples_per_class": ("synth.samples_per_class", int),
    "synth.dim": ("synth.dim", int),
    "synth.cluster_spread": ("synth.cluster_spread", float),
    "synth.seed": ("synth.seed", int),
}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"cannot parse boolean from {text!r}")


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read a plain-text key=value config file ('#' starts a comment)."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def apply_flat_options(cfg: TrainConfig, options: dict[str, str]) -> TrainConfig:
    """Apply flat key=value overrides on top of a config."""
    cfg = copy.deepcopy(cfg)
    for key, raw in options.items():
        if key not in _FLAT_KEYS:
            raise ConfigError(f"unknown configuration key {key!r}")
        target, typ = _FLAT_KEYS[key]
        value = _parse_bool(raw) if typ is bool else typ(raw)
        if key.startswith("synth.") and cfg.synthetic is None:
            cfg.synthetic = SyntheticSpec()
        obj = cfg
        *path, attr = target.split(".")
        for part in path:
            obj = getattr(obj, "synthetic" if part == "synth" else part)
        setattr(obj, attr, value)
    return cfg


# ----------------------------------------------------------------------
# model
# ----------------------------------------------------------------------
class PipelineModel:
    """Voting MLP, MoE fusion, and the two hashing branches, wired together."""

    def __init__(self, cfg: TrainConfig):
        cfg.validate()
        self.cfg = cfg
        self.voting = VotingMLP(cfg.voting, seed=cfg.seed) if cfg.voting.enabled else None
        self.moe = MoEFusion(cfg.moe, seed=cfg.seed) if cfg.moe.enabled else None
        head_cfg = HashHeadConfig(
            input_dim=cfg.moe.token_dim,
            hidden_dim=cfg.hash_hidden_dim,
            code_bits=cfg.code_bits,
            dropout_p=cfg.hash_dropout_p,
        )
        self.head_image = HashHead(head_cfg, seed=cfg.seed, name="hash_image")
        self.head_text = HashHead(head_cfg, seed=cfg.seed, name="hash_text")

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named: list[tuple[str, Tensor]] = []
        if self.voting is not None:
            named += self.voting.named_parameters()
        if self.moe is not None:
            named += self.moe.named_parameters()
        named += self.head_image.named_parameters()
        named += self.head_text.named_parameters()
        return named

    def fusion_parameters(self) -> list[Tensor]:
        """The group trained at lr_moe: gate + experts + final norm, plus the
        voting weights when they are unfrozen."""
        params: list[Tensor] = []
        if self.voting is not None:
            params += self.voting.trainable_parameters()
        if self.moe is not None:
            params += self.moe.trainable_parameters()
        return params

    def fuse(self, z: Tensor, vote_masks: np.random.Generator):
        """concat input -> voted feature -> MoE fusion. Returns (z, stats)."""
        x = self.voting.forward(z, vote_masks) if self.voting is not None else z
        if self.moe is not None:
            return self.moe.forward(x)
        return x, None

    def relaxed_codes(self, fused: Tensor,
                      image_masks: np.random.Generator | None = None,
                      text_masks: np.random.Generator | None = None):
        pair = split_fused(fused)
        h_v = self.head_image.forward(pair.z_v, masks=image_masks)
        h_t = self.head_text.forward(pair.z_t, masks=text_masks)
        return pair, h_v, h_t

    def parameter_checksum(self, prefix: str | None = None) -> str:
        """SHA-256 over the named parameter bytes (optionally one subsystem)."""
        digest = hashlib.sha256()
        for name, p in self.named_parameters():
            if prefix is not None and not name.startswith(prefix):
                continue
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------
@dataclass
class EpochStats:
    epoch: int
    losses: LossBreakdown
    expert_counts: list[int]
    expert_fractions: list[float]

    def as_dict(self) -> dict:
        d = {"epoch": self.epoch}
        d.update(self.losses.as_dict())
        d["expert_counts"] = self.expert_counts
        d["expert_fractions"] = self.expert_fractions
        return d


@dataclass
class MetricsReport:
    config: dict
    seed: int
    epochs: list[EpochStats]
    final_map: dict[str, dict[str, float]]
    benchmark: list[dict] | None = None

    def as_dict(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "epochs": [e.as_dict() for e in self.epochs],
            "final_map": self.final_map,
            "benchmark": self.benchmark,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)


@dataclass
class TrainResult:
    report: MetricsReport
    model: PipelineModel
    records: RecordSet
    split: DatasetSplit
    step_breakdowns: list[LossBreakdown]


# ----------------------------------------------------------------------
# data loading
# ----------------------------------------------------------------------
def load_records(cfg: TrainConfig) -> RecordSet:
    if cfg.data_path is not None:
        return read_records(cfg.data_path, expected_dims=(512, 512))
    if cfg.synthetic is not None:
        return generate_synthetic(cfg.synthetic)
    raise ConfigError("config needs either a data path or a synthetic spec")


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------
def train(cfg: TrainConfig, records: RecordSet | None = None) -> TrainResult:
    """Run the full training loop and final retrieval evaluation."""
    cfg.validate()
    if records is None:
        records = load_records(cfg)
    split = split_dataset(len(records), cfg.seed)
    fused_inputs = concat_all(records)

    model = PipelineModel(cfg)
    fusion_opt = Adam(model.fusion_parameters(), lr=cfg.lr_moe)
    head_opt_image = Adam(model.head_image.trainable_parameters(), lr=cfg.lr_hash)
    head_opt_text = Adam(model.head_text.trainable_parameters(), lr=cfg.lr_hash)

    data_stream = rng.stream(cfg.seed, "data")
    vote_stream = rng.stream(cfg.seed, "voting-train")
    image_mask_stream = rng.stream(cfg.seed, "hash-image-dropout")
    text_mask_stream = rng.stream(cfg.seed, "hash-text-dropout")

    num_experts = cfg.moe.num_experts
    train_indices = split.train
    epochs: list[EpochStats] = []
    step_breakdowns: list[LossBreakdown] = []

    for epoch in range(cfg.epochs):
        order = train_indices[data_stream.permutation(len(train_indices))]
        sums = np.zeros(5)
        counts = np.zeros(num_experts, dtype=np.int64)
        steps = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]  # last partial batch kept
            batch = Tensor(fused_inputs[idx])
            try:
                fused, stats = model.fuse(batch, vote_stream)
                pair, h_v, h_t = model.relaxed_codes(
                    fused, image_masks=image_mask_stream, text_masks=text_mask_stream
                )
                l_fusion = contrastive_loss(pair.z_v, pair.z_t, cfg.loss.temperature)
                l_hash = contrastive_loss(h_v, h_t, cfg.loss.temperature)
                if stats is not None:
                    l_switch = switch_loss(stats, cfg.moe.switch_lambda)
                    l_var = variance_loss(stats.mean_scores())
                    counts += stats.counts()
                else:
                    l_switch = Tensor(0.0)
                    l_var = Tensor(0.0)
                total = total_objective(l_fusion, l_switch, l_var, l_hash, cfg.loss)
            except (DivergenceError, NumericError) as err:
                raise DivergenceError(
                    f"epoch {epoch}, batch {steps}: {err}"
                ) from None

            fusion_opt.zero_grad()
            head_opt_image.zero_grad()
            head_opt_text.zero_grad()
            total.backward()
            fusion_opt.step()
            head_opt_image.step()
            head_opt_text.step()

            breakdown = LossBreakdown(
                l_fusion=l_fusion.item(), l_switch=l_switch.item(),
                l_var=l_var.item(), l_hash=l_hash.item(), total=total.item(),
            )
            step_breakdowns.append(breakdown)
            sums += [breakdown.l_fusion, breakdown.l_switch, breakdown.l_var,
                     breakdown.l_hash, breakdown.total]
            steps += 1

        mean = sums / max(steps, 1)
        routed = int(counts.sum())
        fractions = (counts / routed).tolist() if routed else [0.0] * num_experts
        epochs.append(EpochStats(
            epoch=epoch,
            losses=LossBreakdown(*[float(v) for v in mean]),
            expert_counts=counts.tolist(),
            expert_fractions=[float(f) for f in fractions],
        ))

    final = evaluate_retrieval(model, records, split)
    report = MetricsReport(
        config=cfg.to_dict(),
        seed=cfg.seed,
        epochs=epochs,
        final_map={str(cfg.code_bits): final},
        benchmark=None,
    )
    return TrainResult(report=report, model=model, records=records, split=split,
                       step_breakdowns=step_breakdowns)


# ----------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------
def encode_subset(model: PipelineModel, fused_inputs: np.ndarray,
                  indices: np.ndarray,
                  vote_masks: np.random.Generator) -> tuple[PackedCodes, PackedCodes]:
    """Hash codes (image, text) for a subset of records, in index order.

    Voting dropout stays active here by design; the caller supplies a fresh
    stream so repeated evaluation is pure. Hash-head dropout is off.
    """
    relaxed_v, relaxed_t = [], []
    for start in range(0, len(indices), EVAL_BATCH):
        idx = indices[start:start + EVAL_BATCH]
        fused, _ = model.fuse(Tensor(fused_inputs[idx]), vote_masks)
        _, h_v, h_t = model.relaxed_codes(fused)
        relaxed_v.append(h_v.data)
        relaxed_t.append(h_t.data)
    bits = model.cfg.code_bits
    return (
        sign_quantize(np.concatenate(relaxed_v)) if relaxed_v else PackedCodes(
            np.zeros((0, 1), np.uint64), bits),
        sign_quantize(np.concatenate(relaxed_t)) if relaxed_t else PackedCodes(
            np.zeros((0, 1), np.uint64), bits),
    )


def evaluate_retrieval(model: PipelineModel, records: RecordSet,
                       split: DatasetSplit) -> dict[str, float]:
    """I2T and T2I mAP over the query/retrieval split (mAP@all)."""
    fused_inputs = concat_all(records)
    vote_masks = rng.stream(model.cfg.seed, "voting-eval")
    q_img, q_txt = encode_subset(model, fused_inputs, split.query, vote_masks)
    r_img, r_txt = encode_subset(model, fused_inputs, split.retrieval, vote_masks)
    q_labels = records.class_ids[split.query]
    r_labels = records.class_ids[split.retrieval]

    i2t = mean_average_precision(
        RetrievalIndex(q_img, q_labels, "image"),
        RetrievalIndex(r_txt, r_labels, "text"), direction="I2T",
    )
    t2i = mean_average_precision(
        RetrievalIndex(q_txt, q_labels, "text"),
        RetrievalIndex(r_img, r_labels, "image"), direction="T2I",
    )
    return {
        "i2t": i2t.value,
        "t2i": t2i.value,
        "mean": (i2t.value + t2i.value) / 2.0,
        "i2t_excluded": i2t.excluded,
        "t2i_excluded": t2i.excluded,
    }


def evaluate_artifacts(prefixes: list[str | Path], records: RecordSet,
                       code_bits: list[int] | None = None) -> MetricsReport:
    """Evaluate saved models (one per bit length) on a record set."""
    final_map: dict[str, dict[str, float]] = {}
    config_echo: dict = {}
    seed = 0
    available: dict[int, tuple[PipelineModel, TrainConfig]] = {}
    for prefix in prefixes:
        model, cfg = load_model(prefix)
        available[cfg.code_bits] = (model, cfg)
    wanted = code_bits if code_bits is not None else sorted(available)
    for bits in wanted:
        if bits not in available:
            raise DataError(f"no trained artifact supplies {bits}-bit codes")
        model, cfg = available[bits]
        split = split_dataset(len(records), cfg.seed)
        final_map[str(bits)] = evaluate_retrieval(model, records, split)
        config_echo = cfg.to_dict()
        seed = cfg.seed
    return MetricsReport(config=config_echo, seed=seed, epochs=[],
                         final_map=final_map, benchmark=None)


# ----------------------------------------------------------------------
# ablation harness
# ----------------------------------------------------------------------
_VARIANT_KEYS = {"name", "moe", "voting", "frozen", "gating"}

MODULE_ABLATION = [
    {"name": "base", "moe": False, "voting": 0},
    {"name": "+moe", "moe": True, "voting": 0},
    {"name": "+moe+voting1+frozen", "moe": True, "voting": 1, "frozen": True},
    {"name": "+moe+voting5+unfrozen", "moe": True, "voting": 5, "frozen": False},
    {"name": "+moe+voting5+frozen", "moe": True, "voting": 5, "frozen": True},
]

LOSS_ABLATION = [
    {"name": "gating-switch", "gating": "switch"},
    {"name": "gating-variance", "gating": "variance"},
    {"name": "gating-hybrid", "gating": "hybrid"},
]


def apply_variant(cfg: TrainConfig, variant: dict) -> TrainConfig:
    unknown = set(variant) - _VARIANT_KEYS
    if unknown:
        raise ConfigError(f"unknown variant keys: {sorted(unknown)}")
    cfg = copy.deepcopy(cfg)
    if "moe" in variant:
        cfg.moe.enabled = bool(variant["moe"])
    if "voting" in variant:
        votes = int(variant["voting"])
        if votes == 0:
            cfg.voting.enabled = False
        else:
            cfg.voting.enabled = True
            cfg.voting.votes = votes
    if "frozen" in variant:
        cfg.voting.frozen = bool(variant["frozen"])
    if "gating" in variant:
        cfg.loss.gating_mode = str(variant["gating"])
    return cfg


@dataclass
class AblationRow:
    name: str
    per_bits: dict[str, dict[str, float]]  # bits -> {i2t, t2i, mean}


def ablate(cfg: TrainConfig, variants: list[dict],
           code_bits: list[int] | None = None,
           records: RecordSet | None = None) -> tuple[list[AblationRow], dict[str, MetricsReport]]:
    """Train every variant with identical seed/data; one row per variant."""
    cfg.validate()
    if records is None and variants:
        records = load_records(cfg)
    bits_list = code_bits or [cfg.code_bits]
    rows: list[AblationRow] = []
    reports: dict[str, MetricsReport] = {}
    for variant in variants:
        vcfg = apply_variant(cfg, variant)
        name = str(variant.get("name", "variant"))
        per_bits: dict[str, dict[str, float]] = {}
        for bits in bits_list:
            bcfg = copy.deepcopy(vcfg)
            bcfg.code_bits = bits
            result = train(bcfg, records=records)
            per_bits[str(bits)] = result.report.final_map[str(bits)]
            reports[f"{name}@{bits}"] = result.report
        rows.append(AblationRow(name=name, per_bits=per_bits))
    return rows, reports


# ----------------------------------------------------------------------
# artifacts: flat named-parameter dump + JSON manifest
# ----------------------------------------------------------------------
def save_model(prefix: str | Path, model: PipelineModel) -> tuple[Path, Path]:
    """Write `<prefix>.mpd` (parameters) and `<prefix>.json` (manifest)."""
    prefix = Path(prefix)
    params_path = prefix.with_suffix(".mpd")
    manifest_path = prefix.with_suffix(".json")
    named = model.named_parameters()
    with open(params_path, "wb") as fh:
        fh.write(ARTIFACT_MAGIC)
        fh.write(struct.pack("<Q", len(named)))
        for name, p in named:
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    manifest = {"config": model.cfg.to_dict(), "seed": model.cfg.seed}
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return params_path, manifest_path


def load_model(prefix: str | Path) -> tuple[PipelineModel, TrainConfig]:
    prefix = Path(prefix)
    params_path = prefix.with_suffix(".mpd")
    manifest_path = prefix.with_suffix(".json")
    if not params_path.exists() or not manifest_path.exists():
        raise DataError(f"missing artifact files for prefix {prefix}")
    manifest = json.loads(manifest_path.read_text())
    cfg = TrainConfig.from_dict(manifest["config"])
    model = PipelineModel(cfg)

    raw = params_path.read_bytes()
    if raw[:4] != ARTIFACT_MAGIC:
        raise DataError(f"{params_path}: bad magic {raw[:4]!r}")
    offset = 4
    (count,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    loaded: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset:offset + name_len].decode()
        offset += name_len
        (ndim,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}Q", raw, offset)
        offset += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(raw, dtype="<f8", count=size, offset=offset)
        offset += 8 * size
        loaded[name] = values.reshape(shape)

    expected = dict(model.named_parameters())
    if set(loaded) != set(expected):
        raise DataError(
            f"{params_path}: parameter names do not match the manifest config"
        )
    for name, values in loaded.items():
        if expected[name].data.shape != values.shape:
            raise DataError(f"{params_path}: shape mismatch for {name}")
        expected[name].data = values.astype(np.float64).copy()
    return model, cfg
