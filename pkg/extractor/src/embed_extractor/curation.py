"""Label curation: rare-label removal, exclusions, top-k filtering, and
seeded downsampling of the dominant 'normal' class.

Each manifest row carries one or more raw labels; a row's class is its
first label that survives curation. The emitted log reconciles exactly
with the record count of the written MEB1 file.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CurationError, ManifestError

NORMAL_LABEL = "normal"


@dataclass
class CurationRules:
    min_label_count: int = 20
    normal_downsample_fraction: float = 0.5
    excluded_labels: list[str] = field(default_factory=list)
    top_k_semantic_types: int = 10  # 0 disables the top-k cut
    seed: int = 0

    def validate(self) -> None:
        if self.min_label_count <= 0:
            raise CurationError("min_label_count must be positive")
        if not 0.0 < self.normal_downsample_fraction <= 1.0:
            raise CurationError("normal_downsample_fraction must be in (0, 1]")
        if self.top_k_semantic_types < 0:
            raise CurationError("top_k_semantic_types must be >= 0")


@dataclass
class ManifestRow:
    image_path: str
    caption: str
    labels: list[str]


@dataclass
class CurationLog:
    input_rows: int
    excluded_label_counts: dict[str, int]
    rare_label_counts: dict[str, int]
    below_top_k: dict[str, int]
    rows_without_label: int
    normal_rows_before: int
    normal_rows_after: int
    retained_rows: int
    label_table: dict[str, int]  # label -> class id

    def as_dict(self) -> dict:
        return {
            "input_rows": self.input_rows,
            "excluded_label_counts": self.excluded_label_counts,
            "rare_label_counts": self.rare_label_counts,
            "below_top_k": self.below_top_k,
            "rows_without_label": self.rows_without_label,
            "normal_rows_before": self.normal_rows_before,
            "normal_rows_after": self.normal_rows_after,
            "retained_rows": self.retained_rows,
            "label_table": self.label_table,
        }


def read_manifest(path: str | Path) -> list[ManifestRow]:
    """Parse a manifest CSV: image_path, caption, labels (semicolons)."""
    rows: list[ManifestRow] = []
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            required = {"image_path", "caption", "labels"}
            if reader.fieldnames is None or not required <= set(reader.fieldnames):
                raise ManifestError(
                    f"{path}: manifest needs columns {sorted(required)}, "
                    f"got {reader.fieldnames}"
                )
            for record in reader:
                labels = [l.strip() for l in record["labels"].split(";") if l.strip()]
                rows.append(ManifestRow(
                    image_path=record["image_path"].strip(),
                    caption=record["caption"],
                    labels=labels,
                ))
    except OSError as err:
        raise ManifestError(f"cannot read manifest {path}: {err}") from None
    if not rows:
        raise ManifestError(f"{path}: manifest contains no rows")
    return rows


def curate(rows: list[ManifestRow],
           rules: CurationRules) -> tuple[list[ManifestRow], np.ndarray, CurationLog]:
    """Apply the curation rules; returns (kept rows, class ids, log)."""
    rules.validate()
    counts: dict[str, int] = {}
    for row in rows:
        for label in row.labels:
            counts[label] = counts.get(label, 0) + 1

    excluded = {l: counts[l] for l in rules.excluded_labels if l in counts}
    surviving = {l: c for l, c in counts.items() if l not in excluded}
    rare = {l: c for l, c in surviving.items() if c < rules.min_label_count}
    surviving = {l: c for l, c in surviving.items() if c >= rules.min_label_count}

    below_top_k: dict[str, int] = {}
    if rules.top_k_semantic_types and len(surviving) > rules.top_k_semantic_types:
        ordered = sorted(surviving.items(), key=lambda kv: (-kv[1], kv[0]))
        keep = dict(ordered[:rules.top_k_semantic_types])
        below_top_k = {l: c for l, c in surviving.items() if l not in keep}
        surviving = keep

    if not surviving:
        raise CurationError("curation removed every label")

    # A row's class is its first surviving label.
    kept: list[ManifestRow] = []
    assigned: list[str] = []
    rows_without_label = 0
    for row in rows:
        label = next((l for l in row.labels if l in surviving), None)
        if label is None:
            rows_without_label += 1
            continue
        kept.append(row)
        assigned.append(label)

    # Seeded downsample of the dominant 'normal' class.
    normal_idx = [i for i, label in enumerate(assigned) if label == NORMAL_LABEL]
    normal_before = len(normal_idx)
    if normal_idx and rules.normal_downsample_fraction < 1.0:
        gen = np.random.Generator(np.random.Philox(key=rules.seed))
        keep_count = int(round(normal_before * rules.normal_downsample_fraction))
        chosen = set(gen.choice(normal_idx, size=keep_count, replace=False).tolist())
        dropped = set(normal_idx) - chosen
        kept = [r for i, r in enumerate(kept) if i not in dropped]
        assigned = [a for i, a in enumerate(assigned) if i not in dropped]
    normal_after = sum(1 for label in assigned if label == NORMAL_LABEL)

    # Dense ids, most frequent label first (ties by name) for stability.
    order = sorted(surviving.items(), key=lambda kv: (-kv[1], kv[0]))
    label_table = {label: idx for idx, (label, _) in enumerate(order)}
    class_ids = np.array([label_table[a] for a in assigned], dtype=np.uint32)

    log = CurationLog(
        input_rows=len(rows),
        excluded_label_counts=excluded,
        rare_label_counts=rare,
        below_top_k=below_top_k,
        rows_without_label=rows_without_label,
        normal_rows_before=normal_before,
        normal_rows_after=normal_after,
        retained_rows=len(kept),
        label_table=label_table,
    )
    return kept, class_ids, log
