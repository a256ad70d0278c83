"""The extraction pipeline: manifest -> curation -> embeddings -> MEB1 + log."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .backends import load_backend
from .curation import CurationLog, CurationRules, read_manifest, curate
from .meb import write_meb


def extract(manifest_path: str | Path, checkpoint: str, rules: CurationRules,
            out_path: str | Path) -> CurationLog:
    """Run the full extraction; writes `<out>` and `<out>.log.json`.

    Embeddings are L2-normalized before the 32-bit narrowing, and the log's
    retained count always equals the record count written to the MEB1 file.
    """
    rows = read_manifest(manifest_path)
    kept, class_ids, log = curate(rows, rules)

    backend = load_backend(checkpoint)
    images = backend.embed_images([row.image_path for row in kept])
    texts = backend.embed_texts([row.caption for row in kept])
    images = images / np.linalg.norm(images, axis=1, keepdims=True)
    texts = texts / np.linalg.norm(texts, axis=1, keepdims=True)

    num_classes = len(log.label_table)
    write_meb(out_path, images.astype(np.float32), texts.astype(np.float32),
              class_ids, num_classes)

    log_path = Path(str(out_path) + ".log.json")
    log_path.write_text(json.dumps(log.as_dict(), indent=2))
    return log
