"""MEB1 writer: the byte contract shared with the retrieval pipeline.

Layout, little-endian, no padding:
    magic "MEB1" | u32 dim_image | u32 dim_text | u32 num_classes |
    u64 record_count | record_count x [dim_image f32][dim_text f32][u32 class_id]
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MEB1"
_HEADER = struct.Struct("<4sIIIQ")


def write_meb(path: str | Path, images: np.ndarray, texts: np.ndarray,
              class_ids: np.ndarray, num_classes: int) -> None:
    """Write records atomically (temp file + rename)."""
    images = np.ascontiguousarray(images, dtype="<f4")
    texts = np.ascontiguousarray(texts, dtype="<f4")
    class_ids = np.ascontiguousarray(class_ids, dtype="<u4")
    n, dim_image = images.shape
    dim_text = texts.shape[1]
    dtype = np.dtype([("image", "<f4", dim_image), ("text", "<f4", dim_text),
                      ("class_id", "<u4")])
    payload = np.empty(n, dtype=dtype)
    payload["image"] = images
    payload["text"] = texts
    payload["class_id"] = class_ids

    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, dim_image, dim_text, num_classes, n))
        fh.write(payload.tobytes())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
