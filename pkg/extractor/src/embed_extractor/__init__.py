"""Embedding extraction for the fusion-hashing pipeline.

Reads a manifest of (image file, caption, labels), applies label-curation
rules (rare-label removal, exclusions, top-k filtering, 'normal'
downsampling), embeds both modalities with a CLIP-style dual encoder, and
writes the MEB1 file the retrieval pipeline consumes.
"""

from .curation import CurationLog, CurationRules, ManifestRow, curate, read_manifest
from .extract import extract
from .meb import write_meb

__version__ = "0.1.0"

__all__ = [
    "CurationLog",
    "CurationRules",
    "ManifestRow",
    "curate",
    "extract",
    "read_manifest",
    "write_meb",
    "__version__",
]
