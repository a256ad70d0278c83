"""Embedding backends.

`load_backend` resolves a checkpoint id to a dual encoder producing
512-d embeddings per modality. Two families exist:

- "mock" or "mock:<seed>": a deterministic content-hash encoder for tests
  and offline pipelines. Same bytes/text in, same unit vector out.
- anything else: a Hugging Face CLIP-style checkpoint id (e.g. the
  BiomedCLIP release) loaded through `transformers`; requires the `clip`
  extra and a fetched checkpoint.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError, MissingFileError

EMBED_DIM = 512


class MockBackend:
    """Deterministic stand-in encoder: hash content into a unit vector."""

    def __init__(self, seed: int = 0, dim: int = EMBED_DIM):
        self.seed = seed
        self.dim = dim

    def _embed_bytes(self, payload: bytes, modality: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{modality}:".encode() + payload).digest()
        key = int.from_bytes(digest[:16], "little")
        gen = np.random.Generator(np.random.Philox(key=key))
        vec = gen.standard_normal(self.dim)
        return vec / np.linalg.norm(vec)

    def embed_images(self, paths: list[str]) -> np.ndarray:
        out = np.empty((len(paths), self.dim))
        for i, path in enumerate(paths):
            try:
                payload = Path(path).read_bytes()
            except OSError:
                raise MissingFileError(f"image file not found: {path}") from None
            out[i] = self._embed_bytes(payload, "image")
        return out

    def embed_texts(self, captions: list[str]) -> np.ndarray:
        out = np.empty((len(captions), self.dim))
        for i, caption in enumerate(captions):
            out[i] = self._embed_bytes(caption.encode(), "text")
        return out


class ClipBackend:
    """CLIP-style dual encoder via transformers (optional dependency)."""

    def __init__(self, checkpoint: str, batch_size: int = 16):
        try:
            import torch  # noqa: F401
            from PIL import Image  # noqa: F401
            from transformers import AutoModel, AutoProcessor
        except ImportError as err:
            raise CheckpointError(
                f"loading {checkpoint!r} needs the 'clip' extra "
                f"(transformers, torch, Pillow): {err}"
            ) from None
        try:
            self.model = AutoModel.from_pretrained(checkpoint)
            self.processor = AutoProcessor.from_pretrained(checkpoint)
        except Exception as err:
            raise CheckpointError(f"cannot load checkpoint {checkpoint!r}: {err}") from None
        self.model.eval()
        self.batch_size = batch_size

    def embed_images(self, paths: list[str]) -> np.ndarray:
        import torch
        from PIL import Image

        chunks = []
        for start in range(0, len(paths), self.batch_size):
            images = []
            for path in paths[start:start + self.batch_size]:
                try:
                    images.append(Image.open(path).convert("RGB"))
                except OSError:
                    raise MissingFileError(f"image file not found: {path}") from None
            inputs = self.processor(images=images, return_tensors="pt")
            with torch.no_grad():
                feats = self.model.get_image_features(**inputs)
            chunks.append(feats.cpu().numpy().astype(np.float64))
        out = np.concatenate(chunks)
        return out / np.linalg.norm(out, axis=1, keepdims=True)

    def embed_texts(self, captions: list[str]) -> np.ndarray:
        import torch

        chunks = []
        for start in range(0, len(captions), self.batch_size):
            batch = captions[start:start + self.batch_size]
            inputs = self.processor(text=batch, return_tensors="pt",
                                    padding=True, truncation=True)
            with torch.no_grad():
                feats = self.model.get_text_features(**inputs)
            chunks.append(feats.cpu().numpy().astype(np.float64))
        out = np.concatenate(chunks)
        return out / np.linalg.norm(out, axis=1, keepdims=True)


def load_backend(checkpoint: str):
    if checkpoint == "mock" or checkpoint.startswith("mock:"):
        seed = int(checkpoint.split(":", 1)[1]) if ":" in checkpoint else 0
        return MockBackend(seed=seed)
    return ClipBackend(checkpoint)
