"""Encoders that turn images and texts into the archive's feature tensors.

The production path wraps a pretrained vision-language model (ALIGN,
whose image tower is an EfficientNet-B7): the exporter taps the outputs
of image-tower blocks 3, 10, 17 and 37 and takes the 640-dimensional
joint-space embedding for images and texts.  Anything that satisfies
:class:`Encoder` can stand in, which is how the pipeline stays testable
on machines without the model weights.

:class:`ReferenceEncoder` is that stand-in: a deterministic,
dependency-free encoder with the exact tensor geometry of the wrapped
model at 64x64 input — block channels 32/48/80/224 at strides
2/4/8/16, final dimension 640.  Its outputs are fixed functions of the
pixel/text content (seeded projections of local image statistics and of
character-trigram counts), so identical inputs always produce identical
archives, and images with similar content land close in feature space.
"""

from __future__ import annotations

import zlib
from typing import Protocol, runtime_checkable

import numpy as np

__all__ = ["Encoder", "ReferenceEncoder"]


@runtime_checkable
class Encoder(Protocol):
    """What the export pipeline needs from a feature extractor."""

    input_size: tuple[int, int]  # (height, width) images are resized to
    block_shapes: tuple[tuple[int, int, int], ...]  # (h, w, c) per tapped block
    d_final: int

    def encode_image(self, image: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Map an (H, W, 3) float image in [0, 1] to (block maps, final vector)."""
        ...

    def encode_text(self, text: str) -> np.ndarray:
        """Map a phrase to its (d_final,) joint-space embedding."""
        ...


_TRIGRAM_BUCKETS = 512


class ReferenceEncoder:
    """Deterministic stand-in encoder with the production tensor geometry."""

    input_size = (64, 64)
    block_channels = (32, 48, 80, 224)
    block_strides = (2, 4, 8, 16)
    d_final = 640

    def __init__(self, seed: int = 7341):
        h, w = self.input_size
        self.block_shapes = tuple((h // s, w // s, c) for s, c
                                  in zip(self.block_strides, self.block_channels))
        rng = np.random.default_rng(seed)

        def proj(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
            scale = 1.0 / np.sqrt(n_in)
            return (rng.standard_normal((n_in, n_out)).astype(np.float32) * scale,
                    rng.standard_normal(n_out).astype(np.float32) * 0.1)

        self._blocks = [proj(6, c) for c in self.block_channels]
        self._final = proj(sum(self.block_channels), self.d_final)
        self._text = proj(_TRIGRAM_BUCKETS, self.d_final)

    def encode_image(self, image: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        img = np.asarray(image, dtype=np.float32)
        if img.shape != (*self.input_size, 3):
            raise ValueError(f"expected {(*self.input_size, 3)} image, got {img.shape}")
        centered = img * 2.0 - 1.0
        blocks: list[np.ndarray] = []
        pooled_means: list[np.ndarray] = []
        for stride, (weight, bias) in zip(self.block_strides, self._blocks):
            h, w = self.input_size[0] // stride, self.input_size[1] // stride
            tiles = centered.reshape(h, stride, w, stride, 3)
            stats = np.concatenate([tiles.mean(axis=(1, 3)),
                                    (tiles ** 2).mean(axis=(1, 3))], axis=-1)
            feat = np.tanh(stats @ weight + bias).astype(np.float32)
            blocks.append(feat)
            pooled_means.append(feat.mean(axis=(0, 1)))
        weight, bias = self._final
        vec = np.tanh(np.concatenate(pooled_means) @ weight + bias)
        return blocks, _unit(vec)

    def encode_text(self, text: str) -> np.ndarray:
        if not text.strip():
            raise ValueError("cannot encode empty text")
        padded = f" {text.strip().lower()} "
        counts = np.zeros(_TRIGRAM_BUCKETS, dtype=np.float32)
        for i in range(len(padded) - 2):
            bucket = zlib.crc32(padded[i:i + 3].encode("utf-8")) % _TRIGRAM_BUCKETS
            counts[bucket] += 1.0
        weight, bias = self._text
        return _unit(np.tanh(_unit(counts) @ weight + bias))


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ValueError("zero vector cannot be normalized")
    return (vec / norm).astype(np.float32)
