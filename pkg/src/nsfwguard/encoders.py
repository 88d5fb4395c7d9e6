"""Tokenization and toy text/image feature extraction.

These encoders stand in for a large pretrained dual encoder behind the
same (L x d) embedding-sequence contract: hash tokenizer + embedding
table + sinusoidal positions on the text side, patch statistics + linear
projection on the image side. Swapping in real encoders means replacing
`encode_text` / `encode_image` while keeping shapes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import RangeError, ShapeError, ValidationError
from .hashing import fnv1a64

BOS_ID = 0
EOS_ID = 1

_WORD_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 4096
    d: int = 32
    max_len: int = 64
    patch: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.d < 2 or self.d % 2 != 0:
            raise ValidationError(f"model dimension d={self.d} must be even and >= 2")
        if self.vocab_size < 3:
            raise ValidationError("vocab_size must leave room for BOS/EOS")
        if self.max_len < 2:
            raise ValidationError("max_len must be >= 2")
        if self.patch < 1:
            raise ValidationError("patch must be >= 1")


def tokenize(prompt: str, config: EncoderConfig) -> list[int]:
    """Hash-tokenize a prompt into [BOS, ids..., EOS].

    Words are maximal lowercase alphanumeric runs; each maps to
    fnv1a64(word) mod (vocab_size - 2) + 2, reserving 0=BOS and 1=EOS.
    The BOS+content prefix is truncated to max_len - 1 before EOS is
    appended, so the result never exceeds max_len ids.
    """
    ids = [BOS_ID]
    for word in _WORD_RE.findall(prompt.lower()):
        ids.append(fnv1a64(word) % (config.vocab_size - 2) + 2)
    ids = ids[: config.max_len - 1]
    ids.append(EOS_ID)
    return ids


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    """Standard sin/cos interleaved position encodings, shape (length, d).

    Column pair 2i uses frequency 1/10000^(2i/d); row 0 is (0,1,0,1,...).
    """
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    out = np.empty((length, d), dtype=np.float64)
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


def encode_text(tokens: list[int], embed_table: np.ndarray) -> np.ndarray:
    """Per-token embedding plus position encoding; shape (len(tokens), d)."""
    vocab_size, d = embed_table.shape
    for t in tokens:
        if not 0 <= t < vocab_size:
            raise RangeError(f"token id {t} outside [0, {vocab_size})")
    return embed_table[np.asarray(tokens, dtype=np.intp)] + sinusoidal_positions(len(tokens), d)


def patch_features(image: np.ndarray, patch: int) -> np.ndarray:
    """Channel-wise mean and std per non-overlapping patch, raster order.

    Output is (n_patches, 2*channels). std is the exact population
    standard deviation, so constant patches contribute exact zeros.
    """
    h, w, c = image.shape
    if h % patch != 0 or w % patch != 0:
        raise ShapeError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    blocks = image.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4)
    blocks = blocks.reshape(gh * gw, patch * patch, c)
    means = blocks.mean(axis=1)
    stds = np.sqrt(((blocks - means[:, None, :]) ** 2).mean(axis=1))
    return np.concatenate([means, stds], axis=1)


def patch_features_backward(image: np.ndarray, patch: int, d_features: np.ndarray) -> np.ndarray:
    """Gradient of patch_features w.r.t. pixels (for pixel-space attacks).

    Where a patch channel has zero std the std term gets subgradient 0.
    """
    h, w, c = image.shape
    gh, gw = h // patch, w // patch
    n = patch * patch
    blocks = image.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4)
    blocks = blocks.reshape(gh * gw, n, c)
    means = blocks.mean(axis=1)
    centered = blocks - means[:, None, :]
    stds = np.sqrt((centered**2).mean(axis=1))

    d_mean = d_features[:, :c]
    d_std = d_features[:, c:]
    d_blocks = np.repeat(d_mean[:, None, :], n, axis=1) / n
    safe = stds > 0.0
    scale = np.where(safe, d_std / np.where(safe, stds, 1.0), 0.0)
    d_blocks += centered * (scale[:, None, :] / n)

    d_image = d_blocks.reshape(gh, gw, patch, patch, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(d_image.reshape(h, w, c))


def encode_image(image: np.ndarray, patch_w: np.ndarray, patch_b: np.ndarray, patch: int) -> np.ndarray:
    """Project per-patch statistics to the model dimension; (n_patches, d)."""
    feats = patch_features(image, patch)
    if feats.shape[1] != patch_w.shape[0]:
        raise ShapeError(f"feature width {feats.shape[1]} != projection input {patch_w.shape[0]}")
    return feats @ patch_w + patch_b


def project_embed(seq: np.ndarray, proj_w: np.ndarray, proj_b: np.ndarray) -> np.ndarray:
    """Row-wise affine map seq @ W + b; preserves the row count."""
    if seq.ndim != 2 or proj_w.ndim != 2:
        raise ShapeError("project_embed expects 2-D inputs")
    if seq.shape[1] != proj_w.shape[0]:
        raise ShapeError(f"input width {seq.shape[1]} != projection input {proj_w.shape[0]}")
    if proj_b.shape != (proj_w.shape[1],):
        raise ShapeError(f"bias shape {proj_b.shape} != ({proj_w.shape[1]},)")
    return seq @ proj_w + proj_b
