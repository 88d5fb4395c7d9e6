"""End-to-end classifier: prompt + image in, NSFW probability out.

Composes the toy encoders with the cross-attention fusion block and owns
the full trainable state. The prepended CLS row is a learnable vector
plus the mean of tanh-squashed projected token rows: the squash keeps
the classifier position text-aware (the toy text encoder has no internal
mixing) while bounding any single token's influence, so obfuscating a
few characters cannot swamp what the paired image says. The image
reaches the CLS position through the attention values.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .encoders import (
    EncoderConfig,
    encode_text,
    patch_features,
    patch_features_backward,
    tokenize,
)
from .errors import ParseError, ValidationError
from .fusion import AttentionParams, FusionOutput, classify, classify_backward, zero_grads
from .hashing import fnv1a64

CKPT_META = "meta.config"
_VECTOR_NAMES = {
    "text.cls", "text.proj.b", "img.patch.b", "img.proj.b",
    "fusion.gamma", "fusion.beta", "head.b",
}


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 4096
    d: int = 32
    max_len: int = 64
    patch: int = 8
    heads: int = 4
    image_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValidationError(f"heads={self.heads} must divide d={self.d}")
        if self.image_size % self.patch != 0:
            raise ValidationError("patch must divide image_size")
        self.encoder()  # surfaces the remaining invariant checks

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=self.vocab_size, d=self.d, max_len=self.max_len,
            patch=self.patch, seed=self.seed,
        )


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def attention_params(self) -> AttentionParams:
        t = self.tensors
        return AttentionParams(
            wq=t["fusion.wq"], wk=t["fusion.wk"], wv=t["fusion.wv"],
            gamma=t["fusion.gamma"], beta=t["fusion.beta"],
            head_w=t["head.w"], head_b=t["head.b"], heads=self.config.heads,
        )

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def init_params(config: ModelConfig) -> ModelParams:
    """Seed-deterministic initialization; tensor order is fixed."""
    rng = np.random.default_rng(config.seed)
    d = config.d
    # embedding and head scales are deliberately generous: the classifier
    # reads a layer-normalized mean of token rows, and tiny init makes the
    # embedding/head co-adaptation too slow for desk-scale epoch budgets
    tensors = {
        "text.embed": rng.normal(0.0, 1.0, (config.vocab_size, d)),
        "text.cls": rng.normal(0.0, 0.1, d),
        "text.proj.w": rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
        "text.proj.b": np.zeros(d),
        "img.patch.w": rng.normal(0.0, 1.0, (6, d)),
        "img.patch.b": np.zeros(d),
        "img.proj.w": rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
        "img.proj.b": np.zeros(d),
        "fusion.wq": rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
        "fusion.wk": rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
        "fusion.wv": rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
        "fusion.gamma": np.ones(d),
        "fusion.beta": np.zeros(d),
        "head.w": rng.normal(0.0, 0.3, (d, 2)),
        "head.b": np.zeros(2),
    }
    return ModelParams(config=config, tensors=tensors)


def neutral_image(config: ModelConfig) -> np.ndarray:
    """All-gray placeholder used for prompt-only moderation."""
    return np.full((config.image_size, config.image_size, 3), 0.5)


def forward(
    params: ModelParams,
    prompt: str,
    image: np.ndarray,
    threshold: float = 0.5,
) -> tuple[FusionOutput, dict]:
    """Full forward pass; returns the fusion output and a backward cache."""
    cfg = params.config
    t = params.tensors
    tokens = tokenize(prompt, cfg.encoder())
    E = encode_text(tokens, t["text.embed"])
    T = E @ t["text.proj.w"] + t["text.proj.b"]
    squashed = np.tanh(T)
    cls_row = t["text.cls"] + squashed.mean(axis=0)
    H_t = np.vstack([cls_row[None, :], T])

    F = patch_features(image, cfg.patch)
    G = F @ t["img.patch.w"] + t["img.patch.b"]
    H_i = G @ t["img.proj.w"] + t["img.proj.b"]

    out = classify(H_t, H_i, params.attention_params(), threshold)
    cache = {"tokens": tokens, "E": E, "T": T, "squashed": squashed, "F": F, "G": G, "image": image}
    return out, cache


def score(params: ModelParams, prompt: str, image: np.ndarray, threshold: float = 0.5) -> float:
    out, _ = forward(params, prompt, image, threshold)
    return out.prob_nsfw


def zero_model_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.tensors.items()}


def backward(
    params: ModelParams,
    out: FusionOutput,
    cache: dict,
    label: int,
    grads: dict[str, np.ndarray],
    weight: float = 1.0,
    want_pixel_grad: bool = False,
    dlogits: np.ndarray | None = None,
) -> np.ndarray | None:
    """Accumulate gradients for every tensor; optionally return dL/dpixels."""
    t = params.tensors
    dH_t, dH_i = classify_backward(
        out, params.attention_params(), label, grads, weight, dlogits=dlogits
    )

    # text side: CLS row feeds back into the learnable vector and, through
    # the squashed mean, into every projected token row
    squashed = cache["squashed"]
    dT = dH_t[1:] + (1.0 - squashed**2) * (dH_t[0][None, :] / squashed.shape[0])
    grads["text.cls"] += dH_t[0]
    grads["text.proj.w"] += cache["E"].T @ dT
    grads["text.proj.b"] += dT.sum(axis=0)
    dE = dT @ t["text.proj.w"].T
    np.add.at(grads["text.embed"], np.asarray(cache["tokens"], dtype=np.intp), dE)

    # image side
    grads["img.proj.w"] += cache["G"].T @ dH_i
    grads["img.proj.b"] += dH_i.sum(axis=0)
    dG = dH_i @ t["img.proj.w"].T
    grads["img.patch.w"] += cache["F"].T @ dG
    grads["img.patch.b"] += dG.sum(axis=0)
    if want_pixel_grad:
        dF = dG @ t["img.patch.w"].T
        return patch_features_backward(cache["image"], params.config.patch, dF)
    return None


def batch_loss_and_gradients(
    params: ModelParams,
    batch: list[tuple[str, np.ndarray, int]],
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over (prompt, image, label) triples."""
    from .errors import EmptyBatchError

    if not batch:
        raise EmptyBatchError("empty batch")
    grads = zero_model_grads(params)
    loss = 0.0
    w = 1.0 / len(batch)
    for prompt, image, label in batch:
        out, cache = forward(params, prompt, image)
        loss += -np.log(max(out.cache["probs"][label], 1e-300)) * w
        backward(params, out, cache, label, grads, weight=w)
    return float(loss), grads


def prob_pixel_gradient(params: ModelParams, prompt: str, image: np.ndarray) -> np.ndarray:
    """Gradient of prob_nsfw with respect to the image pixels."""
    out, cache = forward(params, prompt, image)
    p = out.prob_nsfw
    dlogits = p * (1.0 - p) * np.array([-1.0, 1.0])
    grads = zero_model_grads(params)
    return backward(
        params, out, cache, label=1, grads=grads, want_pixel_grad=True, dlogits=dlogits
    )


def save_model(params: ModelParams, path: Path | str) -> Path:
    cfg = params.config
    meta = np.array(
        [[1.0, cfg.vocab_size, cfg.d, cfg.max_len, cfg.patch, cfg.heads, cfg.image_size]]
    )
    tensors = dict(params.tensors)
    tensors[CKPT_META] = meta
    return save_checkpoint(tensors, path)


def load_model(path: Path | str) -> ModelParams:
    tensors = load_checkpoint(path)
    if CKPT_META not in tensors:
        raise ParseError(f"checkpoint missing {CKPT_META}")
    meta = tensors.pop(CKPT_META).ravel()
    if meta.shape[0] != 7 or int(meta[0]) != 1:
        raise ParseError("unsupported checkpoint metadata")
    config = ModelConfig(
        vocab_size=int(meta[1]), d=int(meta[2]), max_len=int(meta[3]),
        patch=int(meta[4]), heads=int(meta[5]), image_size=int(meta[6]),
    )
    expected = set(init_params(config).tensors)
    if set(tensors) != expected:
        missing = expected.symmetric_difference(tensors)
        raise ParseError(f"checkpoint tensor set mismatch: {sorted(missing)}")
    for name in _VECTOR_NAMES:
        tensors[name] = tensors[name].ravel()
    return ModelParams(config=config, tensors=tensors)


def model_fingerprint(params: ModelParams) -> str:
    """Stable content hash used as the served model version."""
    blob = b"".join(
        name.encode() + b"\0" + params.tensors[name].astype("<f4").tobytes()
        for name in sorted(params.tensors)
    )
    return f"ckpt-{fnv1a64(blob):016x}"
