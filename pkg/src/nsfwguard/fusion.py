"""Multimodal core: multi-head cross-attention, residual + layer norm,
and the two-way linear classification head, with analytic gradients.

Queries come from the text sequence, keys and values from the image
sequence; attention logits are scaled by 1/sqrt(d_head). The fused text
row 0 (the CLS position) feeds the classifier. Everything is implemented
directly in numpy with a hand-written backward pass so gradients can be
cross-checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBatchError, NumericError, ShapeError, ValidationError

LN_EPS = 1e-5


@dataclass
class AttentionParams:
    """Learnable fusion state: Q/K/V projections, norm affine, head."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray
    heads: int = 4

    def __post_init__(self):
        d = self.wq.shape[0]
        for name in ("wq", "wk", "wv"):
            m = getattr(self, name)
            if m.shape != (d, d):
                raise ShapeError(f"{name} must be {d}x{d}, got {m.shape}")
        if self.gamma.shape != (d,) or self.beta.shape != (d,):
            raise ShapeError("gamma/beta must be length-d vectors")
        if self.head_w.shape != (d, 2) or self.head_b.shape != (2,):
            raise ShapeError("head must map d -> 2 logits")
        if self.heads < 1 or d % self.heads != 0:
            raise ValidationError(f"heads={self.heads} must divide d={d}")
        for name in ("wq", "wk", "wv", "gamma", "beta", "head_w", "head_b"):
            if not np.isfinite(getattr(self, name)).all():
                raise ValidationError(f"{name} contains non-finite values")

    @property
    def d(self) -> int:
        return self.wq.shape[0]


@dataclass
class FusionOutput:
    attention: np.ndarray  # (heads, L_text, L_img), rows sum to 1
    mixed: np.ndarray  # concatenated head outputs, pre-residual (L_text, d)
    fused: np.ndarray  # post residual + layer norm (L_text, d)
    logits: np.ndarray | None = None
    prob_nsfw: float | None = None
    cache: dict = field(default_factory=dict, repr=False)


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_attention(H_t: np.ndarray, H_i: np.ndarray, params: AttentionParams) -> FusionOutput:
    """Text-queries-over-image attention, residual add of H_t, layer norm."""
    d = params.d
    if H_t.ndim != 2 or H_i.ndim != 2 or H_t.shape[1] != d or H_i.shape[1] != d:
        raise ShapeError(f"both inputs must have {d} columns, got {H_t.shape} and {H_i.shape}")
    if not (np.isfinite(H_t).all() and np.isfinite(H_i).all()):
        raise NumericError("non-finite values in attention inputs")

    h = params.heads
    dh = d // h
    scale = 1.0 / np.sqrt(dh)
    Q = H_t @ params.wq
    K = H_i @ params.wk
    V = H_i @ params.wv

    L_t, L_i = H_t.shape[0], H_i.shape[0]
    A = np.empty((h, L_t, L_i))
    mixed = np.empty((L_t, d))
    for j in range(h):
        sl = slice(j * dh, (j + 1) * dh)
        A[j] = _softmax_rows(Q[:, sl] @ K[:, sl].T * scale)
        mixed[:, sl] = A[j] @ V[:, sl]

    residual = H_t + mixed
    mu = residual.mean(axis=1, keepdims=True)
    var = residual.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    normed = (residual - mu) * inv_std
    fused = params.gamma * normed + params.beta

    cache = {
        "H_t": H_t, "H_i": H_i, "Q": Q, "K": K, "V": V,
        "A": A, "normed": normed, "inv_std": inv_std,
    }
    return FusionOutput(attention=A, mixed=mixed, fused=fused, cache=cache)


def classify(
    H_t: np.ndarray,
    H_i: np.ndarray,
    params: AttentionParams,
    threshold: float = 0.5,
) -> FusionOutput:
    """Fused CLS row (position 0) through the linear head to prob_nsfw.

    The decision is NSFW iff prob_nsfw >= threshold (inclusive).
    """
    out = cross_attention(H_t, H_i, params)
    logits = out.fused[0] @ params.head_w + params.head_b
    probs = _softmax_rows(logits[None, :])[0]
    out.logits = logits
    out.prob_nsfw = float(probs[1])
    out.cache["probs"] = probs
    out.cache["threshold"] = threshold
    return out


def decision(prob_nsfw: float, threshold: float = 0.5) -> str:
    return "NSFW" if prob_nsfw >= threshold else "SAFE"


def zero_grads(params: AttentionParams) -> dict[str, np.ndarray]:
    return {
        "fusion.wq": np.zeros_like(params.wq),
        "fusion.wk": np.zeros_like(params.wk),
        "fusion.wv": np.zeros_like(params.wv),
        "fusion.gamma": np.zeros_like(params.gamma),
        "fusion.beta": np.zeros_like(params.beta),
        "head.w": np.zeros_like(params.head_w),
        "head.b": np.zeros_like(params.head_b),
    }


def classify_backward(
    out: FusionOutput,
    params: AttentionParams,
    label: int,
    grads: dict[str, np.ndarray],
    weight: float = 1.0,
    dlogits: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Backprop through head, norm, residual and attention.

    By default the upstream derivative is the cross-entropy one
    (probs - onehot(label)); callers may pass an explicit ``dlogits`` to
    differentiate another scalar (e.g. prob_nsfw itself). Accumulates
    parameter gradients into ``grads`` (keys as in :func:`zero_grads`)
    and returns (dL/dH_t, dL/dH_i).
    """
    cache = out.cache
    probs = cache["probs"]
    H_t, H_i = cache["H_t"], cache["H_i"]
    Q, K, V, A = cache["Q"], cache["K"], cache["V"], cache["A"]
    normed, inv_std = cache["normed"], cache["inv_std"]

    d = params.d
    h = params.heads
    dh = d // h
    scale = 1.0 / np.sqrt(dh)
    L_t = H_t.shape[0]

    if dlogits is None:
        dlogits = probs.copy()
        dlogits[label] -= 1.0
        dlogits = dlogits * weight
    else:
        dlogits = dlogits * weight

    grads["head.w"] += np.outer(out.fused[0], dlogits)
    grads["head.b"] += dlogits

    dfused = np.zeros((L_t, d))
    dfused[0] = params.head_w @ dlogits

    grads["fusion.gamma"] += (dfused * normed).sum(axis=0)
    grads["fusion.beta"] += dfused.sum(axis=0)

    dnormed = dfused * params.gamma
    # layer norm backward, rows independent
    row_mean = dnormed.mean(axis=1, keepdims=True)
    row_proj = (dnormed * normed).mean(axis=1, keepdims=True)
    dresidual = inv_std * (dnormed - row_mean - normed * row_proj)

    dH_t = dresidual.copy()
    dmixed = dresidual
    dQ = np.zeros_like(Q)
    dK = np.zeros_like(K)
    dV = np.zeros_like(V)
    for j in range(h):
        sl = slice(j * dh, (j + 1) * dh)
        dOj = dmixed[:, sl]
        Aj = A[j]
        dAj = dOj @ V[:, sl].T
        dV[:, sl] = Aj.T @ dOj
        dSj = Aj * (dAj - (dAj * Aj).sum(axis=1, keepdims=True))
        dQ[:, sl] = dSj @ K[:, sl] * scale
        dK[:, sl] = dSj.T @ Q[:, sl] * scale

    grads["fusion.wq"] += H_t.T @ dQ
    grads["fusion.wk"] += H_i.T @ dK
    grads["fusion.wv"] += H_i.T @ dV
    dH_t += dQ @ params.wq.T
    dH_i = dK @ params.wk.T + dV @ params.wv.T
    return dH_t, dH_i


def loss_and_gradients(
    batch: list[tuple[np.ndarray, np.ndarray, int]],
    params: AttentionParams,
) -> tuple[float, dict[str, np.ndarray], list[tuple[np.ndarray, np.ndarray]]]:
    """Mean cross-entropy of prob_nsfw against the 0/1 labels.

    Returns (loss, parameter gradients, per-sample (dH_t, dH_i) input
    gradients) so encoder weights upstream of the fusion block can be
    chained by the caller.
    """
    if not batch:
        raise EmptyBatchError("loss_and_gradients needs at least one sample")
    grads = zero_grads(params)
    input_grads = []
    loss = 0.0
    w = 1.0 / len(batch)
    for H_t, H_i, label in batch:
        if label not in (0, 1):
            raise ValidationError(f"label must be 0 or 1, got {label}")
        out = classify(H_t, H_i, params)
        p = out.cache["probs"][label]
        loss += -np.log(max(p, 1e-300)) * w
        input_grads.append(classify_backward(out, params, label, grads, weight=w))
    return float(loss), grads, input_grads
