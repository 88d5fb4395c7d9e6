"""Classifier handles that attacks and benchmarks target.

A defense scores a (prompt, image) pair with a probability of being
unsafe; either side may be None when a modality is absent. Defenses that
expose `image_gradient` can be attacked with true gradient steps,
otherwise attacks fall back to query-only search.
"""

from __future__ import annotations

import re
from typing import Iterable, Protocol, runtime_checkable

import numpy as np

from .model import ModelParams, neutral_image, prob_pixel_gradient, score

_WORD_RE = re.compile(r"[a-z0-9]+")


@runtime_checkable
class Defense(Protocol):
    name: str

    def score(self, prompt: str | None, image: np.ndarray | None) -> float: ...


def decide(defense: Defense, prompt: str | None, image: np.ndarray | None, threshold: float = 0.5) -> str:
    return "NSFW" if defense.score(prompt, image) >= threshold else "SAFE"


class KeywordDefense:
    """Prompt-only baseline: flags by matched-term count.

    The score is 1 - 2^-hits, so a single matched term already trips the
    0.5 decision boundary and every additional term raises confidence.
    Matching happens on lowercase alphanumeric tokens, the same word
    shapes the model tokenizer sees.
    """

    name = "keyword-baseline"

    def __init__(self, terms: Iterable[str]):
        self.terms = frozenset(t.lower() for t in terms)

    def score(self, prompt: str | None, image: np.ndarray | None) -> float:
        del image  # prompt-only filter
        if not prompt:
            return 0.0
        hits = sum(1 for w in _WORD_RE.findall(prompt.lower()) if w in self.terms)
        return 1.0 - 0.5**hits


class ModelDefense:
    """The trained multimodal classifier behind the Defense interface.

    Absent modalities are filled with the documented neutral placeholders
    (gray image, empty prompt) so the one fusion model serves every hook.
    """

    def __init__(self, params: ModelParams, name: str = "multimodal"):
        self.params = params
        self.name = name

    def score(self, prompt: str | None, image: np.ndarray | None) -> float:
        if image is None:
            image = neutral_image(self.params.config)
        return score(self.params, prompt or "", image)

    def image_gradient(self, prompt: str | None, image: np.ndarray) -> np.ndarray:
        return prob_pixel_gradient(self.params, prompt or "", image)
