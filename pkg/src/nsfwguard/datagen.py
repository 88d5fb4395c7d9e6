"""Dataset generation: vocabulary sampling, prompt/image synthesis, assembly.

The pipeline is generic over a :class:`GeneratorBackend`. The shipped stub
backend is fully deterministic (template prompts, hash-seeded procedural
textures) so the whole pipeline can be tested byte-for-byte. Adapters for
real LLM / diffusion services implement the same two methods and are
excluded from the deterministic test suite.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .corpus import Label, LabeledSample, Manifest, PerturbedModality, Source, validate_manifest
from .errors import (
    BackendError,
    CompositionError,
    EmptySelectionError,
    ParseError,
    RangeError,
    ShapeError,
    ValidationError,
)
from .hashing import fnv1a64

IMAGE_HEADER = b"NSFWGUARD-IMG v1"

# Table 1 proportions: half safe pairs, the other half synthetic flagged
# content of which a small slice is adversarially perturbed.
DEFAULT_RATIOS = {
    Source.SAFE_CORPUS: 0.50,
    Source.GENERATED: 0.48,
    Source.PERTURBED: 0.02,
}

PROMPT_INSTRUCTION = "Description of image "

_WORDS_RE = re.compile(r"[a-z0-9]+")


def _word_signature(word: str) -> tuple[np.ndarray, np.ndarray]:
    """Fixed per-word render signature: channel tint and wave amplitude.

    Independent of the backend seed, so a given word always contributes
    the same texture statistics (the way a fixed generative model renders
    a given concept consistently).
    """
    wrng = np.random.default_rng(fnv1a64(f"w:{word}"))
    tint = wrng.uniform(0.25, 0.75, 3)
    amp = wrng.uniform(0.05, 0.30, 3)
    return tint, amp


@dataclass(frozen=True)
class Vocabulary:
    """Ordered word list with a category tag per word."""

    entries: tuple[str, ...]
    category: dict[str, str] = field(hash=False)

    def __post_init__(self):
        if not self.entries:
            raise ValidationError("vocabulary must be non-empty")
        if len(set(self.entries)) != len(self.entries):
            raise ValidationError("vocabulary entries must be unique")

    def __len__(self) -> int:
        return len(self.entries)


# Placeholder word lists: structurally mirror a categorized real-world
# vocabulary (several categories, a few words each) while carrying no
# offensive content. Words are admitted by their stub-renderer texture
# signature so that, like real unsafe imagery versus stock photography,
# images generated from flagged words are statistically separable from
# images generated from safe words. The flagged list doubles as the
# keyword-baseline term list in benchmarks.
_FLAGGED_FAMILIES = (
    "red", "umber", "cobalt", "onyx", "ashen",
    "briar", "cinder", "dune", "ember", "flint", "grove",
)
_SAFE_FAMILIES = (
    "meadow", "harbor", "willow", "lantern", "pebble",
    "orchard", "breeze", "summit", "clover", "drift", "maple",
)
_WORD_FORMS = (
    "word", "glyph", "mark", "token", "sign", "rune",
    "sigil", "stamp", "brand", "badge", "seal", "crest",
)
_SIGNATURE_MARGIN = 0.12
_WORDS_PER_SIDE = 44


def word_signature_score(word: str) -> float:
    """Red-channel dominance of the word's fixed render signature."""
    tint, _ = _word_signature(word)
    return float(tint[0] - 0.5 * (tint[1] + tint[2]))


def _select_words(families: tuple[str, ...], flagged: bool) -> tuple[tuple[str, ...], dict[str, str]]:
    entries = []
    category = {}
    for form in _WORD_FORMS:
        for fam in families:
            word = f"{fam}{form}"
            score = word_signature_score(word)
            if (flagged and score > _SIGNATURE_MARGIN) or (not flagged and score < -_SIGNATURE_MARGIN):
                entries.append(word)
                category[word] = fam
                if len(entries) >= _WORDS_PER_SIDE:
                    return tuple(entries), category
    return tuple(entries), category


def flagged_vocabulary() -> Vocabulary:
    """Placeholder stand-in for the real flagged-content vocabulary."""
    entries, category = _select_words(_FLAGGED_FAMILIES, flagged=True)
    return Vocabulary(entries=entries, category=category)


def safe_vocabulary() -> Vocabulary:
    entries, category = _select_words(_SAFE_FAMILIES, flagged=False)
    return Vocabulary(entries=entries, category=category)


@dataclass(frozen=True)
class SelectionMask:
    bits: tuple[int, ...]

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.bits):
            raise ValidationError("mask bits must be 0 or 1")


def sample_sentence(vocab: Vocabulary, mask: SelectionMask) -> str:
    """Space-join the vocabulary entries whose mask bit is set, in order."""
    if len(mask.bits) != len(vocab):
        raise ShapeError(f"mask length {len(mask.bits)} != vocabulary size {len(vocab)}")
    if not any(mask.bits):
        raise EmptySelectionError("mask selects no words")
    return " ".join(w for w, b in zip(vocab.entries, mask.bits) if b)


def random_mask(vocab: Vocabulary, k: int, seed: int) -> SelectionMask:
    """Mask with exactly k bits set, chosen uniformly without replacement."""
    import random as _random

    n = len(vocab)
    if not 1 <= k <= n:
        raise RangeError(f"k={k} outside [1, {n}]")
    chosen = set(_random.Random(seed).sample(range(n), k))
    return SelectionMask(bits=tuple(1 if i in chosen else 0 for i in range(n)))


class GeneratorBackend(Protocol):
    """Prompt synthesis plus text-to-image generation behind one interface."""

    name: str

    def synthesize_prompt(self, instruction: str) -> str: ...

    def generate_image(self, prompt: str, size: int) -> np.ndarray: ...


class StubBackend:
    """Deterministic template/texture backend for desk-scale runs.

    Prompts come from a fixed grammatical template over the input words.
    Images are procedural textures built word by word: every word has a
    fixed hash-derived signature (per-channel tint and wave), and the
    rendered texture averages the signatures of the prompt's words plus
    prompt-seeded noise. Equal prompts give pixel-identical tensors,
    and the image content genuinely reflects the prompt's wording, the
    way a generative model's output reflects its prompt.
    """

    name = "stub"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def synthesize_prompt(self, instruction: str) -> str:
        words = instruction[len(PROMPT_INSTRUCTION) :].split() if instruction.startswith(
            PROMPT_INSTRUCTION
        ) else instruction.split()
        if not words:
            raise BackendError(self.name, "no words to describe")
        return f"Description of image featuring {' and '.join(words)} in a scene."

    def generate_image(self, prompt: str, size: int) -> np.ndarray:
        words = _WORDS_RE.findall(prompt.lower()) or [prompt]
        yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        acc = np.zeros((size, size, 3), dtype=np.float64)
        for word in words:
            tint, amp = _word_signature(word)
            wrng = np.random.default_rng(fnv1a64(f"wave:{word}"))
            fy, fx = wrng.uniform(0.3, 1.5, size=2)
            py, px = wrng.uniform(0.0, 2.0 * math.pi, size=2)
            wave = np.sin(fy * yy + py) * np.cos(fx * xx + px)
            acc += tint[None, None, :] + amp[None, None, :] * wave[:, :, None]
        image = acc / len(words)
        prng = np.random.default_rng(fnv1a64(f"{self.seed}:{prompt}"))
        image += 0.10 * (prng.random((size, size, 3)) - 0.5)
        return np.clip(image, 0.0, 1.0)


def synthesize_prompt(backend: GeneratorBackend, sentence: str) -> str:
    """Expand a bag-of-words sentence into an image description prompt."""
    if not sentence:
        raise ValidationError("sentence must be non-empty")
    try:
        prompt = backend.synthesize_prompt(PROMPT_INSTRUCTION + sentence)
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError(getattr(backend, "name", "?"), str(exc)) from exc
    if not prompt:
        raise BackendError(getattr(backend, "name", "?"), "empty prompt returned")
    return prompt


def generate_image(backend: GeneratorBackend, prompt: str, size: int) -> np.ndarray:
    if not prompt:
        raise ValidationError("prompt must be non-empty")
    if size < 8:
        raise RangeError(f"size={size} below minimum 8")
    try:
        image = backend.generate_image(prompt, size)
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError(getattr(backend, "name", "?"), str(exc)) from exc
    ensure_image(image)
    return image


def ensure_image(image: np.ndarray) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"image must be HxWx3, got {image.shape}")
    if not np.isfinite(image).all():
        raise ValidationError("image contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValidationError("image values must lie in [0, 1]")
    return image


def write_image_tensor(image: np.ndarray, path: Path | str) -> Path:
    """Serialize an image as header + dims + row-major little-endian f32."""
    ensure_image(image)
    path = Path(path)
    h, w, c = image.shape
    payload = image.astype("<f4").tobytes(order="C")
    path.write_bytes(IMAGE_HEADER + b"\n" + f"{h} {w} {c}".encode() + b"\n" + payload)
    return path


def load_image_tensor(path: Path | str) -> np.ndarray:
    data = Path(path).read_bytes()
    return decode_image_tensor(data)


def decode_image_tensor(data: bytes) -> np.ndarray:
    head_end = data.find(b"\n")
    if head_end < 0 or data[:head_end] != IMAGE_HEADER:
        raise ParseError("bad image header", 1)
    dims_end = data.find(b"\n", head_end + 1)
    if dims_end < 0:
        raise ParseError("missing dimensions line", 2)
    try:
        h, w, c = (int(tok) for tok in data[head_end + 1 : dims_end].split())
    except ValueError:
        raise ParseError("malformed dimensions line", 2) from None
    payload = data[dims_end + 1 :]
    if len(payload) != h * w * c * 4:
        raise ParseError(f"payload is {len(payload)} bytes, expected {h * w * c * 4}", 3)
    image = np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float64)
    return ensure_image(image)


def assemble_dataset(
    safe_source: Manifest,
    nsfw_pipeline_out: list[LabeledSample],
    perturbed: list[LabeledSample],
    ratios: dict[Source, float],
    total: int,
) -> Manifest:
    """Merge per-source pools into one manifest honoring ``ratios``.

    Counts are the largest-remainder rounding of ratio*total, so each
    source lands within one sample of its requested fraction.
    """
    if abs(sum(ratios.values()) - 1.0) > 1e-9:
        raise ValidationError(f"ratios sum to {sum(ratios.values())}, expected 1")
    if total < 1:
        raise RangeError("total must be >= 1")

    pools: dict[Source, list[LabeledSample]] = {
        Source.SAFE_CORPUS: [s for s in safe_source.samples if s.source == Source.SAFE_CORPUS],
        Source.GENERATED: [s for s in nsfw_pipeline_out if s.source == Source.GENERATED],
        Source.SCRAPED: [s for s in nsfw_pipeline_out if s.source == Source.SCRAPED],
        Source.PERTURBED: list(perturbed),
    }

    counts = {}
    remainders = []
    for source in sorted(ratios, key=lambda s: s.value):
        exact = ratios[source] * total
        counts[source] = math.floor(exact)
        remainders.append((-(exact - math.floor(exact)), source.value, source))
    leftover = total - sum(counts.values())
    for _, _, source in sorted(remainders):
        if leftover <= 0:
            break
        counts[source] += 1
        leftover -= 1

    merged: list[LabeledSample] = []
    for source in sorted(counts, key=lambda s: s.value):
        want = counts[source]
        pool = pools.get(source, [])
        if len(pool) < want:
            raise CompositionError(source.value, f"need {want} {source.value} samples, have {len(pool)}")
        merged.extend(pool[:want])

    manifest = Manifest(samples=merged, root=safe_source.root)
    validate_manifest(manifest)
    return manifest


def derive_seed(*parts) -> int:
    """Stable child seed from heterogeneous parts (platform-independent)."""
    return fnv1a64(":".join(str(p) for p in parts)) & 0x7FFFFFFFFFFFFFFF


def import_scraped_prompts(
    path: Path | str,
    backend: GeneratorBackend,
    out_dir: Path | str,
    size: int = 16,
    id_prefix: str = "srp",
) -> list[LabeledSample]:
    """Turn a one-prompt-per-line text file into SCRAPED samples with images."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    samples = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        prompt = line.strip()
        if not prompt:
            continue
        image = generate_image(backend, prompt, size)
        ref = f"images/{id_prefix}-{i:05d}.img"
        write_image_tensor(image, out_dir / ref)
        samples.append(
            LabeledSample(
                id=f"{id_prefix}-{i:05d}",
                prompt=prompt,
                image_ref=ref,
                label=Label.NSFW,
                source=Source.SCRAPED,
            )
        )
    return samples


def _generate_family(
    vocab: Vocabulary,
    count: int,
    backend: GeneratorBackend,
    out_dir: Path,
    size: int,
    seed: int,
    id_prefix: str,
    label: Label,
    source: Source,
) -> list[LabeledSample]:
    samples = []
    for i in range(count):
        k_seed = derive_seed(seed, id_prefix, "k", i)
        k = 2 + k_seed % 4  # 2..5 words per sentence
        mask = random_mask(vocab, k, derive_seed(seed, id_prefix, "mask", i))
        sentence = sample_sentence(vocab, mask)
        prompt = synthesize_prompt(backend, sentence)
        image = generate_image(backend, prompt, size)
        ref = f"images/{id_prefix}-{i:05d}.img"
        write_image_tensor(image, out_dir / ref)
        samples.append(
            LabeledSample(
                id=f"{id_prefix}-{i:05d}",
                prompt=prompt,
                image_ref=ref,
                label=label,
                source=source,
            )
        )
    return samples


def build_dataset(
    out_dir: Path | str,
    total: int,
    seed: int,
    backend: GeneratorBackend | None = None,
    size: int = 16,
    ratios: dict[Source, float] | None = None,
) -> Manifest:
    """Run the full stub pipeline and write images + manifest under out_dir.

    Safe pairs come from the safe placeholder vocabulary, flagged pairs
    from the flagged one, and the perturbed slice applies budgeted
    attacks against a keyword baseline (deferred import: attacks layer
    sits above this module).
    """
    from .attacks import PerturbationBudget, perturb_samples
    from .defenses import KeywordDefense

    backend = backend or StubBackend(seed=seed)
    ratios = dict(ratios) if ratios is not None else dict(DEFAULT_RATIOS)
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    counts = {}
    remainders = []
    for source in sorted(ratios, key=lambda s: s.value):
        exact = ratios[source] * total
        counts[source] = math.floor(exact)
        remainders.append((-(exact - math.floor(exact)), source.value, source))
    leftover = total - sum(counts.values())
    for _, _, source in sorted(remainders):
        if leftover <= 0:
            break
        counts[source] += 1
        leftover -= 1

    safe_samples = _generate_family(
        safe_vocabulary(), counts.get(Source.SAFE_CORPUS, 0), backend, out_dir, size,
        seed, "safe", Label.SAFE, Source.SAFE_CORPUS,
    )
    # Generate enough flagged pairs to feed both the GENERATED slice and the
    # pool the perturbed slice is drawn from.
    n_pert = counts.get(Source.PERTURBED, 0)
    generated = _generate_family(
        flagged_vocabulary(), counts.get(Source.GENERATED, 0) + n_pert, backend, out_dir,
        size, seed, "gen", Label.NSFW, Source.GENERATED,
    )
    pert_sources, generated = generated[counts.get(Source.GENERATED, 0):], generated[: counts.get(Source.GENERATED, 0)]

    perturbed = perturb_samples(
        pert_sources,
        defense=KeywordDefense(flagged_vocabulary().entries),
        budget=PerturbationBudget(),
        out_dir=out_dir,
        seed=derive_seed(seed, "perturb"),
    )

    safe_manifest = Manifest(samples=safe_samples, root=out_dir)
    manifest = assemble_dataset(safe_manifest, generated, perturbed, ratios, total)
    manifest.root = out_dir
    return manifest
