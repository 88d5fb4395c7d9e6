"""Dataset records, the manifest file format, and deterministic splitting.

A manifest is the on-disk index of a dataset: one line per sample pointing
at an image tensor file, plus label/source metadata. Splitting is seeded
and stratified by label so desk-scale metrics stay stable.
"""

from __future__ import annotations

import math
import os
import random
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import EmptyDatasetError, ParseError, ValidationError

MANIFEST_HEADER = "NSFWGUARD-MANIFEST v1"
TRAIN_FRACTION = 0.7

# ids and image paths are embedded raw in tab-separated lines, so they are
# restricted to a charset that cannot collide with the field syntax.
_ID_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")


class Label(str, Enum):
    SAFE = "SAFE"
    NSFW = "NSFW"


class Source(str, Enum):
    SAFE_CORPUS = "SAFE_CORPUS"
    GENERATED = "GENERATED"
    SCRAPED = "SCRAPED"
    PERTURBED = "PERTURBED"


class PerturbedModality(str, Enum):
    TEXT = "TEXT"
    IMAGE = "IMAGE"
    BOTH = "BOTH"


@dataclass(frozen=True)
class LabeledSample:
    """One (prompt, image, label, source) record."""

    id: str
    prompt: str
    image_ref: str
    label: Label
    source: Source
    perturbed_modality: PerturbedModality | None = None


@dataclass
class Manifest:
    """Ordered sample collection with a cached per-source composition.

    ``root`` is a convenience set by :func:`load_manifest` so callers can
    resolve ``image_ref`` paths; it is not serialized and not compared.
    """

    samples: list[LabeledSample]
    version: int = 1
    composition: dict[Source, int] = field(init=False)
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        self.composition = tally_sources(self.samples)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class Split:
    train_ids: frozenset[str]
    val_ids: frozenset[str]
    seed: int


def tally_sources(samples: list[LabeledSample]) -> dict[Source, int]:
    counts: dict[Source, int] = {}
    for s in samples:
        counts[s.source] = counts.get(s.source, 0) + 1
    return counts


def validate_sample(sample: LabeledSample, root: Path | str | None = None) -> list[str]:
    """Return every violated invariant of ``sample`` (empty list means ok).

    Violations are data, not errors: callers decide whether to raise.
    Image existence is only checked when ``root`` is given.
    """
    violations = []
    if not sample.id or not _ID_RE.match(sample.id):
        violations.append(f"id {sample.id!r} empty or outside [A-Za-z0-9_.-]")
    if not sample.prompt:
        violations.append("prompt is empty")
    if not sample.image_ref or any(c in sample.image_ref for c in "\t\n\r"):
        violations.append(f"image_ref {sample.image_ref!r} empty or contains tab/newline")
    if not isinstance(sample.label, Label):
        violations.append(f"label {sample.label!r} not in {{SAFE, NSFW}}")
    if not isinstance(sample.source, Source):
        violations.append(f"source {sample.source!r} unknown")
    if (sample.source == Source.PERTURBED) != (sample.perturbed_modality is not None):
        violations.append("perturbed_modality must be present iff source=PERTURBED")
    if root is not None and sample.image_ref and not (Path(root) / sample.image_ref).is_file():
        violations.append(f"image_ref {sample.image_ref!r} does not resolve under {root}")
    return violations


def validate_manifest(manifest: Manifest, root: Path | str | None = None) -> None:
    """Raise ValidationError naming the first offending sample id."""
    seen: set[str] = set()
    for s in manifest.samples:
        if s.id in seen:
            raise ValidationError(f"duplicate sample id {s.id!r}")
        seen.add(s.id)
        violations = validate_sample(s, root)
        if violations:
            raise ValidationError(f"sample {s.id!r}: " + "; ".join(violations))
    if manifest.composition != tally_sources(manifest.samples):
        raise ValidationError("cached composition disagrees with samples")


def _encode_prompt(prompt: str) -> str:
    # Percent-encoding covers the characters that would break the
    # line/field structure: percent itself, tab, newline, carriage return.
    out = []
    for ch in prompt:
        if ch == "%":
            out.append("%25")
        elif ch == "\t":
            out.append("%09")
        elif ch == "\n":
            out.append("%0A")
        elif ch == "\r":
            out.append("%0D")
        else:
            out.append(ch)
    return "".join(out)


def _decode_prompt(text: str, line: int) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "%":
            code = text[i + 1 : i + 3]
            if len(code) != 2:
                raise ParseError(f"truncated percent escape {text[i:]!r}", line)
            try:
                out.append(chr(int(code, 16)))
            except ValueError:
                raise ParseError(f"bad percent escape %{code}", line) from None
            i += 3
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def write_manifest(manifest: Manifest, path: Path | str) -> Path:
    """Write ``manifest`` as line-delimited UTF-8 records; returns ``path``.

    Round-trips byte-identically through :func:`load_manifest` for valid
    manifests written twice from equal inputs.
    """
    validate_manifest(manifest)
    path = Path(path)
    lines = [MANIFEST_HEADER]
    for s in manifest.samples:
        perturbed = s.perturbed_modality.value if s.perturbed_modality else "-"
        lines.append(
            f"id={s.id}\tlabel={s.label.value}\tsource={s.source.value}"
            f"\tperturbed={perturbed}\timage={s.image_ref}"
            f"\tprompt={_encode_prompt(s.prompt)}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _parse_field(raw: str, key: str, line: int) -> str:
    prefix = key + "="
    if not raw.startswith(prefix):
        raise ParseError(f"expected field {key}=..., got {raw!r}", line)
    return raw[len(prefix) :]


def load_manifest(path: Path | str) -> Manifest:
    """Parse a manifest file; composition is recomputed from the records."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ParseError(f"bad header {lines[0]!r}, expected {MANIFEST_HEADER!r}", 1)
    samples = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if raw == "":
            continue
        fields = raw.split("\t")
        if len(fields) != 6:
            raise ParseError(f"expected 6 tab-separated fields, got {len(fields)}", lineno)
        sid = _parse_field(fields[0], "id", lineno)
        label_tok = _parse_field(fields[1], "label", lineno)
        source_tok = _parse_field(fields[2], "source", lineno)
        perturbed_tok = _parse_field(fields[3], "perturbed", lineno)
        image_ref = _parse_field(fields[4], "image", lineno)
        prompt = _decode_prompt(_parse_field(fields[5], "prompt", lineno), lineno)
        try:
            label = Label(label_tok)
        except ValueError:
            raise ParseError(f"unknown label {label_tok!r}", lineno) from None
        try:
            source = Source(source_tok)
        except ValueError:
            raise ParseError(f"unknown source {source_tok!r}", lineno) from None
        if perturbed_tok == "-":
            perturbed = None
        else:
            try:
                perturbed = PerturbedModality(perturbed_tok)
            except ValueError:
                raise ParseError(f"unknown perturbed modality {perturbed_tok!r}", lineno) from None
        samples.append(
            LabeledSample(
                id=sid,
                prompt=prompt,
                image_ref=image_ref,
                label=label,
                source=source,
                perturbed_modality=perturbed,
            )
        )
    manifest = Manifest(samples=samples, root=path.parent)
    validate_manifest(manifest)
    return manifest


def split_dataset(manifest: Manifest, seed: int) -> Split:
    """Seeded, label-stratified 70/30 split of the manifest ids.

    The train side gets floor(0.7 * total) samples overall; per-class
    train counts are proportional via largest-remainder allocation, so
    each side's SAFE:NSFW ratio matches the whole within one sample per
    class. Remainder samples go to validation.
    """
    if not manifest.samples:
        raise EmptyDatasetError("cannot split an empty manifest")
    total = len(manifest.samples)
    target_train = math.floor(TRAIN_FRACTION * total)

    by_label: dict[Label, list[str]] = {}
    for s in manifest.samples:
        by_label.setdefault(s.label, []).append(s.id)

    quotas = {}
    remainders = []
    for label in sorted(by_label, key=lambda l: l.value):
        exact = TRAIN_FRACTION * len(by_label[label])
        quotas[label] = math.floor(exact)
        remainders.append((-(exact - math.floor(exact)), label.value, label))
    leftover = target_train - sum(quotas.values())
    for _, _, label in sorted(remainders):
        if leftover <= 0:
            break
        if quotas[label] < len(by_label[label]):
            quotas[label] += 1
            leftover -= 1

    rng = random.Random(seed)
    train_ids: set[str] = set()
    for label in sorted(by_label, key=lambda l: l.value):
        ids = list(by_label[label])
        rng.shuffle(ids)
        train_ids.update(ids[: quotas[label]])
    val_ids = {s.id for s in manifest.samples} - train_ids
    return Split(train_ids=frozenset(train_ids), val_ids=frozenset(val_ids), seed=seed)


def resolve_image_path(manifest: Manifest, sample: LabeledSample) -> Path:
    root = manifest.root if manifest.root is not None else Path(os.getcwd())
    return Path(root) / sample.image_ref
