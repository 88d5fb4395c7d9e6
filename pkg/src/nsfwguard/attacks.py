"""Budgeted adversarial perturbations of prompts and images.

Text attacks are black-box greedy searches over single-character edits
(lookalike substitutions from the shipped table, plus space insertion)
capped at an edit budget. Image attacks are L-infinity projected
gradient descent when the defense exposes pixel gradients, with a
query-only random-probe fallback otherwise. The joint attack alternates
the two. All attacks stop early once the defense's decision flips.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from importlib import resources as importlib_resources
from pathlib import Path

import numpy as np

from .corpus import Label, LabeledSample, PerturbedModality, Source
from .datagen import derive_seed, load_image_tensor, write_image_tensor
from .defenses import Defense
from .errors import ValidationError

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class PerturbationBudget:
    """Edit budget for text, L-infinity radius for pixels, PGD schedule."""

    epsilon_text: int = 3
    epsilon_image: float = 8.0 / 255.0
    pgd_steps: int = 10
    pgd_step_size: float = 2.0 / 255.0

    def __post_init__(self):
        if self.epsilon_text < 0:
            raise ValidationError("epsilon_text must be >= 0")
        if not 0.0 <= self.epsilon_image <= 1.0:
            raise ValidationError("epsilon_image must lie in [0, 1]")
        if self.pgd_steps < 1:
            raise ValidationError("pgd_steps must be >= 1")
        if self.pgd_step_size <= 0.0:
            raise ValidationError("pgd_step_size must be positive")


@dataclass
class AttackResult:
    adversarial_prompt: str | None
    adversarial_image: np.ndarray | None
    success: bool
    queries: int
    delta_text: int = 0
    delta_image: float = 0.0
    method: str = ""


def load_substitutions() -> dict[str, str]:
    """Character substitution table from the versioned package resource."""
    text = importlib_resources.files("nsfwguard.resources").joinpath("subst-v1.txt").read_text("utf-8")
    table = {}
    for line in text.splitlines():
        if not line:
            continue
        src, dst = line.split("\t")
        table[src] = dst
    return table


_SUBSTITUTIONS = load_substitutions()


def _candidate_edits(prompt: str) -> list[str]:
    """All single-edit variants: table substitutions and space insertions."""
    variants = []
    for i, ch in enumerate(prompt):
        sub = _SUBSTITUTIONS.get(ch.lower())
        if sub is not None:
            variants.append(prompt[:i] + sub + prompt[i + 1 :])
    for i in range(1, len(prompt)):
        if prompt[i - 1] != " " and prompt[i] != " ":
            variants.append(prompt[:i] + " " + prompt[i:])
    return variants


def perturb_prompt(
    prompt: str,
    budget: PerturbationBudget,
    defense: Defense,
    seed: int,
    paired_image: np.ndarray | None = None,
    threshold: float = DEFAULT_THRESHOLD,
) -> AttackResult:
    """Greedy single-character edits that most decrease the unsafe score.

    Stops on decision flip, on budget exhaustion, or when no candidate
    strictly decreases the score. Ties are broken by a seeded shuffle so
    different seeds explore different but equally-greedy paths.
    """
    if not prompt:
        raise ValidationError("prompt must be non-empty")
    rng = random.Random(seed)
    current = prompt
    current_score = defense.score(current, paired_image)
    queries = 1
    edits = 0
    while edits < budget.epsilon_text and current_score >= threshold:
        candidates = _candidate_edits(current)
        rng.shuffle(candidates)
        best, best_score = None, current_score
        for cand in candidates:
            s = defense.score(cand, paired_image)
            queries += 1
            if s < best_score - 1e-12:
                best, best_score = cand, s
        if best is None:
            break
        current, current_score = best, best_score
        edits += 1
    return AttackResult(
        adversarial_prompt=current,
        adversarial_image=None,
        success=current_score < threshold,
        queries=queries,
        delta_text=edits,
        method="greedy-text",
    )


def _project(adv: np.ndarray, original: np.ndarray, epsilon: float) -> np.ndarray:
    return np.clip(np.clip(adv, original - epsilon, original + epsilon), 0.0, 1.0)


def perturb_image(
    image: np.ndarray,
    budget: PerturbationBudget,
    defense: Defense,
    paired_prompt: str | None,
    seed: int = 0,
    threshold: float = DEFAULT_THRESHOLD,
) -> AttackResult:
    """L-infinity-bounded pixel attack lowering the unsafe score.

    Uses sign-gradient PGD when the defense exposes `image_gradient`;
    otherwise a seeded random search probing two pixels per step with
    central finite differences (flagged in ``method``).
    """
    original = np.asarray(image, dtype=np.float64)
    adv = original.copy()
    queries = 0
    has_grad = hasattr(defense, "image_gradient")
    rng = np.random.default_rng(seed)

    for _ in range(budget.pgd_steps):
        s = defense.score(paired_prompt, adv)
        queries += 1
        if s < threshold:
            break
        if has_grad:
            grad = defense.image_gradient(paired_prompt, adv)
            step = np.sign(grad)
        else:
            step = np.zeros_like(adv)
            flat = step.reshape(-1)
            probe = 1e-3
            for _ in range(2):
                idx = int(rng.integers(flat.size))
                plus = adv.copy().reshape(-1)
                minus = adv.copy().reshape(-1)
                plus[idx] = min(plus[idx] + probe, 1.0)
                minus[idx] = max(minus[idx] - probe, 0.0)
                d = defense.score(paired_prompt, plus.reshape(adv.shape)) - defense.score(
                    paired_prompt, minus.reshape(adv.shape)
                )
                queries += 2
                flat[idx] = np.sign(d)
        adv = _project(adv - budget.pgd_step_size * step, original, budget.epsilon_image)

    final = defense.score(paired_prompt, adv)
    queries += 1
    return AttackResult(
        adversarial_prompt=None,
        adversarial_image=adv,
        success=final < threshold,
        queries=queries,
        delta_image=float(np.max(np.abs(adv - original))) if adv.size else 0.0,
        method="pgd" if has_grad else "random-search",
    )


def joint_attack(
    prompt: str,
    image: np.ndarray,
    budget: PerturbationBudget,
    defense: Defense,
    seed: int,
    threshold: float = DEFAULT_THRESHOLD,
) -> AttackResult:
    """Alternate one text-edit round and one pixel round until a flip
    or both budgets are exhausted; both budget bounds hold jointly."""
    if not prompt:
        raise ValidationError("prompt must be non-empty")
    original_image = np.asarray(image, dtype=np.float64)
    cur_prompt, cur_image = prompt, original_image.copy()
    edits_left = budget.epsilon_text
    total_edits = 0
    queries = 0
    method = "joint"

    for round_no in range(max(budget.epsilon_text, 1)):
        if defense.score(cur_prompt, cur_image) < threshold:
            break
        queries += 1
        if edits_left > 0:
            text_round = perturb_prompt(
                cur_prompt,
                PerturbationBudget(
                    epsilon_text=1,
                    epsilon_image=budget.epsilon_image,
                    pgd_steps=budget.pgd_steps,
                    pgd_step_size=budget.pgd_step_size,
                ),
                defense,
                derive_seed(seed, "text", round_no),
                paired_image=cur_image,
                threshold=threshold,
            )
            cur_prompt = text_round.adversarial_prompt
            total_edits += text_round.delta_text
            edits_left -= text_round.delta_text
            queries += text_round.queries
            if text_round.success:
                break
        image_round = perturb_image(
            cur_image, budget, defense, cur_prompt,
            seed=derive_seed(seed, "image", round_no), threshold=threshold,
        )
        # keep every intermediate inside the ball around the ORIGINAL image
        cur_image = _project(image_round.adversarial_image, original_image, budget.epsilon_image)
        queries += image_round.queries
        if image_round.success:
            method = f"joint({image_round.method})"
            break

    final = defense.score(cur_prompt, cur_image)
    queries += 1
    return AttackResult(
        adversarial_prompt=cur_prompt,
        adversarial_image=cur_image,
        success=final < threshold,
        queries=queries,
        delta_text=total_edits,
        delta_image=float(np.max(np.abs(cur_image - original_image))),
        method=method,
    )


def perturb_samples(
    samples: list[LabeledSample],
    defense: Defense,
    budget: PerturbationBudget,
    out_dir: Path | str,
    seed: int,
    manifest_root: Path | str | None = None,
    modalities: tuple[PerturbedModality, ...] = (PerturbedModality.TEXT, PerturbedModality.IMAGE),
    id_prefix: str = "pert",
) -> list[LabeledSample]:
    """Attack each sample against ``defense`` and emit PERTURBED records.

    Modalities cycle through ``modalities``; image files for the
    perturbed variants are written under ``out_dir``.
    """
    out_dir = Path(out_dir)
    root = Path(manifest_root) if manifest_root is not None else out_dir
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    perturbed = []
    for i, sample in enumerate(samples):
        modality = modalities[i % len(modalities)]
        attack_seed = derive_seed(seed, sample.id, modality.value)
        image = load_image_tensor(root / sample.image_ref)
        prompt, adv_image = sample.prompt, image
        if modality == PerturbedModality.TEXT:
            result = perturb_prompt(sample.prompt, budget, defense, attack_seed, paired_image=image)
            prompt = result.adversarial_prompt
        elif modality == PerturbedModality.IMAGE:
            result = perturb_image(image, budget, defense, sample.prompt, seed=attack_seed)
            adv_image = result.adversarial_image
        else:
            result = joint_attack(sample.prompt, image, budget, defense, attack_seed)
            prompt, adv_image = result.adversarial_prompt, result.adversarial_image
        sid = f"{id_prefix}-{i:05d}"
        ref = f"images/{sid}.img"
        write_image_tensor(adv_image, out_dir / ref)
        perturbed.append(
            LabeledSample(
                id=sid,
                prompt=prompt,
                image_ref=ref,
                label=Label.NSFW,
                source=Source.PERTURBED,
                perturbed_modality=modality,
            )
        )
    return perturbed


def augment_with_perturbed(
    manifest,
    sample_ids: set[str] | frozenset[str],
    defense: Defense,
    budget: PerturbationBudget,
    seed: int,
    out_dir: Path | str | None = None,
    modalities: tuple[PerturbedModality, ...] = (
        PerturbedModality.TEXT,
        PerturbedModality.IMAGE,
        PerturbedModality.BOTH,
    ),
):
    """Adversarial-training data prep: append PERTURBED variants of the
    chosen flagged samples (attacked against ``defense``) to the manifest."""
    from .corpus import Manifest

    root = manifest.root if manifest.root is not None else Path(".")
    out_dir = Path(out_dir) if out_dir is not None else Path(root)
    chosen = [s for s in manifest.samples if s.id in sample_ids and s.label == Label.NSFW]
    extra = perturb_samples(
        chosen, defense, budget, out_dir, seed,
        manifest_root=root, modalities=modalities, id_prefix="advt",
    )
    augmented = Manifest(samples=list(manifest.samples) + extra, root=manifest.root)
    return augmented
