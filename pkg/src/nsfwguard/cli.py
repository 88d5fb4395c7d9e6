"""Command-line entry point: datagen / train / attack / bench / serve / check."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import attacks as attacks_mod
from . import bench as bench_mod
from .corpus import Source, load_manifest, split_dataset, write_manifest
from .datagen import DEFAULT_RATIOS, StubBackend, build_dataset, import_scraped_prompts, load_image_tensor
from .defenses import KeywordDefense, ModelDefense
from .errors import BackendError, NsfwGuardError, ParseError, ValidationError
from .gateway import GatewayService, load_config_file, resolve_settings, serve
from .model import ModelConfig, load_model, save_model
from .trainer import TrainConfig, train, write_history_csv

USAGE = """usage: nsfwguard <command> [options]

commands:
  datagen   generate a stub dataset (images + manifest)
  train     train the fusion classifier on a manifest
  attack    run a budgeted attack suite against a checkpoint
  bench     attack x defense ASR benchmark, emits CSV + text report
  serve     run the moderation HTTP gateway
  check     one-shot moderation check from the command line

run `nsfwguard <command> --help` for command options.
"""

COMMANDS = ("datagen", "train", "attack", "bench", "serve", "check")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_USAGE = 64


def _parse_ratios(spec: str) -> dict[Source, float]:
    ratios = {}
    for part in spec.split(","):
        key, _, value = part.partition("=")
        ratios[Source(key.strip())] = float(value)
    return ratios


def _budget_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--epsilon-text", type=int, default=3, help="max character edits")
    parser.add_argument("--epsilon-image", type=float, default=8.0 / 255.0, help="L-inf pixel bound")
    parser.add_argument("--pgd-steps", type=int, default=10)
    parser.add_argument("--pgd-step-size", type=float, default=2.0 / 255.0)


def _budget_from(args) -> attacks_mod.PerturbationBudget:
    return attacks_mod.PerturbationBudget(
        epsilon_text=args.epsilon_text,
        epsilon_image=args.epsilon_image,
        pgd_steps=args.pgd_steps,
        pgd_step_size=args.pgd_step_size,
    )


def cmd_datagen(argv: list[str]) -> int:
    parser = argparse.ArgumentParser(prog="nsfwguard datagen")
    parser.add_argument("--out", required=True, help="output dataset directory")
    parser.add_argument("--total", type=int, required=True)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--size", type=int, default=16, help="image edge in pixels")
    parser.add_argument("--ratios", default=None, help="e.g. SAFE_CORPUS=0.5,GENERATED=0.48,PERTURBED=0.02")
    parser.add_argument("--scraped", default=None, help="text file of prompts to import as SCRAPED")
    args = parser.parse_args(argv)

    out = Path(args.out)
    ratios = _parse_ratios(args.ratios) if args.ratios else dict(DEFAULT_RATIOS)
    manifest = build_dataset(out, args.total, args.seed, size=args.size, ratios=ratios)
    if args.scraped:
        scraped = import_scraped_prompts(args.scraped, StubBackend(seed=args.seed), out, size=args.size)
        print(f"imported {len(scraped)} scraped prompts (not merged; re-run assembly to include)")
    path = write_manifest(manifest, out / "manifest.txt")
    counts = {src.value: n for src, n in sorted(manifest.composition.items(), key=lambda kv: kv[0].value)}
    print(f"wrote {path} with {len(manifest)} samples: {counts}")
    return EXIT_OK


def cmd_train(argv: list[str]) -> int:
    parser = argparse.ArgumentParser(prog="nsfwguard train")
    parser.add_argument("--manifest", required=True)
    parser.add_argument("--out", required=True, help="checkpoint output path")
    parser.add_argument("--curve", default=None, help="optional loss-curve CSV path")
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--batch-size", type=int, default=2)
    parser.add_argument("--lr", type=float, default=0.1)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threshold", type=float, default=0.5)
    parser.add_argument("--dim", type=int, default=32)
    parser.add_argument("--heads", type=int, default=4)
    parser.add_argument("--patch", type=int, default=8)
    parser.add_argument("--image-size", type=int, default=16)
    args = parser.parse_args(argv)

    manifest = load_manifest(args.manifest)
    split = split_dataset(manifest, args.seed)
    config = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
        seed=args.seed, threshold=args.threshold,
    )
    model_config = ModelConfig(
        d=args.dim, heads=args.heads, patch=args.patch, image_size=args.image_size,
    )
    result = train(manifest, split, config, model_config)
    save_model(result.params, args.out)
    if args.curve:
        write_history_csv(result.history, args.curve)
    last = result.history[-1]
    print(
        f"trained {args.epochs} epochs; final val_loss={last.val_loss:.4f} "
        f"val_accuracy={last.val_accuracy:.4f}; checkpoint -> {args.out}"
    )
    return EXIT_OK


def cmd_attack(argv: list[str]) -> int:
    parser = argparse.ArgumentParser(prog="nsfwguard attack")
    parser.add_argument("--manifest", required=True)
    parser.add_argument("--ckpt", default=None, help="model checkpoint to attack")
    parser.add_argument("--keyword-baseline", action="store_true", help="attack the keyword baseline instead")
    parser.add_argument("--kind", choices=bench_mod.ATTACK_KINDS, default="joint")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--max-instances", type=int, default=None)
    _budget_args(parser)
    args = parser.parse_args(argv)

    defense = _defense_from(args)
    manifest = load_manifest(args.manifest)
    instances = bench_mod.nsfw_instances(manifest, args.max_instances)
    if not instances:
        raise ValidationError("manifest has no NSFW samples")
    budget = _budget_from(args)
    spec = bench_mod.AttackSpec(args.kind, args.kind)
    successes = 0
    for inst in instances:
        result = bench_mod.run_candidate(spec, inst, budget, defense, attacks_mod.derive_seed(args.seed, inst.id))
        successes += int(result.success)
        print(
            f"{inst.id}: success={result.success} queries={result.queries} "
            f"delta_text={result.delta_text} delta_image={result.delta_image:.4f} [{result.method}]"
        )
    print(f"attack success rate: {100.0 * successes / len(instances):.2f}% over {len(instances)} instances")
    return EXIT_OK


def _defense_from(args):
    if args.keyword_baseline:
        from .datagen import flagged_vocabulary

        return KeywordDefense(flagged_vocabulary().entries)
    if not args.ckpt:
        raise ValidationError("provide --ckpt or --keyword-baseline")
    return ModelDefense(load_model(args.ckpt))


def cmd_bench(argv: list[str]) -> int:
    parser = argparse.ArgumentParser(prog="nsfwguard bench")
    parser.add_argument("--manifest", required=True)
    parser.add_argument("--ckpt", action="append", default=[], help="checkpoint (repeatable)")
    parser.add_argument("--with-keyword-baseline", action="store_true")
    parser.add_argument("--attacks", default="greedy_text,pgd_image,joint")
    parser.add_argument("--out", required=True, help="CSV report path (text table written alongside)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--max-instances", type=int, default=None)
    _budget_args(parser)
    args = parser.parse_args(argv)

    defenses = []
    for i, ckpt in enumerate(args.ckpt):
        name = Path(ckpt).stem if len(args.ckpt) > 1 else "multimodal"
        defenses.append(ModelDefense(load_model(ckpt), name=name))
    if args.with_keyword_baseline:
        from .datagen import flagged_vocabulary

        defenses.append(KeywordDefense(flagged_vocabulary().entries))
    if not defenses:
        raise ValidationError("provide at least one --ckpt or --with-keyword-baseline")

    manifest = load_manifest(args.manifest)
    specs = [bench_mod.AttackSpec(kind, kind) for kind in args.attacks.split(",")]
    report = bench_mod.run_benchmark(
        manifest, defenses, specs, _budget_from(args), args.seed, max_instances=args.max_instances
    )
    path = bench_mod.emit_report(report, args.out)
    for row in report.rows:
        print(
            f"{row.attack} vs {row.defense}: ASR-1={row.asr_1:.2f} ASR-4={row.asr_4:.2f} "
            f"(n={row.n_instances})"
        )
    print(f"report -> {path}")
    return EXIT_OK


def cmd_serve(argv: list[str]) -> int:
    parser = argparse.ArgumentParser(prog="nsfwguard serve")
    parser.add_argument("--ckpt", default=None)
    parser.add_argument("--port", type=int, default=None)
    parser.add_argument("--threshold", type=float, default=None)
    parser.add_argument("--config", default=None, help="key=value config file")
    parser.add_argument("--host", default="127.0.0.1")
    args = parser.parse_args(argv)

    ckpt, threshold, port = resolve_settings(args.ckpt, args.threshold, args.port, args.config)
    if not ckpt:
        raise ValidationError("no checkpoint: pass --ckpt, set NSFWGUARD_CKPT, or configure ckpt=")
    server = serve(ckpt, port, threshold, host=args.host)
    print(f"serving on {args.host}:{server.server_address[1]} threshold={threshold}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_check(argv: list[str]) -> int:
    parser = argparse.ArgumentParser(prog="nsfwguard check")
    parser.add_argument("--ckpt", default=None)
    parser.add_argument("--config", default=None)
    parser.add_argument("--threshold", type=float, default=None)
    parser.add_argument("--prompt", default=None)
    parser.add_argument("--image", default=None, help="image tensor file")
    args = parser.parse_args(argv)

    ckpt, threshold, _ = resolve_settings(args.ckpt, args.threshold, None, args.config)
    if not ckpt:
        raise ValidationError("no checkpoint: pass --ckpt, set NSFWGUARD_CKPT, or configure ckpt=")
    service = GatewayService(load_model(ckpt), threshold=threshold)
    if args.prompt is not None and args.image is not None:
        response = service.check_pair(args.prompt, load_image_tensor(args.image))
    elif args.prompt is not None:
        response = service.check_prompt(args.prompt)
    elif args.image is not None:
        response = service.check_image(load_image_tensor(args.image))
    else:
        raise ValidationError("provide --prompt and/or --image")
    print(json.dumps(response.to_json(), indent=2))
    return EXIT_OK


_DISPATCH = {
    "datagen": cmd_datagen,
    "train": cmd_train,
    "attack": cmd_attack,
    "bench": cmd_bench,
    "serve": cmd_serve,
    "check": cmd_check,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        print(USAGE)
        return EXIT_OK
    command, rest = argv[0], argv[1:]
    if command not in _DISPATCH:
        print(USAGE, file=sys.stderr)
        print(f"error: unknown command {command!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _DISPATCH[command](rest)
    except SystemExit as exc:  # argparse --help (0) or argument errors (2)
        code = exc.code if isinstance(exc.code, int) else EXIT_VALIDATION
        return EXIT_OK if code == 0 else EXIT_VALIDATION
    except (ValidationError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, BackendError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NsfwGuardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
