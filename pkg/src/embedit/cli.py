"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .checkpoint import (
    Checkpoint,
    build_denoiser,
    build_lm,
    build_prior,
    load_bundle,
    load_checkpoint,
    save_checkpoint,
    section_parameter_counts,
)
from .dataset import (
    DEFAULT_MIX,
    _asset_from_json,
    load_corpus,
    synth_corpus,
    write_corpus,
    write_manifest,
)
from .errors import EmbeditError, MissingCheckpoint, UsageError
from .gradcheck import run_standard_suites
from .metrics import eval_metrics
from .pipeline import EditControls, EditRequest, edit, result_report
from .train import STANDARD_RECIPE, TrainConfig, train_diffusion, train_lm, train_prior, write_curve
from .diffusion import grid_to_pgm
from .world import encode_asset, load_world, make_world, save_world


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _check_range(name: str, value: float, lo: float, hi: float) -> float:
    if not (lo <= value <= hi):
        raise UsageError(f"{name} must be in [{lo}, {hi}], got {value}")
    return value


def _controls_from_args(args) -> EditControls:
    _check_range("--alpha", args.alpha, 0.0, 1.0)
    if args.beta < 0.0:
        raise UsageError(f"--beta must be non-negative, got {args.beta}")
    _check_range("--f", args.f, 1.0, 10.0)
    if args.steps < 1:
        raise UsageError(f"--steps must be positive, got {args.steps}")
    return EditControls(alpha=args.alpha, beta=args.beta, score=args.f,
                        steps=args.steps, seed=args.seed)


def _add_control_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, default=0.6)
    p.add_argument("--beta", type=float, default=0.3)
    p.add_argument("--f", type=float, default=6.5,
                   help="aesthetic score passed to the refinement prior")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> _Parser:
    parser = _Parser(prog="embedit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="create and save a concept world")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--concepts", type=int, default=64)
    p.add_argument("--gap", type=float, default=0.1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-data", help="synthesize instruction corpora")
    p.add_argument("--world", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pretrain", type=int, default=5000)
    p.add_argument("--finetune", type=int, default=500)
    p.add_argument("--heldout", type=int, default=0)
    p.add_argument("--p", type=float, default=0.5)
    p.add_argument("--heldout-p", type=float, default=1.0)
    p.add_argument("--checkpoint", help="optional checkpoint with a prior "
                                        "for eager translation")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--target", required=True,
                   choices=("prior", "diffusion", "lm-stage1", "lm-stage2"))
    p.add_argument("--world", required=True)
    p.add_argument("--corpus")
    p.add_argument("--in", dest="checkpoint_in")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--curve")

    p = sub.add_parser("edit", help="run the edit pipeline once")
    p.add_argument("--world", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--inputs", required=True,
                   help="JSON file: list of asset objects")
    p.add_argument("--out-dir")
    _add_control_flags(p)

    p = sub.add_parser("eval", help="run metrics over a corpus")
    p.add_argument("--world", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    _add_control_flags(p)

    p = sub.add_parser("grad-check", help="finite-difference gradient suites")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("inspect", help="print checkpoint sections")
    p.add_argument("checkpoint")

    return parser


def _cmd_gen_world(args) -> int:
    world = make_world(args.seed, n_concepts=args.concepts, gap=args.gap)
    save_world(world, args.out)
    print(f"world seed={args.seed} concepts={args.concepts} -> {args.out}")
    return 0


def _cmd_gen_data(args) -> int:
    _check_range("--p", args.p, 0.0, 1.0)
    _check_range("--heldout-p", args.heldout_p, 0.0, 1.0)
    world = load_world(args.world)
    prior = None
    if args.checkpoint:
        prior = build_prior(load_checkpoint(args.checkpoint))
    os.makedirs(args.out_dir, exist_ok=True)
    pretrain = synth_corpus(world, args.seed, args.pretrain, args.p, prior=prior)
    write_corpus(pretrain, os.path.join(args.out_dir, "pretrain.jsonl"))
    import numpy as np

    from .rng import np_rng
    pick = np_rng(world.seed, "finetune-pick", args.seed).choice(
        len(pretrain), size=min(args.finetune, len(pretrain)), replace=False,
    )
    finetune = [pretrain[int(i)] for i in sorted(pick)]
    write_corpus(finetune, os.path.join(args.out_dir, "finetune.jsonl"))
    counts = {"pretrain": len(pretrain), "finetune": len(finetune)}
    if args.heldout:
        heldout = synth_corpus(world, args.seed + 1, args.heldout,
                               args.heldout_p, prior=prior,
                               start_id=10_000_000)
        write_corpus(heldout, os.path.join(args.out_dir, "heldout.jsonl"))
        counts["heldout"] = len(heldout)
    write_manifest(os.path.join(args.out_dir, "manifest.json"), args.seed,
                   counts, args.p, DEFAULT_MIX, world)
    print(f"corpus {counts} -> {args.out_dir}")
    return 0


def _cmd_train(args) -> int:
    recipe = STANDARD_RECIPE[args.target]
    config = TrainConfig(
        target=args.target,
        steps=args.steps if args.steps is not None else recipe["steps"],
        lr=args.lr if args.lr is not None else recipe["lr"],
        batch_size=args.batch if args.batch is not None else recipe["batch_size"],
        seed=args.seed,
    )
    world = load_world(args.world)
    ck_in: Checkpoint | None = None
    if args.checkpoint_in:
        ck_in = load_checkpoint(args.checkpoint_in)

    def section(name):
        return ck_in is not None and name in ck_in.sections

    if args.target == "prior":
        warm = build_prior(ck_in) if section("PRIOR") else None
        model, curve = train_prior(world, config, model=warm)
        save_checkpoint(args.out, world=world, prior=model, carry=ck_in)
    elif args.target == "diffusion":
        warm = build_denoiser(ck_in) if section("DIFF") else None
        model, curve = train_diffusion(world, config, model=warm)
        save_checkpoint(args.out, world=world, denoiser=model, carry=ck_in)
    else:
        if not args.corpus:
            raise UsageError(f"--corpus is required for {args.target}")
        records = load_corpus(args.corpus)
        stage = 1 if args.target == "lm-stage1" else 2
        if ck_in is None or "PRIOR" not in ck_in.sections:
            raise MissingCheckpoint("lm training needs --in with a PRIOR section")
        prior = build_prior(ck_in)
        denoiser = build_denoiser(ck_in) if section("DIFF") else None
        lm = build_lm(ck_in, world) if section("LM") else None
        if stage == 2 and lm is None:
            raise MissingCheckpoint("lm-stage2 needs an LM section from stage 1")
        model, curve = train_lm(world, config, records, stage, model=lm,
                                prior=prior, denoiser=denoiser)
        save_checkpoint(args.out, world=world, lm=model, carry=ck_in)

    curve_path = args.curve or args.out + ".curve.csv"
    write_curve(curve_path, curve)
    last = curve[-1][1] if curve else float("nan")
    print(f"{args.target}: {config.steps} steps, final loss {last:.6f} -> {args.out}")
    return 0


def _cmd_edit(args) -> int:
    controls = _controls_from_args(args)
    world = load_world(args.world)
    bundle = load_bundle(args.checkpoint, world)
    with open(args.inputs, encoding="utf-8") as f:
        asset_dicts = json.load(f)
    if not isinstance(asset_dicts, list) or not asset_dicts:
        raise UsageError("--inputs must be a non-empty JSON list of assets")
    inputs = tuple(
        encode_asset(world, _asset_from_json(d)) for d in asset_dicts
    )
    request = EditRequest(instruction=args.instruction, inputs=inputs,
                          controls=controls)
    result = edit(bundle, request)
    report = result_report(result)
    sys.stdout.write(report)
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        with open(os.path.join(args.out_dir, "report.txt"), "w",
                  encoding="utf-8") as f:
            f.write(report)
        with open(os.path.join(args.out_dir, "output.pgm"), "w",
                  encoding="utf-8") as f:
            f.write(grid_to_pgm(result.image))
    return 0


def _cmd_eval(args) -> int:
    controls = _controls_from_args(args)
    world = load_world(args.world)
    bundle = load_bundle(args.checkpoint, world)
    records = load_corpus(args.corpus)
    report = eval_metrics(bundle, records, controls)
    for line in report.lines():
        print(line)
    return 0


def _cmd_grad_check(args) -> int:
    reports = run_standard_suites(args.seed)
    ok = True
    for name, report in reports.items():
        for line in report.lines():
            print(f"{name}.{line}")
        ok = ok and report.passed
    if not ok:
        raise EmbeditError("gradient check failed")
    print("all gradient suites passed")
    return 0


def _cmd_inspect(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    counts = section_parameter_counts(ck)
    for name in ck.sections:
        print(f"{name}: {counts[name]} values, {len(ck.sections[name])} bytes")
    return 0


_COMMANDS = {
    "gen-world": _cmd_gen_world,
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "edit": _cmd_edit,
    "eval": _cmd_eval,
    "grad-check": _cmd_grad_check,
    "inspect": _cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (EmbeditError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
