"""Command-line entry point: ``gradobf <subcommand> [options]``.

Exit codes: 0 success, 1 bad usage or config, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import re
import sys
from pathlib import Path

import numpy as np

from . import harness
from .core import gen_shapes_dataset, prng_new, read_ppm, save_dataset, write_ppm
from .harness import ConfigError, ExperimentConfig
from .metrics import l2_norm, ssim
from .model import finite_diff_check, load_model, reference_model, save_model
from .oracles import ScriptedRng, brute_force_rdg, naive_fd_block
from .preprocess import PipelineError, QuantTable, RdgParams, fd_apply, parse_pipeline, rdg_draw

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; this CLI reserves 2 for runtime failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# flags shared by `attack` and `compare`; names match ExperimentConfig fields
_CONFIG_FLAGS = [
    ("--seed", int), ("--dataset", str), ("--dataset-size", int), ("--model", str),
    ("--defense", str), ("--attack", str), ("--max-rounds", int), ("--l2-bound", float),
    ("--linf-bound", float), ("--eot-ensemble", int), ("--bound-mode", str),
    ("--n-images", int), ("--threads", int),
]


def _add_config_flags(p):
    p.add_argument("--config", help="key = value file; flags override it")
    for flag, kind in _CONFIG_FLAGS:
        p.add_argument(flag, type=kind, default=None)
    p.add_argument("--out", dest="output_dir", default=None, help="output directory")


def _config_from_args(args) -> ExperimentConfig:
    overrides = {flag[2:].replace("-", "_"): getattr(args, flag[2:].replace("-", "_")) for flag, _ in _CONFIG_FLAGS}
    overrides["output_dir"] = args.output_dir
    if args.config:
        return harness.load_config(args.config, **overrides)
    return ExperimentConfig.from_mapping({k: v for k, v in overrides.items() if v is not None})


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gradobf", description="Gradient-obfuscation defenses and the attacks that test them.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a procedural shapes dataset as PPMs")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model with the reference recipe")
    p.add_argument("--out", required=True, help="weights file (.tmdl)")
    p.add_argument("--seed", type=int, default=harness.REFERENCE_TRAINING["seed"])
    p.add_argument("--epochs", type=int, default=harness.REFERENCE_TRAINING["epochs"])
    p.add_argument("--lr", type=float, default=harness.REFERENCE_TRAINING["lr"])

    p = sub.add_parser("attack", help="run one attack experiment and write CSVs")
    _add_config_flags(p)

    p = sub.add_parser("compare", help="compare several defenses under one attack")
    _add_config_flags(p)
    p.add_argument("--defenses", required=True, help="pipeline specs separated by ';'")
    p.add_argument("--corpus", type=int, default=100, help="images used for transform statistics")

    p = sub.add_parser("transform", help="apply a defense to a PPM image")
    p.add_argument("--defense", required=True)
    p.add_argument("--in", dest="src", required=True)
    p.add_argument("--out", dest="dst", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("check", help="gradient finite-difference and oracle checks")
    p.add_argument("--model", default="reference")
    p.add_argument("--images", type=int, default=10)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args):
    data = gen_shapes_dataset(args.n, args.classes, args.side, prng_new(args.seed, "eval-data"))
    save_dataset(data, args.out)
    print(f"wrote {len(data)} images to {args.out}")
    return EXIT_OK


def cmd_train(args):
    recipe = dict(harness.REFERENCE_TRAINING, seed=args.seed, epochs=args.epochs, lr=args.lr)

    def log(epoch, model):
        print(f"epoch {epoch + 1}/{recipe['epochs']}", flush=True)

    model = harness.train_reference(recipe, log=log)
    save_model(model, args.out)
    held_out = gen_shapes_dataset(500, recipe["class_count"], recipe["side"], prng_new(recipe["seed"], "test"))
    acc = float(np.mean(model.predict(held_out.images) == held_out.labels))
    print(f"held-out accuracy {acc:.4f}")
    print(f"saved {args.out}")
    return EXIT_OK


def cmd_attack(args):
    cfg = _config_from_args(args)
    report = harness.run_experiment(cfg)
    for key, value in report.summary.items():
        print(f"{key}={value}")
    print(f"wrote {cfg.output_dir}")
    return EXIT_OK


def _slug(spec: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", spec).strip("_") or "identity"


def cmd_compare(args):
    base = _config_from_args(args)
    specs = [s.strip() for s in args.defenses.split(";") if s.strip()]
    if not specs:
        raise ConfigError("--defenses is empty")
    configs = [base.replace(defense=s, output_dir=str(Path(base.output_dir) / _slug(s))) for s in specs]
    rows = harness.compare_defenses(configs, corpus_size=args.corpus)
    text = harness.comparison_csv(rows)
    Path(base.output_dir).mkdir(parents=True, exist_ok=True)
    (Path(base.output_dir) / "comparison.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_transform(args):
    try:
        defense = parse_pipeline(args.defense)
    except PipelineError as exc:
        raise ConfigError(str(exc)) from exc
    img = read_ppm(args.src)
    out = defense.apply(img, prng_new(args.seed, "transform"))
    write_ppm(np.clip(out, 0.0, 1.0), args.dst)
    print(f"l2={l2_norm(img, out)!r}")
    print(f"ssim={ssim(img, out)!r}")
    return EXIT_OK


def gradient_check(model, images, labels, samples, h, rng) -> float:
    return max(finite_diff_check(model, img, int(lab), h, samples, rng.child(f"img{i}"))
               for i, (img, lab) in enumerate(zip(images, labels)))


def oracle_checks(rng, fd_blocks: int = 100, rdg_images: int = 50):
    """Return ``(max fd deviation, number of RDG mismatches)`` against the slow oracles."""
    table = QuantTable.two_level()
    fd_err = 0.0
    for k in range(fd_blocks):
        block = rng.child(f"fd{k}").uniform_f64((8, 8, 1))
        fast = fd_apply(block, table)[..., 0]
        fd_err = max(fd_err, float(np.max(np.abs(fast - naive_fd_block(block[..., 0], table.values)))))
    mismatches = 0
    for k in range(rdg_images):
        stream = rng.child(f"rdg{k}")
        side = int(stream.integers(6, 17))
        d = int(stream.integers(2, max(3, side // 2)))
        img = stream.uniform_f64((side, side, 3))
        corner = int(stream.integers(0, 4))
        draws = stream.uniform(-0.45, 0.45, (max(side // d, side // d), 2))
        fast, _ = rdg_draw(img, RdgParams(0.45, d, "random-corner"), ScriptedRng([corner], draws))
        slow = brute_force_rdg(img, d, draws[:, 0], draws[:, 1], corner in (2, 3), corner in (1, 3))
        mismatches += not np.array_equal(fast, slow)
    return fd_err, mismatches


def cmd_check(args):
    model = reference_model() if args.model == "reference" else load_model(args.model)
    h, w, c = model.input_shape
    data = gen_shapes_dataset(args.images, model.class_count, h, prng_new(args.seed, "check-data"))
    err = gradient_check(model, data.images, data.labels, args.samples, args.h, prng_new(args.seed, "check"))
    print(f"gradient max relative error = {err:.3e} ({args.images} images x {args.samples} pixels, h={args.h:g})")
    fd_err, rdg_bad = oracle_checks(prng_new(args.seed, "oracles"))
    print(f"fd vs naive DCT max deviation = {fd_err:.3e}")
    print(f"rdg vs brute-force remapper mismatches = {rdg_bad}")
    ok = err <= args.tol and fd_err <= 1e-9 and rdg_bad == 0
    print("check passed" if ok else "check FAILED")
    return EXIT_OK if ok else EXIT_RUNTIME


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "compare": cmd_compare,
    "transform": cmd_transform,
    "check": cmd_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, PipelineError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
