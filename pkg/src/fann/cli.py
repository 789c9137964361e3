"""Command-line surface for batch runs.

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import format_config, parse_config_file
from .dataio import (
    generate_synthetic_dataset,
    read_image_ppm,
    read_manifest,
    load_samples,
    resize_bilinear,
    write_fant,
)
from .evaluator import default_workers, evaluate_protocol, write_ranking_csv
from .gradcheck import NET_TOL, run_suite
from .losses import DYNAMICS_DEFAULTS, simulate_triplet_dynamics, write_trajectory_csv
from .network import build_network
from .trainer import NumericalError, load_params, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fann", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic labeled dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--identities", type=int, default=20)
    p.add_argument("--cameras", type=int, default=2)
    p.add_argument("--per-camera", type=int, default=4)
    p.add_argument("--height", type=int, default=37)
    p.add_argument("--width", type=int, default=13)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--clutter", choices=("normal", "heavy"), default="normal")

    p = sub.add_parser("train", help="train a network on a manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="CMC/mAP evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--out", default=None)

    p = sub.add_parser("embed", help="embed one image to a FANT vector")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", default="embedding.fant")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("dynamics", help="triplet-loss motion trajectory CSV")
    p.add_argument("--loss", choices=("symmetric", "asymmetric"), required=True)
    p.add_argument("--steps", type=int, default=DYNAMICS_DEFAULTS["steps"])
    p.add_argument("--out", required=True)

    return parser


def _load_checkpointed_network(ckpt_dir: Path):
    cfg_file = ckpt_dir / "config.txt"
    if not cfg_file.is_file():
        raise ValueError(f"{ckpt_dir} has no config.txt; not a checkpoint directory?")
    run = parse_config_file(cfg_file)
    net = build_network(run.network_config())
    load_params(net, ckpt_dir)
    return net, run


def _cmd_synth_gen(args) -> int:
    manifest = generate_synthetic_dataset(
        args.identities,
        args.per_camera,
        args.cameras,
        args.height,
        args.width,
        args.seed,
        args.out,
        clutter=args.clutter,
    )
    print(f"wrote {len(manifest.entries)} samples under {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    run = parse_config_file(args.config)
    manifest = read_manifest(args.data)
    net = build_network(run.network_config())
    out_dir = Path(args.out)
    try:
        state = train(net, manifest, run.train_config(), args.iters, out_dir=out_dir)
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    (out_dir / "config.txt").write_text(format_config(run), encoding="utf-8", newline="\n")
    print(f"trained {state.iteration} iterations; checkpoint in {out_dir}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    net, run = _load_checkpointed_network(ckpt)
    manifest = read_manifest(args.data)
    samples = load_samples(manifest, target_hw=net.cfg.input_shape[1:])
    rng = np.random.default_rng(run["seed"])
    result = evaluate_protocol(
        net.embed, samples, run.split_spec(), args.trials, rng, max_workers=default_workers()
    )
    out_dir = Path(args.out) if args.out else ckpt / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    for t, (curve, ap) in enumerate(zip(result.per_trial_cmc, result.per_trial_map), start=1):
        write_ranking_csv(out_dir / f"trial_{t:02d}.csv", curve, ap)
    write_ranking_csv(out_dir / "mean.csv", result.cmc, result.map)
    print(f"top-1 {result.cmc[0]:.4f}  mAP {result.map:.4f}  over {result.trials} trials -> {out_dir}")
    return EXIT_OK


def _cmd_embed(args) -> int:
    net, _ = _load_checkpointed_network(Path(args.checkpoint))
    image = read_image_ppm(args.image)
    h, w = net.cfg.input_shape[1:]
    if image.shape[1:] != (h, w):
        image = np.clip(resize_bilinear(image, h, w), 0.0, 1.0)
    write_fant(args.out, net.embed(image))
    print(f"wrote {net.cfg.embedding_dim}-dim embedding to {args.out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    run = parse_config_file(args.config)
    results = run_suite(run.network_config(), args.seed)
    worst = 0.0
    for r in results:
        print(f"{r.name:40s} max rel err {r.max_rel_err:.3e}")
        worst = max(worst, r.max_rel_err)
    print(f"worst: {worst:.3e}")
    return EXIT_OK if worst < NET_TOL else EXIT_NUMERICAL


def _cmd_dynamics(args) -> int:
    rows = simulate_triplet_dynamics(
        DYNAMICS_DEFAULTS["init"],
        args.loss,
        args.steps,
        DYNAMICS_DEFAULTS["step_size"],
    )
    write_trajectory_csv(rows, args.out)
    print(f"wrote {len(rows)} trajectory rows to {args.out}")
    return EXIT_OK


_COMMANDS = {
    "synth-gen": _cmd_synth_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "embed": _cmd_embed,
    "gradcheck": _cmd_gradcheck,
    "dynamics": _cmd_dynamics,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
