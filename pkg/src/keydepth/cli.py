"""Command-line surface: scene generation, descriptor precomputation,
optimization with ablation flags, gradient checking, and evaluation.

Exit codes: 0 success, 1 numerical failure (e.g. gradcheck over tolerance),
2 configuration/usage error. Every command is deterministic given --seed;
wall time is written to a separate timing.json so manifests, histories and
depth outputs are byte-identical across reruns and thread counts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from keydepth.errors import ConfigurationError, NumericalError
from keydepth.geometry import DepthField, se3_log
from keydepth.gridstore import StoreError, write_grid
from keydepth.image import ImageBuffer, load_image, load_pfm, save_image, save_pfm, to_grayscale
from keydepth.losses import LossModes, LossWeights, prepare_scene
from keydepth.metrics import compute_metrics
from keydepth.optimize import OptimConfig, gradcheck, init_state, run, write_history_csv
from keydepth.sift import compute_dense_grid
from keydepth.synth import load_scene, make_scene, save_scene, spec_from_json

STALL_THRESHOLD = 0.05
GRADCHECK_TOLERANCE = 1e-4


def _onoff(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected 'on' or 'off', got {value!r}")
    return value == "on"


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _flag_echo(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def cmd_synth(args) -> int:
    spec = spec_from_json(args.spec)
    sample = make_scene(spec)
    save_scene(sample, args.out)
    print(f"scene written to {args.out} ({spec.width}x{spec.height}, {len(sample.sources)} sources)")
    return 0


def cmd_descriptors(args) -> int:
    img = to_grayscale(load_image(args.image))
    grid = compute_dense_grid(img, args.size)
    write_grid(grid, args.size, args.out)
    print(f"{args.out}: {grid.width}x{grid.height}x128 grid, patch size {args.size}")
    return 0


def _build_modes(args) -> LossModes:
    return LossModes(
        use_detector=args.det,
        use_mask=args.expl,
        normalize=args.normalize,
        mask_gates_keypoint=args.mask_gates_keypoint,
    )


def _build_config(args, max_iters: int) -> OptimConfig:
    return OptimConfig(
        lr_depth=args.lr_depth,
        lr_pose=args.lr_pose,
        lr_mask=args.lr_mask,
        max_iters=max_iters,
        rel_tol=args.rel_tol,
        weights=LossWeights(args.alpha, args.beta, args.gamma, args.delta),
        modes=_build_modes(args),
    )


def _prepare(args, sample):
    return prepare_scene(
        sample.target,
        sample.sources,
        sample.intrinsics,
        patch_size=args.patch_size,
        max_keypoints=args.max_keypoints,
        contrast_threshold=args.contrast_threshold,
    )


def cmd_optimize(args) -> int:
    t0 = time.monotonic()
    sample = load_scene(args.scene)
    scene = _prepare(args, sample)
    state = init_state(
        sample,
        init=args.init,
        sigma_depth=args.sigma_depth,
        sigma_twist=args.sigma_twist,
        d0=args.d0,
        seed=args.seed,
    )
    config = _build_config(args, args.iters)
    state, history = run(state, scene, config)

    os.makedirs(args.out, exist_ok=True)
    depth = state.depth.depth
    save_pfm(depth, os.path.join(args.out, "depth.pfm"))
    inv = 1.0 / depth
    lo, hi = float(inv.min()), float(inv.max())
    vis = (inv - lo) / (hi - lo) if hi > lo else np.zeros_like(inv)
    save_image(ImageBuffer(vis), os.path.join(args.out, "depth_vis.pgm"))
    write_history_csv(history, os.path.join(args.out, "history.csv"))

    metrics = compute_metrics(state.depth, sample.gt_depth, median_scale=True)
    metrics_raw = compute_metrics(state.depth, sample.gt_depth, median_scale=False)
    first, last = history[0].total, history[-1].total
    decrease = 0.0 if first == 0 else (first - last) / abs(first)
    manifest = {
        "command": "optimize",
        "flags": _flag_echo(args),
        "seed": args.seed,
        "loss_history": "history.csv",
        "depth": "depth.pfm",
        "iterations_run": len(history),
        "converged": len(history) < args.iters,
        "initial_total": first,
        "final_total": last,
        "loss_decrease_fraction": decrease,
        "stalled": bool(decrease < STALL_THRESHOLD),
        "final_metrics": metrics.to_dict(),
        "final_metrics_unscaled": metrics_raw.to_dict(),
        "final_pose_twists": [list(se3_log(p)) for p in state.poses],
        "n_keypoints": len(scene.keypoints),
    }
    _write_json(os.path.join(args.out, "manifest.json"), manifest)
    _write_json(os.path.join(args.out, "timing.json"), {"wall_time_seconds": time.monotonic() - t0})
    print(f"{len(history)} iterations, total {first:.6g} -> {last:.6g}")
    print(metrics.table())
    return 0


def cmd_gradcheck(args) -> int:
    if args.samples < 1:
        raise ConfigurationError(f"--samples must be >= 1, got {args.samples}")
    sample = load_scene(args.scene)
    scene = _prepare(args, sample)
    state = init_state(
        sample,
        init=args.init,
        sigma_depth=args.sigma_depth,
        sigma_twist=args.sigma_twist,
        d0=args.d0,
        seed=args.seed,
    )
    config = _build_config(args, 1)
    result = gradcheck(
        state,
        scene,
        config,
        step_size=args.step,
        samples=args.samples,
        seed=args.seed,
        corrupt=args.corrupt_gradient,
    )
    print(
        f"gradcheck: max rel error {result.max_rel_error:.3e} over {result.n_checked} samples "
        f"({result.n_skipped} skipped near cell boundaries), worst {result.worst_param}"
    )
    return 0 if result.max_rel_error < GRADCHECK_TOLERANCE else 1


def cmd_eval(args) -> int:
    pred = DepthField.from_depth(load_pfm(args.pred))
    gt_arr = load_pfm(args.gt)
    valid = np.isfinite(gt_arr) & (gt_arr > 0)
    if not valid.any():
        raise ConfigurationError(f"{args.gt}: no positive ground-truth pixels")
    gt = DepthField.from_depth(np.where(valid, gt_arr, 1.0))
    metrics = compute_metrics(
        pred,
        gt,
        valid_mask=valid,
        median_scale=not args.no_median_scale,
        min_depth=args.min_depth,
        max_depth=args.max_depth,
    )
    print(metrics.csv_header())
    print(metrics.csv_line())
    print(metrics.table())
    if args.out:
        with open(args.out, "w") as f:
            f.write(metrics.csv_header() + "\n" + metrics.csv_line() + "\n")
    return 0


def _add_scene_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--patch-size", type=int, default=15, help="SIFT patch size (default 15)")
    p.add_argument("--max-keypoints", type=int, default=500)
    p.add_argument("--contrast-threshold", type=float, default=0.03)


def _add_objective_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--det", type=_onoff, default=True, help="keypoint-detector mode on|off (default on)")
    p.add_argument("--expl", type=_onoff, default=True, help="explainability mask on|off (default on)")
    p.add_argument("--alpha", type=float, default=2.0, help="keypoint-loss weight")
    p.add_argument("--beta", type=float, default=1.0, help="photometric weight")
    p.add_argument("--gamma", type=float, default=0.5, help="smoothness weight")
    p.add_argument("--delta", type=float, default=0.2, help="mask-regularizer weight")
    p.add_argument("--normalize", type=_onoff, default=True, help="mean losses on|off (off = raw sums)")
    p.add_argument("--mask-gates-keypoint", type=_onoff, default=True)
    p.add_argument("--lr-depth", type=float, default=1e-2)
    p.add_argument("--lr-pose", type=float, default=1e-3)
    p.add_argument("--lr-mask", type=float, default=1e-2)
    p.add_argument("--rel-tol", type=float, default=1e-6)
    p.add_argument("--init", choices=["gt", "perturbed", "constant"], default="perturbed")
    p.add_argument("--sigma-depth", type=float, default=0.1, help="log-depth noise for perturbed init")
    p.add_argument("--sigma-twist", type=float, default=0.01, help="twist noise for perturbed init")
    p.add_argument("--d0", type=float, default=2.0, help="depth for constant init")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker cap (results are thread-count independent)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="keydepth", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic scene from a JSON spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("descriptors", help="precompute a dense descriptor grid")
    p.add_argument("--image", required=True)
    p.add_argument("--size", type=int, default=15)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_descriptors)

    p = sub.add_parser("optimize", help="optimize depth/poses/mask against the loss stack")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=500)
    _add_objective_flags(p)
    _add_scene_flags(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("gradcheck", help="compare analytic gradients against finite differences")
    p.add_argument("--scene", required=True)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--corrupt-gradient", action="store_true", help="debug: scale one gradient entry x2")
    _add_objective_flags(p)
    _add_scene_flags(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", help="evaluate a predicted depth map against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--no-median-scale", action="store_true")
    p.add_argument("--min-depth", type=float, default=None)
    p.add_argument("--max-depth", type=float, default=None)
    p.add_argument("--out", default=None, help="optional CSV output path")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, StoreError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
