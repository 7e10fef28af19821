"""Command-line entry point.

Exit status: 0 success, 1 usage error, 2 data or format error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .errors import Flow4DError, InvalidArgumentError, NumericalDivergenceError, TrainingError
from .losses import LossWeights
from .phantom import epe, load_phantom_config, make_phantom, mse_displacement
from .tracking import track_sequence
from .training import TrainConfig, train_kernels
from .tvl1 import SolverParams, estimate_flow

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _triple(text):
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected sx,sy,sz, got {text!r}")
    if len(vals) != 3 or min(vals) <= 0:
        raise argparse.ArgumentTypeError(f"expected three positive numbers, got {text!r}")
    return vals


def _solver_args(p):
    p.add_argument("--iters", type=int, default=40)
    p.add_argument("--lambda", dest="lambda_", type=float, default=0.15)
    p.add_argument("--theta", type=float, default=0.3)
    p.add_argument("--tau", type=float, default=1.0 / 12.0)
    p.add_argument("--kernels", type=Path, help="kernel file (default: initial stencils)")
    p.add_argument("--pyramid", action="store_true", help="2-level coarse-to-fine initialisation")


def _solver_params(args):
    try:
        return SolverParams(lambda_=args.lambda_, theta=args.theta, tau=args.tau,
                            n_iters=args.iters, pyramid=args.pyramid)
    except InvalidArgumentError as exc:
        raise UsageError(str(exc)) from exc


def _kernels(args):
    return fileio.read_kernel_file(args.kernels) if args.kernels else None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tvflow4d", description="Volumetric TV-L1 flow and 4D motion tracking.")
    parser.add_argument("--seed", type=int, default=0, help="seed for any randomised step")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("flow", help="estimate the flow between two volumes")
    p.add_argument("--fixed", type=Path, required=True)
    p.add_argument("--moving", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--warped", type=Path, help="also write the warped moving volume")
    _solver_args(p)

    p = sub.add_parser("track", help="track a volume sequence")
    p.add_argument("--seq", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--window", type=int, default=4)
    ws = p.add_mutually_exclusive_group()
    ws.add_argument("--warm-start", dest="warm_start", action="store_true", default=True)
    ws.add_argument("--no-warm-start", dest="warm_start", action="store_false")
    _solver_args(p)

    p = sub.add_parser("phantom", help="generate a synthetic sequence with ground truth")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True, help="reference-to-frame ground-truth flows")
    p.add_argument("--mask", type=Path, help="per-frame object masks (default: <gt>.mask.f4dv)")

    p = sub.add_parser("eval", help="score predicted flows against ground truth")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--mask", type=Path, required=True)
    p.add_argument("--spacing", type=_triple, help="sx,sy,sz in mm (default: from the gt header)")
    p.add_argument("--report", type=Path, required=True)
    p.add_argument("--dataset", help="dataset label (default: stem of --pred)")

    p = sub.add_parser("train", help="train the stencil weights on volume sequences")
    p.add_argument("--data-dir", type=Path, required=True)
    p.add_argument("--out-kernels", type=Path, required=True)
    p.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--fd-step", type=float, default=1e-3)
    p.add_argument("--window", type=int, default=4)
    p.add_argument("--batch-size", type=int, default=1, help="windows per descent step (0: full batch)")
    p.add_argument("--history", type=Path, help="CSV of the per-epoch loss")
    return parser


def _cmd_flow(args):
    fixed = fileio.read_volumes(args.fixed)[0]
    moving = fileio.read_volumes(args.moving)[0]
    res = estimate_flow(fixed, moving, _kernels(args), _solver_params(args))
    fileio.write_flow_file([res.flow], args.out, fixed.spacing)
    if args.warped:
        fileio.write_volumes([res.warped], args.warped)


def _cmd_track(args):
    if args.window < 2:
        raise UsageError(f"--window must be >= 2, got {args.window}")
    seq = fileio.read_volume_file(args.seq)
    res = track_sequence(seq, _kernels(args), _solver_params(args), window=args.window,
                         warm_start=args.warm_start)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_flow_file(res.ref_flows, out / "ref_flows.f4df", seq.spacing)
    fileio.write_flow_file(res.forward, out / "forward.f4df", seq.spacing)
    fileio.write_flow_file(res.backward, out / "backward.f4df", seq.spacing)
    window = min(args.window, len(seq))
    fileio.write_csv(
        out / "losses.csv",
        ("window_start", "window_end", "total", "temporal", "single_cycle", "cycle", "reconstruction"),
        ((s, s + window - 1, l.total, l.temporal, l.single_cycle, l.cycle, l.reconstruction)
         for s, l in zip(res.window_starts, res.losses)),
    )
    fileio.write_csv(out / "timing.csv", ("frame", "seconds"), enumerate(res.timing))


def _cmd_phantom(args):
    spec = load_phantom_config(args.config)
    seq, gt = make_phantom(spec)
    fileio.write_volume_file(seq, args.out)
    fileio.write_flow_file(gt.ref, args.gt, spec.spacing)
    mask_path = args.mask or args.gt.with_suffix(".mask.f4dv")
    fileio.write_mask(gt.frame_masks, mask_path, spec.spacing)


def _cmd_eval(args):
    pred, _ = fileio.read_flow_file(args.pred)
    gt, gt_spacing = fileio.read_flow_file(args.gt)
    if len(pred) != len(gt):
        raise fileio.FormatError(f"{len(pred)} predicted fields vs {len(gt)} ground-truth fields")
    masks = fileio.read_mask(args.mask, gt[0].dims)
    if len(masks) not in (1, len(gt)):
        raise fileio.FormatError(f"mask file has {len(masks)} frames, expected 1 or {len(gt)}")
    spacing = args.spacing or gt_spacing
    dataset = args.dataset or args.pred.stem
    rows = []
    for i, (p, g) in enumerate(zip(pred, gt)):
        m = masks[i] if len(masks) > 1 else masks[0]
        mse = mse_displacement(p, g, m, spacing)
        e = epe(p, g, m)
        rows.append((dataset, i, int(m.sum()), mse[0], mse[1], e[0], e[1]))
    fileio.write_csv(args.report, fileio.METRIC_COLUMNS, rows)


def _cmd_train(args):
    files = sorted(args.data_dir.glob("*.f4dv"))
    if not files:
        raise fileio.FormatError(f"no .f4dv sequences in {args.data_dir}")
    train_set = [fileio.read_volume_file(f) for f in files]
    try:
        config = TrainConfig(learning_rate=args.lr, epochs=args.epochs, fd_step=args.fd_step,
                             window=args.window, weights=LossWeights(), seed=args.seed,
                             batch_size=args.batch_size or None)
    except InvalidArgumentError as exc:
        raise UsageError(str(exc)) from exc
    kernels, history = train_kernels(train_set, config)
    fileio.write_kernel_file(kernels, args.out_kernels)
    if args.history:
        fileio.write_csv(args.history, ("epoch", "loss"), enumerate(history))


COMMANDS = {"flow": _cmd_flow, "track": _cmd_track, "phantom": _cmd_phantom,
            "eval": _cmd_eval, "train": _cmd_train}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (NumericalDivergenceError, TrainingError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (Flow4DError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
