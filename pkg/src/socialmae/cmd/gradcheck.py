import argparse

from ..config import get_logger
from ..training import GradientChecker
from .utils import add_run_config_args, run_config_from_args

log = get_logger("gradcheck")


def build_parser(subparsers, parent_parser):
    parser = subparsers.add_parser(
        "gradcheck",
        help="Compare autograd gradients of the pre-training loss with central finite differences",
        parents=[parent_parser],
    )
    add_run_config_args(parser)
    parser.add_argument("--samples", default=200, type=int, help="Number of random parameter coordinates to check")
    parser.add_argument("--tolerance", default=1e-3, type=float, help="Maximum allowed relative error")
    parser.add_argument(
        "--step",
        default=1e-5,
        type=float,
        help="Finite-difference step (float64). Smaller than the usual 1e-3 so truncation error stays under the "
        "tolerance for small gradients",
    )
    parser.add_argument("--corrupt-gradient", default=False, action="store_true", help=argparse.SUPPRESS)

    parser.set_defaults(func=main)
    return parser


def corrupt_gradients(grads):
    for g in grads.values():
        g.mul_(-1.0).add_(1.0)


def main(args):
    cfg = run_config_from_args(args, presets=["pretrain-default", "desk"])
    checker = GradientChecker(cfg)
    report = checker.run(
        args.samples,
        tolerance=args.tolerance,
        step=args.step,
        corrupt=corrupt_gradients if args.corrupt_gradient else None,
    )

    for name, index, analytic, numeric in report.failures[:10]:
        log.warning("%s[%d]: analytic %.6g, numeric %.6g", name, index, analytic, numeric)
    print(
        "%s: %d coordinates, max relative error %.3g (tolerance %g)"
        % ("PASS" if report.passed else "FAIL", report.checked, report.max_relative_error, report.tolerance)
    )
    return 0 if report.passed else 1
