from ..config import get_logger
from ..data import Manifest
from ..training import pretrain
from .utils import add_datadir_arg, add_run_config_args, run_config_from_args

log = get_logger("pretrain")


def build_parser(subparsers, parent_parser):
    parser = subparsers.add_parser(
        "pretrain",
        help="Pre-train the masked autoencoder with the contrastive and reconstruction losses",
        parents=[parent_parser],
    )
    add_run_config_args(parser)
    add_datadir_arg(parser)
    parser.add_argument("--split", default=None, help="Only use records with this split tag")

    parser.set_defaults(func=main)
    return parser


def main(args):
    cfg = run_config_from_args(args, presets=["pretrain-default"])
    manifest = Manifest.load(args.data).split(args.split)
    checkpoint, run_log = pretrain(cfg, manifest)

    log.info("Ran %d steps, final L %.4f", len(run_log.steps), run_log.steps[-1]["L"] if run_log.steps else 0.0)
    print(checkpoint)
