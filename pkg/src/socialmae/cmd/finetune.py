from ..config import get_logger
from ..data import Manifest
from ..training import EVAL_LOG, finetune
from .utils import add_checkpoint_arg, add_datadir_arg, add_run_config_args, run_config_from_args

log = get_logger("finetune")


def build_parser(subparsers, parent_parser):
    parser = subparsers.add_parser(
        "finetune",
        help="Replace the decoder of a pre-trained checkpoint with a task head and train it",
        parents=[parent_parser],
    )
    add_run_config_args(parser)
    add_datadir_arg(parser)
    add_checkpoint_arg(parser)
    parser.add_argument("--split", default=None, help="Only train on records with this split tag")
    parser.add_argument(
        "--eval-data",
        default=None,
        help="Held-out dataset evaluated (audiovisual mode) after every epoch",
    )

    parser.set_defaults(func=main)
    return parser


def main(args):
    cfg = run_config_from_args(args)
    manifest = Manifest.load(args.data).split(args.split)
    eval_manifest = Manifest.load(args.eval_data) if args.eval_data else None
    if cfg.finetune is not None:
        print(cfg.finetune.describe_head())
        print(cfg.finetune.describe_learning_rates())
    checkpoint, run_log = finetune(cfg, args.checkpoint, manifest, eval_manifest=eval_manifest)

    if run_log.evaluations:
        log.info("Per-epoch evaluation written to %s", cfg.output_dir + "/" + EVAL_LOG)
    print(checkpoint)
