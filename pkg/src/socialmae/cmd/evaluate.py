import pathlib

from ..config import get_logger
from ..data import Manifest
from ..model import InputMode
from ..training import evaluate, load_task_model
from .utils import add_checkpoint_arg, add_datadir_arg

log = get_logger("eval")

METRICS_FILE = "metrics.csv"


def build_parser(subparsers, parent_parser):
    parser = subparsers.add_parser(
        "eval",
        help="Evaluate a fine-tuned checkpoint in audio-only, video-only and audiovisual modes",
        parents=[parent_parser],
    )
    add_datadir_arg(parser)
    add_checkpoint_arg(parser)
    parser.add_argument(
        "--modality",
        default=None,
        choices=[m.value for m in InputMode],
        help="Evaluate a single input mode (default: all three)",
    )
    parser.add_argument("--split", default=None, help="Only evaluate records with this split tag")
    parser.add_argument("--output", "-o", default=None, help="Directory for metrics.csv (default: the checkpoint's)")

    parser.set_defaults(func=main)
    return parser


def main(args):
    model, cfg = load_task_model(args.checkpoint)
    manifest = Manifest.load(args.data).split(args.split)
    modes = [InputMode(args.modality)] if args.modality else None
    report = evaluate(model, manifest, cfg, modes=modes)

    out = pathlib.Path(args.output) if args.output else pathlib.Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / METRICS_FILE)
    log.info("Metrics written to %s", out / METRICS_FILE)
    print(report.table())
