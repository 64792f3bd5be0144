import pathlib

from ..config import get_logger
from ..data import ClipDataset, Manifest, SampleMode
from ..errors import UsageError
from ..reconstruction import load_pretrained, reconstruct, save_triptychs
from .utils import add_checkpoint_arg, add_datadir_arg

log = get_logger("reconstruct")


def build_parser(subparsers, parent_parser):
    parser = subparsers.add_parser(
        "reconstruct",
        help="Mask a clip, reconstruct it with a pre-trained checkpoint and write image triptychs",
        parents=[parent_parser],
    )
    add_datadir_arg(parser)
    add_checkpoint_arg(parser)
    parser.add_argument("--clip", default=None, help="Clip id (default: the first record of the manifest)")
    parser.add_argument("--mask-seed", default=0, type=int, help="Seed of the random mask")
    parser.add_argument(
        "--mask-ratio", default=None, type=float, help="Fraction of tokens to mask (default: the pre-training ratio)"
    )
    parser.add_argument("--output", "-o", required=True, help="Directory for the PNG files")

    parser.set_defaults(func=main)
    return parser


def main(args):
    model, cfg = load_pretrained(args.checkpoint)
    manifest = Manifest.load(args.data)

    ids = [r.clip_id for r in manifest.records]
    if not ids:
        raise UsageError("manifest %s is empty" % args.data)
    clip = args.clip or ids[0]
    if clip not in ids:
        raise UsageError("clip %s is not in %s" % (clip, args.data))

    item = ClipDataset(manifest, cfg, SampleMode.eval, seed=cfg.seed)[ids.index(clip)]
    ratio = cfg.pretrain.mask_ratio if args.mask_ratio is None else args.mask_ratio
    result = reconstruct(model, cfg, item["audio"], item["frames"], ratio, args.mask_seed)
    written = save_triptychs(result, args.output)

    log.info("Wrote %d images for clip %s", len(written), clip)
    print("audio masked MAE: %.6f" % result.audio_masked_mae)
    print("video masked MAE: %.6f" % result.video_masked_mae)
    print(pathlib.Path(args.output))
