from ..config import get_logger
from ..data import generate_synthetic
from ..types import AudioFrontendConfig, LabelKind, SyntheticSpec, VideoFormat

log = get_logger("synth")


def build_parser(subparsers, parent_parser):
    parser = subparsers.add_parser(
        "synth",
        help="Generate a synthetic dataset of correlated audio tones and drifting video patterns",
        parents=[parent_parser],
    )

    parser.add_argument("--output", "-o", required=True, help="Dataset directory to write (created if missing)")
    parser.add_argument("--classes", default=4, type=int, help="Number of classes")
    parser.add_argument("--clips", default=32, type=int, help="Number of clips, assigned round-robin to classes")
    parser.add_argument("--seed", default=0, type=int, help="Random seed for phases and noise")
    parser.add_argument("--noise", default=0.05, type=float, help="Gaussian noise level for audio and video")
    parser.add_argument("--clip-seconds", default=0.7, type=float, help="Audio length of every clip")
    parser.add_argument("--frames", default=16, type=int, help="Video frames per clip")
    parser.add_argument("--image-size", default=32, type=int, help="Frame height and width in pixels")
    parser.add_argument("--sample-rate", default=16000, type=int, help="Audio sample rate")
    parser.add_argument(
        "--n-mels", default=128, type=int, help="Mel bins used for the audio statistics (32 for desk-scale runs)"
    )
    parser.add_argument(
        "--video-format",
        default=VideoFormat.npy.value,
        choices=[f.value for f in VideoFormat],
        help="Write frames as one .npy tensor or a directory of PNGs per clip",
    )
    parser.add_argument(
        "--labels",
        default=LabelKind.classes.value,
        choices=[k.value for k in LabelKind],
        help="Class ids, or five per-class trait scores in [0, 1]",
    )
    parser.add_argument("--split", default="train", help="Split tag written on every record")

    parser.set_defaults(func=main)
    return parser


def main(args):
    spec = SyntheticSpec(
        num_classes=args.classes,
        noise=args.noise,
        clip_seconds=args.clip_seconds,
        num_frames=args.frames,
        seed=args.seed,
        video_format=args.video_format,
        label_kind=args.labels,
        split=args.split,
    )
    frontend = AudioFrontendConfig(sample_rate=args.sample_rate, n_mels=args.n_mels)
    generate_synthetic(spec, args.clips, args.output, frontend, args.image_size, args.parallelism)

    # Print to stdout so we can pass it along in a script
    log.info("Dataset has been written to directory:")
    print(args.output)
