import argparse
import os
import pathlib

from ..data import load_audio_stats
from ..runconfig import available_presets, build_run_config


def environ_or_required(key, default=None):
    return (
        {"default": os.environ.get(key, default)} if os.environ.get(key, default) is not None else {"required": True}
    )


def add_datadir_arg(parser):
    parser.add_argument(
        "--data",
        "-d",
        help="Dataset directory (containing manifest.jsonl) or manifest file.",
        **environ_or_required("SOCIALMAE_DATA_DIR"),
    )


def add_checkpoint_arg(parser):
    parser.add_argument(
        "--checkpoint",
        help="Checkpoint file (.safetensors).",
        **environ_or_required("SOCIALMAE_CHECKPOINT"),
    )


def audio_stats(text):
    try:
        mean, std = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected mean,std, got %r" % text)
    return mean, std


def add_run_config_args(parser):
    parser.add_argument(
        "--preset",
        default=None,
        action="append",
        help="Shipped recipe to start from (repeatable, applied in order): %s" % ", ".join(available_presets()),
    )
    parser.add_argument("--config", default=None, type=str, help="TOML config file layered over the presets")
    parser.add_argument(
        "--desk-scale",
        default=False,
        action="store_true",
        help="Apply the desk-scale geometry (8 audio and 8 video tokens, dim 16)",
    )
    parser.add_argument("--seed", default=None, type=int, help="Random seed")
    parser.add_argument("--output", "-o", default=None, type=str, help="Output directory")
    parser.add_argument(
        "--audio-stats",
        default=None,
        type=audio_stats,
        help="Audio normalization mean,std (default: the dataset's stats.toml, else the shipped defaults)",
    )
    parser.add_argument(
        "--set",
        dest="assignments",
        default=None,
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="Override a single config field; VALUE is a TOML literal",
    )


def run_config_from_args(args, presets=None):
    data_dir = getattr(args, "data", None)
    stats = args.audio_stats
    if stats is None and data_dir is not None:
        d = pathlib.Path(data_dir)
        stats = load_audio_stats(d if d.is_dir() else d.parent)

    return build_run_config(
        presets=args.preset or presets or [],
        config_path=args.config,
        desk_scale=args.desk_scale,
        assignments=args.assignments or [],
        audio_stats=stats,
        seed=args.seed,
        output_dir=args.output,
        data_dir=data_dir,
    )
