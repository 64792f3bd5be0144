import argparse
import logging
import multiprocessing
import sys

from ..config import get_logger
from ..errors import ConfigurationError, SocialMAEError, UsageError
from . import evaluate, finetune, gradcheck, pretrain, reconstruct, synth

log = get_logger("cmd")


def main(args=None):
    """The main routine. Returns the process exit code."""
    if args is None:
        args = sys.argv[1:]

    parent_parser = argparse.ArgumentParser(add_help=False)
    parent_parser.add_argument("--verbose", "-v", default=False, action="store_true")
    parent_parser.add_argument("--parallelism", default=multiprocessing.cpu_count(), type=int)

    parser = argparse.ArgumentParser(
        description="socialmae pre-trains, fine-tunes and evaluates audiovisual masked autoencoders."
    )
    subparsers = parser.add_subparsers(help="sub-command help", dest="subcommand", required=True)

    for module in [synth, pretrain, finetune, evaluate, reconstruct, gradcheck]:
        module.build_parser(subparsers, parent_parser)

    args = parser.parse_args(args=args)

    level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(format="%(asctime)s %(levelname)s: %(message)s", level=level)

    try:
        return args.func(args) or 0
    except (UsageError, ConfigurationError) as e:
        log.error("%s", e)
        for key in getattr(e, "keys", []):
            log.error("  offending key: %s", key)
        return 2
    except SocialMAEError as e:
        log.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
