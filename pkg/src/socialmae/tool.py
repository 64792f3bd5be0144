import pathlib

import torch.nn as nn

from . import numerics
from .config import get_logger
from .types import RunConfig


class Tool(object):
    """A long-running component that owns a model, a run config and an output directory."""

    cfg: RunConfig
    model: nn.Module
    output_dir: pathlib.Path

    def _log(self):
        if not (hasattr(self, "_cached_log") and self._cached_log is not None):
            self._cached_log = get_logger(type(self).__name__.lower())
        return self._cached_log

    def write_checkpoint(self, name: str) -> pathlib.Path:
        # Checkpoints embed the full config and its hash.
        path = self.output_dir / name
        numerics.save_checkpoint(path, self.model.state_dict(), self.cfg.json(), self.cfg.config_hash())
        self._log().info("Wrote checkpoint %s", path)
        return path
