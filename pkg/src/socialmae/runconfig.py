import json
import pathlib
from typing import Any, Dict, List, Optional, Sequence, Tuple

import toml
from pydantic import ValidationError, validate_arguments

from .errors import ConfigurationError
from .types import RunConfig

PRESETS_DIR = pathlib.Path(__file__).parent / "presets"
DESK_PRESET = "desk"
CONFIG_FILE = "config.toml"


def available_presets() -> List[str]:
    return sorted(p.stem for p in PRESETS_DIR.glob("*.toml"))


@validate_arguments
def load_preset(name: str) -> Dict[str, Any]:
    path = PRESETS_DIR / (name + ".toml")
    if not path.exists():
        raise ConfigurationError(
            "unknown preset %r (available: %s)" % (name, ", ".join(available_presets())), keys=["preset"]
        )
    return toml.load(path)


def load_config_file(path) -> Dict[str, Any]:
    try:
        return toml.load(str(path))
    except (OSError, toml.TomlDecodeError) as e:
        raise ConfigurationError("cannot read config %s: %s" % (path, e), keys=["config"])


def merge(base: Dict[str, Any], overlay: Dict[str, Any]) -> Dict[str, Any]:
    """Recursive dict merge; `overlay` wins."""
    out = dict(base)
    for k, v in overlay.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_assignment(item: str) -> Tuple[List[str], Any]:
    """``section.key=value`` with a TOML literal value; bare words are taken as strings."""
    if "=" not in item:
        raise ConfigurationError("expected section.key=value, got %r" % item, keys=[item])
    key, raw = item.split("=", 1)
    try:
        value = toml.loads("v = " + raw.strip())["v"]
    except toml.TomlDecodeError:
        value = raw.strip()
    return key.strip().split("."), value


def nested(path: Sequence[str], value: Any) -> Dict[str, Any]:
    out = value
    for part in reversed(path):
        out = {part: out}
    return out


def validate(raw: Dict[str, Any]) -> RunConfig:
    """Build a RunConfig, reporting every offending dotted key at once."""
    try:
        return RunConfig.parse_obj(raw)
    except ValidationError as e:
        errors = e.errors()
        keys = [".".join(str(p) for p in err["loc"] if p != "__root__") or "<root>" for err in errors]
        details = "; ".join("%s: %s" % (k, err["msg"]) for k, err in zip(keys, errors))
        raise ConfigurationError("invalid configuration: %s" % details, keys=keys)


def build_run_config(
    presets: Sequence[str] = (),
    config_path: Optional[str] = None,
    desk_scale: bool = False,
    assignments: Sequence[str] = (),
    audio_stats: Optional[Tuple[float, float]] = None,
    **fields,
) -> RunConfig:
    """Layer defaults, presets, a config file, the desk overlay, dataset stats and explicit overrides."""
    raw: Dict[str, Any] = {}
    for name in presets:
        raw = merge(raw, load_preset(name))
    if config_path is not None:
        raw = merge(raw, load_config_file(config_path))
    if desk_scale:
        raw = merge(raw, load_preset(DESK_PRESET))
    if audio_stats is not None:
        raw = merge(raw, {"frontend": {"audio_mean": audio_stats[0], "audio_std": audio_stats[1]}})
    for item in assignments:
        path, value = parse_assignment(item)
        raw = merge(raw, nested(path, value))
    raw = merge(raw, {k: v for k, v in fields.items() if v is not None})
    return validate(raw)


def to_toml(cfg: RunConfig) -> str:
    return toml.dumps(json.loads(cfg.json(exclude_none=True)))


def save_run_config(cfg: RunConfig, output_dir) -> pathlib.Path:
    out = pathlib.Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / CONFIG_FILE
    with open(path, "w") as f:
        f.write(to_toml(cfg))
    return path


def flatten(d: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = prefix + k
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def architecture_diff(current: RunConfig, stored: RunConfig) -> List[str]:
    """Field-level differences in everything a checkpoint's tensors depend on."""
    a = flatten(current.architecture())
    b = flatten(stored.architecture())
    return [
        "%s: checkpoint has %r, run has %r" % (k, b.get(k), a.get(k))
        for k in sorted(set(a) | set(b))
        if a.get(k) != b.get(k)
    ]


def check_compatible(current: RunConfig, stored: RunConfig, source: str = "checkpoint"):
    diff = architecture_diff(current, stored)
    if diff:
        raise ConfigurationError(
            "%s is incompatible with the run configuration:\n  %s" % (source, "\n  ".join(diff)),
            keys=[d.split(":", 1)[0] for d in diff],
        )
