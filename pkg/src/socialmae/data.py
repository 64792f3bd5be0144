"""
data.py
=======

Manifests, clip loading and the synthetic audiovisual generator.

A manifest is a JSON Lines file with one :py:class:`~socialmae.types.ClipRecord` per line;
paths are relative to the manifest's directory. Audio is a mono WAV at the configured
sample rate. Video is either a directory of PNG frames or a single ``.npy`` tensor of
shape (frames, height, width, channels).
"""

import json
import pathlib
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
import toml
import torch
import torch.nn.functional as F
from matplotlib import image as mpimg
from pydantic import BaseModel, validator
from scipy.io import wavfile
from torch.utils.data import Dataset

from .audio_frontend import compute_stats, spectrogram_from_waveform, waveform_to_logmel
from .config import get_logger
from .errors import DataError, UsageError
from .types import (
    AudioFrontendConfig,
    ClipRecord,
    FinetuneRecipe,
    LabelKind,
    PatchConfig,
    RunConfig,
    SyntheticSpec,
    TaskKind,
    VideoFormat,
)

log = get_logger("data")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
NUM_TRAITS = 5
TRAIT_NAMES = ["Ope.", "Con.", "Ext.", "Agr.", "Neu."]

MANIFEST_FILE = "manifest.jsonl"
STATS_FILE = "stats.toml"
SPEC_FILE = "spec.toml"


class SampleMode(str, Enum):
    train = "train"
    eval = "eval"


class Manifest(BaseModel):
    records: List[ClipRecord]
    root: str = "."

    @validator("records")
    def _unique_ids(cls, v):
        seen = set()
        for r in v:
            assert r.clip_id not in seen, "duplicate clip id %s" % r.clip_id
            seen.add(r.clip_id)
        return v

    def __len__(self):
        return len(self.records)

    @classmethod
    def load(cls, path) -> "Manifest":
        path = pathlib.Path(path)
        if path.is_dir():
            path = path / MANIFEST_FILE
        if not path.exists():
            raise DataError("manifest %s does not exist" % path)
        records = []
        with open(path, "r") as f:
            for lineno, line in enumerate(f):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(ClipRecord.parse_obj(json.loads(line)))
                except ValueError as e:
                    raise DataError("%s:%d: invalid record: %s" % (path, lineno + 1, e))
        return cls(records=records, root=str(path.parent))

    def dump(self, path):
        with open(path, "w") as f:
            for r in self.records:
                f.write(r.json() + "\n")

    def split(self, name: Optional[str]) -> "Manifest":
        if name is None:
            return self
        return Manifest(records=[r for r in self.records if r.split == name], root=self.root)

    def resolved(self, record: ClipRecord) -> ClipRecord:
        return record.resolve(pathlib.Path(self.root))

    def check_labels(self, recipe: FinetuneRecipe):
        """Every record carries a label of the task's arity."""
        for r in self.records:
            if recipe.kind == TaskKind.classification:
                if not isinstance(r.label, int) or not 0 <= r.label < recipe.num_outputs:
                    raise DataError(
                        "expected a class id in [0, %d), got %r" % (recipe.num_outputs, r.label), r.clip_id
                    )
            elif not isinstance(r.label, list) or len(r.label) != recipe.num_outputs:
                raise DataError("expected %d trait scores, got %r" % (recipe.num_outputs, r.label), r.clip_id)


def read_wav(path, sample_rate: int, clip_id: Optional[str] = None) -> np.ndarray:
    """Decode a WAV file to a mono float64 waveform in [-1, 1]."""
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as e:
        raise DataError("cannot read audio %s: %s" % (path, e), clip_id)
    if rate != sample_rate:
        raise DataError("audio %s is %d Hz, expected %d Hz" % (path, rate, sample_rate), clip_id)

    if data.dtype == np.int16:
        wave = data / 32768.0
    elif data.dtype == np.int32:
        wave = data / 2147483648.0
    elif data.dtype == np.uint8:
        wave = (data.astype(np.float64) - 128.0) / 128.0
    else:
        wave = data.astype(np.float64)

    if wave.ndim == 2:
        log.warning("Downmixing %d-channel audio for clip %s", wave.shape[1], clip_id)
        wave = wave.mean(axis=1)
    return wave.astype(np.float64)


def read_frames(path, clip_id: Optional[str] = None) -> np.ndarray:
    """All frames of a clip as float32 (frames, height, width, channels) in [0, 1]."""
    path = pathlib.Path(path)
    try:
        if path.is_dir():
            files = sorted(path.glob("*.png"))
            if not files:
                raise DataError("no PNG frames in %s" % path, clip_id)
            frames = np.stack([mpimg.imread(str(f))[..., :3] for f in files])
        else:
            frames = np.load(str(path))
    except (OSError, ValueError) as e:
        raise DataError("cannot read frames %s: %s" % (path, e), clip_id)

    if frames.ndim != 4:
        raise DataError("expected (frames, height, width, channels), got shape %s" % (frames.shape,), clip_id)
    if frames.dtype == np.uint8:
        frames = frames / 255.0
    return frames.astype(np.float32)


def sample_frame_indices(
    total: int, count: int, mode: SampleMode, rng: Optional[np.random.Generator] = None, clip_id: Optional[str] = None
) -> List[int]:
    """Train: sorted distinct random indices. Eval: uniform stride from 0. Short clips repeat their last frame."""
    if total < 1:
        raise DataError("clip has no frames", clip_id)
    if total < count:
        log.warning("Clip %s has %d frames, repeating the last one to reach %d", clip_id, total, count)
        return list(range(total)) + [total - 1] * (count - total)
    if mode == SampleMode.train:
        rng = rng if rng is not None else np.random.default_rng()
        return sorted(int(i) for i in rng.choice(total, size=count, replace=False))
    stride = total // count
    return [i * stride for i in range(count)]


def resize_frames(frames: np.ndarray, size: int) -> np.ndarray:
    if frames.shape[1] == size and frames.shape[2] == size:
        return frames
    x = torch.from_numpy(np.ascontiguousarray(frames)).permute(0, 3, 1, 2)
    x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return x.permute(0, 2, 3, 1).numpy()


def load_clip(
    record: ClipRecord,
    frontend: AudioFrontendConfig,
    patch: PatchConfig,
    mode: SampleMode = SampleMode.eval,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (mono waveform, sampled frames (video_frames, image_size, image_size, C) in [0, 1])."""
    wave = read_wav(record.audio_path, frontend.sample_rate, record.clip_id)
    frames = read_frames(record.frames_path, record.clip_id)
    if frames.shape[-1] < patch.channels:
        raise DataError("expected %d channels, got %d" % (patch.channels, frames.shape[-1]), record.clip_id)

    idx = sample_frame_indices(frames.shape[0], patch.video_frames, mode, rng, record.clip_id)
    return wave, resize_frames(frames[idx, ..., : patch.channels], patch.image_size)


def normalize_frames(frames: np.ndarray) -> np.ndarray:
    return ((frames - np.asarray(IMAGENET_MEAN)) / np.asarray(IMAGENET_STD)).astype(np.float32)


def denormalize_frames(frames: np.ndarray) -> np.ndarray:
    return (frames * np.asarray(IMAGENET_STD) + np.asarray(IMAGENET_MEAN)).astype(np.float32)


def load_audio_stats(directory) -> Optional[Tuple[float, float]]:
    path = pathlib.Path(directory) / STATS_FILE
    if not path.exists():
        return None
    stats = toml.load(path)["frontend"]
    return float(stats["audio_mean"]), float(stats["audio_std"])


def manifest_stats(manifest: Manifest, frontend: AudioFrontendConfig, parallelism: int = 1) -> Tuple[float, float]:
    """Mean and std of the raw log-Mel values over every clip of a manifest."""

    def logmel(record):
        record = manifest.resolved(record)
        try:
            return waveform_to_logmel(read_wav(record.audio_path, frontend.sample_rate, record.clip_id), frontend)
        except DataError as e:
            raise DataError(str(e), record.clip_id) if e.clip_id is None else e

    with ThreadPoolExecutor(max_workers=parallelism) as t:
        specs = list(t.map(logmel, manifest.records))
    return compute_stats(specs)


class ClipDataset(Dataset):
    """Front-end-processed clips of a manifest, as tensors ready for tokenization.

    Items are dicts with ``audio`` (n_mels, target_frames), ``frames`` (T, H, W, C) normalized,
    ``label`` and ``clip_id``. Train-mode frame sampling is seeded by (seed, epoch, index).
    """

    def __init__(self, manifest: Manifest, cfg: RunConfig, mode: SampleMode = SampleMode.eval, seed: int = 0):
        self.manifest = manifest
        self.cfg = cfg
        self.mode = SampleMode(mode)
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self):
        return len(self.manifest)

    def __getitem__(self, i: int) -> Dict:
        record = self.manifest.resolved(self.manifest.records[i])
        rng = np.random.default_rng([self.seed, self.epoch, i])
        wave, frames = load_clip(record, self.cfg.frontend, self.cfg.patch, self.mode, rng)
        try:
            spec = spectrogram_from_waveform(wave, self.cfg.frontend)
        except DataError as e:
            raise DataError(str(e), record.clip_id)

        if record.label is None:
            label = torch.tensor(-1)
        elif isinstance(record.label, list):
            label = torch.tensor(record.label, dtype=torch.float32)
        else:
            label = torch.tensor(record.label)

        return {
            "audio": torch.from_numpy(spec.grid),
            "frames": torch.from_numpy(normalize_frames(frames)),
            "label": label,
            "clip_id": record.clip_id,
        }


def class_tones(c: int, num_classes: int) -> Tuple[float, float]:
    base = 200.0 + 3200.0 * c / num_classes
    return base, 1.25 * base


def class_pattern(c: int) -> Dict:
    """Spatial frequencies, drift speed and color of a class; a function of the class alone."""
    color = np.random.default_rng(1000 + c).uniform(0.3, 1.0, size=3)
    return {"fy": 1 + c % 3, "fx": 1 + c // 3, "drift": 0.3 * (1 + c % 2), "color": color}


def class_traits(c: int, num_classes: int) -> List[float]:
    return [round(0.1 + 0.8 * ((c + k) % num_classes) / max(num_classes - 1, 1), 4) for k in range(NUM_TRAITS)]


def synthesize_clip(
    c: int, spec: SyntheticSpec, frontend: AudioFrontendConfig, image_size: int, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """Class tone mixture plus noise, and the class pattern drifting over frames plus noise."""
    n = int(round(spec.clip_seconds * frontend.sample_rate))
    t = np.arange(n) / frontend.sample_rate
    phases = rng.uniform(0, 2 * np.pi, size=2)
    wave = sum(0.25 * np.sin(2 * np.pi * f * t + p) for f, p in zip(class_tones(c, spec.num_classes), phases))
    wave = wave + spec.noise * rng.standard_normal(n)

    pattern = class_pattern(c)
    yy, xx = np.meshgrid(np.arange(image_size), np.arange(image_size), indexing="ij")
    offset = rng.uniform(0, 2 * np.pi)
    frames = []
    for f in range(spec.num_frames):
        arg = 2 * np.pi * (pattern["fy"] * yy + pattern["fx"] * xx) / image_size + offset + pattern["drift"] * f
        frames.append(0.5 + 0.4 * np.sin(arg)[..., None] * pattern["color"][None, None, :])
    video = np.stack(frames) + spec.noise * rng.standard_normal((spec.num_frames, image_size, image_size, 3))
    return wave.astype(np.float32), np.clip(video, 0.0, 1.0).astype(np.float32)


def generate_synthetic(
    spec: SyntheticSpec,
    n_clips: int,
    output_dir,
    frontend: AudioFrontendConfig = AudioFrontendConfig(),
    image_size: int = 32,
    parallelism: int = 1,
) -> Manifest:
    """Write a self-contained dataset directory: WAVs, frames, manifest, spec and audio stats."""
    if n_clips < spec.num_classes:
        raise UsageError("need at least one clip per class (%d clips < %d classes)" % (n_clips, spec.num_classes))

    out = pathlib.Path(output_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    (out / "frames").mkdir(parents=True, exist_ok=True)

    def write(i: int) -> ClipRecord:
        c = i % spec.num_classes
        clip_id = "clip%05d" % i
        wave, video = synthesize_clip(c, spec, frontend, image_size, np.random.default_rng([spec.seed, i]))

        audio_path = pathlib.Path("audio") / (clip_id + ".wav")
        wavfile.write(str(out / audio_path), frontend.sample_rate, wave)
        if spec.video_format == VideoFormat.npy:
            frames_path = pathlib.Path("frames") / (clip_id + ".npy")
            np.save(str(out / frames_path), video)
        else:
            frames_path = pathlib.Path("frames") / clip_id
            (out / frames_path).mkdir(exist_ok=True)
            for f, frame in enumerate(video):
                mpimg.imsave(str(out / frames_path / ("%04d.png" % f)), frame, metadata={"Software": None})

        label = c if spec.label_kind == LabelKind.classes else class_traits(c, spec.num_classes)
        return ClipRecord(
            clip_id=clip_id,
            audio_path=str(audio_path),
            frames_path=str(frames_path),
            label=label,
            split=spec.split,
        )

    with ThreadPoolExecutor(max_workers=parallelism) as t:
        records = list(t.map(write, range(n_clips)))

    manifest = Manifest(records=records, root=str(out))
    manifest.dump(out / MANIFEST_FILE)
    with open(out / SPEC_FILE, "w") as f:
        toml.dump({"synthetic": json.loads(spec.json()), "clips": n_clips}, f)

    mean, std = manifest_stats(manifest, frontend, parallelism)
    with open(out / STATS_FILE, "w") as f:
        toml.dump({"frontend": {"audio_mean": mean, "audio_std": std}}, f)

    log.info("Wrote %d clips (%d classes) to %s", n_clips, spec.num_classes, out)
    return manifest
