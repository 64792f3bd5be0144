import hashlib
import json
import pathlib
from enum import Enum
from typing import List, Optional, Tuple, Union

from pydantic import BaseModel, StrictInt, root_validator, validator


class AudioFrontendConfig(BaseModel):
    """Log-Mel filterbank front end. Window and hop are in milliseconds; `mel_fmax` defaults to Nyquist."""

    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 128
    target_frames: int = 1024
    mel_fmin: float = 0.0
    mel_fmax: Optional[float] = None
    log_floor: float = 1e-10
    audio_mean: float = -5.081
    audio_std: float = 4.4849

    @validator("hop_ms")
    def _hop_within_window(cls, v, values):
        assert v > 0, "hop_ms must be positive"
        if "window_ms" in values:
            assert values["window_ms"] > v, "window_ms must exceed hop_ms"
        return v

    @validator("n_mels", "target_frames", "sample_rate")
    def _at_least_one(cls, v):
        assert v >= 1, "must be >= 1"
        return v

    @validator("log_floor")
    def _floor_positive(cls, v):
        assert v > 0, "log_floor must be positive"
        return v

    @property
    def window_length(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def fmax(self) -> float:
        return self.mel_fmax if self.mel_fmax is not None else self.sample_rate / 2.0


class PatchConfig(BaseModel):
    """Patch geometry. `audio_patch` is (mel bins, frames); `video_tubelet` is (frames, height, width)."""

    audio_patch: Tuple[int, int] = (16, 16)
    video_tubelet: Tuple[int, int, int] = (2, 16, 16)
    image_size: int = 224
    video_frames: int = 8
    channels: int = 3

    @validator("audio_patch", "video_tubelet")
    def _positive_dims(cls, v):
        assert all(d >= 1 for d in v), "patch dims must be positive"
        return v

    @validator("image_size", "video_frames", "channels")
    def _positive(cls, v):
        assert v >= 1, "must be >= 1"
        return v

    @property
    def audio_patch_volume(self) -> int:
        return self.audio_patch[0] * self.audio_patch[1]

    @property
    def video_patch_volume(self) -> int:
        t, h, w = self.video_tubelet
        return t * h * w * self.channels


class PositionalInit(str, Enum):
    trunc_normal = "trunc_normal"
    sincos = "sincos"


class ModelConfig(BaseModel):
    embed_dim: int = 768
    modality_encoder_depth: int = 11
    joint_encoder_depth: int = 1
    decoder_depth: int = 8
    decoder_dim: Optional[int] = None
    num_heads: Optional[int] = None
    decoder_num_heads: Optional[int] = None
    mlp_ratio: float = 4.0
    pos_init: PositionalInit = PositionalInit.trunc_normal
    layer_norm_eps: float = 1e-6

    @validator("modality_encoder_depth", "joint_encoder_depth", "decoder_depth", "embed_dim")
    def _at_least_one(cls, v):
        assert v >= 1, "must be >= 1"
        return v

    @root_validator(skip_on_failure=True)
    def _resolve_dims(cls, values):
        embed_dim = values["embed_dim"]
        if values.get("decoder_dim") is None:
            values["decoder_dim"] = int(round(embed_dim / 1.5))
        if values.get("num_heads") is None:
            values["num_heads"] = max(1, embed_dim // 64)
        if values.get("decoder_num_heads") is None:
            values["decoder_num_heads"] = max(1, values["decoder_dim"] // 64)

        assert embed_dim % values["num_heads"] == 0, "embed_dim must be divisible by num_heads"
        assert (
            values["decoder_dim"] % values["decoder_num_heads"] == 0
        ), "decoder_dim must be divisible by decoder_num_heads"
        return values


class LossConfig(BaseModel):
    contrastive_weight: float = 0.01
    temperature: float = 0.05
    symmetric: bool = True
    normalize_audio_target: bool = False
    normalize_video_target: bool = True

    @validator("temperature")
    def _temperature_positive(cls, v):
        assert v > 0, "temperature must be positive"
        return v

    @validator("contrastive_weight")
    def _weight_non_negative(cls, v):
        assert v >= 0, "contrastive_weight must be >= 0"
        return v


class PretrainRecipe(BaseModel):
    epochs: int = 25
    base_lr: float = 1e-4
    decay: float = 0.5
    decay_period: int = 5
    mask_ratio: float = 0.75
    batch_size: int = 8
    weight_decay: float = 0.0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    checkpoint_every: int = 5
    max_steps: Optional[int] = None

    @validator("mask_ratio")
    def _ratio_range(cls, v):
        assert 0 <= v < 1, "mask_ratio must be in [0, 1)"
        return v

    @validator("epochs", "decay_period", "checkpoint_every")
    def _at_least_one(cls, v):
        assert v >= 1, "must be >= 1"
        return v

    @validator("batch_size")
    def _contrastive_batch(cls, v):
        assert v >= 2, "the contrastive loss needs at least 2 clips per batch"
        return v

    @validator("base_lr")
    def _lr_positive(cls, v):
        assert v > 0, "base_lr must be positive"
        return v


class TaskKind(str, Enum):
    classification = "classification"
    regression = "regression"


class LossKind(str, Enum):
    cross_entropy = "cross_entropy"
    mae = "mae"


class FinetuneRecipe(BaseModel):
    task: str
    kind: TaskKind
    num_outputs: int
    epochs: int
    batch_size: int = 8
    encoder_lr: float
    head_lr: float
    loss: LossKind
    mask_ratio: float = 0.0
    weight_decay: float = 0.0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @validator("mask_ratio")
    def _no_masking(cls, v):
        assert v == 0, "fine-tuning never masks tokens"
        return v

    @validator("encoder_lr", "head_lr")
    def _lr_positive(cls, v):
        assert v > 0, "learning rates must be positive"
        return v

    @validator("num_outputs", "epochs", "batch_size")
    def _at_least_one(cls, v):
        assert v >= 1, "must be >= 1"
        return v

    @root_validator(skip_on_failure=True)
    def _loss_matches_kind(cls, values):
        expected = LossKind.cross_entropy if values["kind"] == TaskKind.classification else LossKind.mae
        assert values["loss"] == expected, "%s tasks use the %s loss" % (values["kind"].value, expected.value)
        return values

    def describe_head(self) -> str:
        if self.kind == TaskKind.classification:
            return "head: %d classes, CE, %d epochs, batch %d" % (self.num_outputs, self.epochs, self.batch_size)
        return "head: %d traits, MAE, %d epochs, batch %d" % (self.num_outputs, self.epochs, self.batch_size)

    def describe_learning_rates(self) -> str:
        return "lr: encoder %g, head %g" % (self.encoder_lr, self.head_lr)


class VideoFormat(str, Enum):
    npy = "npy"
    png = "png"


class LabelKind(str, Enum):
    classes = "classes"
    traits = "traits"


class SyntheticSpec(BaseModel):
    num_classes: int = 4
    noise: float = 0.05
    clip_seconds: float = 0.7
    num_frames: int = 16
    seed: int = 0
    video_format: VideoFormat = VideoFormat.npy
    label_kind: LabelKind = LabelKind.classes
    split: str = "train"

    @validator("noise")
    def _noise_non_negative(cls, v):
        assert v >= 0, "noise must be >= 0"
        return v

    @validator("num_classes", "num_frames")
    def _at_least_one(cls, v):
        assert v >= 1, "must be >= 1"
        return v


class ClipRecord(BaseModel):
    clip_id: str
    audio_path: str
    frames_path: str
    label: Optional[Union[StrictInt, List[float]]] = None
    split: str = "train"

    def resolve(self, root: pathlib.Path) -> "ClipRecord":
        return self.copy(
            update={
                "audio_path": str(root / self.audio_path),
                "frames_path": str(root / self.frames_path),
            }
        )


class RunConfig(BaseModel):
    """The merged configuration of a run. It is serialized into every output directory."""

    frontend: AudioFrontendConfig = AudioFrontendConfig()
    patch: PatchConfig = PatchConfig()
    model: ModelConfig = ModelConfig()
    loss: LossConfig = LossConfig()
    pretrain: PretrainRecipe = PretrainRecipe()
    finetune: Optional[FinetuneRecipe] = None
    seed: int = 0
    output_dir: str = "runs/socialmae"
    data_dir: Optional[str] = None

    @root_validator(skip_on_failure=True)
    def _geometry(cls, values):
        frontend, patch = values["frontend"], values["patch"]
        assert frontend.n_mels % patch.audio_patch[0] == 0, "frontend.n_mels must be divisible by audio_patch[0]"
        assert (
            frontend.target_frames % patch.audio_patch[1] == 0
        ), "frontend.target_frames must be divisible by audio_patch[1]"
        t, h, w = patch.video_tubelet
        assert patch.video_frames % t == 0, "patch.video_frames must be divisible by video_tubelet[0]"
        assert patch.image_size % h == 0 and patch.image_size % w == 0, "patch.image_size must be divisible by tubelet"
        return values

    @property
    def audio_tokens(self) -> int:
        return (self.frontend.n_mels // self.patch.audio_patch[0]) * (
            self.frontend.target_frames // self.patch.audio_patch[1]
        )

    @property
    def video_tokens(self) -> int:
        t, h, w = self.patch.video_tubelet
        return (self.patch.video_frames // t) * (self.patch.image_size // h) * (self.patch.image_size // w)

    def architecture(self) -> dict:
        """The subset of the config a checkpoint's tensors depend on."""
        return {
            "frontend": {"n_mels": self.frontend.n_mels, "target_frames": self.frontend.target_frames},
            "patch": json.loads(self.patch.json()),
            "model": json.loads(self.model.json(exclude={"pos_init"})),
        }

    def config_hash(self) -> str:
        canonical = json.dumps(json.loads(self.json()), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
