"""
tokenizer.py
============

Spectrograms and frame stacks become token sequences here: non-overlapping patches are
flattened, linearly projected, and given a trainable positional embedding plus a trainable
modality embedding. Random mask plans partition a sequence into masked and visible tokens.
"""

import math
from enum import Enum
from typing import Tuple

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel

from . import numerics
from .errors import ConfigurationError, InternalError, UsageError
from .types import PatchConfig, PositionalInit, RunConfig


class Modality(str, Enum):
    audio = "audio"
    video = "video"


class TokenSequence(BaseModel):
    """A batch of token sequences of one modality.

    `embeddings` is (B, N, D), `patch_index` (B, N) maps each token to its patch in the
    full grid, and `raw_patches` (B, N, V) holds the flattened source patches.
    """

    embeddings: torch.Tensor
    modality: Modality
    patch_index: torch.Tensor
    raw_patches: torch.Tensor

    class Config:
        arbitrary_types_allowed = True

    def __len__(self):
        return self.embeddings.shape[1]


class MaskPlan(BaseModel):
    """Per-item disjoint masked/visible token indices, both sorted ascending. Shapes (B, K) and (B, N - K)."""

    masked_indices: torch.Tensor
    visible_indices: torch.Tensor
    ratio: float
    num_tokens: int

    class Config:
        arbitrary_types_allowed = True

    @property
    def num_masked(self) -> int:
        return self.masked_indices.shape[1]


def masked_count(n: int, p: float) -> int:
    return int(math.floor(p * n + 0.5))


def audio_grid(n_mels: int, frames: int, patch: PatchConfig) -> Tuple[int, int]:
    pm, pt = patch.audio_patch
    if n_mels % pm or frames % pt:
        raise ConfigurationError(
            "spectrogram %dx%d is not divisible into %dx%d patches" % (n_mels, frames, pm, pt),
            keys=["patch.audio_patch"],
        )
    return n_mels // pm, frames // pt


def video_grid(frames: int, height: int, width: int, patch: PatchConfig) -> Tuple[int, int, int]:
    t, h, w = patch.video_tubelet
    if frames % t or height % h or width % w:
        raise ConfigurationError(
            "video %dx%dx%d is not divisible into %dx%dx%d tubelets" % (frames, height, width, t, h, w),
            keys=["patch.video_tubelet", "patch.video_frames", "patch.image_size"],
        )
    return frames // t, height // h, width // w


def patchify_audio(spec: torch.Tensor, patch: PatchConfig) -> torch.Tensor:
    """(B, n_mels, frames) -> (B, N, pm * pt), tokens ordered (mel row, frame column) row-major."""
    b, m, t = spec.shape
    rows, cols = audio_grid(m, t, patch)
    pm, pt = patch.audio_patch
    x = spec.reshape(b, rows, pm, cols, pt).permute(0, 1, 3, 2, 4)
    return x.reshape(b, rows * cols, pm * pt)


def unpatchify_audio(patches: torch.Tensor, n_mels: int, frames: int, patch: PatchConfig) -> torch.Tensor:
    b = patches.shape[0]
    rows, cols = audio_grid(n_mels, frames, patch)
    pm, pt = patch.audio_patch
    x = patches.reshape(b, rows, cols, pm, pt).permute(0, 1, 3, 2, 4)
    return x.reshape(b, n_mels, frames)


def patchify_video(frames: torch.Tensor, patch: PatchConfig) -> torch.Tensor:
    """(B, T, H, W, C) -> (B, N, t * h * w * C), tokens ordered (tubelet time, row, col) row-major."""
    b, t_, h_, w_, c = frames.shape
    gt, gh, gw = video_grid(t_, h_, w_, patch)
    t, h, w = patch.video_tubelet
    # Grid axes first, then the within-tubelet axes.
    x = frames.reshape(b, gt, t, gh, h, gw, w, c).permute(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(b, gt * gh * gw, t * h * w * c)


def unpatchify_video(patches: torch.Tensor, frames: int, height: int, width: int, patch: PatchConfig) -> torch.Tensor:
    b = patches.shape[0]
    gt, gh, gw = video_grid(frames, height, width, patch)
    t, h, w = patch.video_tubelet
    c = patches.shape[-1] // (t * h * w)
    x = patches.reshape(b, gt, gh, gw, t, h, w, c).permute(0, 1, 4, 2, 5, 3, 6, 7)
    return x.reshape(b, frames, height, width, c)


def sincos_table(n: int, dim: int) -> torch.Tensor:
    half = dim // 2
    omega = 1.0 / (10000 ** (np.arange(half, dtype=np.float64) / max(half, 1)))
    angles = np.arange(n, dtype=np.float64)[:, None] * omega[None, :]
    table = np.zeros((n, dim), dtype=np.float64)
    table[:, :half] = np.sin(angles)
    table[:, half : 2 * half] = np.cos(angles)
    return torch.from_numpy(table).float()


class EmbeddingTables(nn.Module):
    """Patch projections, positional tables and modality embeddings for both modalities."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        dim = cfg.model.embed_dim
        self.audio_proj = nn.Linear(cfg.patch.audio_patch_volume, dim)
        self.video_proj = nn.Linear(cfg.patch.video_patch_volume, dim)
        self.audio_pos = nn.Parameter(torch.zeros(cfg.audio_tokens, dim))
        self.video_pos = nn.Parameter(torch.zeros(cfg.video_tokens, dim))
        self.audio_modality = nn.Parameter(torch.zeros(dim))
        self.video_modality = nn.Parameter(torch.zeros(dim))

        for proj in (self.audio_proj, self.video_proj):
            nn.init.xavier_uniform_(proj.weight)
            nn.init.zeros_(proj.bias)
        for pos in (self.audio_pos, self.video_pos):
            if cfg.model.pos_init == PositionalInit.sincos:
                with torch.no_grad():
                    pos.copy_(sincos_table(*pos.shape))
            else:
                nn.init.trunc_normal_(pos, std=0.02)
        nn.init.trunc_normal_(self.audio_modality, std=0.02)
        nn.init.trunc_normal_(self.video_modality, std=0.02)

    def parts(self, modality: Modality):
        if modality == Modality.audio:
            return self.audio_proj, self.audio_pos, self.audio_modality
        return self.video_proj, self.video_pos, self.video_modality


def _embed(raw: torch.Tensor, modality: Modality, tables: EmbeddingTables) -> TokenSequence:
    proj, pos, mod = tables.parts(modality)
    b, n, _ = raw.shape
    if n > pos.shape[0]:
        raise ConfigurationError(
            "%d %s tokens exceed the positional table of %d" % (n, modality.value, pos.shape[0]),
            keys=["patch"],
        )
    x = numerics.linear(raw, proj.weight, proj.bias)
    x = numerics.add(numerics.add(x, pos[:n]), mod)
    index = torch.arange(n).unsqueeze(0).expand(b, n)
    return TokenSequence(embeddings=x, modality=modality, patch_index=index, raw_patches=raw)


def tokenize_audio(spec: torch.Tensor, tables: EmbeddingTables, patch: PatchConfig) -> TokenSequence:
    """`spec` is (n_mels, frames) or a batch (B, n_mels, frames)."""
    if spec.dim() == 2:
        spec = spec.unsqueeze(0)
    return _embed(patchify_audio(spec, patch), Modality.audio, tables)


def tokenize_video(frames: torch.Tensor, tables: EmbeddingTables, patch: PatchConfig) -> TokenSequence:
    """`frames` is (T, H, W, C) or a batch (B, T, H, W, C) of normalized frames."""
    if frames.dim() == 4:
        frames = frames.unsqueeze(0)
    if frames.shape[-1] != patch.channels:
        raise ConfigurationError(
            "expected %d channels, got %d" % (patch.channels, frames.shape[-1]), keys=["patch.channels"]
        )
    return _embed(patchify_video(frames, patch), Modality.video, tables)


def sample_mask(n: int, p: float, generator: torch.Generator, batch_size: int = 1) -> MaskPlan:
    """Mask a uniformly random subset of round(p * n) tokens, independently for each batch item."""
    if not 0 <= p < 1:
        raise UsageError("mask ratio must be in [0, 1), got %g" % p)
    k = masked_count(n, p)
    # Both halves are sorted so visible tokens keep their original order.
    order = torch.rand((batch_size, n), generator=generator).argsort(dim=1)
    masked = order[:, :k].sort(dim=1).values
    visible = order[:, k:].sort(dim=1).values
    return MaskPlan(masked_indices=masked, visible_indices=visible, ratio=p, num_tokens=n)


def no_mask(n: int, batch_size: int = 1) -> MaskPlan:
    return MaskPlan(
        masked_indices=torch.zeros((batch_size, 0), dtype=torch.long),
        visible_indices=torch.arange(n).unsqueeze(0).repeat(batch_size, 1),
        ratio=0.0,
        num_tokens=n,
    )


def select_visible(seq: TokenSequence, plan: MaskPlan) -> TokenSequence:
    if plan.num_tokens != len(seq) or plan.visible_indices.shape[0] != seq.embeddings.shape[0]:
        raise InternalError(
            "mask plan over %d tokens x %d items does not match a %d-token sequence of %d items"
            % (plan.num_tokens, plan.visible_indices.shape[0], len(seq), seq.embeddings.shape[0])
        )
    idx = plan.visible_indices
    return TokenSequence(
        embeddings=numerics.gather(seq.embeddings, idx),
        modality=seq.modality,
        patch_index=torch.gather(seq.patch_index, 1, idx),
        raw_patches=numerics.gather(seq.raw_patches, idx),
    )
