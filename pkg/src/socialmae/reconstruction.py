"""
reconstruction.py
=================

Masked reconstruction of a single clip with a pre-trained model, and its rendering as
image triptychs: the original input, the input with masked patches grayed out, and the
reconstruction (visible patches from the input, masked patches from the decoder).
"""

import pathlib
from typing import List, Tuple

import numpy as np
import torch
from matplotlib import image as mpimg
from pydantic import BaseModel

from .data import denormalize_frames
from .errors import UsageError
from .model import SocialMAE
from .numerics import load_checkpoint
from .runconfig import validate
from .tokenizer import MaskPlan, sample_mask, select_visible, unpatchify_audio, unpatchify_video
from .types import RunConfig

GRAY = 0.5


class Reconstruction(BaseModel):
    """Spectrograms are (n_mels, frames) in normalized units; frames are (T, H, W, C) in [0, 1]."""

    audio_original: np.ndarray
    audio_masked: np.ndarray
    audio_reconstructed: np.ndarray
    audio_mask: np.ndarray
    video_original: np.ndarray
    video_masked: np.ndarray
    video_reconstructed: np.ndarray
    video_mask: np.ndarray
    audio_masked_mae: float
    video_masked_mae: float

    class Config:
        arbitrary_types_allowed = True


def load_pretrained(checkpoint) -> Tuple[SocialMAE, RunConfig]:
    tensors, stored, _ = load_checkpoint(checkpoint)
    if not any(k.startswith("decoder.") for k in tensors):
        raise UsageError("%s has no decoder (a fine-tuned checkpoint cannot reconstruct)" % checkpoint)
    cfg = validate(stored)
    model = SocialMAE(cfg)
    model.load_state_dict(tensors, strict=True)
    model.eval()
    return model, cfg


def _denormalize_predictions(pred: torch.Tensor, raw: torch.Tensor, plan: MaskPlan, normalized: bool) -> torch.Tensor:
    """Undo per-patch target normalization with the mean statistics of the visible patches only."""
    if not normalized or plan.visible_indices.shape[1] == 0:
        return pred
    visible = raw[0, plan.visible_indices[0]]
    mean = visible.mean(dim=-1).mean()
    std = ((visible.var(dim=-1, unbiased=False) + 1e-6) ** 0.5).mean()
    return pred * std + mean


def _mask_volume(plan: MaskPlan, n: int, volume: int) -> torch.Tensor:
    """(1, N, volume) with ones over masked tokens."""
    m = torch.zeros((1, n, volume))
    m[0, plan.masked_indices[0]] = 1.0
    return m


def _masked_mae(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    if not mask.any():
        return 0.0
    return float(np.abs(a - b)[mask].mean())


@torch.no_grad()
def reconstruct(
    model: SocialMAE, cfg: RunConfig, audio: torch.Tensor, frames: torch.Tensor, mask_ratio: float, mask_seed: int
) -> Reconstruction:
    """`audio` is (n_mels, frames) normalized, `frames` (T, H, W, C) normalized, both for one clip."""
    g = torch.Generator()
    g.manual_seed(mask_seed)
    audio_plan = sample_mask(cfg.audio_tokens, mask_ratio, g)
    video_plan = sample_mask(cfg.video_tokens, mask_ratio, g)

    audio_seq, video_seq = model.encoder.tokenize(audio, frames)
    out = model.encoder(select_visible(audio_seq, audio_plan), select_visible(video_seq, video_plan))
    pred_audio, pred_video = model.decode(out.joint_tokens, audio_plan, video_plan)
    pred_audio = _denormalize_predictions(
        pred_audio, audio_seq.raw_patches, audio_plan, cfg.loss.normalize_audio_target
    )
    pred_video = _denormalize_predictions(
        pred_video, video_seq.raw_patches, video_plan, cfg.loss.normalize_video_target
    )

    n_mels, n_frames = cfg.frontend.n_mels, cfg.frontend.target_frames
    t, size = cfg.patch.video_frames, cfg.patch.image_size

    def audio_grid(patches):
        return unpatchify_audio(patches, n_mels, n_frames, cfg.patch)[0].numpy()

    def video_grid(patches):
        return unpatchify_video(patches, t, size, size, cfg.patch)[0].numpy()

    am = _mask_volume(audio_plan, cfg.audio_tokens, audio_seq.raw_patches.shape[-1])
    vm = _mask_volume(video_plan, cfg.video_tokens, video_seq.raw_patches.shape[-1])
    audio_mask = audio_grid(am) > 0.5
    video_mask = video_grid(vm) > 0.5

    a_orig = audio_grid(audio_seq.raw_patches)
    a_recon = audio_grid(torch.where(am > 0.5, pred_audio, audio_seq.raw_patches))
    v_orig = np.clip(denormalize_frames(video_grid(video_seq.raw_patches)), 0.0, 1.0)
    v_recon = np.clip(
        denormalize_frames(video_grid(torch.where(vm > 0.5, pred_video, video_seq.raw_patches))), 0.0, 1.0
    )

    return Reconstruction(
        audio_original=a_orig,
        audio_masked=np.where(audio_mask, (a_orig.min() + a_orig.max()) / 2.0, a_orig),
        audio_reconstructed=a_recon,
        audio_mask=audio_mask,
        video_original=v_orig,
        video_masked=np.where(video_mask, GRAY, v_orig),
        video_reconstructed=v_recon,
        video_mask=video_mask,
        audio_masked_mae=_masked_mae(a_orig, a_recon, audio_mask),
        video_masked_mae=_masked_mae(v_orig, v_recon, video_mask),
    )


def save_triptychs(result: Reconstruction, output_dir) -> List[pathlib.Path]:
    """PNG files per frame and for the spectrogram; spectrograms share the original's min/max gray scale."""
    out = pathlib.Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    vmin, vmax = float(result.audio_original.min()), float(result.audio_original.max())
    for kind in ("original", "masked", "reconstructed"):
        path = out / ("audio_%s.png" % kind)
        grid = getattr(result, "audio_" + kind)
        mpimg.imsave(str(path), grid[::-1], cmap="gray", vmin=vmin, vmax=vmax, metadata={"Software": None})
        written.append(path)

    for f in range(result.video_original.shape[0]):
        for kind in ("original", "masked", "reconstructed"):
            path = out / ("frame%02d_%s.png" % (f, kind))
            mpimg.imsave(str(path), getattr(result, "video_" + kind)[f], metadata={"Software": None})
            written.append(path)
    return written
