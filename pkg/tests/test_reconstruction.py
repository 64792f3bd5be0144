import numpy as np
import pytest
import torch

from socialmae.errors import UsageError
from socialmae.model import SocialMAE, SocialMAEForTask
from socialmae.numerics import save_checkpoint
from socialmae.reconstruction import GRAY, load_pretrained, reconstruct, save_triptychs
from socialmae.runconfig import build_run_config


def _clip():
    g = torch.Generator().manual_seed(0)
    return torch.randn(32, 64, generator=g), torch.randn(4, 32, 32, 3, generator=g)


def test_masked_patches_are_grayed_and_visible_ones_kept(desk_cfg):
    model = SocialMAE(desk_cfg).eval()
    audio, frames = _clip()
    result = reconstruct(model, desk_cfg, audio, frames, 0.75, mask_seed=4)

    assert result.audio_mask.shape == (32, 64)
    assert result.video_mask.shape == (4, 32, 32, 3)
    assert result.audio_mask.mean() == pytest.approx(0.75)
    assert result.video_mask.mean() == pytest.approx(0.75)
    assert np.all(result.video_masked[result.video_mask] == GRAY)

    visible = ~result.audio_mask
    assert np.array_equal(result.audio_reconstructed[visible], result.audio_original[visible])
    assert np.array_equal(result.audio_original, audio.numpy())
    assert result.audio_masked_mae > 0


def test_zero_ratio_reconstructs_exactly(desk_cfg):
    result = reconstruct(SocialMAE(desk_cfg).eval(), desk_cfg, *_clip(), 0.0, mask_seed=0)
    assert not result.audio_mask.any()
    assert result.audio_masked_mae == 0.0
    assert np.array_equal(result.video_reconstructed, result.video_original)


def test_triptych_files(desk_cfg, tmp_path):
    result = reconstruct(SocialMAE(desk_cfg).eval(), desk_cfg, *_clip(), 0.5, mask_seed=1)
    written = save_triptychs(result, tmp_path)
    assert len(written) == 3 + 4 * 3
    assert (tmp_path / "frame03_masked.png").exists()


def test_pretrained_checkpoint_loads(pretrained_checkpoint):
    model, cfg = load_pretrained(pretrained_checkpoint)
    assert cfg.audio_tokens == 8
    assert not model.training


def test_task_checkpoint_cannot_reconstruct(tmp_path):
    cfg = build_run_config(presets=["crema-d"], desk_scale=True)
    path = tmp_path / "task.safetensors"
    save_checkpoint(path, SocialMAEForTask(cfg, cfg.finetune).state_dict(), cfg.json(), cfg.config_hash())
    with pytest.raises(UsageError):
        load_pretrained(path)


def test_masked_content_never_reaches_the_reconstruction():
    cfg = build_run_config(
        presets=["pretrain-default"], desk_scale=True, assignments=["loss.normalize_audio_target=true"]
    )
    model = SocialMAE(cfg).eval()
    audio, frames = _clip()
    first = reconstruct(model, cfg, audio, frames, 0.5, mask_seed=2)

    g = torch.Generator().manual_seed(9)
    audio_mask, video_mask = torch.from_numpy(first.audio_mask), torch.from_numpy(first.video_mask)
    audio2, frames2 = audio.clone(), frames.clone()
    audio2[audio_mask] = 5.0 * torch.randn(int(audio_mask.sum()), generator=g) + 3.0
    frames2[video_mask] = 4.0 * torch.randn(int(video_mask.sum()), generator=g) - 2.0
    second = reconstruct(model, cfg, audio2, frames2, 0.5, mask_seed=2)

    assert np.array_equal(second.audio_mask, first.audio_mask)
    assert np.allclose(second.audio_reconstructed, first.audio_reconstructed, atol=1e-5)
    assert np.allclose(second.video_reconstructed, first.video_reconstructed, atol=1e-5)


def test_constant_prediction_fills_masked_tubelets_with_one_color(desk_cfg, monkeypatch):
    model = SocialMAE(desk_cfg).eval()
    decode = model.decode
    monkeypatch.setattr(model, "decode", lambda *args: tuple(torch.zeros_like(p) for p in decode(*args)))
    result = reconstruct(model, desk_cfg, *_clip(), 0.75, mask_seed=3)

    for c in range(3):
        masked = result.video_reconstructed[..., c][result.video_mask[..., c]]
        assert np.ptp(masked) < 1e-6
    assert np.all(result.audio_reconstructed[result.audio_mask] == 0.0)
