import json
import os
import pathlib
import shutil

import pandas as pd
import pytest
import toml
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from socialmae import training
from socialmae.data import ClipDataset, Manifest, SampleMode, class_traits, load_audio_stats
from socialmae.errors import ConfigurationError, NonFiniteError, UsageError
from socialmae.model import InputMode, SocialMAEForTask
from socialmae.numerics import load_checkpoint
from socialmae.objectives import combine
from socialmae.reconstruction import reconstruct
from socialmae.runconfig import build_run_config
from socialmae.training import (
    FINETUNE_LOG,
    LAST_BATCH,
    PRETRAIN_LOG,
    Finetuner,
    GradientChecker,
    Pretrainer,
    evaluate,
    finetune,
    load_task_model,
    lr_at_epoch,
    pretrain,
)

ORACLES = pathlib.Path(__file__).parent / "oracles"


def _pretrain_cfg(data_dir, out, *assignments):
    return build_run_config(
        presets=["pretrain-default"],
        desk_scale=True,
        assignments=list(assignments),
        audio_stats=load_audio_stats(data_dir),
        output_dir=str(out),
    )


def _task_cfg(data_dir, out, preset="crema-d", *assignments):
    return build_run_config(
        presets=[preset],
        desk_scale=True,
        assignments=list(assignments),
        audio_stats=load_audio_stats(data_dir),
        output_dir=str(out),
    )


def test_lr_schedule_steps():
    assert lr_at_epoch(0, 1e-4, 0.5, 5) == 1e-4
    assert lr_at_epoch(4, 1e-4, 0.5, 5) == 1e-4
    assert lr_at_epoch(5, 1e-4, 0.5, 5) == 5e-5
    assert lr_at_epoch(10, 1e-4, 0.5, 5) == 2.5e-5


@given(
    st.floats(1e-6, 1e-2), st.floats(0.1, 1.0), st.integers(1, 10), st.integers(0, 60),
)
def test_lr_schedule_matches_repeated_decay(base, decay, period, epoch):
    lr = base
    for e in range(1, epoch + 1):
        if e % period == 0:
            lr *= decay
    assert lr_at_epoch(epoch, base, decay, period) == pytest.approx(lr, rel=1e-9)


def test_pretraining_schedule_and_outputs(synthetic_dir, tmp_path):
    out = tmp_path / "run"
    cfg = _pretrain_cfg(synthetic_dir, out)
    checkpoint, log = pretrain(cfg, Manifest.load(synthetic_dir))

    assert checkpoint == out / training.CHECKPOINT
    assert len(log.steps) == 25
    for record in log.steps:
        assert record["lr"] == 1e-4 * 0.5 ** (record["epoch"] // 5)
    for epoch in (5, 10, 15, 20, 25):
        assert (out / ("checkpoint-epoch%03d.safetensors" % epoch)).exists()
    assert (out / "config.toml").exists()

    frame = pd.read_csv(out / PRETRAIN_LOG)
    assert list(frame.columns) == ["step", "epoch", "Lc", "Lr", "L", "lr"]
    assert frame["L"].tolist() == pytest.approx((frame["Lc"] * 0.01 + frame["Lr"]).tolist(), rel=1e-5)
    assert log.config_hash == cfg.config_hash()


def test_pretraining_is_deterministic(synthetic_dir, tmp_path):
    runs = []
    for name in ("a", "b"):
        cfg = _pretrain_cfg(synthetic_dir, tmp_path / name, "pretrain.epochs=3")
        _, log = pretrain(cfg, Manifest.load(synthetic_dir))
        runs.append(log)
    for column in ("Lc", "Lr", "L"):
        assert runs[0].column(column) == runs[1].column(column)


def test_non_finite_loss_halts_with_the_batch(synthetic_dir, tmp_path, monkeypatch):
    def poisoned(model, audio, frames, audio_plan, video_plan, loss_cfg, clip_ids=None):
        return combine(float("nan"), 0.0, loss_cfg.contrastive_weight, clip_ids=clip_ids)

    monkeypatch.setattr(training, "pretrain_forward", poisoned)
    out = tmp_path / "run"
    with pytest.raises(NonFiniteError) as e:
        pretrain(_pretrain_cfg(synthetic_dir, out), Manifest.load(synthetic_dir))

    saved = json.loads((out / LAST_BATCH).read_text())
    assert saved["step"] == 0
    assert sorted(saved["clip_ids"]) == sorted(e.value.details)
    assert len(saved["clip_ids"]) == 8


def test_pretraining_needs_two_clips(synthetic_dir, tmp_path):
    manifest = Manifest.load(synthetic_dir)
    single = Manifest(records=manifest.records[:1], root=manifest.root)
    with pytest.raises(UsageError):
        Pretrainer(_pretrain_cfg(synthetic_dir, tmp_path), single)


def test_preset_head_line():
    cfg = build_run_config(presets=["crema-d"])
    assert cfg.finetune.describe_head() == "head: 6 classes, CE, 20 epochs, batch 8"
    assert cfg.finetune.encoder_lr == 1e-4 and cfg.finetune.head_lr == 1e-5
    assert cfg.finetune.describe_learning_rates() == "lr: encoder 0.0001, head 1e-05"
    assert build_run_config(presets=["first-impressions"]).finetune.describe_head() == (
        "head: 5 traits, MAE, 10 epochs, batch 8"
    )


def test_finetuning_never_masks(shared_dataset, pretrained_checkpoint, tmp_path, monkeypatch, capsys):
    def refuse(*args, **kwargs):
        raise AssertionError("fine-tuning sampled a mask")

    monkeypatch.setattr(training, "sample_mask", refuse)
    out = tmp_path / "task"
    cfg = _task_cfg(shared_dataset, out, "crema-d", "finetune.epochs=2")
    tuner = Finetuner(cfg, pretrained_checkpoint, Manifest.load(shared_dataset))

    encoder_ids = {id(p) for p in tuner.model.encoder.parameters()}
    head_ids = {id(p) for p in tuner.model.head.parameters()}
    groups = tuner.optimizer.optimizer.param_groups
    assert {id(p) for p in groups[0]["params"]} == encoder_ids
    assert {id(p) for p in groups[1]["params"]} == head_ids
    assert [g["lr"] for g in groups] == [1e-4, 1e-5]
    assert not any(k.startswith("decoder.") for k in tuner.model.state_dict())

    checkpoint, log = tuner.run()
    assert capsys.readouterr().out == ""
    assert len(log.steps) == 2
    assert all(r["lr_encoder"] == 1e-4 and r["lr_head"] == 1e-5 for r in log.steps)
    assert (out / FINETUNE_LOG).exists()

    model, loaded_cfg = load_task_model(checkpoint)
    assert loaded_cfg.finetune.task == "crema-d"
    assert set(k.split(".")[0] for k in model.state_dict()) == {"encoder", "head"}


def test_finetuning_loads_pretrained_encoder(shared_dataset, pretrained_checkpoint, tmp_path):
    cfg = _task_cfg(shared_dataset, tmp_path, "crema-d")
    tuner = Finetuner(cfg, pretrained_checkpoint, Manifest.load(shared_dataset))
    tensors, _, _ = load_checkpoint(pretrained_checkpoint)
    for name, value in tuner.model.encoder.state_dict().items():
        assert torch.equal(value, tensors["encoder." + name])


def test_checkpoint_geometry_must_match(shared_dataset, pretrained_checkpoint, tmp_path):
    cfg = _task_cfg(shared_dataset, tmp_path, "crema-d", "model.embed_dim=32")
    with pytest.raises(ConfigurationError) as e:
        Finetuner(cfg, pretrained_checkpoint, Manifest.load(shared_dataset))
    assert "model.embed_dim" in e.value.keys
    assert "model.embed_dim: checkpoint has 16, run has 32" in str(e.value)


def test_finetuning_requires_a_recipe(shared_dataset, pretrained_checkpoint, tmp_path):
    cfg = _pretrain_cfg(shared_dataset, tmp_path)
    with pytest.raises(ConfigurationError):
        Finetuner(cfg, pretrained_checkpoint, Manifest.load(shared_dataset))


def test_pretraining_checkpoint_has_no_head(pretrained_checkpoint):
    with pytest.raises(UsageError):
        load_task_model(pretrained_checkpoint)


def test_majority_class_scores_its_prevalence(shared_dataset):
    cfg = _task_cfg(shared_dataset, "unused", "crema-d")
    model = SocialMAEForTask(cfg, cfg.finetune)
    with torch.no_grad():
        model.head.linear.weight.zero_()
        model.head.linear.bias.copy_(torch.tensor([5.0, 0, 0, 0, 0, 0]))

    report = evaluate(model, Manifest.load(shared_dataset), cfg)
    assert [m.mode for m in report.modes] == ["audio", "video", "av"]
    for m in report.modes:
        assert m.samples == 8
        assert m.micro_f1 == pytest.approx(0.25)
        assert m.macro_f1 == pytest.approx(0.4 / 6)


def test_zero_head_trait_accuracy(traits_dir):
    cfg = _task_cfg(traits_dir, "unused", "first-impressions")
    model = SocialMAEForTask(cfg, cfg.finetune)
    with torch.no_grad():
        model.head.linear.weight.zero_()
        model.head.linear.bias.zero_()

    report = evaluate(model, Manifest.load(traits_dir), cfg, modes=[InputMode.av])
    targets = torch.tensor([class_traits(i % 4, 4) for i in range(8)])
    expected = 1.0 - (targets - 0.5).abs().mean(dim=0)
    assert report.modes[0].traits.per_trait == pytest.approx(expected.tolist(), abs=1e-6)
    assert "Ope." in report.table()


def test_gradient_check_passes_at_desk_scale(desk_cfg):
    report = GradientChecker(desk_cfg).run(200)
    assert report.checked == 200
    assert report.passed, report.failures[:5]


def test_default_step_has_less_truncation_error_than_a_coarse_one(desk_cfg):
    checker = GradientChecker(desk_cfg)
    coarse = checker.run(50, step=1e-3)
    fine = checker.run(50, step=1e-5)
    assert fine.passed, fine.failures[:5]
    assert fine.max_relative_error < coarse.max_relative_error


def test_gradient_check_catches_corruption(desk_cfg):
    def corrupt(grads):
        for g in grads.values():
            g.mul_(-1.0).add_(1.0)

    assert not GradientChecker(desk_cfg).run(50, corrupt=corrupt).passed


def test_gradient_check_needs_samples(desk_cfg):
    with pytest.raises(UsageError):
        GradientChecker(desk_cfg).run(0)


def _pooled_cosines(model, manifest, cfg):
    dataset = ClipDataset(manifest, cfg, SampleMode.eval, seed=cfg.seed)
    items = [dataset[i] for i in range(len(dataset))]
    audio = torch.stack([it["audio"] for it in items])
    frames = torch.stack([it["frames"] for it in items])
    with torch.no_grad():
        out = model.encoder(*model.encoder.tokenize(audio, frames))
    return F.normalize(out.pooled_audio, dim=-1) @ F.normalize(out.pooled_video, dim=-1).t()


def _masked_reconstruction_error(model, manifest, cfg):
    item = ClipDataset(manifest, cfg, SampleMode.eval, seed=cfg.seed)[0]
    result = reconstruct(model.eval(), cfg, item["audio"], item["frames"], cfg.pretrain.mask_ratio, mask_seed=0)
    return {"audio": result.audio_masked_mae, "video": result.video_masked_mae}


def _record_overfit_oracle(run_dir, lr_curve, untrained, trained):
    ORACLES.mkdir(exist_ok=True)
    shutil.copyfile(run_dir / PRETRAIN_LOG, ORACLES / "overfit_pretrain_log.csv")
    recorded = {
        "initial_Lr": lr_curve[0],
        "final_Lr": sum(lr_curve[-10:]) / 10,
        "untrained_audio_masked_mae": untrained["audio"],
        "untrained_video_masked_mae": untrained["video"],
        "audio_masked_mae": trained["audio"],
        "video_masked_mae": trained["video"],
        "max_audio_masked_mae": 1.25 * trained["audio"],
        "max_video_masked_mae": 1.25 * trained["video"],
    }
    with open(ORACLES / "overfit.toml", "w") as f:
        toml.dump({"recorded": recorded}, f)


@pytest.mark.slow
def test_desk_model_overfits_a_small_set(dataset_factory, tmp_path):
    # Four-frame clips are sampled whole, so every epoch sees the same frames.
    root = dataset_factory("overfit", num_frames=4)
    manifest = Manifest.load(root)
    run_dir = tmp_path / "run"
    cfg = _pretrain_cfg(
        root,
        run_dir,
        "pretrain.epochs=400",
        "pretrain.base_lr=3e-3",
        "pretrain.decay=1.0",
        "pretrain.checkpoint_every=400",
        "loss.contrastive_weight=1.0",
        "model.decoder_dim=64",
        "model.decoder_num_heads=4",
    )
    trainer = Pretrainer(cfg, manifest)
    untrained = _masked_reconstruction_error(trainer.model, manifest, cfg)
    _, log = trainer.run()
    trained = _masked_reconstruction_error(trainer.model, manifest, cfg)

    lr_curve = log.column("Lr")
    if os.getenv("SOCIALMAE_RECORD_ORACLE"):
        _record_overfit_oracle(run_dir, lr_curve, untrained, trained)

    assert sum(lr_curve[-10:]) / 10 < 0.25 * lr_curve[0]
    assert sum(log.column("Lc")[-10:]) / 10 < torch.log(torch.tensor(8.0)).item() - 0.1

    cos = _pooled_cosines(trainer.model.eval(), manifest, cfg)
    n = cos.shape[0]
    aligned = [cos[i, i] > (cos[i].sum() - cos[i, i]) / (n - 1) for i in range(n)]
    assert sum(bool(a) for a in aligned) >= 0.9 * n

    oracle = ORACLES / "overfit.toml"
    recorded = toml.load(oracle)["recorded"] if oracle.exists() else {}
    for modality in ("audio", "video"):
        assert trained[modality] < untrained[modality]
        if recorded:
            assert trained[modality] <= recorded["max_%s_masked_mae" % modality]


@pytest.mark.slow
def test_finetuned_desk_model_separates_synthetic_classes(dataset_factory, tmp_path):
    train = dataset_factory("train", n_clips=64, seed=0)
    held_out = dataset_factory("held_out", n_clips=32, seed=1)

    checkpoint, _ = pretrain(_pretrain_cfg(train, tmp_path / "pre", "pretrain.epochs=5"), Manifest.load(train))
    cfg = _task_cfg(
        train,
        tmp_path / "task",
        "crema-d",
        "finetune.epochs=10",
        "finetune.encoder_lr=1e-3",
        "finetune.head_lr=1e-2",
    )
    task_checkpoint, _ = finetune(cfg, checkpoint, Manifest.load(train))

    model, loaded_cfg = load_task_model(task_checkpoint)
    report = evaluate(model, Manifest.load(held_out), loaded_cfg)
    by_mode = {m.mode: m for m in report.modes}
    assert set(by_mode) == {"audio", "video", "av"}
    assert by_mode["av"].micro_f1 > 0.9
