"""
training.py
===========

Pre-training and fine-tuning loops, evaluation in the three input modes and the gradient
check of the combined pre-training loss.

Pre-training follows a step schedule, ``lr(e) = base_lr * decay ** (e // decay_period)``,
applied per epoch. Fine-tuning drops the decoder, attaches a fresh linear head and trains
two parameter groups (encoder and head) at constant, separately configured learning rates,
without masking.
"""

import json
import pathlib
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel
from torch.utils.data import DataLoader

from . import numerics
from .config import get_logger
from .data import TRAIT_NAMES, ClipDataset, Manifest, SampleMode
from .errors import ConfigurationError, InternalError, NonFiniteError, UsageError
from .metrics import ConfusionMatrix, MetricsReport, ModeMetrics, f1_macro, f1_micro, trait_accuracy
from .model import InputMode, SocialMAE, SocialMAEForTask
from .objectives import (
    LossBreakdown,
    average_reconstruction,
    combine,
    contrastive_loss,
    finetune_loss,
    reconstruction_loss,
)
from .runconfig import check_compatible, save_run_config, validate
from .tokenizer import MaskPlan, sample_mask, select_visible
from .tool import Tool
from .types import FinetuneRecipe, LossConfig, RunConfig, TaskKind
from .utils import make_generator, seed_everything

PRETRAIN_LOG = "pretrain_log.csv"
FINETUNE_LOG = "finetune_log.csv"
EVAL_LOG = "eval_log.csv"
CHECKPOINT = "checkpoint.safetensors"
TASK_CHECKPOINT = "task.safetensors"
LAST_BATCH = "last_batch.json"

log = get_logger("training")


def lr_at_epoch(epoch: int, base_lr: float, decay: float, period: int) -> float:
    return base_lr * decay ** (epoch // period)


class RunLog(BaseModel):
    """Append-only per-step loss records and per-epoch evaluation results of one run."""

    config_hash: str
    seed: int
    steps: List[Dict[str, float]] = []
    evaluations: List[Dict[str, float]] = []

    def append(self, **record):
        self.steps.append(record)

    def append_evaluation(self, **record):
        self.evaluations.append(record)

    def column(self, name: str) -> List[float]:
        return [r[name] for r in self.steps]

    def write(self, path, evaluation_path=None):
        pd.DataFrame(self.steps).to_csv(path, index=False)
        if evaluation_path is not None and self.evaluations:
            pd.DataFrame(self.evaluations).to_csv(evaluation_path, index=False)


def pretrain_forward(
    model: SocialMAE,
    audio: torch.Tensor,
    frames: torch.Tensor,
    audio_plan: MaskPlan,
    video_plan: MaskPlan,
    loss_cfg: LossConfig,
    clip_ids: Optional[List[str]] = None,
) -> LossBreakdown:
    """Tokenize, drop masked tokens, encode, pool for Lc, decode for Lr and combine."""
    audio_seq, video_seq = model.encoder.tokenize(audio, frames)
    out = model.encoder(select_visible(audio_seq, audio_plan), select_visible(video_seq, video_plan))

    if audio_plan.visible_indices.shape[1] == 0 or video_plan.visible_indices.shape[1] == 0:
        log.warning("a modality has no visible tokens; contrastive loss is 0")
        lc = torch.zeros(())
    else:
        lc = contrastive_loss(out.pooled_audio, out.pooled_video, loss_cfg.temperature, loss_cfg.symmetric)
    pred_audio, pred_video = model.decode(out.joint_tokens, audio_plan, video_plan)
    components = {
        "audio": reconstruction_loss(pred_audio, audio_seq.raw_patches, audio_plan, loss_cfg.normalize_audio_target),
        "video": reconstruction_loss(pred_video, video_seq.raw_patches, video_plan, loss_cfg.normalize_video_target),
    }
    return combine(lc, average_reconstruction(components), loss_cfg.contrastive_weight, components, clip_ids)


def _loader(dataset: ClipDataset, batch_size: int, shuffle: bool, seed: int, drop_singleton: bool = False):
    batch_size = min(batch_size, len(dataset))
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle,
        generator=make_generator(seed) if shuffle else None,
        num_workers=0,
        drop_last=drop_singleton and len(dataset) % batch_size == 1,
    )


def _named_parameters(module: torch.nn.Module) -> Dict[int, str]:
    return {id(p): n for n, p in module.named_parameters()}


def _write_last_batch(output_dir: pathlib.Path, step: int, clip_ids: List[str]):
    with open(output_dir / LAST_BATCH, "w") as f:
        json.dump({"step": step, "clip_ids": list(clip_ids)}, f, indent=2)


class Pretrainer(Tool):
    def __init__(self, cfg: RunConfig, manifest: Manifest, output_dir=None):
        self.cfg = cfg
        self.recipe = cfg.pretrain
        self.output_dir = pathlib.Path(output_dir or cfg.output_dir)
        if len(manifest) < 2:
            raise UsageError("pre-training needs at least 2 clips, got %d" % len(manifest))

        seed_everything(cfg.seed)
        self.model = SocialMAE(cfg)
        self._log().info("Model has %d parameters", numerics.count_parameters(self.model))
        self.dataset = ClipDataset(manifest, cfg, SampleMode.train, seed=cfg.seed)
        self.loader = _loader(self.dataset, self.recipe.batch_size, True, cfg.seed, drop_singleton=True)
        self.mask_generator = make_generator(cfg.seed + 1)
        self.optimizer = numerics.Adam(
            {"all": list(self.model.parameters())},
            {"all": self.recipe.base_lr},
            betas=self.recipe.betas,
            eps=self.recipe.eps,
            weight_decay=self.recipe.weight_decay,
            names=_named_parameters(self.model),
        )
        self.log = RunLog(config_hash=cfg.config_hash(), seed=cfg.seed)

    def step(self, batch) -> LossBreakdown:
        audio, frames = batch["audio"], batch["frames"]
        b = audio.shape[0]
        audio_plan = sample_mask(self.cfg.audio_tokens, self.recipe.mask_ratio, self.mask_generator, b)
        video_plan = sample_mask(self.cfg.video_tokens, self.recipe.mask_ratio, self.mask_generator, b)

        self.optimizer.zero_grad()
        losses = pretrain_forward(self.model, audio, frames, audio_plan, video_plan, self.cfg.loss, batch["clip_id"])
        numerics.backward(losses.loss)
        self.optimizer.step()
        return losses

    def run(self) -> Tuple[pathlib.Path, RunLog]:
        save_run_config(self.cfg, self.output_dir)
        self._log().info(
            "Pre-training %d clips, config %s, seed %d, contrastive weight %g, temperature %g, mask ratio %g",
            len(self.dataset),
            self.log.config_hash[:12],
            self.cfg.seed,
            self.cfg.loss.contrastive_weight,
            self.cfg.loss.temperature,
            self.recipe.mask_ratio,
        )

        self.model.train()
        step = 0
        for epoch in range(self.recipe.epochs):
            lr = lr_at_epoch(epoch, self.recipe.base_lr, self.recipe.decay, self.recipe.decay_period)
            self.optimizer.set_lr(lr)
            self.dataset.set_epoch(epoch)

            totals = []
            for batch in self.loader:
                if self.recipe.max_steps is not None and step >= self.recipe.max_steps:
                    break
                try:
                    losses = self.step(batch)
                except NonFiniteError as e:
                    _write_last_batch(self.output_dir, step, batch["clip_id"])
                    self._log().error("Halting at step %d: %s", step, e)
                    raise NonFiniteError("training halted at step %d: %s" % (step, e), list(batch["clip_id"]))

                self.log.append(
                    step=step, epoch=epoch, Lc=losses.contrastive, Lr=losses.reconstruction, L=losses.total, lr=lr
                )
                self._log().debug(
                    "step %d: Lc %.4f Lr %.4f L %.4f", step, losses.contrastive, losses.reconstruction, losses.total
                )
                totals.append(losses.total)
                step += 1

            if totals:
                self._log().info("Epoch %d: lr %g, mean loss %.4f", epoch, lr, float(np.mean(totals)))
            if (epoch + 1) % self.recipe.checkpoint_every == 0:
                self.write_checkpoint("checkpoint-epoch%03d.safetensors" % (epoch + 1))
            if self.recipe.max_steps is not None and step >= self.recipe.max_steps:
                break

        self.log.write(self.output_dir / PRETRAIN_LOG)
        return self.write_checkpoint(CHECKPOINT), self.log


def load_pretrained_encoder(model: SocialMAEForTask, cfg: RunConfig, checkpoint) -> int:
    """Copy encoder tensors from a pre-training checkpoint; decoder tensors are dropped. Returns how many."""
    tensors, stored, _ = numerics.load_checkpoint(checkpoint)
    check_compatible(cfg, validate(stored), "checkpoint %s" % checkpoint)

    encoder = {k[len("encoder.") :]: v for k, v in tensors.items() if k.startswith("encoder.")}
    if not encoder:
        raise ConfigurationError("checkpoint %s has no encoder tensors" % checkpoint, keys=["checkpoint"])
    model.encoder.load_state_dict(encoder, strict=True)
    return sum(1 for k in tensors if k.startswith("decoder."))


class Finetuner(Tool):
    def __init__(
        self,
        cfg: RunConfig,
        checkpoint,
        manifest: Manifest,
        output_dir=None,
        eval_manifest: Optional[Manifest] = None,
    ):
        if cfg.finetune is None:
            raise ConfigurationError("no [finetune] recipe in the configuration", keys=["finetune"])
        self.cfg = cfg
        self.recipe: FinetuneRecipe = cfg.finetune
        self.output_dir = pathlib.Path(output_dir or cfg.output_dir)
        manifest.check_labels(self.recipe)
        if eval_manifest is not None:
            eval_manifest.check_labels(self.recipe)
        self.eval_manifest = eval_manifest

        seed_everything(cfg.seed)
        self.model = SocialMAEForTask(cfg, self.recipe)
        dropped = load_pretrained_encoder(self.model, cfg, checkpoint)
        self._log().info("Loaded encoder from %s, dropped %d decoder tensors", checkpoint, dropped)

        self.dataset = ClipDataset(manifest, cfg, SampleMode.train, seed=cfg.seed)
        self.loader = _loader(self.dataset, self.recipe.batch_size, True, cfg.seed)
        self.optimizer = numerics.Adam(
            {"encoder": list(self.model.encoder.parameters()), "head": list(self.model.head.parameters())},
            {"encoder": self.recipe.encoder_lr, "head": self.recipe.head_lr},
            betas=self.recipe.betas,
            eps=self.recipe.eps,
            weight_decay=self.recipe.weight_decay,
            names=_named_parameters(self.model),
        )
        self.log = RunLog(config_hash=cfg.config_hash(), seed=cfg.seed)

    def step(self, batch) -> float:
        if self.recipe.mask_ratio != 0:
            raise InternalError("fine-tuning forward path must not mask tokens")
        self.optimizer.zero_grad()
        outputs = self.model(batch["audio"], batch["frames"], InputMode.av)
        loss = finetune_loss(outputs, batch["label"], self.recipe, list(batch["clip_id"]))
        if not torch.isfinite(loss):
            raise NonFiniteError("non-finite fine-tuning loss", list(batch["clip_id"]))
        numerics.backward(loss)
        self.optimizer.step()
        return float(loss.detach())

    def run(self) -> Tuple[pathlib.Path, RunLog]:
        save_run_config(self.cfg, self.output_dir)
        self._log().info("%s; %s", self.recipe.describe_head(), self.recipe.describe_learning_rates())
        self._log().info(
            "Fine-tuning %s on %d clips, config %s", self.recipe.task, len(self.dataset), self.log.config_hash[:12]
        )

        step = 0
        for epoch in range(self.recipe.epochs):
            self.model.train()
            self.dataset.set_epoch(epoch)
            losses = []
            for batch in self.loader:
                try:
                    loss = self.step(batch)
                except NonFiniteError:
                    _write_last_batch(self.output_dir, step, batch["clip_id"])
                    raise
                self.log.append(
                    step=step,
                    epoch=epoch,
                    loss=loss,
                    lr_encoder=self.optimizer.lr("encoder"),
                    lr_head=self.optimizer.lr("head"),
                )
                losses.append(loss)
                step += 1
            self._log().info("Epoch %d: mean loss %.4f", epoch, float(np.mean(losses)))

            if self.eval_manifest is not None:
                report = evaluate(self.model, self.eval_manifest, self.cfg, modes=[InputMode.av])
                self.log.append_evaluation(epoch=epoch, **report.frame().drop(columns=["mode"]).iloc[0].to_dict())

        self.log.write(self.output_dir / FINETUNE_LOG, self.output_dir / EVAL_LOG)
        return self.write_checkpoint(TASK_CHECKPOINT), self.log


def load_task_model(checkpoint) -> Tuple[SocialMAEForTask, RunConfig]:
    tensors, stored, _ = numerics.load_checkpoint(checkpoint)
    cfg = validate(stored)
    if cfg.finetune is None or not any(k.startswith("head.") for k in tensors):
        raise UsageError("%s is not a fine-tuned checkpoint (no task head)" % checkpoint)
    model = SocialMAEForTask(cfg, cfg.finetune)
    model.load_state_dict(tensors, strict=True)
    return model, cfg


@torch.no_grad()
def evaluate(
    model: SocialMAEForTask,
    manifest: Manifest,
    cfg: RunConfig,
    modes: Optional[List[InputMode]] = None,
    batch_size: Optional[int] = None,
) -> MetricsReport:
    """Unmasked forward in each input mode; F1 for classification, 1 - MAE per trait for regression."""
    recipe = model.recipe
    manifest.check_labels(recipe)
    modes = modes or list(InputMode)
    dataset = ClipDataset(manifest, cfg, SampleMode.eval, seed=cfg.seed)
    loader = _loader(dataset, batch_size or recipe.batch_size, False, cfg.seed)

    was_training = model.training
    model.eval()
    outputs: Dict[InputMode, List[torch.Tensor]] = {m: [] for m in modes}
    labels = []
    for batch in loader:
        for m in modes:
            outputs[m].append(model(batch["audio"], batch["frames"], m))
        labels.append(batch["label"])
    model.train(was_training)

    y = torch.cat(labels)
    results = []
    for m in modes:
        out = torch.cat(outputs[m])
        if recipe.kind == TaskKind.classification:
            cm = ConfusionMatrix.from_predictions(y.tolist(), out.argmax(dim=-1).tolist(), recipe.num_outputs)
            results.append(ModeMetrics(mode=m.value, samples=len(y), micro_f1=f1_micro(cm), macro_f1=f1_macro(cm)))
        else:
            acc = trait_accuracy(out.numpy(), y.numpy())
            results.append(ModeMetrics(mode=m.value, samples=len(y), traits=acc))

    names = TRAIT_NAMES if recipe.num_outputs == len(TRAIT_NAMES) else ["t%d" % i for i in range(recipe.num_outputs)]
    return MetricsReport(task=recipe.task, modes=results, trait_names=names)


class GradientChecker(Tool):
    """Central finite differences against autograd for the combined pre-training loss, in float64."""

    def __init__(self, cfg: RunConfig, batch_size: int = 2):
        if batch_size < 2:
            raise UsageError("the contrastive term needs a batch of at least 2")
        self.cfg = cfg
        seed_everything(cfg.seed)
        self.model = SocialMAE(cfg).double()

        g = make_generator(cfg.seed)
        f = cfg.frontend
        p = cfg.patch
        self.audio = torch.randn((batch_size, f.n_mels, f.target_frames), generator=g, dtype=torch.float64)
        self.frames = torch.randn(
            (batch_size, p.video_frames, p.image_size, p.image_size, p.channels), generator=g, dtype=torch.float64
        )
        ratio = cfg.pretrain.mask_ratio
        self.audio_plan = sample_mask(cfg.audio_tokens, ratio, g, batch_size)
        self.video_plan = sample_mask(cfg.video_tokens, ratio, g, batch_size)

    def loss(self) -> torch.Tensor:
        return pretrain_forward(
            self.model, self.audio, self.frames, self.audio_plan, self.video_plan, self.cfg.loss
        ).loss

    def run(self, samples: int, tolerance: float = 1e-3, step: float = 1e-5, corrupt=None) -> numerics.GradCheckReport:
        if samples < 1:
            raise UsageError("gradient check needs at least one sample, got %d" % samples)
        report = numerics.finite_difference_check(
            dict(self.model.named_parameters()),
            self.loss,
            samples,
            step=step,
            tolerance=tolerance,
            seed=self.cfg.seed,
            corrupt=corrupt,
        )
        self._log().info(
            "Checked %d coordinates: max relative error %.3g (%s)",
            report.checked,
            report.max_relative_error,
            report.worst_parameter,
        )
        return report


def pretrain(cfg: RunConfig, manifest: Manifest, output_dir=None) -> Tuple[pathlib.Path, RunLog]:
    return Pretrainer(cfg, manifest, output_dir).run()


def finetune(
    cfg: RunConfig, checkpoint, manifest: Manifest, output_dir=None, eval_manifest: Optional[Manifest] = None
) -> Tuple[pathlib.Path, RunLog]:
    return Finetuner(cfg, checkpoint, manifest, output_dir, eval_manifest).run()
