"""
objectives.py
=============

Pre-training loss ``L = Lc * contrastive_weight + Lr`` and the fine-tuning losses.

``Lc`` is an InfoNCE loss over the pooled audio and video vectors of a batch, ``Lr`` a
mean squared error over masked patches only, averaged with equal weight over the
modalities that have at least one masked token.
"""

import math
from typing import Dict, List, Optional, Sequence, Union

import torch
import torch.nn.functional as F
from pydantic import BaseModel

from . import numerics
from .config import get_logger
from .errors import DataError, NonFiniteError, ShapeError, UsageError
from .tokenizer import MaskPlan
from .types import FinetuneRecipe, TaskKind

log = get_logger("objectives")

Scalar = Union[float, torch.Tensor]


def contrastive_loss(
    c_a: torch.Tensor, c_v: torch.Tensor, temperature: float = 0.05, symmetric: bool = True
) -> torch.Tensor:
    """InfoNCE over index-aligned pooled vectors (N, d); row i of each comes from the same clip."""
    if c_a.shape != c_v.shape or c_a.dim() != 2:
        raise ShapeError("contrastive_loss", c_a.shape, c_v.shape)
    n = c_a.shape[0]
    if n < 2:
        raise UsageError("contrastive loss needs at least 2 clips per batch, got %d" % n)

    a = F.normalize(c_a, dim=-1)
    v = F.normalize(c_v, dim=-1)
    sim = numerics.scale(numerics.matmul(a, v.t()), 1.0 / temperature)

    # positives on the diagonal
    audio_to_video = -numerics.log_softmax(sim, dim=1).diagonal().mean()
    if not symmetric:
        return audio_to_video
    video_to_audio = -numerics.log_softmax(sim, dim=0).diagonal().mean()
    return (audio_to_video + video_to_audio) / 2.0


def normalize_patches(patches: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    mean = patches.mean(dim=-1, keepdim=True)
    var = patches.var(dim=-1, unbiased=False, keepdim=True)
    return (patches - mean) / (var + eps) ** 0.5


def reconstruction_loss(
    pred: torch.Tensor, raw_patches: torch.Tensor, plan: MaskPlan, normalize_target: bool = False
) -> Optional[torch.Tensor]:
    """MSE over masked positions of one modality, or None if the plan masks nothing.

    `pred` and `raw_patches` are (B, N, V) and aligned to patch indices.
    """
    if pred.shape != raw_patches.shape:
        raise ShapeError("reconstruction_loss", pred.shape, raw_patches.shape)
    if plan.num_masked == 0:
        return None

    target = normalize_patches(raw_patches) if normalize_target else raw_patches
    idx = plan.masked_indices
    return numerics.mse(numerics.gather(pred, idx), numerics.gather(target.detach(), idx))


def average_reconstruction(components: Dict[str, Optional[torch.Tensor]]) -> torch.Tensor:
    present = [v for v in components.values() if v is not None]
    if not present:
        log.warning("no modality has masked tokens; reconstruction loss is 0")
        return torch.zeros(())
    return sum(present) / len(present)


class LossBreakdown(BaseModel):
    """`loss` is the differentiable total; the float fields are detached copies for logging."""

    loss: torch.Tensor
    contrastive: float
    reconstruction: float
    total: float
    reconstruction_audio: Optional[float] = None
    reconstruction_video: Optional[float] = None

    class Config:
        arbitrary_types_allowed = True


def _value(x: Optional[Scalar]) -> Optional[float]:
    if x is None:
        return None
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def combine(
    lc: Scalar,
    lr: Scalar,
    contrastive_weight: float,
    components: Optional[Dict[str, Optional[torch.Tensor]]] = None,
    clip_ids: Optional[Sequence[str]] = None,
) -> LossBreakdown:
    lc_t = torch.as_tensor(lc, dtype=torch.get_default_dtype()) if not isinstance(lc, torch.Tensor) else lc
    lr_t = torch.as_tensor(lr, dtype=torch.get_default_dtype()) if not isinstance(lr, torch.Tensor) else lr

    bad = [name for name, v in (("Lc", lc_t), ("Lr", lr_t)) if not torch.isfinite(v.detach()).all()]
    if bad:
        raise NonFiniteError(
            "non-finite %s, last batch" % " and ".join(bad),
            list(clip_ids or []),
        )

    total = lc_t * contrastive_weight + lr_t
    components = components or {}
    return LossBreakdown(
        loss=total,
        contrastive=_value(lc_t),
        reconstruction=_value(lr_t),
        total=_value(total),
        reconstruction_audio=_value(components.get("audio")),
        reconstruction_video=_value(components.get("video")),
    )


def finetune_loss(
    outputs: torch.Tensor,
    labels: torch.Tensor,
    task: FinetuneRecipe,
    clip_ids: Optional[List[str]] = None,
) -> torch.Tensor:
    """Cross-entropy over K classes, or mean absolute error over trait scores."""
    if outputs.dim() != 2 or outputs.shape[1] != task.num_outputs:
        raise UsageError(
            "outputs of shape %s do not match task %s with %d outputs"
            % (tuple(outputs.shape), task.task, task.num_outputs)
        )
    clip_ids = clip_ids or [str(i) for i in range(outputs.shape[0])]

    if task.kind == TaskKind.classification:
        labels = labels.long().reshape(-1)
        if labels.shape[0] != outputs.shape[0]:
            raise ShapeError("finetune_loss", outputs.shape, labels.shape)
        for i, y in enumerate(labels.tolist()):
            if not 0 <= y < task.num_outputs:
                raise DataError("class label %d outside [0, %d)" % (y, task.num_outputs), clip_ids[i])
        picked = numerics.log_softmax(outputs, dim=-1).gather(1, labels.unsqueeze(1))
        return -picked.mean()

    labels = labels.to(outputs.dtype)
    if labels.shape != outputs.shape:
        raise ShapeError("finetune_loss", outputs.shape, labels.shape)
    for i, row in enumerate(labels.tolist()):
        if any(not (0.0 <= t <= 1.0) or math.isnan(t) for t in row):
            raise DataError("trait targets must lie in [0, 1], got %s" % (row,), clip_ids[i])
    return (outputs - labels).abs().mean()
