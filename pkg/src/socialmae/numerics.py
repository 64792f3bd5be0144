"""
numerics.py
===========

The differentiable substrate the model is built from. Tensors are `torch.Tensor`s and
reverse-mode differentiation is torch autograd; this module adds shape-checked primitives
that fail with a :py:class:`~socialmae.errors.ShapeError`, a guarded `backward`, an
independent central finite-difference checker, an Adam optimizer that refuses non-finite
gradients, and the checkpoint format.
"""

import json
import pathlib
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from pydantic import BaseModel
from safetensors import SafetensorError, safe_open
from safetensors.torch import save_file

from .errors import ConfigurationError, InternalError, NonFiniteError, ShapeError, UsageError

LAYER_NORM_EPS = 1e-6
CHECKPOINT_FORMAT = "socialmae-checkpoint"
CHECKPOINT_VERSION = 1


def _broadcast(op: str, a: torch.Tensor, b: torch.Tensor):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(op, a.shape, b.shape)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else -1]:
        raise ShapeError("matmul", a.shape, b.shape)
    return torch.matmul(a, b)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError("linear", x.shape, weight.shape)
    return F.linear(x, weight, bias)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast("add", a, b)
    return a + b


def scale(a: torch.Tensor, factor: float) -> torch.Tensor:
    return a * factor


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.log_softmax(x, dim=dim)


def layer_norm(
    x: torch.Tensor,
    weight: Optional[torch.Tensor] = None,
    bias: Optional[torch.Tensor] = None,
    eps: float = LAYER_NORM_EPS,
) -> torch.Tensor:
    for p in (weight, bias):
        if p is not None and tuple(p.shape) != tuple(x.shape[-1:]):
            raise ShapeError("layer_norm", x.shape, p.shape)
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def mean(x: torch.Tensor, dim: int) -> torch.Tensor:
    if not -x.dim() <= dim < x.dim():
        raise ShapeError("mean", x.shape, (dim,))
    return x.mean(dim=dim)


def _check_index(op: str, x: torch.Tensor, index: torch.Tensor):
    if index.dim() != 2 or index.shape[0] != x.shape[0]:
        raise ShapeError(op, x.shape, index.shape)
    if index.numel() > 0 and (int(index.min()) < 0 or int(index.max()) >= x.shape[1]):
        raise InternalError("%s: index out of range for %d tokens" % (op, x.shape[1]))


def gather(x: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """Select tokens along axis 1: `x` is (B, N, D), `index` is (B, K); returns (B, K, D)."""
    _check_index("gather", x, index)
    return torch.gather(x, 1, index.unsqueeze(-1).expand(-1, -1, x.shape[-1]))


def scatter(base: torch.Tensor, index: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """Out-of-place inverse of :py:func:`gather`: writes `values` (B, K, D) into `base` (B, N, D)."""
    _check_index("scatter", base, index)
    if values.shape[:2] != index.shape or values.shape[-1] != base.shape[-1]:
        raise ShapeError("scatter", base.shape, values.shape)
    return torch.scatter(base, 1, index.unsqueeze(-1).expand(-1, -1, base.shape[-1]), values)


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeError("mse", pred.shape, target.shape)
    return ((pred - target) ** 2).mean()


def backward(loss: torch.Tensor):
    if loss.numel() != 1:
        raise UsageError("backward expects a scalar loss, got shape %s" % (tuple(loss.shape),))
    loss.backward()


class GradCheckReport(BaseModel):
    checked: int
    max_relative_error: float
    worst_parameter: Optional[str]
    failures: List[Tuple[str, int, float, float]] = []
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_relative_error < self.tolerance


def finite_difference_check(
    parameters: Dict[str, torch.nn.Parameter],
    loss_fn: Callable[[], torch.Tensor],
    samples: int,
    step: float = 1e-5,
    tolerance: float = 1e-3,
    seed: int = 0,
    denominator_floor: float = 1e-6,
    corrupt: Optional[Callable[[Dict[str, torch.Tensor]], None]] = None,
) -> GradCheckReport:
    """Compare analytic gradients of `loss_fn` against central differences on `samples` coordinates.

    `loss_fn` must be deterministic. Relative error is `|a - n| / max(|a|, |n|, denominator_floor)`.
    `corrupt` receives the analytic gradients before comparison and may tamper with them.
    """

    trainable = {n: p for n, p in parameters.items() if p.requires_grad}
    for p in trainable.values():
        p.grad = None
    backward(loss_fn())
    analytic = {
        n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for n, p in trainable.items()
    }
    if corrupt is not None:
        corrupt(analytic)

    names = sorted(trainable)
    g = torch.Generator()
    g.manual_seed(seed)

    report = GradCheckReport(checked=0, max_relative_error=0.0, worst_parameter=None, tolerance=tolerance)
    if not names:
        return report

    with torch.no_grad():
        for _ in range(samples):
            name = names[int(torch.randint(len(names), (1,), generator=g))]
            flat = trainable[name].view(-1)
            i = int(torch.randint(flat.numel(), (1,), generator=g))

            original = flat[i].item()
            flat[i] = original + step
            up = loss_fn().item()
            flat[i] = original - step
            down = loss_fn().item()
            flat[i] = original

            numeric = (up - down) / (2 * step)
            a = analytic[name].view(-1)[i].item()
            err = abs(a - numeric) / max(abs(a), abs(numeric), denominator_floor)

            report.checked += 1
            if err >= tolerance:
                report.failures.append((name, i, a, numeric))
            if err > report.max_relative_error or report.worst_parameter is None:
                report.max_relative_error = max(err, report.max_relative_error)
                report.worst_parameter = name

    return report


class OptimizerState(BaseModel):
    step_count: int
    learning_rates: Dict[str, float]


class Adam(object):
    """Adam over named parameter groups. Frozen parameters (`requires_grad=False`) are never updated."""

    def __init__(
        self,
        groups: Dict[str, Sequence[torch.nn.Parameter]],
        lrs: Dict[str, float],
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        names: Optional[Dict[int, str]] = None,
    ):
        self.group_names = list(groups)
        self._names = names or {}
        self.optimizer = torch.optim.Adam(
            [{"params": [p for p in groups[g] if p.requires_grad], "lr": lrs[g]} for g in self.group_names],
            betas=betas,
            eps=eps,
            weight_decay=weight_decay,
        )
        self.step_count = 0

    def zero_grad(self):
        self.optimizer.zero_grad(set_to_none=True)

    def set_lr(self, lr: float, group: Optional[str] = None):
        for name, g in zip(self.group_names, self.optimizer.param_groups):
            if group is None or group == name:
                g["lr"] = lr

    def lr(self, group: Optional[str] = None) -> float:
        idx = 0 if group is None else self.group_names.index(group)
        return self.optimizer.param_groups[idx]["lr"]

    def step(self):
        bad = []
        for g in self.optimizer.param_groups:
            for p in g["params"]:
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    bad.append(self._names.get(id(p), "<unnamed %s>" % (tuple(p.shape),)))
        if bad:
            raise NonFiniteError("non-finite gradient, optimizer step aborted", bad)

        self.optimizer.step()
        self.step_count += 1

    @property
    def state(self) -> OptimizerState:
        return OptimizerState(
            step_count=self.step_count,
            learning_rates={n: g["lr"] for n, g in zip(self.group_names, self.optimizer.param_groups)},
        )


def save_checkpoint(path, state_dict: Dict[str, torch.Tensor], config_json: str, config_hash: str):
    """Write named float32 tensors (little-endian) with a versioned header carrying the run config."""
    tensors = {n: t.detach().to(torch.float32).contiguous() for n, t in state_dict.items()}
    metadata = {
        "format": CHECKPOINT_FORMAT,
        "version": str(CHECKPOINT_VERSION),
        "config_hash": config_hash,
        "config": config_json,
    }
    save_file(tensors, str(path), metadata=metadata)


def load_checkpoint(path) -> Tuple[Dict[str, torch.Tensor], dict, str]:
    """Returns (tensors, config dict, config hash).

    A missing, unreadable or foreign file raises a :py:class:`~socialmae.errors.ConfigurationError`
    keyed on ``checkpoint``.
    """
    if not pathlib.Path(path).is_file():
        raise ConfigurationError("checkpoint %s does not exist" % (path,), keys=["checkpoint"])
    try:
        with safe_open(str(path), framework="pt") as f:
            metadata = f.metadata() or {}
            if metadata.get("format") != CHECKPOINT_FORMAT:
                raise ConfigurationError("%s is not a socialmae checkpoint" % (path,), keys=["checkpoint"])
            if int(metadata.get("version", -1)) > CHECKPOINT_VERSION:
                raise ConfigurationError(
                    "checkpoint version %s is newer than supported" % metadata.get("version"), keys=["checkpoint"]
                )
            tensors = {k: f.get_tensor(k) for k in f.keys()}
        return tensors, json.loads(metadata["config"]), metadata["config_hash"]
    except ConfigurationError:
        raise
    except (OSError, ValueError, KeyError, SafetensorError) as e:
        raise ConfigurationError("cannot read checkpoint %s: %s" % (path, e), keys=["checkpoint"]) from e


def count_parameters(module: torch.nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
