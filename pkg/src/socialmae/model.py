"""
model.py
========

The network. Two modality encoders feed one joint encoder whose transformer weights are
shared by the audio-only, video-only and concatenated passes; only the terminal layer norm
differs per pass. A joint decoder reconstructs both modalities from the concatenated encoding
with a learnable mask token at masked slots. For downstream tasks the decoder is replaced by
a linear :py:class:`TaskHead`.
"""

from enum import Enum
from typing import Optional, Tuple

import torch
import torch.nn as nn
from pydantic import BaseModel

from . import numerics
from .errors import InternalError, UsageError
from .tokenizer import EmbeddingTables, MaskPlan, Modality, TokenSequence, tokenize_audio, tokenize_video
from .types import FinetuneRecipe, ModelConfig, RunConfig, TaskKind


class InputMode(str, Enum):
    audio = "audio"
    video = "video"
    av = "av"


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = numerics.LAYER_NORM_EPS):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return numerics.layer_norm(x, self.weight, self.bias, self.eps)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        qkv = numerics.linear(x, self.qkv.weight, self.qkv.bias)
        q, k, v = qkv.reshape(b, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4).unbind(0)

        attn = numerics.softmax(numerics.scale(numerics.matmul(q, k.transpose(-2, -1)), self.scale), dim=-1)
        out = numerics.matmul(attn, v).transpose(1, 2).reshape(b, n, c)
        return numerics.linear(out, self.proj.weight, self.proj.bias)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        h = numerics.gelu(numerics.linear(x, self.fc1.weight, self.fc1.bias))
        return numerics.linear(h, self.fc2.weight, self.fc2.bias)


class TransformerLayer(nn.Module):
    """Pre-norm block: x + attn(norm1(x)), then x + ffn(norm2(x)). Output shape equals input shape."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, eps: float):
        super().__init__()
        self.norm1 = LayerNorm(dim, eps)
        self.attn = Attention(dim, num_heads)
        self.norm2 = LayerNorm(dim, eps)
        self.ffn = FeedForward(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = numerics.add(x, self.attn(self.norm1(x)))
        return numerics.add(x, self.ffn(self.norm2(x)))


def _stack(cfg: ModelConfig, depth: int, dim: int, heads: int) -> nn.ModuleList:
    return nn.ModuleList([TransformerLayer(dim, heads, cfg.mlp_ratio, cfg.layer_norm_eps) for _ in range(depth)])


def _init_linear(module: nn.Module):
    if isinstance(module, nn.Linear):
        nn.init.xavier_uniform_(module.weight)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def _run(layers: nn.ModuleList, x: torch.Tensor) -> torch.Tensor:
    for layer in layers:
        x = layer(x)
    return x


class EncoderOutput(BaseModel):
    """Outputs of one encoder pass. Pooled vectors are the token means after the modality-specific norms."""

    audio_tokens: torch.Tensor
    video_tokens: torch.Tensor
    joint_tokens: torch.Tensor
    pooled_audio: torch.Tensor
    pooled_video: torch.Tensor

    class Config:
        arbitrary_types_allowed = True


class AudioVisualEncoder(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        m = cfg.model
        self.patch = cfg.patch
        self.tables = EmbeddingTables(cfg)
        self.audio_encoder = _stack(m, m.modality_encoder_depth, m.embed_dim, m.num_heads)
        self.video_encoder = _stack(m, m.modality_encoder_depth, m.embed_dim, m.num_heads)
        self.joint_encoder = _stack(m, m.joint_encoder_depth, m.embed_dim, m.num_heads)
        self.norm_audio = LayerNorm(m.embed_dim, m.layer_norm_eps)
        self.norm_video = LayerNorm(m.embed_dim, m.layer_norm_eps)
        self.norm_multimodal = LayerNorm(m.embed_dim, m.layer_norm_eps)

        for stack in (self.audio_encoder, self.video_encoder, self.joint_encoder):
            stack.apply(_init_linear)

    def tokenize(self, audio: torch.Tensor, frames: torch.Tensor) -> Tuple[TokenSequence, TokenSequence]:
        return tokenize_audio(audio, self.tables, self.patch), tokenize_video(frames, self.tables, self.patch)

    def modality_stack(self, modality: Modality) -> nn.ModuleList:
        return self.audio_encoder if modality == Modality.audio else self.video_encoder

    def terminal_norm(self, modality: Modality) -> LayerNorm:
        return self.norm_audio if modality == Modality.audio else self.norm_video

    def encode_unimodal(self, seq: TokenSequence, modality: Modality) -> Tuple[torch.Tensor, torch.Tensor]:
        """Modality encoder, shared joint encoder, modality norm, mean pool. Returns (tokens, pooled)."""
        if seq.modality != modality:
            raise UsageError("a %s sequence cannot go through the %s path" % (seq.modality.value, modality.value))
        x = _run(self.modality_stack(modality), seq.embeddings)
        return self._unimodal_tail(x, modality)

    def _unimodal_tail(self, x: torch.Tensor, modality: Modality):
        x = self.terminal_norm(modality)(_run(self.joint_encoder, x))
        return x, numerics.mean(x, dim=1)

    def _joint_tail(self, xa: torch.Tensor, xv: torch.Tensor) -> torch.Tensor:
        return self.norm_multimodal(_run(self.joint_encoder, torch.cat([xa, xv], dim=1)))

    def encode_joint(self, audio_seq: TokenSequence, video_seq: TokenSequence) -> torch.Tensor:
        """Each modality through its own encoder, then [audio; video] through the shared joint layers."""
        if audio_seq.modality != Modality.audio or video_seq.modality != Modality.video:
            raise UsageError("encode_joint expects an audio and a video sequence, in that order")
        xa = _run(self.audio_encoder, audio_seq.embeddings)
        xv = _run(self.video_encoder, video_seq.embeddings)
        return self._joint_tail(xa, xv)

    def forward(self, audio_seq: TokenSequence, video_seq: TokenSequence) -> EncoderOutput:
        """All three joint-encoder passes, sharing the modality-encoder outputs."""
        xa = _run(self.audio_encoder, audio_seq.embeddings)
        xv = _run(self.video_encoder, video_seq.embeddings)
        audio_tokens, pooled_audio = self._unimodal_tail(xa, Modality.audio)
        video_tokens, pooled_video = self._unimodal_tail(xv, Modality.video)
        return EncoderOutput(
            audio_tokens=audio_tokens,
            video_tokens=video_tokens,
            joint_tokens=self._joint_tail(xa, xv),
            pooled_audio=pooled_audio,
            pooled_video=pooled_video,
        )


class JointDecoder(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        m = cfg.model
        dim = m.decoder_dim
        self.embed = nn.Linear(m.embed_dim, dim)
        self.mask_token = nn.Parameter(torch.zeros(dim))
        self.audio_pos = nn.Parameter(torch.zeros(cfg.audio_tokens, dim))
        self.video_pos = nn.Parameter(torch.zeros(cfg.video_tokens, dim))
        self.blocks = _stack(m, m.decoder_depth, dim, m.decoder_num_heads)
        self.norm = LayerNorm(dim, m.layer_norm_eps)
        self.audio_head = nn.Linear(dim, cfg.patch.audio_patch_volume)
        self.video_head = nn.Linear(dim, cfg.patch.video_patch_volume)

        self.apply(_init_linear)
        nn.init.normal_(self.mask_token, std=0.02)
        nn.init.trunc_normal_(self.audio_pos, std=0.02)
        nn.init.trunc_normal_(self.video_pos, std=0.02)

    def _fill(self, x: torch.Tensor, plan: MaskPlan, pos: torch.Tensor) -> torch.Tensor:
        b, n = x.shape[0], plan.num_tokens
        full = self.mask_token.repeat(b, n, 1)
        # Visible slots are overwritten; everything else keeps the mask token.
        full = numerics.scatter(full, plan.visible_indices, x)
        return numerics.add(full, pos[:n])

    def forward(
        self, joint_tokens: torch.Tensor, audio_plan: MaskPlan, video_plan: MaskPlan
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns predicted patches (B, N_a, V_a) and (B, N_v, V_v), aligned to patch indices."""
        na_visible = audio_plan.visible_indices.shape[1]
        nv_visible = video_plan.visible_indices.shape[1]
        if joint_tokens.shape[1] != na_visible + nv_visible:
            raise InternalError(
                "joint sequence of %d tokens does not match %d + %d visible tokens"
                % (joint_tokens.shape[1], na_visible, nv_visible)
            )
        x = numerics.linear(joint_tokens, self.embed.weight, self.embed.bias)
        full_audio = self._fill(x[:, :na_visible], audio_plan, self.audio_pos)
        full_video = self._fill(x[:, na_visible:], video_plan, self.video_pos)

        h = self.norm(_run(self.blocks, torch.cat([full_audio, full_video], dim=1)))
        na = audio_plan.num_tokens
        pred_audio = numerics.linear(h[:, :na], self.audio_head.weight, self.audio_head.bias)
        pred_video = numerics.linear(h[:, na:], self.video_head.weight, self.video_head.bias)
        return pred_audio, pred_video


class SocialMAE(nn.Module):
    """The pre-training network: encoder plus joint decoder."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.encoder = AudioVisualEncoder(cfg)
        self.decoder = JointDecoder(cfg)

    def decode(self, joint_tokens: torch.Tensor, audio_plan: MaskPlan, video_plan: MaskPlan):
        return self.decoder(joint_tokens, audio_plan, video_plan)


class TaskHead(nn.Module):
    def __init__(self, embed_dim: int, num_outputs: int, kind: TaskKind):
        super().__init__()
        self.kind = TaskKind(kind)
        self.num_outputs = num_outputs
        self.linear = nn.Linear(embed_dim, num_outputs)
        nn.init.trunc_normal_(self.linear.weight, std=0.02)
        nn.init.zeros_(self.linear.bias)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        out = numerics.linear(pooled, self.linear.weight, self.linear.bias)
        if self.kind == TaskKind.regression:
            out = torch.sigmoid(out)
        return out


def classify(
    encoder: AudioVisualEncoder,
    head: TaskHead,
    audio_seq: Optional[TokenSequence] = None,
    video_seq: Optional[TokenSequence] = None,
    task: Optional[FinetuneRecipe] = None,
) -> torch.Tensor:
    """Unmasked forward: pooled (multimodal or unimodal) joint-encoder output through the head."""
    if task is not None and (head.kind != task.kind or head.num_outputs != task.num_outputs):
        raise UsageError(
            "head (%s, %d outputs) does not match task %s (%s, %d outputs)"
            % (head.kind.value, head.num_outputs, task.task, task.kind.value, task.num_outputs)
        )
    if audio_seq is not None and video_seq is not None:
        pooled = numerics.mean(encoder.encode_joint(audio_seq, video_seq), dim=1)
    elif audio_seq is not None:
        _, pooled = encoder.encode_unimodal(audio_seq, Modality.audio)
    elif video_seq is not None:
        _, pooled = encoder.encode_unimodal(video_seq, Modality.video)
    else:
        raise UsageError("classify needs at least one modality")
    return head(pooled)


class SocialMAEForTask(nn.Module):
    """Encoder plus a randomly initialized linear head; the decoder is gone."""

    def __init__(self, cfg: RunConfig, recipe: FinetuneRecipe):
        super().__init__()
        self.recipe = recipe
        self.encoder = AudioVisualEncoder(cfg)
        self.head = TaskHead(cfg.model.embed_dim, recipe.num_outputs, recipe.kind)

    def forward(self, audio: torch.Tensor, frames: torch.Tensor, mode: InputMode = InputMode.av) -> torch.Tensor:
        audio_seq, video_seq = self.encoder.tokenize(audio, frames)
        return classify(
            self.encoder,
            self.head,
            audio_seq=audio_seq if mode in (InputMode.audio, InputMode.av) else None,
            video_seq=video_seq if mode in (InputMode.video, InputMode.av) else None,
            task=self.recipe,
        )
