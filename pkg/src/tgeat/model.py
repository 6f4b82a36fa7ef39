"""Toy-scale transformer SER model with optional text-slot fusion and a DAT head."""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, NumericError, UnsupportedError, ValidationError

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    conv: tuple = ((32, 4, 4), (64, 4, 4), (64, 2, 2), (64, 2, 2))
    d_model: int = 64
    n_layers: int = 3
    n_heads: int = 4
    ff_dim: int = 128
    head_hidden: int = 512
    head_dropout: float = 0.5
    n_outputs: int = 3
    fusion: str = "none"
    text_dim: int = 0
    pool_text_slot: bool = True
    dat: bool = False
    n_environments: int = 20
    grl_lambda: float = 1.0
    text_init_gain: float = 0.1

    def __post_init__(self):
        self.conv = tuple(tuple(int(v) for v in layer) for layer in self.conv)
        self.validate()

    def validate(self) -> None:
        if not self.conv:
            raise ConfigError("at least one conv layer is required")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.fusion not in ("none", "text"):
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if self.fusion == "text" and self.text_dim < 1:
            raise ConfigError("text fusion needs text_dim >= 1")
        if self.grl_lambda <= 0:
            raise ConfigError("grl_lambda must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["conv"] = [list(c) for c in self.conv]
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


@dataclass
class LayerTrace:
    layers: list  # per-layer (B, S, D) outputs, layer 1 first


@dataclass
class ModelOutput:
    pred: torch.Tensor
    pooled: torch.Tensor
    frame_lengths: torch.Tensor
    env_logits: Optional[torch.Tensor] = None
    trace: Optional[LayerTrace] = None
    attention: Optional[list] = None
    n_frames: int = 0


# ---------------------------------------------------------------------------
# building blocks


def conv_output_length(length: int, conv: Sequence[Sequence[int]]) -> int:
    for _, k, s in conv:
        if length < k:
            return 0
        length = (length - k) // s + 1
    return length


def conv_min_length(conv: Sequence[Sequence[int]]) -> int:
    need = 1
    for _, k, s in reversed(list(conv)):
        need = (need - 1) * s + k
    return need


class ConvEncoder(nn.Module):
    def __init__(self, conv, d_model: int):
        super().__init__()
        self.spec = tuple(conv)
        layers = []
        in_ch = 1
        for ch, k, s in self.spec:
            layers.append(nn.Conv1d(in_ch, ch, k, s))
            in_ch = ch
        self.layers = nn.ModuleList(layers)
        self.norm = nn.LayerNorm(in_ch)
        self.proj = nn.Linear(in_ch, d_model)

    @property
    def min_length(self) -> int:
        return conv_min_length(self.spec)

    def output_lengths(self, lengths: torch.Tensor) -> torch.Tensor:
        out = lengths.clone()
        for _, k, s in self.spec:
            out = torch.div(out - k, s, rounding_mode="floor") + 1
        return out

    def forward(self, wave: torch.Tensor, lengths: torch.Tensor):
        if int(lengths.min()) < self.min_length:
            raise ValidationError(
                f"waveform too short: {int(lengths.min())} samples, minimum is {self.min_length}")
        x = wave.unsqueeze(1)
        for conv in self.layers:
            x = F.gelu(conv(x))
        x = self.proj(self.norm(x.transpose(1, 2)))
        return x, self.output_lengths(lengths)


def sinusoidal_positions(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos positional signal for integer ``positions`` of any shape."""
    half = dim // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    angle = positions.to(torch.float64).unsqueeze(-1) * freq
    pe = torch.cat([torch.sin(angle), torch.cos(angle)], dim=-1)
    if dim % 2:
        pe = F.pad(pe, (0, 1))
    return pe


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x, key_mask=None, return_weights=False):
        b, s, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).view(b, s, 3, h, d // h).permute(2, 0, 3, 1, 4)
        if not return_weights:
            mask = key_mask[:, None, None, :] if key_mask is not None else None
            y = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
            return self.out(y.transpose(1, 2).reshape(b, s, d)), None
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        y = (weights @ v).transpose(1, 2).reshape(b, s, d)
        return self.out(y), (weights if return_weights else None)


class EncoderLayer(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, d_model: int, n_heads: int, ff_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, ff_dim), nn.GELU(), nn.Linear(ff_dim, d_model))

    def forward(self, x, key_mask=None, return_weights=False):
        a, w = self.attn(self.norm1(x), key_mask, return_weights)
        x = x + a
        return x + self.ff(self.norm2(x)), w


def regression_head(d_in: int, hidden: int, n_out: int, dropout: float) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(d_in, hidden), nn.LayerNorm(hidden), nn.ReLU(), nn.Dropout(dropout),
        nn.Linear(hidden, hidden), nn.LayerNorm(hidden), nn.ReLU(), nn.Dropout(dropout),
        nn.Linear(hidden, n_out),
    )


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.lam * grad, None


def grad_reverse(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """Identity forward; multiplies the incoming gradient by -lam on the way back."""
    return _GradReverse.apply(x, lam)


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    m = mask.to(x.dtype).unsqueeze(-1)
    return (x * m).sum(dim=1) / m.sum(dim=1)


# ---------------------------------------------------------------------------
# model


class SerModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = ConvEncoder(config.conv, config.d_model)
        self.text_proj = None
        if config.fusion == "text":
            self.text_proj = nn.Linear(config.text_dim, config.d_model)
            with torch.no_grad():
                self.text_proj.weight.mul_(config.text_init_gain)
                self.text_proj.bias.zero_()
        self.layers = nn.ModuleList(
            EncoderLayer(config.d_model, config.n_heads, config.ff_dim) for _ in range(config.n_layers))
        self.head = regression_head(config.d_model, config.head_hidden, config.n_outputs, config.head_dropout)
        self.env_head = None
        if config.dat:
            self.env_head = regression_head(config.d_model, config.head_hidden, config.n_environments,
                                            config.head_dropout)

    # parameter groups ---------------------------------------------------
    def conv_parameters(self):
        return list(self.encoder.parameters())

    def adaptation_parameters(self):
        params = [p for layer in self.layers for p in layer.parameters()] + list(self.head.parameters())
        if self.text_proj is not None:
            params += list(self.text_proj.parameters())
        if self.env_head is not None:
            params += list(self.env_head.parameters())
        return params

    def freeze_conv(self, frozen: bool = True) -> None:
        for p in self.encoder.parameters():
            p.requires_grad_(not frozen)

    # pipeline pieces ------------------------------------------------------
    def conv_encode(self, wave: torch.Tensor, lengths: Optional[torch.Tensor] = None):
        if wave.dim() == 1:
            wave = wave.unsqueeze(0)
        if lengths is None:
            lengths = torch.full((wave.shape[0],), wave.shape[1], dtype=torch.long)
        return self.encoder(wave, lengths)

    def project_text(self, embedding: torch.Tensor) -> torch.Tensor:
        if self.text_proj is None:
            raise UnsupportedError("model was built without text fusion")
        if embedding.shape[-1] != self.config.text_dim:
            raise ValidationError(
                f"text embedding dim {embedding.shape[-1]} != configured text_dim {self.config.text_dim}")
        return self.text_proj(embedding)

    @staticmethod
    def fuse(frames: torch.Tensor, projected: torch.Tensor) -> torch.Tensor:
        """Append the projected text vector as one extra time step after the acoustic frames."""
        if projected.dim() == 1:
            projected = projected.expand(frames.shape[0], -1)
        return torch.cat([frames, projected.unsqueeze(1)], dim=1)

    def transformer_forward(self, sequence: torch.Tensor, key_mask: Optional[torch.Tensor] = None,
                            return_trace: bool = False, return_attention: bool = False):
        trace = [] if return_trace else None
        attn = [] if return_attention else None
        x = sequence
        for i, layer in enumerate(self.layers, start=1):
            x, w = layer(x, key_mask, return_attention)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after transformer layer {i}")
            if trace is not None:
                trace.append(x)
            if attn is not None:
                attn.append(w)
        return x, (LayerTrace(trace) if trace is not None else None), attn

    def pool(self, rep: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return masked_mean(rep, mask)

    def regress(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.head(pooled)

    def env_classify(self, pooled: torch.Tensor, grl_lambda: Optional[float] = None,
                     reverse: bool = True) -> torch.Tensor:
        if self.env_head is None:
            raise UnsupportedError("environment classifier requires a DAT model")
        lam = self.config.grl_lambda if grl_lambda is None else grl_lambda
        return self.env_head(grad_reverse(pooled, lam) if reverse else pooled)

    def build_sequence(self, frames: torch.Tensor, frame_lengths: torch.Tensor,
                       text: Optional[torch.Tensor] = None):
        """Fuse (if configured), add positions; returns (sequence, key mask, pool mask)."""
        b, t, d = frames.shape
        pos = torch.arange(t).expand(b, t)
        valid = pos < frame_lengths[:, None]
        if self.config.fusion == "text":
            if text is None:
                raise ValidationError("text-fused model needs a text embedding")
            seq = self.fuse(frames, self.project_text(text))
            # the text slot takes position index T of its own utterance
            pos = torch.cat([pos, frame_lengths[:, None]], dim=1)
            valid = torch.cat([valid, torch.ones(b, 1, dtype=torch.bool)], dim=1)
        else:
            seq = frames
        seq = seq + sinusoidal_positions(pos, d).to(seq.dtype)
        pool_mask = valid.clone()
        if self.config.fusion == "text" and not self.config.pool_text_slot:
            pool_mask[:, -1] = False
        return seq, valid, pool_mask

    def forward(self, wave: torch.Tensor, lengths: Optional[torch.Tensor] = None,
                text: Optional[torch.Tensor] = None, return_trace: bool = False,
                return_attention: bool = False) -> ModelOutput:
        frames, flen = self.conv_encode(wave, lengths)
        seq, key_mask, pool_mask = self.build_sequence(frames, flen, text)
        rep, trace, attn = self.transformer_forward(seq, key_mask, return_trace, return_attention)
        pooled = self.pool(rep, pool_mask)
        out = ModelOutput(self.regress(pooled), pooled, flen, trace=trace, attention=attn,
                          n_frames=frames.shape[1])
        if self.env_head is not None:
            out.env_logits = self.env_classify(pooled)
        return out


def acoustic_pool(layer_rep: torch.Tensor, frame_lengths: torch.Tensor, n_frames: int) -> torch.Tensor:
    """Mean over valid acoustic slots only (drops padding and any text slot)."""
    rep = layer_rep[:, :n_frames]
    mask = torch.arange(n_frames)[None, :] < frame_lengths[:, None]
    return masked_mean(rep, mask)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: SerModel, stage: str, meta: Optional[dict] = None,
                    provider=None) -> None:
    """npz container: named parameter arrays plus a JSON header (config, stage tag, extras)."""
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    header = {"version": CHECKPOINT_VERSION, "stage": stage, "config": model.config.to_json(),
              "meta": meta or {}, "provider": None}
    if provider is not None:
        pa = provider.to_arrays()
        header["provider"] = {"kind": pa["kind"], "provider_id": pa["provider_id"], "keys": pa["keys"]}
        arrays["provider/weight"] = pa["weight"]
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path):
    """Returns (model, header, provider-or-None)."""
    from .envtext import provider_from_arrays

    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValidationError(f"{path}: unsupported checkpoint version {header.get('version')}")
        model = SerModel(ModelConfig.from_json(header["config"]))
        state = {k[len("param/"):]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("param/")}
        model.load_state_dict(state)
        provider = None
        if header.get("provider"):
            p = dict(header["provider"])
            p["weight"] = data["provider/weight"].copy() if "provider/weight" in data.files else None
            provider = provider_from_arrays(p)
    return model.eval(), header, provider
