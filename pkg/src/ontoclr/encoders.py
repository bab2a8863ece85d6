"""Vitals encoder, contrastive projection head, and teacher/student heads.

The encoder is a small pre-LN transformer: per-timestep linear projection of
the 2c input channels (values + missingness indicators), fixed sinusoidal
positional encoding, `layers` blocks of multi-head self-attention and a
gelu MLP, a final layer norm, then mean (or cls-token) pooling into one
model_dim embedding.

Parameters live in flat name→Tensor dicts so checkpointing, optimizers, and
parameter surgery (copying a teacher tower into a student) stay trivial.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateConfig, ShapeMismatch

POOLING_MODES = ("mean", "cls")


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    heads: int = 4
    model_dim: int = 64
    input_channels: int = 24
    max_timesteps: int = 24
    pooling: str = "mean"
    ffn_factor: int = 4

    def __post_init__(self):
        if min(self.layers, self.heads, self.model_dim,
               self.input_channels, self.max_timesteps, self.ffn_factor) < 1:
            raise DegenerateConfig("encoder dimensions must be positive")
        if self.model_dim % self.heads:
            raise DegenerateConfig(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}"
            )
        if self.pooling not in POOLING_MODES:
            raise DegenerateConfig(f"pooling must be one of {POOLING_MODES}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


def _uniform(rng: np.random.Generator, fan_in: int, *shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _linear_params(rng, fan_in: int, fan_out: int, prefix: str) -> dict[str, Tensor]:
    return {f"{prefix}.w": _uniform(rng, fan_in, fan_in, fan_out),
            f"{prefix}.b": _zeros(fan_out)}


def _affine_params(dim: int, prefix: str) -> dict[str, Tensor]:
    return {f"{prefix}.g": Tensor(np.ones(dim), requires_grad=True),
            f"{prefix}.b": _zeros(dim)}


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator,
                        prefix: str = "enc") -> dict[str, Tensor]:
    d = cfg.model_dim
    params = _linear_params(rng, cfg.input_channels, d, f"{prefix}.in")
    for i in range(cfg.layers):
        blk = f"{prefix}.l{i}"
        params.update(_affine_params(d, f"{blk}.ln1"))
        for name in ("q", "k", "v", "o"):
            params.update(_linear_params(rng, d, d, f"{blk}.attn.{name}"))
        params.update(_affine_params(d, f"{blk}.ln2"))
        params.update(_linear_params(rng, d, d * cfg.ffn_factor, f"{blk}.ffn.up"))
        params.update(_linear_params(rng, d * cfg.ffn_factor, d, f"{blk}.ffn.down"))
    params.update(_affine_params(d, f"{prefix}.ln_out"))
    if cfg.pooling == "cls":
        params[f"{prefix}.cls"] = Tensor(
            rng.uniform(-1.0 / math.sqrt(d), 1.0 / math.sqrt(d), size=(1, 1, d)),
            requires_grad=True,
        )
    return params


def sinusoidal_encoding(n_positions: int, dim: int) -> np.ndarray:
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * (i // 2) / dim)
    enc = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return enc


def _linear(params, prefix: str, x: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def _ln(params, prefix: str, x: Tensor) -> Tensor:
    normed = ad.layer_norm(x, axis=-1)
    return ad.add(ad.mul(normed, params[f"{prefix}.g"]), params[f"{prefix}.b"])


def _attention(cfg: EncoderConfig, params, blk: str, x: Tensor) -> Tensor:
    b, t, d = x.shape
    h, dh = cfg.heads, cfg.head_dim

    def split_heads(v: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(v, (b, t, h, dh)), (0, 2, 1, 3))

    q = split_heads(_linear(params, f"{blk}.attn.q", x))
    k = split_heads(_linear(params, f"{blk}.attn.k", x))
    v = split_heads(_linear(params, f"{blk}.attn.v", x))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    mixed = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
    return _linear(params, f"{blk}.attn.o", mixed)


def encode_vitals(cfg: EncoderConfig, params: dict[str, Tensor], x,
                  prefix: str = "enc") -> Tensor:
    """Embed a (T, 2c) series or a (B, T, 2c) batch into model_dim vectors."""
    xt = x if isinstance(x, Tensor) else Tensor(x)
    squeeze = xt.data.ndim == 2
    if squeeze:
        xt = ad.reshape(xt, (1,) + xt.shape)
    if xt.data.ndim != 3 or xt.shape[1:] != (cfg.max_timesteps, cfg.input_channels):
        raise ShapeMismatch(
            f"expected (batch, {cfg.max_timesteps}, {cfg.input_channels}) vitals, "
            f"got {tuple(np.shape(x))}"
        )
    h = _linear(params, f"{prefix}.in", xt)
    if cfg.pooling == "cls":
        cls = params[f"{prefix}.cls"]
        cls_row = ad.concat([cls] * xt.shape[0], axis=0) if xt.shape[0] > 1 else cls
        h = ad.concat([cls_row, h], axis=1)
    pe = sinusoidal_encoding(h.shape[1], cfg.model_dim)
    h = ad.add(h, Tensor(pe))
    for i in range(cfg.layers):
        blk = f"{prefix}.l{i}"
        h = ad.add(h, _attention(cfg, params, blk, _ln(params, f"{blk}.ln1", h)))
        up = ad.gelu(_linear(params, f"{blk}.ffn.up", _ln(params, f"{blk}.ln2", h)))
        h = ad.add(h, _linear(params, f"{blk}.ffn.down", up))
    h = _ln(params, f"{prefix}.ln_out", h)
    pooled = h[:, 0, :] if cfg.pooling == "cls" else ad.tensor_mean(h, axis=1)
    return pooled[0] if squeeze else pooled


def init_projection_params(cfg: EncoderConfig, rng: np.random.Generator,
                           out_dim: int | None = None,
                           prefix: str = "proj") -> dict[str, Tensor]:
    d = cfg.model_dim
    out = out_dim or d
    params = _linear_params(rng, d, d, f"{prefix}.hidden")
    params.update(_linear_params(rng, d, out, f"{prefix}.out"))
    return params


def project_contrastive(params: dict[str, Tensor], h: Tensor,
                        prefix: str = "proj") -> Tensor:
    """Two-layer MLP head then ℓ2 normalization; rows have unit norm."""
    z = _linear(params, f"{prefix}.out",
                ad.gelu(_linear(params, f"{prefix}.hidden", h)))
    return ad.l2_normalize(z, axis=-1)


def init_head_params(cfg: EncoderConfig, rng: np.random.Generator,
                     n_outputs: int, prefix: str = "head") -> dict[str, Tensor]:
    return _linear_params(rng, cfg.model_dim, n_outputs, prefix)


def class_logits(params: dict[str, Tensor], h: Tensor,
                 prefix: str = "head") -> Tensor:
    return _linear(params, prefix, h)


def init_adapter_params(cfg: EncoderConfig, rng: np.random.Generator,
                        note_dim: int, prefix: str = "adapter") -> dict[str, Tensor]:
    return _linear_params(rng, note_dim, cfg.model_dim, prefix)


def init_teacher_params(cfg: EncoderConfig, rng: np.random.Generator,
                        note_dim: int, n_outputs: int) -> dict[str, Tensor]:
    params = init_encoder_params(cfg, rng)
    params.update(init_adapter_params(cfg, rng, note_dim))
    params.update(init_head_params(cfg, rng, n_outputs))
    return params


def init_student_params(cfg: EncoderConfig, rng: np.random.Generator,
                        n_outputs: int) -> dict[str, Tensor]:
    params = init_encoder_params(cfg, rng)
    params.update(init_head_params(cfg, rng, n_outputs))
    return params


def teacher_forward(cfg: EncoderConfig, params: dict[str, Tensor],
                    note_emb, x) -> Tensor:
    """Logits from additively fused note and vitals embeddings."""
    ne = note_emb if isinstance(note_emb, Tensor) else Tensor(note_emb)
    if ne.shape[-1] != params["adapter.w"].shape[0]:
        raise ShapeMismatch(
            f"note embedding dim {ne.shape[-1]} != adapter input "
            f"{params['adapter.w'].shape[0]}"
        )
    h_notes = _linear(params, "adapter", ne)
    h_vitals = encode_vitals(cfg, params, x)
    return class_logits(params, ad.add(h_notes, h_vitals))


def student_forward(cfg: EncoderConfig, params: dict[str, Tensor], x) -> Tensor:
    return class_logits(params, encode_vitals(cfg, params, x))


def parameter_count(params: dict[str, Tensor]) -> int:
    return sum(p.data.size for p in params.values())
