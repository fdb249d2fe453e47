"""Transformer encoder stack with a between-layer fusion hook.

Each layer applies multi-head attention and a feed-forward network in
the post-layer-norm arrangement:

    G   = LN(X + MHA(X))
    X'  = LN(G + FFN(G))

``run_encoder`` threads the hidden states through all layers and applies
an optional transformation (the deep-fusion layer) to the hidden states
after a chosen layer, before the remaining layers run.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "EncoderConfig",
    "LayerParams",
    "Dropout",
    "layer_norm",
    "multi_head_attention",
    "feed_forward",
    "encoder_layer",
    "run_encoder",
    "init_layer_params",
]


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture hyperparameters.

    ``fusion_layer`` is the layer index l after which synonym fusion is
    injected (hidden states of layers 1..l are computed, fused, then fed
    to layers l+1..n_layers).  ``d_ff`` defaults to 4 * d_model.
    """

    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 0
    n_layers: int = 4
    fusion_layer: int = 1
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if not (1 <= self.fusion_layer < self.n_layers):
            raise ValueError(
                f"fusion_layer must be in [1, {self.n_layers - 1}], got {self.fusion_layer}"
            )
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def desk_scale(cls, **overrides) -> "EncoderConfig":
        """Small configuration that trains in seconds on a CPU."""
        return cls(**{"d_model": 128, "n_heads": 4, "n_layers": 4, "fusion_layer": 1, **overrides})

    @classmethod
    def full_scale(cls, **overrides) -> "EncoderConfig":
        """BERT-base shaped configuration (12 layers, randomly initialized)."""
        return cls(
            **{
                "d_model": 768,
                "n_heads": 12,
                "n_layers": 12,
                "fusion_layer": 1,
                **overrides,
            }
        )


@dataclass
class LayerParams:
    """Trainable tensors of one encoder layer."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    w_ff1: Tensor
    b_ff1: Tensor
    w_ff2: Tensor
    b_ff2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    def named(self, prefix: str = ""):
        for name in (
            "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
            "w_ff1", "b_ff1", "w_ff2", "b_ff2",
            "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
        ):
            yield prefix + name, getattr(self, name)


def init_layer_params(cfg: EncoderConfig, init_weight, dtype) -> LayerParams:
    """Fresh layer parameters: ``init_weight(shape)`` for projections,
    zeros for biases, gain 1 / bias 0 for the layer norms."""
    d, f = cfg.d_model, cfg.d_ff

    def w(*shape):
        return Tensor(init_weight(shape).astype(dtype), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    return LayerParams(
        wq=w(d, d), bq=zeros(d), wk=w(d, d), bk=zeros(d), wv=w(d, d), bv=zeros(d),
        wo=w(d, d), bo=zeros(d),
        w_ff1=w(d, f), b_ff1=zeros(f), w_ff2=w(f, d), b_ff2=zeros(d),
        ln1_gain=ones(d), ln1_bias=zeros(d), ln2_gain=ones(d), ln2_bias=zeros(d),
    )


class Dropout:
    """Inverted dropout driven by a dedicated RNG; None disables it."""

    def __init__(self, rng: np.random.Generator, rate: float):
        self.rng = rng
        self.rate = float(rate)

    def __call__(self, x: Tensor) -> Tensor:
        if self.rate <= 0.0:
            return x
        keep = (self.rng.random(x.shape) >= self.rate).astype(x.dtype)
        return x * Tensor(keep / (1.0 - self.rate))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row over the feature dimension, then scale and shift."""
    x = ad.as_tensor(x)
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * (var + eps) ** -0.5 * gain + bias


def multi_head_attention(
    x: Tensor,
    attention_mask: np.ndarray,
    params: LayerParams,
    cfg: EncoderConfig,
) -> Tensor:
    """Scaled dot-product attention over all heads.

    ``x`` is (..., T, d_model); ``attention_mask`` is (..., T) with 0 at
    padding positions.  Masked keys receive -inf logits before the
    softmax.  If every position is masked the output is defined as zero.
    """
    x = ad.as_tensor(x)
    mask = np.asarray(attention_mask)
    if not mask.any():
        return Tensor(np.zeros(x.shape, dtype=x.dtype))
    *batch, T, d = x.shape
    H, dh = cfg.n_heads, cfg.d_head

    def split_heads(t: Tensor) -> Tensor:
        # (..., T, d) -> (..., H, T, dh)
        return t.reshape(*batch, T, H, dh).swapaxes(-2, -3)

    q = split_heads(x @ params.wq + params.bq)
    k = split_heads(x @ params.wk + params.bk)
    v = split_heads(x @ params.wv + params.bv)
    logits = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh).item())
    key_mask = mask.reshape(*batch, 1, 1, T).astype(bool)
    logits = ad.where_mask(logits, key_mask, -np.inf)
    weights = ad.softmax(logits, axis=-1)
    ctx = (weights @ v).swapaxes(-2, -3).reshape(*batch, T, d)
    return ctx @ params.wo + params.bo


def feed_forward(x: Tensor, params: LayerParams) -> Tensor:
    """Position-wise two-layer network with GELU activation."""
    x = ad.as_tensor(x)
    return ad.gelu(x @ params.w_ff1 + params.b_ff1) @ params.w_ff2 + params.b_ff2


def encoder_layer(
    x: Tensor,
    attention_mask: np.ndarray,
    params: LayerParams,
    cfg: EncoderConfig,
    dropout: Dropout | None = None,
) -> Tensor:
    """One post-LN encoder layer; dropout applies to sublayer outputs."""
    attn = multi_head_attention(x, attention_mask, params, cfg)
    if dropout is not None:
        attn = dropout(attn)
    g = layer_norm(x + attn, params.ln1_gain, params.ln1_bias)
    ff = feed_forward(g, params)
    if dropout is not None:
        ff = dropout(ff)
    return layer_norm(g + ff, params.ln2_gain, params.ln2_bias)


def run_encoder(
    embedded: Tensor,
    attention_mask: np.ndarray,
    layers: list,
    cfg: EncoderConfig,
    fusion_hook=None,
    dropout: Dropout | None = None,
) -> Tensor:
    """Run all layers, applying ``fusion_hook`` after layer ``fusion_layer``.

    ``fusion_hook`` is a callable Tensor -> Tensor (or None to disable);
    with it disabled this is a plain n_layers-deep encoder.
    """
    x = ad.as_tensor(embedded)
    for i, layer in enumerate(layers, start=1):
        x = encoder_layer(x, attention_mask, layer, cfg, dropout)
        if i == cfg.fusion_layer and fusion_hook is not None:
            x = fusion_hook(x)
    return x
