"""Pre-norm transformer layer with SwiGLU or plain-MLP feed-forward."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionParams, LambdaParams, Variant, multi_head
from .tensor import ContractError, DimensionError, Tensor


class FfnKind(str, enum.Enum):
    SWIGLU = "swiglu"
    MLP = "mlp"


def swiglu_width(d_model: int) -> int:
    """round(8/3 * d_model), then up to the next multiple of 8."""
    raw = round(8 * d_model / 3)
    return -(-raw // 8) * 8


@dataclass
class FeedForwardParams:
    kind: FfnKind
    w_1: Tensor
    w_2: Tensor
    w_g: Tensor | None = None

    def __post_init__(self):
        self.kind = FfnKind(self.kind)
        d_model, d_ff = self.w_1.shape
        if self.w_2.shape != (d_ff, d_model):
            raise DimensionError(f"w_2 has shape {self.w_2.shape}, expected {(d_ff, d_model)}")
        if self.kind is FfnKind.SWIGLU and (self.w_g is None or self.w_g.shape != self.w_1.shape):
            raise DimensionError("SwiGLU needs w_g with the same shape as w_1")

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, kind: FfnKind) -> "FeedForwardParams":
        kind = FfnKind(kind)
        d_ff = swiglu_width(d_model) if kind is FfnKind.SWIGLU else 4 * d_model
        w_g = Tensor.randn(rng, (d_model, d_ff), 1 / math.sqrt(d_model)) if kind is FfnKind.SWIGLU else None
        w_1 = Tensor.randn(rng, (d_model, d_ff), 1 / math.sqrt(d_model))
        w_2 = Tensor.randn(rng, (d_ff, d_model), 1 / math.sqrt(d_ff))
        return cls(kind, w_1, w_2, w_g)

    def tensors(self) -> dict[str, Tensor]:
        out = {"w_1": self.w_1, "w_2": self.w_2}
        if self.w_g is not None:
            out["w_g"] = self.w_g
        return out


def swiglu(x: Tensor, p: FeedForwardParams) -> Tensor:
    """(swish(x W_g) * x W_1) W_2."""
    if p.kind is not FfnKind.SWIGLU:
        raise ContractError(f"swiglu called with a {p.kind.value} block")
    return (T.swish(x @ p.w_g) * (x @ p.w_1)) @ p.w_2


def plain_mlp(x: Tensor, p: FeedForwardParams) -> Tensor:
    """gelu(x W_1) W_2."""
    if p.kind is not FfnKind.MLP:
        raise ContractError(f"plain_mlp called with a {p.kind.value} block")
    return T.gelu(x @ p.w_1) @ p.w_2


def feed_forward(x: Tensor, p: FeedForwardParams) -> Tensor:
    return swiglu(x, p) if p.kind is FfnKind.SWIGLU else plain_mlp(x, p)


@dataclass
class LayerParams:
    attn: AttentionParams
    lam: LambdaParams
    ffn: FeedForwardParams
    norm1: Tensor
    norm2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, d_head: int, variant: Variant,
             ffn_kind: FfnKind, layer_index: int) -> "LayerParams":
        attn = AttentionParams.init(rng, d_model, d_head, variant)
        lam = LambdaParams.init(rng, attn.lambda_dim, layer_index)
        return cls(attn, lam, FeedForwardParams.init(rng, d_model, ffn_kind),
                   Tensor.ones((d_model,)), Tensor.ones((d_model,)))


def layer_forward(x: Tensor, p: LayerParams, mask=None, lambda_override: float | None = None) -> Tensor:
    """y = MultiHead(RMSNorm(x)) + x;  out = FFN(RMSNorm(y)) + y."""
    y = multi_head(T.rms_norm(x, p.norm1), p.attn, p.lam, mask, lambda_override) + x
    return feed_forward(T.rms_norm(y, p.norm2), p.ffn) + y


def stack_forward(x: Tensor, layers: list[LayerParams], mask=None) -> Tensor:
    for i, layer in enumerate(layers, start=1):
        if layer.lam.layer_index != i:
            raise ContractError(f"layer at position {i} carries layer_index {layer.lam.layer_index}")
        x = layer_forward(x, layer, mask)
    return x
