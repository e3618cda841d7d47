"""Vanilla, original-differential and fine-tuning-differential attention.

Projection weights hold every head side by side: head ``i`` owns columns
``i*d_head:(i+1)*d_head`` of ``w_q``, ``w_k`` and ``w_v``. For the original
differential variant each head's Q/K block is further split into two halves
of width ``d = d_head // 2``; the first half is set 1, the second set 2.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor

LAMBDA_INIT_STD = 0.1
# Per-head norm epsilon. Kept far below activation scale so that the
# (1 - λ) factor of the fine-tuning variant cancels to float32 resolution.
HEAD_NORM_EPS = 1e-12
ROLES = ("w_q", "w_k", "w_v", "w_o")


class Variant(str, enum.Enum):
    VANILLA = "vanilla"
    DIFF_ORIGINAL = "diff_original"
    DIFF_FINETUNE = "diff_finetune"


def lambda_init_schedule(layer: int) -> float:
    """Depth-dependent λ initial value, 0.8 - 0.6 exp(-0.3 (l - 1)), for l >= 1."""
    if layer < 1:
        raise ContractError(f"layer index must be >= 1, got {layer}")
    return 0.8 - 0.6 * math.exp(-0.3 * (layer - 1))


@dataclass
class LambdaParams:
    lambda_q1: Tensor
    lambda_k1: Tensor
    lambda_q2: Tensor
    lambda_k2: Tensor
    lambda_init: float
    layer_index: int

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, layer_index: int,
             std: float = LAMBDA_INIT_STD) -> "LambdaParams":
        # zero init would give exactly zero gradient through both exp factors
        vecs = [Tensor.randn(rng, (dim,), std, requires_grad=True) for _ in range(4)]
        return cls(*vecs, lambda_init=lambda_init_schedule(layer_index), layer_index=layer_index)

    @property
    def dim(self) -> int:
        return self.lambda_q1.shape[0]

    def vectors(self) -> dict[str, Tensor]:
        return {"lambda_q1": self.lambda_q1, "lambda_k1": self.lambda_k1,
                "lambda_q2": self.lambda_q2, "lambda_k2": self.lambda_k2}


def compute_lambda(p: LambdaParams) -> Tensor:
    """λ = exp(λq1·λk1) - exp(λq2·λk2) + λ_init, as a differentiable scalar."""
    dims = {v.shape for v in p.vectors().values()}
    if len(dims) != 1:
        raise ContractError(f"lambda vectors differ in shape: {sorted(dims)}")
    return T.texp(T.dot(p.lambda_q1, p.lambda_k1)) - T.texp(T.dot(p.lambda_q2, p.lambda_k2)) + p.lambda_init


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    n_heads: int
    d_head: int
    variant: Variant
    head_norm: Tensor | None = None  # per-head RMSNorm gain, width d_head
    adapters: dict = field(default_factory=dict)  # role -> LoraAdapter

    def __post_init__(self):
        self.variant = Variant(self.variant)
        d_model = self.w_q.shape[0]
        if self.n_heads * self.d_head != d_model:
            raise ContractError(f"n_heads*d_head = {self.n_heads}*{self.d_head} != d_model {d_model}")
        width = self.n_heads * self.d_head
        for role in ("w_q", "w_k", "w_v"):
            w = getattr(self, role)
            if w.shape != (d_model, width):
                raise DimensionError(f"{role} has shape {w.shape}, expected {(d_model, width)}")
        if self.w_o.shape != (d_model, d_model):
            raise DimensionError(f"w_o has shape {self.w_o.shape}, expected {(d_model, d_model)}")
        if self.variant is Variant.DIFF_ORIGINAL and self.d_head % 2:
            raise ContractError(f"diff_original needs an even d_head, got {self.d_head}")
        if self.head_norm is not None and self.head_norm.shape != (self.d_head,):
            raise DimensionError(f"head_norm gain must have shape ({self.d_head},)")

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, d_head: int, variant: Variant,
             head_norm: bool = True) -> "AttentionParams":
        if d_model % d_head:
            raise ContractError(f"d_model {d_model} is not divisible by d_head {d_head}")
        std = 1.0 / math.sqrt(d_model)
        ws = [Tensor.randn(rng, (d_model, d_model), std) for _ in range(4)]
        gain = Tensor.ones((d_head,), requires_grad=True) if head_norm else None
        return cls(*ws, n_heads=d_model // d_head, d_head=d_head, variant=variant, head_norm=gain)

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def lambda_dim(self) -> int:
        return self.d_head // 2 if self.variant is Variant.DIFF_ORIGINAL else self.d_head

    def project(self, x: Tensor, role: str) -> Tensor:
        """x @ W for one projection role, routed through its LoRA adapter if any."""
        base = getattr(self, role)
        adapter = self.adapters.get(role)
        if adapter is None:
            return x @ base
        from .lora import apply
        return apply(base, adapter, x)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def full_mask(n: int) -> np.ndarray:
    return np.ones((n, n), dtype=bool)


def _check_mask(mask, n: int) -> np.ndarray:
    if mask is None:
        return full_mask(n)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n, n):
        raise ContractError(f"mask shape {mask.shape} != ({n}, {n})")
    return mask


def _lambda_value(lam: LambdaParams | None, override) -> Tensor:
    if override is not None:
        return T.as_tensor(float(override))
    if lam is None:
        raise ContractError("differential attention needs LambdaParams or a lambda override")
    return compute_lambda(lam)


def vanilla_attention(q: Tensor, k: Tensor, v: Tensor, mask=None, probe: dict | None = None) -> Tensor:
    """softmax(Q Kᵀ / sqrt(d)) V for one head, d = width of Q."""
    mask = _check_mask(mask, q.shape[0])
    weights = T.softmax_rows((q @ k.T) * (1.0 / math.sqrt(q.shape[1])), mask)
    if probe is not None:
        probe["weights"] = weights.data
    return weights @ v


def diff_attention_original(q: Tensor, k: Tensor, v: Tensor, lam: LambdaParams | None, mask=None,
                            lambda_override: float | None = None, probe: dict | None = None,
                            lam_value: Tensor | None = None) -> Tensor:
    """(softmax(Q1 K1ᵀ/√d) - λ softmax(Q2 K2ᵀ/√d)) V with d = half the head width.

    Q1/K1 are the first d columns of the head's Q/K, Q2/K2 the last d.
    """
    width = q.shape[1]
    if width % 2:
        raise ContractError(f"diff_original needs an even head width, got {width}")
    d = width // 2
    mask = _check_mask(mask, q.shape[0])
    scale = 1.0 / math.sqrt(d)
    a1 = T.softmax_rows((q[:, :d] @ k[:, :d].T) * scale, mask)
    a2 = T.softmax_rows((q[:, d:] @ k[:, d:].T) * scale, mask)
    lam_t = lam_value if lam_value is not None else _lambda_value(lam, lambda_override)
    weights = a1 - lam_t * a2
    if probe is not None:
        probe["weights"] = weights.data
        probe["weights_1"], probe["weights_2"] = a1.data, a2.data
    return weights @ v


def diff_attention_finetune(q: Tensor, k: Tensor, v: Tensor, lam: LambdaParams | None, mask=None,
                            lambda_override: float | None = None, probe: dict | None = None,
                            lam_value: Tensor | None = None) -> Tensor:
    """(softmax(Q Kᵀ/√d_head) - λ softmax(Q Kᵀ/√d_head)) V.

    Both terms share a single Q/K set, so the softmax is computed once.
    """
    mask = _check_mask(mask, q.shape[0])
    a = T.softmax_rows((q @ k.T) * (1.0 / math.sqrt(q.shape[1])), mask)
    lam_t = lam_value if lam_value is not None else _lambda_value(lam, lambda_override)
    weights = a - lam_t * a
    if probe is not None:
        probe["weights"] = weights.data
    return weights @ v


def head_projections(x: Tensor, p: AttentionParams) -> tuple[Tensor, Tensor, Tensor]:
    return p.project(x, "w_q"), p.project(x, "w_k"), p.project(x, "w_v")


def single_head(x: Tensor, p: AttentionParams, head: int, lam: LambdaParams | None = None,
                mask=None, lambda_override: float | None = None, probe: dict | None = None) -> Tensor:
    """Raw (un-normalised) output of one head, shape N x d_head."""
    q, k, v = head_projections(x, p)
    cols = slice(head * p.d_head, (head + 1) * p.d_head)
    return _dispatch(p.variant, q[:, cols], k[:, cols], v[:, cols], lam, mask,
                     lambda_override, probe, None)


def _dispatch(variant, q, k, v, lam, mask, lambda_override, probe, lam_value):
    if variant is Variant.VANILLA:
        return vanilla_attention(q, k, v, mask, probe)
    fn = diff_attention_original if variant is Variant.DIFF_ORIGINAL else diff_attention_finetune
    return fn(q, k, v, lam, mask, lambda_override, probe, lam_value)


def multi_head(x: Tensor, p: AttentionParams, lam: LambdaParams | None, mask=None,
               lambda_override: float | None = None, probe: dict | None = None,
               head_order: list[int] | None = None) -> Tensor:
    """Concat((1 - λ_init) * RMSNorm(head_i) for each head) @ W_O.

    λ is computed once per call and shared by every head. Without a per-head
    gain (``p.head_norm is None``) heads are concatenated unnormalised.
    ``probe`` receives the per-head weights and the pre-W_O concatenation.
    """
    n = x.shape[0]
    mask = _check_mask(mask, n)
    q, k, v = head_projections(x, p)
    lam_value = None
    if p.variant is not Variant.VANILLA:
        lam_value = _lambda_value(lam, lambda_override)
    lambda_init = lam.lambda_init if lam is not None else lambda_init_schedule(1)
    order = list(range(p.n_heads)) if head_order is None else list(head_order)
    if sorted(order) != list(range(p.n_heads)):
        raise ContractError(f"head_order must permute range({p.n_heads})")
    heads = []
    for i in order:
        cols = slice(i * p.d_head, (i + 1) * p.d_head)
        hp = {} if probe is not None else None
        out = _dispatch(p.variant, q[:, cols], k[:, cols], v[:, cols], lam, mask, None, hp, lam_value)
        if p.head_norm is not None:
            out = T.rms_norm(out, p.head_norm, HEAD_NORM_EPS) * (1.0 - lambda_init)
        if probe is not None:
            probe.setdefault("heads", []).append(hp["weights"])
        heads.append(out)
    if sum(h.shape[1] for h in heads) != p.d_model:
        raise ContractError("concatenated head width does not match d_model")
    cat = T.concat(heads, axis=1)
    if probe is not None:
        probe["concat"] = cat.data
    return p.project(cat, "w_o")
