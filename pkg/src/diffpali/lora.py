"""Low-rank adapters: W' = W + (alpha / r) A B with the base W frozen."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import ROLES
from .tensor import ContractError, DimensionError, Tensor


@dataclass
class LoraAdapter:
    a: Tensor  # d_in x r
    b: Tensor  # r x d_out
    alpha: float
    target: str = ""

    def __post_init__(self):
        d_in, r = self.a.shape
        r2, d_out = self.b.shape
        if r != r2:
            raise DimensionError(f"adapter rank mismatch: a {self.a.shape}, b {self.b.shape}")
        if r < 1 or 2 * r > min(d_in, d_out):
            raise ContractError(f"rank {r} must satisfy 1 <= r <= min({d_in}, {d_out}) / 2")

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int, rank: int,
             alpha: float | None = None, target: str = "") -> "LoraAdapter":
        """A ~ N(0, (1/r)²), B = 0; alpha defaults to 2 * rank."""
        if rank < 1:
            raise ContractError(f"rank must be >= 1, got {rank}")
        a = Tensor.randn(rng, (d_in, rank), 1.0 / rank, requires_grad=True)
        b = Tensor.zeros((rank, d_out), requires_grad=True)
        return cls(a, b, float(2 * rank if alpha is None else alpha), target)

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def n_params(self) -> int:
        return self.a.size + self.b.size


def apply(base: Tensor, ad: LoraAdapter, x: Tensor) -> Tensor:
    """x @ base + (alpha/r) (x @ A) @ B. ``base`` receives no gradient."""
    if base.shape != (ad.a.shape[0], ad.b.shape[1]):
        raise DimensionError(f"base {base.shape} does not match adapter {ad.a.shape} x {ad.b.shape}")
    if x.shape[-1] != base.shape[0]:
        raise DimensionError(f"input width {x.shape[-1]} does not match base {base.shape}")
    frozen = Tensor(base.data, keep_dtype=True)
    return x @ frozen + ((x @ ad.a) @ ad.b) * ad.scale


def merge(base: Tensor, ad: LoraAdapter) -> Tensor:
    """A new frozen weight base + (alpha/r) A B. Not idempotent: merging twice adds twice."""
    if base.shape != (ad.a.shape[0], ad.b.shape[1]):
        raise DimensionError(f"base {base.shape} does not match adapter {ad.a.shape} x {ad.b.shape}")
    if not ad.b.data.any():
        return Tensor(base.data.copy(), keep_dtype=True)
    delta = (ad.a.data @ ad.b.data) * np.asarray(ad.scale, dtype=base.data.dtype)
    return Tensor((base.data + delta).astype(base.data.dtype), keep_dtype=True)


def attach_policy(model, targets=ROLES, rank: int = 32, alpha: float | None = None,
                  rng: np.random.Generator | None = None, encoder: bool = False) -> list[LoraAdapter]:
    """Attach an adapter to every targeted attention projection and freeze the base.

    ``model`` is anything exposing ``adaptable_layers(encoder)`` yielding
    ``(layer_name, AttentionParams)``. Returns the adapters created, in layer
    order. All base weights are frozen; the trainable set becomes adapters,
    λ vectors of differential layers and per-head norm gains.
    """
    targets = tuple(targets)
    unknown = set(targets) - set(ROLES)
    if unknown:
        raise ContractError(f"unknown LoRA target role(s): {sorted(unknown)}")
    if rng is None:
        raise ContractError("attach_policy needs an explicit rng")
    model.freeze_base()
    created = []
    for name, attn in model.adaptable_layers(encoder):
        for role in ROLES:
            if role not in targets:
                continue
            base = getattr(attn, role)
            ad = LoraAdapter.init(rng, base.shape[0], base.shape[1], rank, alpha, target=f"{name}.{role}")
            attn.adapters[role] = ad
            created.append(ad)
    model.adapted_encoder = encoder
    return created
