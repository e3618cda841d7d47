"""Finite-difference gradient checks over every parameter group of the toy model."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .lora import attach_policy
from .model import ModelConfig, ToyVLM
from . import tensor as T
from .tensor import Tensor, grad_check, make_rng
from .tokenizer import ToyTokenizer

TOLERANCE = 1e-3

SMALL_CONFIG = ModelConfig(d_model=16, d_head=8, n_layers_enc=1, n_layers_dec=1, vocab_size=64,
                           image_size=8, patch_size=4, max_seq_len=12)


@dataclass
class GroupResult:
    group: str
    tensors: int
    coords: int
    rel_err: float

    @property
    def ok(self) -> bool:
        return self.rel_err < TOLERANCE


def _groups(model: ToyVLM) -> dict[str, list[str]]:
    names = list(model.named_tensors())
    vanilla = {name for name, layer in model.named_layers() if layer.attn.variant.value == "vanilla"}
    groups: dict[str, list[str]] = {}

    def add(group, pred):
        hits = [n for n in names if pred(n)]
        if hits:
            groups[group] = hits

    for role in ("w_q", "w_k", "w_v", "w_o"):
        add(role, lambda n, r=role: n.endswith(f".{r}"))
    for vec in ("lambda_q1", "lambda_k1", "lambda_q2", "lambda_k2"):
        # λ is unused by vanilla layers
        add(vec, lambda n, v=vec: n.endswith(f".{v}") and n.rsplit(".", 1)[0] not in vanilla)
    add("head_norm", lambda n: n.endswith(".head_norm"))
    add("layer_norms", lambda n: n.endswith((".norm1", ".norm2")) or n in ("enc_norm", "final_norm"))
    for w in ("w_g", "w_1", "w_2"):
        add(f"ffn.{w}", lambda n, w=w: n.endswith(f".ffn.{w}"))
    add("embeddings", lambda n: n in ("patch_embed", "image_pos", "image_proj", "tok_embed", "text_pos", "unembed"))
    add("lora.a", lambda n: n.endswith(".lora.a"))
    add("lora.b", lambda n: n.endswith(".lora.b"))
    return groups


def _loss_fn(model: ToyVLM, rng: np.random.Generator):
    cfg = model.config
    pixels = rng.random((cfg.image_size, cfg.image_size, 3)).astype(np.float32)
    n_text = cfg.max_text_tokens
    ids = rng.integers(0, len(model.tokenizer), size=n_text + 1).tolist()

    def f() -> Tensor:
        logits = model.forward(pixels, ids[:-1])[cfg.n_image_tokens:]
        return T.cross_entropy(logits, ids[1:])

    return f


def gradient_suite(config: ModelConfig = SMALL_CONFIG, seed: int = 0, h: float = 1e-4,
                   max_coords: int | None = 32, lora_rank: int | None = None) -> list[GroupResult]:
    """Check analytic against central-difference gradients for each parameter group.

    Base projections are checked on the unadapted model (an adapter freezes
    its base). Adapters are then attached with a random, non-zero B so that
    gradients reach A as well.
    """
    tok = ToyTokenizer([f"w{i}" for i in range(min(config.vocab_size, 24) - 5)])
    rng = make_rng(seed)
    model = ToyVLM.init(config, tok, rng)
    f = _loss_fn(model, make_rng(seed + 1))
    results = []
    tensors = model.named_tensors()
    for group, names in _groups(model).items():
        params = [tensors[n] for n in names]
        err = grad_check(f, params, h=h, max_coords=max_coords, rng=make_rng(seed + 2))
        coords = sum(min(p.size, max_coords or p.size) for p in params)
        results.append(GroupResult(group, len(params), coords, err))

    rank = lora_rank or max(1, config.d_model // 4)
    adapters = attach_policy(model, rng=make_rng(seed + 3), rank=rank, encoder=True)
    for ad in adapters:
        ad.b.data = (rng.standard_normal(ad.b.shape) * 0.1).astype(np.float32)
    tensors = model.named_tensors()
    for group in ("lora.a", "lora.b"):
        params = [tensors[n] for n in _groups(model)[group]]
        err = grad_check(f, params, h=h, max_coords=max_coords, rng=make_rng(seed + 4))
        coords = sum(min(p.size, max_coords or p.size) for p in params)
        results.append(GroupResult(group, len(params), coords, err))
    return results


def format_report(results: list[GroupResult], label: str = "") -> str:
    lines = [f"gradient check{f' [{label}]' if label else ''} (tolerance {TOLERANCE:g})"]
    for r in results:
        lines.append(f"  {r.group:<12} tensors={r.tensors:<3} coords={r.coords:<5} "
                     f"max_rel_err={r.rel_err:.3e}  {'PASS' if r.ok else 'FAIL'}")
    return "\n".join(lines)


def suite_config(base: ModelConfig, **overrides) -> ModelConfig:
    return replace(base, **overrides)
