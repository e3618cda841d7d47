"""Desk-scale image-encoder + text-decoder model.

Pipeline: patchify -> linear patch embedding + image positions -> bidirectional
encoder layers -> RMSNorm -> linear projection into the decoder space ->
[image tokens ; text embeddings + text positions] -> decoder layers under a
prefix-LM mask -> RMSNorm -> unembedding.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .attention import ROLES, Variant
from .blocks import FfnKind, LayerParams, layer_forward
from .imageio import resize_bilinear, to_rgb
from .lora import LoraAdapter
from .tensor import ContractError, Tensor
from .tokenizer import ToyTokenizer


class ContextOverflowError(ContractError):
    """The token sequence does not fit in ``max_seq_len``."""


class GenerationTruncatedError(ContextOverflowError):
    """Greedy decoding ran out of context before EOS or ``max_new``."""


@dataclass
class ModelConfig:
    d_model: int = 64
    d_head: int = 16
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    vocab_size: int = 512
    image_size: int = 32
    patch_size: int = 8
    max_seq_len: int = 64
    attention_variant: str = Variant.DIFF_FINETUNE.value
    encoder_variant: str | None = None  # None: same as attention_variant
    ffn_kind: str = FfnKind.SWIGLU.value

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ContractError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.d_model % self.d_head:
            raise ContractError(f"d_model {self.d_model} not divisible by d_head {self.d_head}")
        if self.n_image_tokens >= self.max_seq_len:
            raise ContractError(f"{self.n_image_tokens} image tokens leave no room in max_seq_len {self.max_seq_len}")
        Variant(self.attention_variant)
        Variant(self.enc_variant)
        FfnKind(self.ffn_kind)

    @property
    def n_image_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def max_text_tokens(self) -> int:
        return self.max_seq_len - self.n_image_tokens

    @property
    def enc_variant(self) -> str:
        return self.encoder_variant or self.attention_variant

    def to_dict(self) -> dict:
        return asdict(self)


def prefix_lm_mask(n_image: int, n_text: int) -> np.ndarray:
    """Image rows see all image columns; text rows see images plus earlier text."""
    n = n_image + n_text
    mask = np.tril(np.ones((n, n), dtype=bool))
    mask[:, :n_image] = True
    return mask


@dataclass
class ToyVLM:
    config: ModelConfig
    tokenizer: ToyTokenizer
    patch_embed: Tensor
    image_pos: Tensor
    enc_layers: list[LayerParams]
    enc_norm: Tensor
    image_proj: Tensor
    tok_embed: Tensor
    text_pos: Tensor
    dec_layers: list[LayerParams]
    final_norm: Tensor
    unembed: Tensor
    adapted_encoder: bool = False
    train_layer_norms: bool = False
    _trainable: set = field(default_factory=set, repr=False)

    @classmethod
    def init(cls, config: ModelConfig, tokenizer: ToyTokenizer, rng: np.random.Generator) -> "ToyVLM":
        if len(tokenizer) > config.vocab_size:
            raise ContractError(f"tokenizer has {len(tokenizer)} ids but vocab_size is {config.vocab_size}")
        d, V = config.d_model, len(tokenizer)
        patch_dim = config.patch_size ** 2 * 3
        return cls(
            config=config,
            tokenizer=tokenizer,
            patch_embed=Tensor.randn(rng, (patch_dim, d), 1 / math.sqrt(patch_dim)),
            image_pos=Tensor.randn(rng, (config.n_image_tokens, d), 0.02),
            enc_layers=[LayerParams.init(rng, d, config.d_head, Variant(config.enc_variant),
                                         FfnKind(config.ffn_kind), i + 1) for i in range(config.n_layers_enc)],
            enc_norm=Tensor.ones((d,)),
            image_proj=Tensor.randn(rng, (d, d), 1 / math.sqrt(d)),
            tok_embed=Tensor.randn(rng, (V, d), 1.0),
            text_pos=Tensor.randn(rng, (config.max_text_tokens, d), 0.02),
            dec_layers=[LayerParams.init(rng, d, config.d_head, Variant(config.attention_variant),
                                         FfnKind(config.ffn_kind), i + 1) for i in range(config.n_layers_dec)],
            final_norm=Tensor.ones((d,)),
            unembed=Tensor.randn(rng, (d, V), 1 / math.sqrt(d)),
        )

    # -- parameter bookkeeping ------------------------------------------------
    def named_layers(self) -> Iterator[tuple[str, LayerParams]]:
        for i, layer in enumerate(self.enc_layers):
            yield f"enc.{i}", layer
        for i, layer in enumerate(self.dec_layers):
            yield f"dec.{i}", layer

    def adaptable_layers(self, encoder: bool = False):
        for name, layer in self.named_layers():
            if name.startswith("dec.") or encoder:
                yield name, layer.attn

    def named_tensors(self) -> dict[str, Tensor]:
        """Every tensor in the model under its checkpoint name."""
        out = {"patch_embed": self.patch_embed, "image_pos": self.image_pos}
        for name, layer in self.named_layers():
            for role in ROLES:
                out[f"{name}.{role}"] = getattr(layer.attn, role)
            if layer.attn.head_norm is not None:
                out[f"{name}.head_norm"] = layer.attn.head_norm
            for key, vec in layer.lam.vectors().items():
                out[f"{name}.{key}"] = vec
            out[f"{name}.norm1"] = layer.norm1
            out[f"{name}.norm2"] = layer.norm2
            for key, t in layer.ffn.tensors().items():
                out[f"{name}.ffn.{key}"] = t
            for role in ROLES:
                if role not in layer.attn.adapters:
                    continue
                ad = layer.attn.adapters[role]
                out[f"{name}.{role}.lora.a"] = ad.a
                out[f"{name}.{role}.lora.b"] = ad.b
        out.update({"enc_norm": self.enc_norm, "image_proj": self.image_proj, "tok_embed": self.tok_embed,
                    "text_pos": self.text_pos, "final_norm": self.final_norm, "unembed": self.unembed})
        return out

    def adapters(self) -> dict[str, LoraAdapter]:
        return {f"{name}.{role}": layer.attn.adapters[role] for name, layer in self.named_layers()
                for role in ROLES if role in layer.attn.adapters}

    def trainable_names(self) -> list[str]:
        """Adapters, λ vectors of differential layers, per-head norm gains, optional layer norms."""
        names = []
        for name, layer in self.named_layers():
            if name.startswith("enc.") and not self.adapted_encoder:
                continue
            for role in ROLES:
                if role in layer.attn.adapters:
                    names += [f"{name}.{role}.lora.a", f"{name}.{role}.lora.b"]
            if layer.attn.variant is not Variant.VANILLA:
                names += [f"{name}.{k}" for k in layer.lam.vectors()]
            if layer.attn.head_norm is not None:
                names.append(f"{name}.head_norm")
            if self.train_layer_norms:
                names += [f"{name}.norm1", f"{name}.norm2"]
        if self.train_layer_norms:
            names.append("final_norm")
        return names

    def freeze_base(self) -> None:
        """Set requires_grad on exactly the trainable tensors."""
        keep = set(self.trainable_names())
        for name, t in self.named_tensors().items():
            t.requires_grad = name in keep

    def trainable_tensors(self) -> dict[str, Tensor]:
        tensors = self.named_tensors()
        return {n: tensors[n] for n in self.trainable_names()}

    def census(self) -> int:
        return sum(t.size for t in self.trainable_tensors().values())

    def lambdas(self) -> dict[str, tuple[float, float]]:
        """(current λ, λ_init) per layer."""
        from .attention import compute_lambda
        return {name: (float(compute_lambda(layer.lam).data), layer.lam.lambda_init)
                for name, layer in self.named_layers()}

    # -- forward --------------------------------------------------------------
    def preprocess(self, pixels: np.ndarray) -> np.ndarray:
        pixels = to_rgb(pixels)
        size = self.config.image_size
        return resize_bilinear(pixels, size) if pixels.shape[:2] != (size, size) else pixels

    def patchify(self, pixels: np.ndarray) -> np.ndarray:
        """Non-overlapping patches in row-major grid order, each flattened (row, col, channel)."""
        cfg = self.config
        pixels = np.asarray(pixels, dtype=np.float32)
        if pixels.shape != (cfg.image_size, cfg.image_size, 3):
            raise ContractError(f"expected pixels of shape {(cfg.image_size, cfg.image_size, 3)}, got {pixels.shape}")
        g, p = cfg.image_size // cfg.patch_size, cfg.patch_size
        return pixels.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, p * p * 3)

    def patch_embeddings(self, pixels: np.ndarray) -> Tensor:
        """Linear patch embeddings before positional encoding."""
        return Tensor(self.patchify(pixels)) @ self.patch_embed

    def encode_image(self, pixels: np.ndarray) -> Tensor:
        x = self.patch_embeddings(pixels) + self.image_pos
        for layer in self.enc_layers:
            x = layer_forward(x, layer, mask=None)
        return T.rms_norm(x, self.enc_norm) @ self.image_proj

    def forward(self, pixels: np.ndarray | None, ids, image_tokens: Tensor | None = None) -> Tensor:
        """Next-token logits at every position of [image tokens ; ids], shape T x vocab."""
        cfg = self.config
        ids = list(ids)
        total = cfg.n_image_tokens + len(ids)
        if total > cfg.max_seq_len:
            raise ContextOverflowError(f"{total} tokens exceed max_seq_len {cfg.max_seq_len}")
        if image_tokens is None:
            image_tokens = self.encode_image(pixels)
        text = T.embedding(self.tok_embed, ids) + self.text_pos[: len(ids)]
        x = T.concat([image_tokens, text], axis=0)
        mask = prefix_lm_mask(cfg.n_image_tokens, len(ids))
        for layer in self.dec_layers:
            x = layer_forward(x, layer, mask)
        return T.rms_norm(x, self.final_norm) @ self.unembed

    def generate_greedy(self, pixels: np.ndarray, prompt, max_new: int) -> list[int]:
        """Append argmax tokens until EOS or ``max_new``; returns the new ids without EOS.

        Ties resolve to the lowest token id.
        """
        if max_new < 1:
            raise ContractError("max_new must be >= 1")
        ids = list(prompt)
        image_tokens = self.encode_image(pixels)
        eos = self.tokenizer.eos_id
        new: list[int] = []
        for _ in range(max_new):
            if self.config.n_image_tokens + len(ids) > self.config.max_seq_len:
                raise GenerationTruncatedError(
                    f"context full after {len(new)} generated tokens (max_seq_len {self.config.max_seq_len})")
            logits = self.forward(None, ids, image_tokens=image_tokens)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == eos:
                break
            new.append(nxt)
            ids.append(nxt)
        return new

    def answer(self, pixels: np.ndarray, text: str, max_new: int = 8) -> str:
        ids = self.generate_greedy(self.preprocess(pixels), self.tokenizer.prompt_ids(text), max_new)
        return self.tokenizer.decode(ids)
