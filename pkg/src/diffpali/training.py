"""Adam fine-tuning of adapters, λ vectors and norm gains."""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .attention import ROLES, Variant
from .imageio import ImageDecodeError, load_image
from .lora import attach_policy
from .model import ContextOverflowError, ToyVLM
from .tensor import ContractError, Tensor, make_rng
from .tokenizer import normalize_text

log = logging.getLogger(__name__)


class NumericError(ArithmeticError):
    """A non-finite gradient or loss appeared during training."""


@dataclass
class TrainConfig:
    batch_size: int = 4
    lr: float = 4e-4
    lr_rule: str = "explicit"  # or "constant_times_batch"
    lr_constant: float = 1e-4
    lora_rank: int = 32
    lora_alpha: float | None = None  # None: 2 * lora_rank
    lora_targets: tuple[str, ...] = ROLES
    lora_encoder: bool = False
    train_layer_norms: bool = False
    weight_decay: float = 1e-9
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if self.lr_rule not in ("explicit", "constant_times_batch"):
            raise ContractError(f"unknown lr_rule {self.lr_rule!r}")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        self.lora_targets = tuple(self.lora_targets)

    @property
    def effective_lr(self) -> float:
        if self.lr_rule == "constant_times_batch":
            return self.lr_constant * self.batch_size
        return self.lr

    @property
    def effective_alpha(self) -> float:
        return float(2 * self.lora_rank if self.lora_alpha is None else self.lora_alpha)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d


# Reference recipes: (attention variant, feed-forward, lr, rank, alpha, weight decay)
RECIPES = {
    1: ("vanilla", "mlp", 4e-4, 32, 64, 1e-9),
    2: ("diff_finetune", "swiglu", 4e-4, 32, 64, 1e-9),
    3: ("vanilla", "mlp", 2e-5, 16, 32, 1e-8),
    4: ("diff_finetune", "mlp", 2e-5, 32, 64, 1e-8),
    5: ("diff_original", "swiglu", 2e-5, 32, 64, 1e-8),
}


# -- optimiser -------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update in place.

    Weight decay is decoupled: parameters shrink by (1 - lr * weight_decay)
    before the Adam step. A non-finite gradient aborts before anything moves.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericError(f"non-finite gradient in {name!r} ({bad} of {np.size(g)} entries)")
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        data = p.data.astype(np.float64)
        if weight_decay:
            data = data * (1 - lr * weight_decay)
        data = data - lr * mhat / (np.sqrt(vhat) + eps)
        p.data = data.astype(p.data.dtype)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    """Scale grads in place so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# -- data ------------------------------------------------------------------------

@dataclass
class Example:
    pixels: np.ndarray
    prompt: list[int]
    answer: list[int]
    source: str = ""


def majority_answer(answers: list[str]) -> str:
    """Most frequent normalised answer; ties go to the earliest occurrence."""
    norm = [normalize_text(a) for a in answers]
    counts = Counter(norm)
    best = max(counts.values())
    return next(a for a in norm if counts[a] == best)


def build_examples(model: ToyVLM, records, log_skips: bool = True) -> list[Example]:
    """Turn VQA records into token examples, skipping unreadable images and overflowing samples."""
    tok, cfg = model.tokenizer, model.config
    out = []
    for rec in records:
        try:
            pixels = model.preprocess(load_image(rec.image))
        except (ImageDecodeError, OSError) as exc:
            log.warning("skipping %s: %s", rec.image, exc)
            continue
        prompt = tok.prompt_ids(rec.question)
        answer = tok.encode(majority_answer(rec.answers))
        if len(prompt) + len(answer) + 1 > cfg.max_text_tokens:
            if log_skips:
                log.warning("skipping %s: %d text tokens exceed the %d available", rec.image,
                            len(prompt) + len(answer) + 1, cfg.max_text_tokens)
            continue
        out.append(Example(pixels, prompt, answer, str(rec.image)))
    return out


def example_loss(model: ToyVLM, ex: Example) -> tuple[Tensor, int]:
    """Summed next-token cross-entropy over answer tokens and EOS; returns (sum, count).

    Image and prompt positions carry zero loss weight.
    """
    seq = ex.prompt + ex.answer + [model.tokenizer.eos_id]
    inputs, targets = seq[:-1], seq[1:]
    logits = model.forward(ex.pixels, inputs)[model.config.n_image_tokens:]
    weights = [1.0 if j + 1 >= len(ex.prompt) else 0.0 for j in range(len(targets))]
    count = int(sum(weights))
    return T.cross_entropy(logits, targets, weights) * float(count), count


def batch_loss(model: ToyVLM, batch: list[Example]) -> Tensor:
    total, count = None, 0
    for ex in batch:
        loss, n = example_loss(model, ex)
        total = loss if total is None else total + loss
        count += n
    return total * (1.0 / count)


def lambda_mean(model: ToyVLM) -> float | None:
    vals = [lam for name, (lam, _) in model.lambdas().items()
            if dict(model.named_layers())[name].attn.variant is not Variant.VANILLA]
    return float(np.mean(vals)) if vals else None


def write_metrics(path, records: list[dict]) -> None:
    checkpoint.atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


# -- loop ------------------------------------------------------------------------

def prepare_model(model: ToyVLM, cfg: TrainConfig) -> None:
    """Attach LoRA adapters per the config and freeze everything else."""
    model.train_layer_norms = cfg.train_layer_norms
    rng = make_rng(cfg.seed, stream=1)
    attach_policy(model, cfg.lora_targets, cfg.lora_rank, cfg.effective_alpha, rng, encoder=cfg.lora_encoder)
    model.freeze_base()


def train(model: ToyVLM, examples: list[Example], cfg: TrainConfig, out_dir=None,
          metrics_path=None) -> tuple[ToyVLM, list[dict]]:
    """Shuffled mini-batch Adam over ``examples``.

    Writes a JSON-lines metric log ({step, loss, lr, lambda_mean}) and, when
    ``out_dir`` is given, ``last.ckpt`` after every epoch.
    """
    if not examples:
        raise ContractError("training set is empty")
    params = model.trainable_tensors()
    if not params:
        raise ContractError("model has no trainable tensors")
    rng = make_rng(cfg.seed, stream=2)
    state = AdamState()
    lr = cfg.effective_lr
    records: list[dict] = []
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(examples))
            for start in range(0, len(order), cfg.batch_size):
                if cfg.max_steps is not None and state.step >= cfg.max_steps:
                    break
                batch = [examples[i] for i in order[start:start + cfg.batch_size]]
                try:
                    loss = batch_loss(model, batch)
                except ContextOverflowError as exc:
                    log.warning("skipping batch at step %d: %s", state.step + 1, exc)
                    continue
                if not np.isfinite(loss.data):
                    raise NumericError(f"non-finite loss at step {state.step + 1}")
                for p in params.values():
                    p.grad = None
                loss.backward()
                grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
                for name, g in grads.items():
                    if not np.all(np.isfinite(g)):
                        raise NumericError(f"non-finite gradient in {name!r} at step {state.step + 1}")
                clip_global_norm(grads, cfg.clip_norm)
                adam_step(params, grads, state, lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
                rec = {"step": state.step, "loss": float(loss.data), "lr": lr, "lambda_mean": lambda_mean(model)}
                records.append(rec)
            if metrics_path is not None:
                write_metrics(metrics_path, records)
            if out_dir is not None:
                checkpoint.save_model(Path(out_dir) / "last.ckpt", model, {
                    "train_config": cfg.to_dict(), "step": state.step, "epoch": epoch + 1,
                    "rng_state": rng.bit_generator.state})
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                break
    finally:
        for p in params.values():
            p.grad = None
    return model, records
