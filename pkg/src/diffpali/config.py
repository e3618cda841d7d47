"""Flat ``key = value`` run configuration with dotted namespaces.

Example::

    # toy fine-tune
    preset = recipe.2
    data.train = data/train.jsonl
    train.epochs = 3
    seed = 7

``--set key=value`` overrides win over file values. A ``preset`` applies one
of the named reference recipes (variant, feed-forward kind, lr, LoRA
rank/alpha, weight decay) before any explicit key.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .attention import ROLES
from .model import ModelConfig
from .training import RECIPES, TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt(parse):
    def inner(s: str):
        return None if s.strip().lower() in ("", "none", "null") else parse(s)
    return inner


def _roles(s: str) -> tuple[str, ...]:
    roles = tuple(r.strip() for r in s.split(",") if r.strip())
    bad = [r for r in roles if r not in ROLES]
    if bad:
        raise ValueError(f"unknown role(s) {bad}; expected a subset of {list(ROLES)}")
    return roles


# key -> (section, field, parser)
SCHEMA = {
    "model.d_model": ("model", "d_model", int),
    "model.d_head": ("model", "d_head", int),
    "model.n_layers_enc": ("model", "n_layers_enc", int),
    "model.n_layers_dec": ("model", "n_layers_dec", int),
    "model.vocab_size": ("model", "vocab_size", int),
    "model.image_size": ("model", "image_size", int),
    "model.patch_size": ("model", "patch_size", int),
    "model.max_seq_len": ("model", "max_seq_len", int),
    "model.ffn": ("model", "ffn_kind", str),
    "attn.variant": ("model", "attention_variant", str),
    "attn.encoder_variant": ("model", "encoder_variant", _opt(str)),
    "train.batch_size": ("train", "batch_size", int),
    "train.lr": ("train", "lr", float),
    "train.lr_rule": ("train", "lr_rule", str),
    "train.lr_constant": ("train", "lr_constant", float),
    "train.weight_decay": ("train", "weight_decay", float),
    "train.epochs": ("train", "epochs", int),
    "train.max_steps": ("train", "max_steps", _opt(int)),
    "train.clip_norm": ("train", "clip_norm", _opt(float)),
    "train.beta1": ("train", "beta1", float),
    "train.beta2": ("train", "beta2", float),
    "train.eps": ("train", "eps", float),
    "train.layer_norms": ("train", "train_layer_norms", _bool),
    "lora.rank": ("train", "lora_rank", int),
    "lora.alpha": ("train", "lora_alpha", _opt(float)),
    "lora.targets": ("train", "lora_targets", _roles),
    "lora.encoder": ("train", "lora_encoder", _bool),
    "data.train": ("run", "train_data", str),
    "data.vocab": ("run", "vocab_sources", lambda s: [p.strip() for p in s.split(",") if p.strip()]),
    "out.dir": ("run", "out_dir", str),
    "seed": ("run", "seed", int),
    "preset": ("run", "preset", str),
}


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    train_data: Path | None = None
    vocab_sources: list[Path] = field(default_factory=list)
    out_dir: Path = Path("runs/default")
    seed: int = 0
    preset: str | None = None
    raw: dict[str, str] = field(default_factory=dict)

    def snapshot(self) -> dict:
        """Resolved settings, stable across runs with identical inputs."""
        return {"model": self.model.to_dict(), "train": self.train.to_dict(),
                "data.train": str(self.train_data) if self.train_data else None,
                "data.vocab": [str(p) for p in self.vocab_sources],
                "out.dir": str(self.out_dir), "seed": self.seed, "preset": self.preset,
                "raw": dict(sorted(self.raw.items()))}


def parse_lines(text: str, origin: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{origin}:{lineno}: unknown config key {key!r}", key)
        out[key] = value
    return out


def parse_overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}", key)
        out[key] = value
    return out


# short override names accepted by --set
_ALIASES = {"lr": "train.lr", "epochs": "train.epochs", "batch_size": "train.batch_size",
            "max_steps": "train.max_steps", "weight_decay": "train.weight_decay", "variant": "attn.variant"}


def resolve(values: dict[str, str], base_dir: Path = Path(".")) -> RunConfig:
    model_kw, train_kw, run_kw = {}, {}, {}
    preset = values.get("preset")
    if preset:
        row = preset.removeprefix("recipe.")
        if not row.isdigit() or int(row) not in RECIPES:
            raise ConfigError(f"unknown preset {preset!r}; expected recipe.1 .. recipe.5", "preset")
        variant, ffn, lr, rank, alpha, wd = RECIPES[int(row)]
        model_kw.update(attention_variant=variant, ffn_kind=ffn)
        train_kw.update(lr=lr, lora_rank=rank, lora_alpha=alpha, weight_decay=wd)
    for key, value in values.items():
        section, name, parse = SCHEMA[key]
        try:
            parsed = parse(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", key) from exc
        {"model": model_kw, "train": train_kw, "run": run_kw}[section][name] = parsed
    seed = run_kw.get("seed", 0)
    train_kw.setdefault("seed", seed)
    try:
        model = ModelConfig(**model_kw)
        train = TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc

    def path(p):
        p = Path(p)
        return p if p.is_absolute() else base_dir / p

    return RunConfig(
        model=model, train=train,
        train_data=path(run_kw["train_data"]) if "train_data" in run_kw else None,
        vocab_sources=[path(p) for p in run_kw.get("vocab_sources", [])],
        out_dir=path(run_kw.get("out_dir", "runs/default")),
        seed=seed, preset=preset, raw=dict(values))


def load(path, overrides: list[str] | None = None, seed: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    values = parse_lines(text, str(path))
    values.update(parse_overrides(overrides or []))
    if seed is not None:
        values["seed"] = str(seed)
    return resolve(values, path.parent)
