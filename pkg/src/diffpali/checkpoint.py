"""Named-tensor checkpoint container.

Layout::

    u64 little-endian  header length in bytes
    header             UTF-8 JSON: {"metadata": {...}, "tensors": [
                           {"name", "shape", "dtype": "f32", "offset", "length"}, ...]}
    blobs              concatenated little-endian float32 data; offsets are
                       relative to the first byte after the header

The JSON is written with sorted keys and fixed separators so that
save -> load -> save is byte-identical.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .lora import LoraAdapter
from .tensor import Tensor


class CorruptCheckpointError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode(tensors: dict[str, np.ndarray], metadata: dict) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": "f32",
                        "offset": offset, "length": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"metadata": metadata, "tensors": entries}, sort_keys=True,
                        separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return struct.pack("<Q", len(header)) + header + b"".join(blobs)


def decode(raw: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(raw) < 8:
        raise CorruptCheckpointError("file shorter than the 8-byte header length")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if 8 + hlen > len(raw):
        raise CorruptCheckpointError(f"header length {hlen} exceeds file size {len(raw)}")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
        entries, metadata = header["tensors"], header["metadata"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"unreadable header: {exc}") from exc
    body = memoryview(raw)[8 + hlen:]
    tensors = {}
    for e in entries:
        try:
            name, shape, off, length = e["name"], tuple(e["shape"]), e["offset"], e["length"]
        except (KeyError, TypeError) as exc:
            raise CorruptCheckpointError(f"bad tensor entry {e!r}") from exc
        if e.get("dtype") != "f32":
            raise CorruptCheckpointError(f"{name}: unsupported dtype {e.get('dtype')!r}")
        if off < 0 or off + length > len(body) or length != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CorruptCheckpointError(f"{name}: blob [{off}, {off + length}) out of range or size mismatch")
        tensors[name] = np.frombuffer(body[off:off + length], dtype="<f4").astype(np.float32).reshape(shape)
    return tensors, metadata


def save(path, tensors: dict[str, np.ndarray], metadata: dict) -> None:
    atomic_write_bytes(path, encode(tensors, metadata))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())


# -- model checkpoints -----------------------------------------------------------

def model_metadata(model, extra: dict | None = None) -> dict:
    meta = {
        "model_config": model.config.to_dict(),
        "vocab": model.tokenizer.itos,
        "lora": {name: {"rank": ad.rank, "alpha": ad.alpha} for name, ad in model.adapters().items()},
        "lambda_init": {name: layer.lam.lambda_init for name, layer in model.named_layers()},
        "adapted_encoder": model.adapted_encoder,
        "train_layer_norms": model.train_layer_norms,
        "trainable": model.trainable_names(),
    }
    if extra:
        meta.update(extra)
    return meta


def save_model(path, model, extra: dict | None = None) -> None:
    tensors = {name: t.data for name, t in model.named_tensors().items()}
    save(path, tensors, model_metadata(model, extra))


def load_model(path):
    """Rebuild a ToyVLM (adapters included) from a checkpoint; returns (model, metadata)."""
    from .model import ModelConfig, ToyVLM
    from .tensor import make_rng
    from .tokenizer import ToyTokenizer

    tensors, meta = load(path)
    try:
        config = ModelConfig(**meta["model_config"])
        tokenizer = ToyTokenizer(meta["vocab"][5:])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"bad model metadata: {exc}") from exc
    model = ToyVLM.init(config, tokenizer, make_rng(0))
    layers = dict(model.named_layers())
    for name, spec in meta.get("lora", {}).items():
        try:
            layer_name, role = name.rsplit(".", 1)
            a, b = tensors[f"{name}.lora.a"], tensors[f"{name}.lora.b"]
            layers[layer_name].attn.adapters[role] = LoraAdapter(Tensor(a.copy()), Tensor(b.copy()),
                                                                 float(spec["alpha"]), name)
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptCheckpointError(f"adapter {name!r}: {exc}") from exc
    model.adapted_encoder = bool(meta.get("adapted_encoder", False))
    model.train_layer_norms = bool(meta.get("train_layer_norms", False))
    named = model.named_tensors()
    missing = set(named) - set(tensors)
    extra = set(tensors) - set(named)
    if missing or extra:
        raise CorruptCheckpointError(f"tensor set mismatch; missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
    for name, t in named.items():
        if t.shape != tensors[name].shape:
            raise CorruptCheckpointError(f"{name}: shape {tensors[name].shape}, model expects {t.shape}")
        t.data = tensors[name].copy()
    for name, layer in model.named_layers():
        layer.lam.lambda_init = float(meta.get("lambda_init", {}).get(name, layer.lam.lambda_init))
    model.freeze_base()
    return model, meta
