"""Image loading and resizing. Images are float32 H x W x 3 arrays in [0, 1]."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image


class ImageDecodeError(ValueError):
    pass


def load_image(path) -> np.ndarray:
    """Decode a PNG (or anything Pillow reads) or a planar ``.f32`` file.

    ``.f32`` layout: two little-endian u32 (width, height), then 1 or 3
    planes of little-endian float32, each height x width row-major.
    """
    path = Path(path)
    try:
        if path.suffix.lower() == ".f32":
            return _load_f32(path)
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except ImageDecodeError:
        raise
    except Exception as exc:  # Pillow raises a zoo of types
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc


def _load_f32(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 8:
        raise ImageDecodeError(f"{path}: truncated .f32 header")
    width, height = struct.unpack("<II", raw[:8])
    body = np.frombuffer(raw[8:], dtype="<f4")
    plane = width * height
    if plane == 0 or body.size not in (plane, 3 * plane):
        raise ImageDecodeError(f"{path}: {body.size} floats do not fit {width}x{height} with 1 or 3 planes")
    planes = body.reshape(-1, height, width).astype(np.float32)
    if planes.shape[0] == 1:
        planes = np.repeat(planes, 3, axis=0)
    return np.ascontiguousarray(planes.transpose(1, 2, 0))


def save_f32(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[:, :, None]
    height, width, _ = image.shape
    planes = image.transpose(2, 0, 1).astype("<f4")
    Path(path).write_bytes(struct.pack("<II", width, height) + planes.tobytes())


def save_png(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def to_rgb(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.shape[2] == 1:
        image = np.repeat(image, 3, axis=2)
    elif image.shape[2] == 4:
        image = image[:, :, :3]
    if image.shape[2] != 3:
        raise ImageDecodeError(f"unsupported channel count {image.shape[2]}")
    return image


def resize_bilinear(image: np.ndarray, height: int, width: int | None = None) -> np.ndarray:
    """Bilinear resize of an H x W x C float image; exact-size input is returned unchanged."""
    width = height if width is None else width
    image = np.asarray(image, dtype=np.float32)
    if image.shape[:2] == (height, width):
        return image.copy()
    chans = [np.asarray(Image.fromarray(np.ascontiguousarray(image[:, :, c]))
                        .resize((width, height), Image.BILINEAR), dtype=np.float32)
             for c in range(image.shape[2])]
    return np.stack(chans, axis=2)
