"""Lossless PNG io: 8-bit gray/RGB/RGBA and 16-bit grayscale."""

from __future__ import annotations

import numpy as np
from PIL import Image


class ImageCodecError(ValueError):
    pass


def write_png(path, array: np.ndarray) -> None:
    """Write uint8 (H,W), (H,W,3), (H,W,4) or uint16 (H,W) arrays."""
    arr = np.asarray(array)
    if arr.dtype == np.uint8:
        if arr.ndim == 2:
            img = Image.fromarray(arr, mode="L")
        elif arr.ndim == 3 and arr.shape[2] == 3:
            img = Image.fromarray(arr, mode="RGB")
        elif arr.ndim == 3 and arr.shape[2] == 4:
            img = Image.fromarray(arr, mode="RGBA")
        else:
            raise ImageCodecError(f"unsupported uint8 shape {arr.shape}")
    elif arr.dtype == np.uint16:
        if arr.ndim != 2:
            raise ImageCodecError(f"16-bit png must be single channel, got {arr.shape}")
        img = Image.frombuffer("I;16", (arr.shape[1], arr.shape[0]),
                               np.ascontiguousarray(arr).tobytes(), "raw", "I;16", 0, 1)
    else:
        raise ImageCodecError(f"unsupported dtype {arr.dtype}")
    img.save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Read a PNG back into uint8 (gray/RGB/RGBA) or uint16 (gray)."""
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in ("I;16", "I"):
                return np.asarray(img, dtype=np.uint32).astype(np.uint16)
            if mode in ("L", "RGB", "RGBA"):
                return np.asarray(img, dtype=np.uint8)
            if mode == "P":
                return np.asarray(img.convert("RGB"), dtype=np.uint8)
            raise ImageCodecError(f"{path}: unsupported PNG mode {mode}")
    except (OSError, SyntaxError) as exc:
        raise ImageCodecError(f"{path}: cannot decode PNG ({exc})") from exc


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Quantize float [0,1] to uint8 with round-to-nearest."""
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def to_uint16(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 65535.0), 0, 65535).astype(np.uint16)
