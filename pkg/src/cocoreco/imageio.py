"""Netpbm (binary PPM/PGM) codec and optional PNG decoding.

Only the binary variants P6 (RGB) and P5 (grayscale) are handled, with
maxval up to 65535. Encoding always writes the canonical header
``P6\\n<w> <h>\\n255\\n`` so that decode/encode round-trips are byte-exact.
"""
from __future__ import annotations

import os

import numpy as np

try:  # PNG support is optional
    from PIL import Image as _PILImage
except ImportError:  # pragma: no cover - exercised only without Pillow
    _PILImage = None

PNG_SUPPORTED = _PILImage is not None


class ImageDecodeError(ValueError):
    """File could not be decoded; the message names the offending path when known."""


def _tokens(buf: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out, i, n = [], 0, len(buf)
    while len(out) < count:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not buf[i:i + 1].isspace() and buf[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise ImageDecodeError("truncated netpbm header")
        out.append(buf[start:i])
    if i >= n or not buf[i:i + 1].isspace():
        raise ImageDecodeError("truncated netpbm header")
    return out, i + 1


def decode_pnm(buf: bytes) -> np.ndarray:
    """Decode P6/P5 bytes to a uint8 or uint16 array of shape (H, W, 3) or (H, W)."""
    return _decode(buf)[0]


def _decode(buf: bytes):
    if buf[:2] not in (b"P6", b"P5"):
        raise ImageDecodeError(f"not a binary PPM/PGM file (magic {buf[:2]!r})")
    (magic, w, h, maxval), off = _tokens(buf, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageDecodeError(f"malformed netpbm header: {exc}") from exc
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ImageDecodeError(f"invalid netpbm dimensions {w}x{h} maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * channels * dtype.itemsize
    body = buf[off:off + need]
    if len(body) < need:
        raise ImageDecodeError(f"truncated pixel data: expected {need} bytes, got {len(body)}")
    arr = np.frombuffer(body, dtype=dtype).reshape((h, w, channels) if channels == 3 else (h, w))
    if (arr > maxval).any():
        raise ImageDecodeError("pixel value exceeds maxval")
    return (arr.astype(np.uint16) if dtype.itemsize == 2 else arr.copy()), maxval


def encode_pnm(pixels: np.ndarray) -> bytes:
    """Encode a uint8 (H, W, 3) array as P6 or an (H, W) array as P5."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise ValueError(f"encode_pnm expects uint8 pixels, got {pixels.dtype}")
    if pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    elif pixels.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"unsupported pixel array shape {pixels.shape}")
    h, w = pixels.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels).tobytes()


def decode_ppm_chw(buf: bytes) -> np.ndarray:
    """Decode to a float [3, H, W] array with values ``byte / maxval``."""
    arr, maxval = _decode(buf)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr.transpose(2, 0, 1).astype(np.float64) / maxval


def to_bytes(chw: np.ndarray) -> np.ndarray:
    """[C, H, W] floats in [0, 1] to (H, W, C) uint8, rounding half away from zero."""
    return np.floor(np.clip(chw, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def read_image(path) -> np.ndarray:
    """Read a PPM/PGM (or PNG when Pillow is available) as float [3, H, W] in [0, 1]."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        if buf[:8] == b"\x89PNG\r\n\x1a\n":
            if not PNG_SUPPORTED:
                raise ImageDecodeError("PNG decoding requires Pillow")
            import io

            with _PILImage.open(io.BytesIO(buf)) as img:
                arr = np.asarray(img.convert("RGB"))
            return arr.transpose(2, 0, 1).astype(np.float64) / 255.0
        return decode_ppm_chw(buf)
    except ImageDecodeError as exc:
        raise ImageDecodeError(f"{path}: {exc}") from exc
    except Exception as exc:  # Pillow raises a zoo of types
        raise ImageDecodeError(f"{path}: {exc}") from exc


def write_ppm(path, chw: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(to_bytes(chw)))
