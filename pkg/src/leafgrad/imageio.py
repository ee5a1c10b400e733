"""Image containers and codecs: binary PPM/PGM, optional PNG, LGF1 float images."""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LGF1_MAGIC = b"LGF1"


class ImageFormatError(ValueError):
    pass


@dataclass
class ImageU8:
    """8-bit image, ``pixels`` shaped H x W x C with C in {1, 3}."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim == 2:
            p = p[:, :, None]
        if p.ndim != 3 or p.shape[2] not in (1, 3) or min(p.shape) == 0:
            raise ValueError(f"ImageU8 needs H x W x {{1,3}} pixels, got shape {p.shape}")
        if p.dtype != np.uint8:
            if np.any(p < 0) or np.any(p > 255):
                raise ValueError("ImageU8 pixels must lie in [0, 255]")
            p = p.astype(np.uint8)
        self.pixels = np.ascontiguousarray(p)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass
class ImageF:
    """Float image, H x W x C."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3:
            raise ValueError(f"ImageF needs H x W x C values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("ImageF values must be finite")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def to_chw(self) -> np.ndarray:
        return np.ascontiguousarray(self.values.transpose(2, 0, 1))


def atomic_write(path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- PNM -------------------------------------------------------------------

def _pnm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(buf) and not buf[i:i + 1].isspace() and buf[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise ImageFormatError("truncated PNM header")
        tokens.append(buf[start:i])
    return tokens, i + 1  # exactly one whitespace byte follows maxval


def decode_pnm(buf: bytes) -> ImageU8:
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"not a binary PGM/PPM (magic {magic!r})")
    (w, h, maxval), offset = _pnm_tokens(buf[2:], 3)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit PNM (maxval 255) is supported, got {maxval}")
    c = 3 if magic == b"P6" else 1
    body = buf[2 + offset:2 + offset + w * h * c]
    if len(body) != w * h * c:
        raise ImageFormatError(f"PNM body truncated: expected {w * h * c} bytes, got {len(body)}")
    return ImageU8(np.frombuffer(body, dtype=np.uint8).reshape(h, w, c))


def encode_pnm(img: ImageU8, comment: str = "") -> bytes:
    magic = b"P6" if img.channels == 3 else b"P5"
    note = f"\n# {comment}" if comment else ""
    if "\n" in comment or "\r" in comment:
        raise ValueError("PNM comment must be a single line")
    header = magic + f"{note}\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes()


def read_image(path) -> ImageU8:
    """Load PPM/PGM natively, or PNG through Pillow when it is installed."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:2] in (b"P5", b"P6"):
        return decode_pnm(buf)
    if buf[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            from PIL import Image
        except ImportError as exc:  # pragma: no cover - depends on environment
            raise ImageFormatError(f"{path}: PNG ingest needs Pillow") from exc
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            return ImageU8(np.asarray(im))
    raise ImageFormatError(f"{path}: unsupported image format")


def write_image(path, img: ImageU8, comment: str = "") -> None:
    atomic_write(path, encode_pnm(img, comment))


# -- LGF1 float images --------------------------------------------------------
# layout: b"LGF1", height, width, channels as uint64 LE, then float32 LE values
# in row-major H x W x C order.

def encode_lgf1(img: ImageF) -> bytes:
    header = LGF1_MAGIC + struct.pack("<3Q", img.height, img.width, img.channels)
    return header + np.ascontiguousarray(img.values, dtype="<f4").tobytes()


def decode_lgf1(buf: bytes) -> ImageF:
    if buf[:4] != LGF1_MAGIC:
        raise ImageFormatError(f"not an LGF1 float image (magic {buf[:4]!r})")
    if len(buf) < 28:
        raise ImageFormatError("LGF1 header truncated")
    h, w, c = struct.unpack("<3Q", buf[4:28])
    n = h * w * c
    body = buf[28:]
    if len(body) != 4 * n:
        raise ImageFormatError(f"LGF1 body has {len(body)} bytes, expected {4 * n}")
    return ImageF(np.frombuffer(body, dtype="<f4").reshape(h, w, c).copy())


def write_lgf1(path, img: ImageF) -> None:
    atomic_write(path, encode_lgf1(img))


def read_lgf1(path) -> ImageF:
    return decode_lgf1(Path(path).read_bytes())
