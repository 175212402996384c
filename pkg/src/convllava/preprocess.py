"""Image I/O and the square / short-side resolution policies."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# CLIP normalization constants
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class ImageFormatError(ValueError):
    pass


@dataclass
class ImageRGB:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width, 3):
            raise ValueError(f"pixel buffer shape {self.pixels.shape} != ({self.height}, {self.width}, 3)")

    @classmethod
    def from_array(cls, arr) -> "ImageRGB":
        arr = np.asarray(arr, dtype=np.uint8)
        return cls(arr.shape[1], arr.shape[0], arr)


@dataclass(frozen=True)
class PreprocessConfig:
    mode: str = "square"  # "square" | "short_side"
    resolution: int = 1536
    factor: int = 64  # total downsampling factor of the encoder
    mean: tuple[float, float, float] = CLIP_MEAN
    std: tuple[float, float, float] = CLIP_STD
    fill: tuple[float, float, float] | None = None  # pad colour in [0, 255]; None = mean * 255

    def __post_init__(self):
        if self.mode not in ("square", "short_side"):
            raise ValueError(f"unknown preprocess mode {self.mode!r}; expected square or short_side")
        if self.resolution <= 0 or self.factor <= 0:
            raise ValueError("resolution and factor must be positive")
        if self.mode == "square" and self.resolution % self.factor:
            raise ValueError(f"square resolution {self.resolution} is not a multiple of the "
                             f"downsampling factor {self.factor}")


# -- PPM -------------------------------------------------------------------


def _read_header_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError(f"PPM header truncated at byte offset {start}")
    return buf[start:pos], pos


def parse_ppm(buf: bytes) -> ImageRGB:
    magic, pos = _read_header_token(buf, 0)
    if magic != b"P6":
        raise ImageFormatError(f"unsupported format {magic!r} at byte offset 0; only binary PPM (P6) is read")
    fields = []
    for _ in range(3):
        tok, pos = _read_header_token(buf, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"malformed PPM header field {tok!r} at byte offset {pos - len(tok)}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"PPM maxval {maxval} unsupported (need 255), header ends at byte offset {pos}")
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"PPM has degenerate size {width}x{height}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError(f"missing whitespace after PPM header at byte offset {pos}")
    pos += 1
    need = 3 * width * height
    have = len(buf) - pos
    if have < need:
        raise ImageFormatError(f"PPM payload truncated: expected {need} bytes from byte offset {pos}, "
                               f"found {have} (file ends at offset {len(buf)})")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(height, width, 3)
    return ImageRGB(width, height, pixels.copy())


def load_ppm(path) -> ImageRGB:
    return parse_ppm(Path(path).read_bytes())


def ppm_bytes(img: ImageRGB) -> bytes:
    return f"P6\n{img.width} {img.height}\n255\n".encode("ascii") + img.pixels.tobytes()


def save_ppm(img: ImageRGB, path) -> None:
    Path(path).write_bytes(ppm_bytes(img))


# -- raw tensor files ("CVT0") ---------------------------------------------

TENSOR_MAGIC = b"CVT0"


def save_tensor(arr, path) -> None:
    """Write ``arr`` as magic, u32 rank, u32 dims, then little-endian f32."""
    arr = np.asarray(arr)
    head = TENSOR_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    Path(path).write_bytes(head + np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != TENSOR_MAGIC:
        raise ImageFormatError(f"{path}: bad magic {buf[:4]!r}, expected {TENSOR_MAGIC!r}")
    if len(buf) < 8:
        raise ImageFormatError(f"{path}: truncated header at byte offset 4")
    (rank,) = struct.unpack_from("<I", buf, 4)
    end = 8 + 4 * rank
    if len(buf) < end:
        raise ImageFormatError(f"{path}: truncated dims at byte offset 8")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    need = 4 * math.prod(dims)
    if len(buf) - end != need:
        raise ImageFormatError(f"{path}: payload is {len(buf) - end} bytes from offset {end}, expected {need}")
    return np.frombuffer(buf, dtype="<f4", offset=end).reshape(dims).astype(np.float32)


# -- geometry --------------------------------------------------------------


def _resize_axis(x: np.ndarray, out: int, axis: int) -> np.ndarray:
    """Linear resampling along one axis with half-pixel centres and edge clamp."""
    n = x.shape[axis]
    if out == n:
        return x
    src = (np.arange(out, dtype=np.float64) + 0.5) * (n / out) - 0.5
    src = np.clip(src, 0.0, n - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    shape = [1] * x.ndim
    shape[axis] = out
    frac = frac.reshape(shape).astype(x.dtype)
    return np.take(x, lo, axis=axis) * (1.0 - frac) + np.take(x, hi, axis=axis) * frac


def resize_bilinear(x: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of an (H, W, C) array; integer input is computed in float32."""
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float32)
    return _resize_axis(_resize_axis(x, height, 0), width, 1)


def _center_crop(x: np.ndarray, height: int, width: int) -> np.ndarray:
    top = (x.shape[0] - height) // 2
    left = (x.shape[1] - width) // 2
    return x[top:top + height, left:left + width]


def _normalize(x: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    mean = np.asarray(cfg.mean, dtype=np.float64)
    std = np.asarray(cfg.std, dtype=np.float64)
    out = (x / 255.0 - mean) / std
    return out.transpose(2, 0, 1)[None].astype(np.float32)


def _check_nonempty(img: ImageRGB) -> None:
    if img.width <= 0 or img.height <= 0:
        raise ValueError(f"degenerate image of size {img.width}x{img.height}")


def preprocess_square(img: ImageRGB, cfg: PreprocessConfig) -> np.ndarray:
    """Pad to a square, resize to R x R, centre crop, normalize -> (1, 3, R, R)."""
    _check_nonempty(img)
    if cfg.mode != "square":
        raise ValueError("preprocess_square needs a config with mode='square'")
    h, w = img.height, img.width
    side = max(h, w)
    fill = np.asarray(cfg.fill if cfg.fill is not None else [255.0 * m for m in cfg.mean], dtype=np.float64)
    canvas = np.empty((side, side, 3), dtype=np.float32)
    canvas[:] = fill
    top, left = (side - h) // 2, (side - w) // 2
    canvas[top:top + h, left:left + w] = img.pixels
    r = cfg.resolution
    out = _center_crop(resize_bilinear(canvas, r, r), r, r)
    return _normalize(out, cfg)


def short_side_size(height: int, width: int, resolution: int, factor: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Resized size and final cropped size for the short-side policy."""
    scale = resolution / min(height, width)
    rh = resolution if height <= width else int(round(height * scale))
    rw = resolution if width < height else int(round(width * scale))
    ch, cw = (rh // factor) * factor, (rw // factor) * factor
    if ch == 0 or cw == 0:
        raise ValueError(f"resolution {resolution} is below the downsampling factor {factor}")
    return (rh, rw), (ch, cw)


def preprocess_short_side(img: ImageRGB, cfg: PreprocessConfig) -> np.ndarray:
    """Resize the short side to R keeping aspect, crop down to multiples of D."""
    _check_nonempty(img)
    if cfg.mode != "short_side":
        raise ValueError("preprocess_short_side needs a config with mode='short_side'")
    (rh, rw), (ch, cw) = short_side_size(img.height, img.width, cfg.resolution, cfg.factor)
    out = _center_crop(resize_bilinear(img.pixels, rh, rw), ch, cw)
    return _normalize(out, cfg)


def preprocess(img: ImageRGB, cfg: PreprocessConfig) -> np.ndarray:
    if cfg.mode == "square":
        return preprocess_square(img, cfg)
    return preprocess_short_side(img, cfg)
