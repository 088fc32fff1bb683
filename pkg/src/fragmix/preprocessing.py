"""Image I/O, Sauvola binarisation, letterbox resize and model-input conversion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._accel import njit, pick
from .errors import ConfigError, DataError, ResolutionMismatchError
from .numerics import Tensor

SAUVOLA_WINDOW = 31
SAUVOLA_K = 0.2
SAUVOLA_R = 128.0
LUMA_601 = (0.299, 0.587, 0.114)


@dataclass
class RasterImage:
    """8-bit image, ``pixels`` shaped (H, W) for grayscale or (H, W, 3) for RGB."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8:
            raise DataError(f"RasterImage needs uint8 pixels, got {px.dtype}")
        if px.ndim == 3 and px.shape[2] == 1:
            px = px[:, :, 0]
        if px.ndim not in (2, 3) or (px.ndim == 3 and px.shape[2] != 3):
            raise DataError(f"unsupported pixel array shape {px.shape}")
        self.pixels = np.ascontiguousarray(px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3

    def __eq__(self, other):
        return isinstance(other, RasterImage) and np.array_equal(self.pixels, other.pixels)


def to_gray(img: RasterImage) -> RasterImage:
    """ITU-R 601 luma, rounded to the nearest integer."""
    if img.channels == 1:
        return img
    rgb = img.pixels.astype(np.float64)
    y = rgb[..., 0] * LUMA_601[0] + rgb[..., 1] * LUMA_601[1] + rgb[..., 2] * LUMA_601[2]
    return RasterImage(np.clip(np.floor(y + 0.5), 0, 255).astype(np.uint8))


# -- Sauvola ----------------------------------------------------------------------


def _integral(a: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + 1, a.shape[1] + 1), dtype=np.int64)
    out[1:, 1:] = a.cumsum(axis=0).cumsum(axis=1)
    return out


def _sauvola_numpy(gray: np.ndarray, window: int, k: float, r: float) -> np.ndarray:
    h, w = gray.shape
    g = gray.astype(np.int64)
    ii, ii2 = _integral(g), _integral(g * g)
    half = window // 2
    ys, xs = np.arange(h), np.arange(w)
    y0, y1 = np.maximum(ys - half, 0)[:, None], np.minimum(ys + half + 1, h)[:, None]
    x0, x1 = np.maximum(xs - half, 0)[None, :], np.minimum(xs + half + 1, w)[None, :]
    s = ii[y1, x1] - ii[y0, x1] - ii[y1, x0] + ii[y0, x0]
    s2 = ii2[y1, x1] - ii2[y0, x1] - ii2[y1, x0] + ii2[y0, x0]
    n = (y1 - y0) * (x1 - x0)
    mean = s / n
    var = s2 / n - mean * mean
    std = np.where(var > 0, np.sqrt(np.maximum(var, 0.0)), 0.0)
    t = mean * (1.0 + k * (std / r - 1.0))
    return np.where(gray < t, 0, 255).astype(np.uint8)


@njit
def _sauvola_loops(gray, ii, ii2, window, k, r, out):
    h, w = gray.shape
    half = window // 2
    for y in range(h):
        y0 = max(y - half, 0)
        y1 = min(y + half + 1, h)
        for x in range(w):
            x0 = max(x - half, 0)
            x1 = min(x + half + 1, w)
            s = ii[y1, x1] - ii[y0, x1] - ii[y1, x0] + ii[y0, x0]
            s2 = ii2[y1, x1] - ii2[y0, x1] - ii2[y1, x0] + ii2[y0, x0]
            n = (y1 - y0) * (x1 - x0)
            mean = s / n
            var = s2 / n - mean * mean
            std = np.sqrt(var) if var > 0 else 0.0
            t = mean * (1.0 + k * (std / r - 1.0))
            out[y, x] = 0 if gray[y, x] < t else 255
    return out


def _sauvola_numba(gray: np.ndarray, window: int, k: float, r: float) -> np.ndarray:
    g = gray.astype(np.int64)
    out = np.empty(gray.shape, dtype=np.uint8)
    return _sauvola_loops(gray, _integral(g), _integral(g * g), window, float(k), float(r), out)


_sauvola_kernel = pick(_sauvola_numba, _sauvola_numpy)


def sauvola_binarize(
    img: RasterImage, window: int = SAUVOLA_WINDOW, k: float = SAUVOLA_K, r: float = SAUVOLA_R
) -> RasterImage:
    """Sauvola thresholding ``T = m * (1 + k * (s / R - 1))`` with integral images.

    The window is clipped at the image border. Pixels darker than ``T``
    become foreground (0), all others background (255). Colour input is
    converted to luma first.
    """
    if window < 3 or window % 2 == 0:
        raise ConfigError(f"Sauvola window must be odd and >= 3, got {window}")
    if r <= 0:
        raise ConfigError(f"Sauvola R must be > 0, got {r}")
    gray = to_gray(img).pixels
    return RasterImage(_sauvola_kernel(gray, window, float(k), float(r)))


# -- resize -----------------------------------------------------------------------


def _bilinear(px: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling of an (H, W[, C]) uint8 array."""
    h, w = px.shape[:2]
    src = px.astype(np.float64)

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0, n_in - 1)
        lo = np.floor(c).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    y0, y1, fy = coords(out_h, h)
    x0, x1, fx = coords(out_w, w)
    if px.ndim == 3:
        fy, fx = fy[:, None, None], fx[None, :, None]
    else:
        fy, fx = fy[:, None], fx[None, :]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def letterbox_geometry(h: int, w: int, target_h: int, target_w: int) -> tuple[float, int, int, int, int]:
    """Return ``(scale, new_h, new_w, pad_top, pad_left)`` for a letterbox fit."""
    scale = min(target_h / h, target_w / w)
    new_h = min(target_h, max(1, int(math.floor(h * scale + 0.5))))
    new_w = min(target_w, max(1, int(math.floor(w * scale + 0.5))))
    return scale, new_h, new_w, (target_h - new_h) // 2, (target_w - new_w) // 2


def resize_letterbox(img: RasterImage, target_h: int, target_w: int, pad_value: int = 255) -> RasterImage:
    """Aspect-preserving bilinear resize into a ``target_h`` x ``target_w`` canvas, centred."""
    if target_h % 32 or target_w % 32 or target_h <= 0 or target_w <= 0:
        raise ConfigError(f"target size {target_h}x{target_w} must be positive multiples of 32")
    if img.height == 0 or img.width == 0:
        raise DataError("cannot resize a zero-area image")
    _, new_h, new_w, top, left = letterbox_geometry(img.height, img.width, target_h, target_w)
    if (new_h, new_w) == (img.height, img.width):
        body = img.pixels
    else:
        body = _bilinear(img.pixels, new_h, new_w)
    shape = (target_h, target_w) + img.pixels.shape[2:]
    canvas = np.full(shape, pad_value, dtype=np.uint8)
    canvas[top : top + new_h, left : left + new_w] = body
    return RasterImage(canvas)


def to_model_tensor(
    img: RasterImage,
    height: int | None = None,
    width: int | None = None,
    mean: float | tuple | None = None,
    std: float | tuple | None = None,
    dtype=np.float32,
) -> Tensor:
    """3 x H x W tensor in [0, 1], optionally standardised per channel."""
    if height is not None and width is not None and (img.height, img.width) != (height, width):
        raise ResolutionMismatchError(
            f"image is {img.height}x{img.width}, model expects {height}x{width}; letterbox it first"
        )
    px = img.pixels
    if px.ndim == 2:
        px = np.repeat(px[None], 3, axis=0)
    else:
        px = px.transpose(2, 0, 1)
    x = px.astype(np.float64) / 255.0
    if mean is not None or std is not None:
        m = np.broadcast_to(np.asarray(0.0 if mean is None else mean, dtype=np.float64), (3,))
        s = np.broadcast_to(np.asarray(1.0 if std is None else std, dtype=np.float64), (3,))
        x = (x - m[:, None, None]) / s[:, None, None]
    return Tensor(x.astype(dtype))


# -- file I/O -----------------------------------------------------------------------


def _read_netpbm(data: bytes) -> RasterImage:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PNM header")
        tokens.append(data[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise DataError(f"only 8-bit PNM files are supported (maxval {maxval})")
    channels = {b"P5": 1, b"P6": 3}.get(magic)
    if channels is None:
        raise DataError(f"unsupported PNM type {magic!r}; expected binary P5/P6")
    body = data[pos + 1 : pos + 1 + w * h * channels]
    if len(body) != w * h * channels:
        raise DataError("truncated PNM pixel data")
    px = np.frombuffer(body, dtype=np.uint8).reshape((h, w) if channels == 1 else (h, w, 3))
    return RasterImage(px.copy())


def _netpbm_bytes(img: RasterImage) -> bytes:
    magic = b"P5" if img.channels == 1 else b"P6"
    return magic + f"\n{img.width} {img.height}\n255\n".encode() + img.pixels.tobytes()


def read_image(path) -> RasterImage:
    path = Path(path)
    data = path.read_bytes()
    if data[:2] in (b"P5", b"P6"):
        return _read_netpbm(data)
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover
        raise DataError(f"{path}: non-PNM image needs Pillow installed") from None
    with Image.open(path) as im:
        im = im.convert("L") if im.mode in ("L", "1", "I;16", "I") else im.convert("RGB")
        return RasterImage(np.asarray(im, dtype=np.uint8))


def write_image(path, img: RasterImage) -> None:
    """Write PGM/PPM (by ``.pgm``/``.ppm``/``.pnm`` suffix) or PNG."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm", ".pnm"):
        if suffix == ".pgm" and img.channels != 1:
            img = to_gray(img)
        path.write_bytes(_netpbm_bytes(img))
        return
    if suffix != ".png":
        raise DataError(f"unsupported output format {suffix!r}")
    from PIL import Image

    Image.fromarray(img.pixels).save(path, format="PNG")
