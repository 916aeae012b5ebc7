"""Image decoding, multi-resolution pyramids, and training augmentation.

Images are planar float64 arrays of shape (3, height, width) with values in
[0, 1]. All functions here are pure and deterministic given their RNG, so
they can run in parallel worker threads without coordination.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

RAW_MAGIC = b"PLNF"
RAW_VERSION = 1


@dataclass
class Image:
    """A 3-channel image with pixel values in [0, 1]."""

    pixels: np.ndarray  # (3, height, width) float64

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ValueError(f"expected (3, h, w) pixel array, got {self.pixels.shape}")
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values outside [0, 1]: min={lo}, max={hi}")

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass
class PyramidSample:
    """Per-scale views of one source image, plus its provenance."""

    images: list[Image]
    source: str
    label: int = -1
    scales: tuple[int, ...] = field(default_factory=tuple)


def resize(img: Image, side: int, method: str = "bilinear") -> Image:
    """Resample to a square side x side image.

    Bilinear by default; nearest-neighbor is kept around so oracle tests can
    cross-check interpolation-free behaviour.
    """
    side = int(side)
    if side < 1:
        raise ValueError(f"target side must be >= 1, got {side}")
    if method == "nearest":
        yi = np.rint(_sample_grid(img.height, side)).astype(np.intp)
        xi = np.rint(_sample_grid(img.width, side)).astype(np.intp)
        return Image(img.pixels[:, yi[:, None], xi[None, :]].copy())
    if method == "bilinear":
        return _resize_rect(img, side, side)
    raise ValueError(f"unknown resize method: {method!r}")


def _sample_grid(in_len: int, out_len: int) -> np.ndarray:
    # map output pixel centers into input coordinates
    scale = in_len / out_len
    coords = (np.arange(out_len) + 0.5) * scale - 0.5
    return np.clip(coords, 0.0, in_len - 1)


def hflip(img: Image) -> Image:
    return Image(img.pixels[:, :, ::-1].copy())


def _draw_crop_flip(img, rng, crop_area_range, flip_prob):
    """One augmentation decision; fixed draw order (area, x, y, flip)."""
    area = rng.uniform(*crop_area_range)
    frac = np.sqrt(area)
    cw = min(max(1, int(round(img.width * frac))), img.width)
    ch = min(max(1, int(round(img.height * frac))), img.height)
    x0 = int(rng.integers(0, img.width - cw + 1))
    y0 = int(rng.integers(0, img.height - ch + 1))
    do_flip = bool(rng.uniform() < flip_prob)
    return x0, y0, cw, ch, do_flip


def augment(
    img: Image,
    rng: np.random.Generator,
    crop_area_range: tuple[float, float] = (0.875, 1.0),
    flip_prob: float = 0.5,
) -> Image:
    """Random-crop (87.5%-100% area by default) and maybe flip, same size out.

    The draw order is fixed, so a given RNG state always produces the same
    result.
    """
    if img.width < 8 or img.height < 8:
        raise ValueError(f"augment needs at least 8x8 input, got {img.width}x{img.height}")
    x0, y0, cw, ch, do_flip = _draw_crop_flip(img, rng, crop_area_range, flip_prob)
    if cw == img.width and ch == img.height:
        out = img
    else:
        crop = Image(img.pixels[:, y0 : y0 + ch, x0 : x0 + cw])
        out = _resize_rect(crop, img.height, img.width)
    if do_flip:
        out = hflip(out)
    return out


def _resize_rect(img: Image, height: int, width: int) -> Image:
    # separable bilinear: blend columns first, then rows
    ys = _sample_grid(img.height, height)
    xs = _sample_grid(img.width, width)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, img.height - 1)
    x1 = np.minimum(x0 + 1, img.width - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    p = img.pixels
    rows = np.take(p, x0, axis=2) * (1 - fx) + np.take(p, x1, axis=2) * fx
    out = np.take(rows, y0, axis=1) * (1 - fy) + np.take(rows, y1, axis=1) * fy
    return Image(np.clip(out, 0.0, 1.0))


def build_pyramid(
    img: Image,
    scales: Sequence[int],
    augment_enabled: bool = False,
    rng: np.random.Generator | None = None,
    source: str = "",
    label: int = -1,
    crop_area_range: tuple[float, float] = (0.875, 1.0),
    flip_prob: float = 0.5,
) -> PyramidSample:
    """Resize one image to every scale, sharing a single augmentation draw.

    The crop/flip decision is made once per sample before any resizing, so
    every scale sees the same geometry; the cropped-and-flipped image feeds
    every per-scale resize directly.
    """
    if not scales:
        raise ValueError("scales must be non-empty")
    if augment_enabled:
        if rng is None:
            raise ValueError("augmentation requires an RNG")
        x0, y0, cw, ch, do_flip = _draw_crop_flip(img, rng, crop_area_range, flip_prob)
        if cw != img.width or ch != img.height:
            img = Image(img.pixels[:, y0 : y0 + ch, x0 : x0 + cw])
        if do_flip:
            img = hflip(img)
    views = [resize(img, s) for s in scales]
    return PyramidSample(images=views, source=source, label=label, scales=tuple(scales))


# ---------------------------------------------------------------------------
# file formats

def write_ppm(img: Image, path) -> None:
    """Write as binary PPM (P6), 8 bits per sample."""
    arr = np.rint(img.pixels * 255.0).astype(np.uint8)
    interleaved = np.ascontiguousarray(arr.transpose(1, 2, 0))
    with open(path, "wb") as f:
        f.write(f"P6\n{img.width} {img.height}\n255\n".encode("ascii"))
        f.write(interleaved.tobytes())


def read_ppm(path) -> Image:
    with open(path, "rb") as f:
        data = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {fields[0]!r})")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    raw = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=pos)
    pixels = raw.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float64) / 255.0
    return Image(pixels)


def write_raw_float(img: Image, path) -> None:
    """Raw planar format: magic, version, dims, then float64 LE planes."""
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<II", RAW_VERSION, 0))
        f.write(struct.pack("<II", img.height, img.width))
        f.write(img.pixels.astype("<f8").tobytes())


def read_raw_float(path) -> Image:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != RAW_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, _ = struct.unpack("<II", f.read(8))
        if version != RAW_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        height, width = struct.unpack("<II", f.read(8))
        raw = np.frombuffer(f.read(3 * height * width * 8), dtype="<f8")
    return Image(raw.reshape(3, height, width).copy())


def load_image(path) -> Image:
    """Dispatch on extension: .ppm or the raw planar float format."""
    text = str(path)
    if text.endswith(".ppm"):
        return read_ppm(path)
    return read_raw_float(path)
