"""Image I/O, quality metrics, and patch utilities.

Images are H x W x C float arrays in [0, 1] (C is 1 or 3). The only file
formats are 8-bit PNG (grayscale / RGB, non-interlaced) and binary
PGM/PPM; both codecs are self-contained so outputs are byte-reproducible.
PSNR and SSIM follow the standard reference definitions; SSIM uses an
11x11 Gaussian window with sigma 1.5, K1=0.01, K2=0.03, peak 1.0, and
channels are averaged (per-channel RGB, recorded in the report metadata).
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ImageFormatError, ShapeError

PSNR_CAP_DB = 100.0  # returned when MSE == 0 so reports stay finite and sortable

# Luma weights for RGB -> grayscale conversion (ITU-R BT.601).
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


@dataclass
class Image:
    """Normalized raster: pixels (H, W, C) float64 in [0, 1], C in {1, 3}."""

    pixels: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ShapeError(f"image must be HxWx{{1,3}}, got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ShapeError(f"empty image shape {px.shape}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values outside [0,1]; clip before constructing")
        self.pixels = px

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]

    @classmethod
    def from_float(cls, arr, source_id=""):
        """Build an image from an arbitrary float array, clamping to [0,1]."""
        return cls(np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0), source_id)

    def to_gray(self) -> "Image":
        if self.channels == 1:
            return self
        w = np.asarray(LUMA_WEIGHTS)
        return Image((self.pixels * w).sum(axis=2, keepdims=True), self.source_id)

    def quantized(self) -> np.ndarray:
        """8-bit quantization used on save: round(clip(x)*255)."""
        return np.round(np.clip(self.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


# -- PNG codec (8-bit gray / RGB, non-interlaced) ------------------------------


def _png_chunk(out, ctype, payload):
    out += struct.pack(">I", len(payload))
    out += ctype
    out += payload
    out += struct.pack(">I", zlib.crc32(payload, zlib.crc32(ctype)) & 0xFFFFFFFF)


def _encode_png(img: Image) -> bytes:
    raw = img.quantized()
    h, w, c = raw.shape
    color_type = 0 if c == 1 else 2
    body = bytearray()
    rows = raw.reshape(h, w * c)
    for y in range(h):
        body.append(0)  # filter type None per row
        body += rows[y].tobytes()
    out = bytearray(_PNG_SIG)
    _png_chunk(out, b"IHDR", struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0))
    _png_chunk(out, b"IDAT", zlib.compress(bytes(body), 6))
    _png_chunk(out, b"IEND", b"")
    return bytes(out)


def _unfilter_png(data, h, w, c):
    stride = w * c
    px = np.zeros((h, stride), dtype=np.uint8)
    pos = 0
    for y in range(h):
        ftype = data[pos]
        pos += 1
        row = np.frombuffer(data[pos:pos + stride], dtype=np.uint8).astype(np.int32)
        pos += stride
        prev = px[y - 1].astype(np.int32) if y > 0 else np.zeros(stride, dtype=np.int32)
        if ftype == 0:
            cur = row
        elif ftype == 2:  # Up
            cur = (row + prev) & 0xFF
        elif ftype in (1, 3, 4):  # Sub / Average / Paeth need left-to-right scan
            cur = np.zeros(stride, dtype=np.int32)
            for x in range(stride):
                a = cur[x - c] if x >= c else 0
                b = prev[x]
                if ftype == 1:
                    pred = a
                elif ftype == 3:
                    pred = (a + b) // 2
                else:
                    cc = prev[x - c] if x >= c else 0
                    p = a + b - cc
                    pa, pb, pc = abs(p - a), abs(p - b), abs(p - cc)
                    pred = a if (pa <= pb and pa <= pc) else (b if pb <= pc else cc)
                cur[x] = (row[x] + pred) & 0xFF
        else:
            raise ImageFormatError(f"unsupported PNG filter type {ftype}")
        px[y] = cur.astype(np.uint8)
    return px.reshape(h, w, c)


def _decode_png(blob: bytes, source_id: str) -> Image:
    if blob[:8] != _PNG_SIG:
        raise ImageFormatError("not a PNG: bad signature")
    pos = 8
    ihdr = None
    idat = bytearray()
    while pos < len(blob):
        if pos + 8 > len(blob):
            raise ImageFormatError("truncated PNG chunk header")
        ln, = struct.unpack(">I", blob[pos:pos + 4])
        ctype = blob[pos + 4:pos + 8]
        payload = blob[pos + 8:pos + 8 + ln]
        if len(payload) != ln or pos + 12 + ln > len(blob):
            raise ImageFormatError("truncated PNG chunk payload")
        crc, = struct.unpack(">I", blob[pos + 8 + ln:pos + 12 + ln])
        if crc != (zlib.crc32(payload, zlib.crc32(ctype)) & 0xFFFFFFFF):
            raise ImageFormatError(f"PNG chunk {ctype!r} CRC mismatch")
        pos += 12 + ln
        if ctype == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", payload)
        elif ctype == b"IDAT":
            idat += payload
        elif ctype == b"IEND":
            break
    if ihdr is None:
        raise ImageFormatError("PNG missing IHDR")
    w, h, depth, color_type, comp, filt, interlace = ihdr
    if depth != 8:
        raise ImageFormatError(f"unsupported PNG bit depth {depth} (only 8)")
    if color_type not in (0, 2):
        raise ImageFormatError(f"unsupported PNG color type {color_type} (only gray/RGB)")
    if interlace != 0:
        raise ImageFormatError("interlaced PNG not supported")
    if comp != 0 or filt != 0:
        raise ImageFormatError("nonstandard PNG compression/filter method")
    c = 1 if color_type == 0 else 3
    try:
        data = zlib.decompress(bytes(idat))
    except zlib.error as exc:
        raise ImageFormatError(f"corrupt PNG stream: {exc}") from exc
    if len(data) != h * (w * c + 1):
        raise ImageFormatError("PNG payload length does not match header")
    raw = _unfilter_png(data, h, w, c)
    return Image(raw.astype(np.float64) / 255.0, source_id)


# -- PGM / PPM codec (binary, maxval <= 255) ------------------------------------


def _encode_pnm(img: Image) -> bytes:
    raw = img.quantized()
    h, w, c = raw.shape
    magic = b"P5" if c == 1 else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, w, h)
    return header + raw.tobytes()


def _decode_pnm(blob: bytes, source_id: str) -> Image:
    # header: magic, width, height, maxval as whitespace/comment-separated tokens
    pos = 0

    def token():
        nonlocal pos
        while pos < len(blob):
            ch = blob[pos:pos + 1]
            if ch == b"#":
                nl = blob.find(b"\n", pos)
                if nl < 0:
                    raise ImageFormatError("unterminated PNM comment")
                pos = nl + 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PNM header")
        return blob[start:pos]

    magic = token()
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported PNM magic {magic!r} (only binary P5/P6)")
    c = 1 if magic == b"P5" else 3
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError as exc:
        raise ImageFormatError("malformed PNM header") from exc
    if maxval <= 0 or maxval > 255:
        raise ImageFormatError(f"unsupported PNM bit depth (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    need = w * h * c
    payload = blob[pos:pos + need]
    if len(payload) != need:
        raise ImageFormatError("PNM payload shorter than header promises")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, c)
    return Image(raw.astype(np.float64) / maxval, source_id)


# -- public I/O -----------------------------------------------------------------


def load_image(path) -> Image:
    """Load an 8-bit PNG or binary PGM/PPM file."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise ImageFormatError(f"cannot read image {path}: {exc}") from exc
    source_id = os.path.splitext(os.path.basename(path))[0]
    if blob[:8] == _PNG_SIG:
        return _decode_png(blob, source_id)
    if blob[:2] in (b"P5", b"P6"):
        return _decode_pnm(blob, source_id)
    raise ImageFormatError(f"unrecognized image format in {path}")


def save_image(img: Image, path):
    """Write PNG / PGM / PPM by extension, quantizing to 8 bits (clamped)."""
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        blob = _encode_png(img)
    elif ext in (".pgm", ".ppm"):
        if ext == ".pgm" and img.channels != 1:
            raise ImageFormatError("PGM stores a single channel; convert to gray first")
        if ext == ".ppm" and img.channels != 3:
            raise ImageFormatError("PPM stores three channels")
        blob = _encode_pnm(img)
    else:
        raise ImageFormatError(f"unsupported image extension {ext!r}")
    with open(path, "wb") as f:
        f.write(blob)


# -- metrics ----------------------------------------------------------------------


def mse(a: Image, b: Image) -> float:
    if a.pixels.shape != b.pixels.shape:
        raise ShapeError(f"image shapes differ: {a.pixels.shape} vs {b.pixels.shape}")
    d = a.pixels - b.pixels
    return float((d * d).mean())


def psnr(a: Image, b: Image, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; zero-MSE pairs return the 100 dB cap."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(peak * peak / err), PSNR_CAP_DB))


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _ssim_kernel():
    r = SSIM_WINDOW // 2
    xs = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    return k / k.sum()


def _win_mean(x, k):
    # separable valid-mode weighted mean: rows then columns
    out = sliding_window_view(x, len(k), axis=0) @ k
    out = sliding_window_view(out, len(k), axis=1) @ k
    return out


def ssim(a: Image, b: Image, peak: float = 1.0) -> float:
    """Mean local structural similarity with the standard Gaussian window."""
    if a.pixels.shape != b.pixels.shape:
        raise ShapeError(f"image shapes differ: {a.pixels.shape} vs {b.pixels.shape}")
    if min(a.height, a.width) < SSIM_WINDOW:
        raise ShapeError(
            f"image {a.height}x{a.width} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    k = _ssim_kernel()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    vals = []
    for ch in range(a.channels):
        x = a.pixels[:, :, ch]
        y = b.pixels[:, :, ch]
        mx = _win_mean(x, k)
        my = _win_mean(y, k)
        sxx = _win_mean(x * x, k) - mx * mx
        syy = _win_mean(y * y, k) - my * my
        sxy = _win_mean(x * y, k) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(float((num / den).mean()))
    return float(np.mean(vals))


# -- patches ---------------------------------------------------------------------


@dataclass
class PatchLayout:
    """Grid geometry needed to reassemble patches into the source image."""

    height: int
    width: int
    channels: int
    size: int
    stride: int
    positions: list  # (y, x) top-left corners, one per patch


def extract_patches(img: Image, size: int, stride: int, seed=None):
    """Cut a regular patch grid; optional seed shuffles patch order.

    Patch count per axis is floor((dim - size)/stride) + 1.
    """
    if size > min(img.height, img.width):
        raise ShapeError(f"patch size {size} exceeds image {img.height}x{img.width}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    ys = range(0, img.height - size + 1, stride)
    xs = range(0, img.width - size + 1, stride)
    positions = [(y, x) for y in ys for x in xs]
    if seed is not None:
        from . import rng

        order = rng.stream(seed, "patch-order").permutation(len(positions))
        positions = [positions[i] for i in order]
    patches = [
        Image(img.pixels[y:y + size, x:x + size], f"{img.source_id}@{y},{x}")
        for (y, x) in positions
    ]
    layout = PatchLayout(img.height, img.width, img.channels, size, stride, positions)
    return patches, layout


def reassemble(patches, layout: PatchLayout) -> Image:
    """Invert extract_patches; overlapping regions are averaged."""
    if len(patches) != len(layout.positions):
        raise ShapeError(
            f"layout expects {len(layout.positions)} patches, got {len(patches)}"
        )
    acc = np.zeros((layout.height, layout.width, layout.channels))
    weight = np.zeros((layout.height, layout.width, 1))
    s = layout.size
    for patch, (y, x) in zip(patches, layout.positions):
        if patch.pixels.shape != (s, s, layout.channels):
            raise ShapeError(
                f"patch shape {patch.pixels.shape} inconsistent with layout size {s}"
            )
        acc[y:y + s, x:x + s] += patch.pixels
        weight[y:y + s, x:x + s] += 1.0
    if (weight == 0).any():
        raise ShapeError("layout does not cover the full image")
    return Image(np.clip(acc / weight, 0.0, 1.0))


# -- aggregate report --------------------------------------------------------------


@dataclass
class MetricsReport:
    """Per-image and mean PSNR/SSIM; aggregates are arithmetic means."""

    psnr_db: float
    ssim: float
    per_image: list = field(default_factory=list)  # (source_id, psnr, ssim)
    channel_mode: str = "per-channel RGB, averaged"

    @classmethod
    def from_pairs(cls, entries):
        """entries: iterable of (source_id, psnr, ssim)."""
        entries = list(entries)
        if not entries:
            raise ValueError("empty metrics report")
        return cls(
            psnr_db=float(np.mean([e[1] for e in entries])),
            ssim=float(np.mean([e[2] for e in entries])),
            per_image=entries,
        )

    def to_tsv(self) -> str:
        lines = ["source_id\tpsnr_db\tssim"]
        for sid, p, s in self.per_image:
            lines.append(f"{sid}\t{p:.6f}\t{s:.6f}")
        lines.append(f"MEAN\t{self.psnr_db:.6f}\t{self.ssim:.6f}")
        lines.append(f"# channel_mode: {self.channel_mode}")
        return "\n".join(lines) + "\n"


# -- simple heatmap rendering (error maps) -----------------------------------------

_HEAT_ANCHORS = np.array(
    [
        [0.00, 0.0, 0.0, 0.2],
        [0.25, 0.2, 0.0, 0.6],
        [0.50, 0.8, 0.1, 0.3],
        [0.75, 1.0, 0.6, 0.0],
        [1.00, 1.0, 1.0, 0.8],
    ]
)


def error_heatmap(a: Image, b: Image, scale: float | None = None) -> Image:
    """Render |a - b| (mean over channels) through a dark-to-hot colormap.

    ``scale`` fixes the value mapped to the top color; defaults to the
    maximum observed error (or 1e-6 if the images are identical).
    """
    if a.pixels.shape != b.pixels.shape:
        raise ShapeError(f"image shapes differ: {a.pixels.shape} vs {b.pixels.shape}")
    err = np.abs(a.pixels - b.pixels).mean(axis=2)
    if scale is None:
        scale = max(float(err.max()), 1e-6)
    x = np.clip(err / scale, 0.0, 1.0)
    pos = _HEAT_ANCHORS[:, 0]
    rgb = np.stack(
        [np.interp(x, pos, _HEAT_ANCHORS[:, 1 + ch]) for ch in range(3)], axis=2
    )
    return Image(np.clip(rgb, 0.0, 1.0), f"err:{a.source_id}")
