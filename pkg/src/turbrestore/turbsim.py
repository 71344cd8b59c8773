"""Seeded synthetic atmospheric-turbulence degradation.

The degradation uses the standard tilt-plus-blur decomposition of
anisoplanatic turbulence: a smooth random displacement field warps the
image geometrically, a spatially varying Gaussian blur removes detail,
and sensor noise is added last. Three interpretable knobs (tilt strength,
blur sigma range, noise std) plus a 64-bit seed fully determine the
output; rerunning with the same seed is bit-identical.

Also hosts the procedural pattern generator used by the desk-scale
benchmark so experiments are self-contained without external datasets.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import convolve1d

from . import rng
from .errors import ConfigError
from .imaging import Image, load_image, save_image

MANIFEST_NAME = "manifest.tsv"
MANIFEST_HEADER = (
    "pair_id\tclean_path\tdegraded_path\tseed\ttilt_strength\ttilt_corr"
    "\tsigma_min\tsigma_max\tnoise_std"
)


@dataclass(frozen=True)
class TurbulenceParams:
    """Degradation knobs; tilt in pixels, noise std in [0,1] intensity units."""

    tilt_strength: float = 2.0
    tilt_correlation: float = 8.0
    blur_sigma_range: tuple = (0.5, 1.5)
    noise_std: float = 0.03
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.blur_sigma_range
        if self.tilt_strength < 0:
            raise ConfigError("tilt_strength must be >= 0")
        if lo > hi or lo < 0:
            raise ConfigError("blur_sigma_range must satisfy 0 <= sigma_min <= sigma_max")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")


# -- gaussian smoothing (self-contained, reflect padding) ------------------------


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    if sigma <= 0:
        return np.array([1.0])
    r = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def smooth2d(field: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing of a 2-D array, mirror-padded edges."""
    k = gaussian_kernel1d(sigma)
    if len(k) == 1:
        return field.copy()
    out = convolve1d(field, k, axis=0, mode="mirror")
    return convolve1d(out, k, axis=1, mode="mirror")


# -- tilt field --------------------------------------------------------------------


def generate_tilt_field(h: int, w: int, params: TurbulenceParams) -> np.ndarray:
    """Smoothed white noise rescaled to the requested peak displacement.

    Returns [2, h, w]: per-pixel (dy, dx) in pixels, with
    max sqrt(dy^2 + dx^2) == tilt_strength (exactly zero field when
    tilt_strength is 0). Deterministic in params.seed.
    """
    gen = rng.stream(params.seed, "tilt")
    white = gen.standard_normal((2, h, w))
    field = np.stack([smooth2d(white[i], params.tilt_correlation) for i in range(2)])
    if params.tilt_strength == 0:
        return np.zeros_like(field)
    mag = np.sqrt(field[0] ** 2 + field[1] ** 2)
    peak = mag.max()
    if peak == 0.0:
        return field
    return field * (params.tilt_strength / peak)


def warp_bilinear(pixels: np.ndarray, field: np.ndarray) -> np.ndarray:
    """Backward warp: output(y,x) samples input at (y+dy, x+dx), edge-clamped."""
    h, w, _ = pixels.shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sy = np.clip(yy + field[0], 0.0, h - 1.0)
    sx = np.clip(xx + field[1], 0.0, w - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, :, None]
    fx = (sx - x0)[:, :, None]
    p00 = pixels[y0, x0]
    p01 = pixels[y0, x1]
    p10 = pixels[y1, x0]
    p11 = pixels[y1, x1]
    top = p00 * (1 - fx) + p01 * fx
    bot = p10 * (1 - fx) + p11 * fx
    return top * (1 - fy) + bot * fy


# -- spatially varying blur -----------------------------------------------------------

_BLUR_LEVELS = 4  # fixed sigma levels interpolated per pixel


def _blur_sigma_field(h, w, params: TurbulenceParams) -> np.ndarray:
    """Smooth random field mapped into [sigma_min, sigma_max]."""
    lo, hi = params.blur_sigma_range
    if hi == lo:
        return np.full((h, w), float(lo))
    gen = rng.stream(params.seed, "blur-field")
    raw = smooth2d(gen.standard_normal((h, w)), params.tilt_correlation)
    lo_v, hi_v = raw.min(), raw.max()
    if hi_v == lo_v:
        unit = np.full((h, w), 0.5)
    else:
        unit = (raw - lo_v) / (hi_v - lo_v)
    return lo + unit * (hi - lo)


def varying_blur(pixels: np.ndarray, sigma_field: np.ndarray) -> np.ndarray:
    """Per-pixel Gaussian blur via interpolation between fixed sigma levels."""
    lo = float(sigma_field.min())
    hi = float(sigma_field.max())
    if hi == 0.0:
        return pixels.copy()
    if hi == lo:
        levels = np.array([lo])
    else:
        levels = np.linspace(lo, hi, _BLUR_LEVELS)
    stack = np.stack(
        [
            np.stack([smooth2d(pixels[:, :, c], s) for c in range(pixels.shape[2])], axis=2)
            for s in levels
        ]
    )
    if len(levels) == 1:
        return stack[0]
    idx = np.clip(
        np.searchsorted(levels, sigma_field, side="right") - 1, 0, len(levels) - 2
    )
    frac = (sigma_field - levels[idx]) / (levels[idx + 1] - levels[idx])
    frac = frac[:, :, None]
    h, w = sigma_field.shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return stack[idx, yy, xx] * (1 - frac) + stack[idx + 1, yy, xx] * frac


# -- full degradation -----------------------------------------------------------------


def degrade(img: Image, params: TurbulenceParams) -> Image:
    """Tilt-warp, then spatially varying blur, then clamped sensor noise."""
    px = img.pixels
    h, w, c = px.shape
    if params.tilt_strength > 0:
        field = generate_tilt_field(h, w, params)
        px = warp_bilinear(px, field)
    if params.blur_sigma_range[1] > 0:
        sigma_field = _blur_sigma_field(h, w, params)
        px = varying_blur(px, sigma_field)
    if params.noise_std > 0:
        gen = rng.stream(params.seed, "noise")
        px = px + gen.standard_normal((h, w, c)) * params.noise_std
    return Image(np.clip(px, 0.0, 1.0), img.source_id)


# -- dataset generation ----------------------------------------------------------------


def list_images(directory) -> list:
    exts = (".png", ".pgm", ".ppm")
    names = sorted(
        n for n in os.listdir(directory) if os.path.splitext(n)[1].lower() in exts
    )
    return [os.path.join(directory, n) for n in names]


def make_dataset(clean_dir, out_dir, params: TurbulenceParams, count: int) -> str:
    """Write degraded/clean pairs plus a manifest; returns the manifest path.

    Clean images are cycled in sorted order when count exceeds the supply.
    Each pair gets its own seed derived from (params.seed, pair index) and
    recorded in the manifest, so any pair can be regenerated in isolation.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    sources = list_images(clean_dir)
    if not sources:
        raise ConfigError(f"no loadable images in {clean_dir}")
    os.makedirs(out_dir, exist_ok=True)
    lo, hi = params.blur_sigma_range
    rows = []
    for i in range(count):
        img = load_image(sources[i % len(sources)])
        pair_seed = rng.derive_seed(params.seed, "pair", i)
        degraded = degrade(img, replace(params, seed=pair_seed))
        clean_name = f"clean_{i:04d}.png"
        deg_name = f"degraded_{i:04d}.png"
        save_image(img, os.path.join(out_dir, clean_name))
        save_image(degraded, os.path.join(out_dir, deg_name))
        rows.append(
            f"{i:04d}\t{clean_name}\t{deg_name}\t{pair_seed}\t{params.tilt_strength}"
            f"\t{params.tilt_correlation}\t{lo}\t{hi}\t{params.noise_std}"
        )
    manifest = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest, "w", encoding="utf-8") as f:
        f.write(MANIFEST_HEADER + "\n")
        f.write("\n".join(rows) + "\n")
    return manifest


@dataclass
class ManifestRow:
    pair_id: str
    clean_path: str
    degraded_path: str
    seed: int
    tilt_strength: float
    tilt_corr: float
    sigma_min: float
    sigma_max: float
    noise_std: float


def read_manifest(path) -> list:
    """Parse a dataset manifest; paths are resolved relative to the file."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ConfigError(f"unrecognized manifest header in {path}")
    rows = []
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != 9:
            raise ConfigError(f"malformed manifest row: {ln!r}")
        rows.append(
            ManifestRow(
                pair_id=parts[0],
                clean_path=os.path.join(base, parts[1]),
                degraded_path=os.path.join(base, parts[2]),
                seed=int(parts[3]),
                tilt_strength=float(parts[4]),
                tilt_corr=float(parts[5]),
                sigma_min=float(parts[6]),
                sigma_max=float(parts[7]),
                noise_std=float(parts[8]),
            )
        )
    return rows


# -- procedural pattern images ------------------------------------------------------------


def make_pattern_image(size: int, gen: np.random.Generator) -> Image:
    """One random structured grayscale pattern: gratings, disks, checkers,
    and gradients superimposed, kept inside [0.08, 0.92] so mild noise does
    not clip."""
    yy, xx = np.meshgrid(
        np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij"
    )
    canvas = np.zeros((size, size))
    n_parts = int(gen.integers(2, 4))
    for _ in range(n_parts):
        kind = int(gen.integers(0, 4))
        if kind == 0:  # oriented sinusoidal grating
            freq = gen.uniform(1.5, 5.0)
            theta = gen.uniform(0, np.pi)
            phase = gen.uniform(0, 2 * np.pi)
            u = xx * np.cos(theta) + yy * np.sin(theta)
            canvas += gen.uniform(0.3, 1.0) * np.sin(2 * np.pi * freq * u + phase)
        elif kind == 1:  # soft disk
            cy, cx = gen.uniform(0.2, 0.8, size=2)
            rad = gen.uniform(0.1, 0.3)
            d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
            canvas += gen.uniform(-1.0, 1.0) * np.tanh((rad - d) * 12.0)
        elif kind == 2:  # checkerboard
            cells = int(gen.integers(3, 7))
            canvas += gen.uniform(0.3, 0.8) * (
                ((yy * cells).astype(int) + (xx * cells).astype(int)) % 2 - 0.5
            )
        else:  # linear gradient
            theta = gen.uniform(0, 2 * np.pi)
            canvas += gen.uniform(0.3, 1.0) * (
                xx * np.cos(theta) + yy * np.sin(theta)
            )
    lo_v, hi_v = canvas.min(), canvas.max()
    if hi_v - lo_v < 1e-9:
        unit = np.full_like(canvas, 0.5)
    else:
        unit = (canvas - lo_v) / (hi_v - lo_v)
    return Image((0.08 + 0.84 * unit)[:, :, None])


def make_pattern_dataset(out_dir, count: int, size: int, seed: int) -> list:
    """Write ``count`` pattern PNGs into out_dir; returns the file paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i in range(count):
        img = make_pattern_image(size, rng.stream(seed, "pattern", i))
        path = os.path.join(out_dir, f"pattern_{i:04d}.png")
        save_image(img, path)
        paths.append(path)
    return paths
