"""Synthetic data and imaging transforms for the linear filtering tasks.

Covers the spatially adaptive toy dataset (uniform color noise whose black
pixels must be dilated to 5x5 zero squares), RGGB Bayer mosaicking with
signal-dependent Gaussian noise, the bilinear demosaicking baseline, and
Catmull-Rom bicubic resampling for super-resolution pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError


@dataclass
class SadConfig:
    image_size: int = 89
    grid_size: int = 87
    square_size: int = 5
    black_density: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.square_size % 2 == 0:
            raise ContractError("square size must be odd")
        if self.grid_size != self.image_size - 2:
            raise ContractError("grid size must be image size - 2")
        if not 0.0 <= self.black_density <= 1.0:
            raise ContractError("black density must lie in [0, 1]")

    def lattice(self) -> np.ndarray:
        """Candidate square centers: a stride-5 lattice whose squares all fit
        inside the image and can never overlap each other."""
        margin = self.square_size // 2
        return np.arange(margin, self.image_size - margin, self.square_size)


@dataclass
class SadSample:
    input: np.ndarray                       # [3,S,S], noise in (0,1] + black centers
    target: np.ndarray                      # [3,S,S], centers dilated to zero squares
    centers: list = field(default_factory=list)  # (row, col) of each black center


def gen_sad_sample(cfg: SadConfig, rng: np.random.Generator) -> SadSample:
    """One image pair: color noise with black pixels, and its dilation target."""
    s = cfg.image_size
    # 1 - U[0,1) lands in (0,1], the open-at-zero range the noise needs
    noise = (1.0 - rng.random((3, s, s))).astype(np.float32)
    lattice = cfg.lattice()
    accept = rng.random((lattice.size, lattice.size)) < cfg.black_density
    inp = noise.copy()
    tgt = noise.copy()
    half = cfg.square_size // 2
    centers = []
    for iy, cy in enumerate(lattice):
        for ix, cx in enumerate(lattice):
            if accept[iy, ix]:
                centers.append((int(cy), int(cx)))
                inp[:, cy, cx] = 0.0
                tgt[:, cy - half:cy + half + 1, cx - half:cx + half + 1] = 0.0
    return SadSample(input=inp, target=tgt, centers=centers)


def bayer_mosaic(rgb: np.ndarray) -> np.ndarray:
    """Subsample an RGB image onto the RGGB color filter array."""
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise DimensionError(f"expected [3,H,W], got {rgb.shape}")
    _, h, w = rgb.shape
    if h % 2 or w % 2:
        raise DimensionError(f"mosaic needs even dimensions, got {h}x{w}")
    out = np.empty((1, h, w), dtype=rgb.dtype)
    out[0, 0::2, 0::2] = rgb[0, 0::2, 0::2]
    out[0, 0::2, 1::2] = rgb[1, 0::2, 1::2]
    out[0, 1::2, 0::2] = rgb[1, 1::2, 0::2]
    out[0, 1::2, 1::2] = rgb[2, 1::2, 1::2]
    return out


def add_heteroskedastic_noise(x: np.ndarray, sigma_mul: float, sigma_add: float,
                              rng: np.random.Generator) -> np.ndarray:
    """Signal-dependent Gaussian noise with variance sigma_mul*x + sigma_add."""
    if sigma_mul < 0 or sigma_add < 0:
        raise ContractError("noise parameters must be non-negative")
    var = np.maximum(sigma_mul * x + sigma_add, 0.0)
    y = x + rng.standard_normal(x.shape) * np.sqrt(var)
    return np.maximum(y, 0.0).astype(x.dtype)


# neighbor taps for bilinear demosaicking; the center-4 weighting makes a
# pixel that already carries the color reproduce itself exactly
_RB_TAPS = [(-1, -1, 1.0), (-1, 0, 2.0), (-1, 1, 1.0),
            (0, -1, 2.0), (0, 0, 4.0), (0, 1, 2.0),
            (1, -1, 1.0), (1, 0, 2.0), (1, 1, 1.0)]
_G_TAPS = [(-1, 0, 1.0), (0, -1, 1.0), (0, 0, 4.0), (0, 1, 1.0), (1, 0, 1.0)]


def _phase_masks(h: int, w: int) -> dict[str, np.ndarray]:
    r = np.zeros((h, w), dtype=np.float32)
    g = np.zeros((h, w), dtype=np.float32)
    b = np.zeros((h, w), dtype=np.float32)
    r[0::2, 0::2] = 1.0
    g[0::2, 1::2] = 1.0
    g[1::2, 0::2] = 1.0
    b[1::2, 1::2] = 1.0
    return {"r": r, "g": g, "b": b}


def _interp_plane(plane: np.ndarray, mask: np.ndarray, taps) -> np.ndarray:
    h, w = plane.shape
    acc = np.zeros((h, w), dtype=np.float32)
    cnt = np.zeros((h, w), dtype=np.float32)
    for dy, dx, wt in taps:
        ys = slice(max(0, -dy), min(h, h - dy))
        xs = slice(max(0, -dx), min(w, w - dx))
        yd = slice(max(0, dy), min(h, h + dy))
        xd = slice(max(0, dx), min(w, w + dx))
        acc[ys, xs] += np.float32(wt) * plane[yd, xd]
        cnt[ys, xs] += np.float32(wt) * mask[yd, xd]
    return acc / cnt


def bilinear_demosaick(mosaic: np.ndarray) -> np.ndarray:
    """Reference demosaick: each missing color is the mean of its nearest
    same-color neighbors, using only the taps that fall inside the image."""
    if mosaic.ndim != 3 or mosaic.shape[0] != 1:
        raise DimensionError(f"expected [1,H,W] mosaic, got {mosaic.shape}")
    m = mosaic[0]
    h, w = m.shape
    masks = _phase_masks(h, w)
    out = np.empty((3, h, w), dtype=np.float32)
    out[0] = _interp_plane(m * masks["r"], masks["r"], _RB_TAPS)
    out[1] = _interp_plane(m * masks["g"], masks["g"], _G_TAPS)
    out[2] = _interp_plane(m * masks["b"], masks["b"], _RB_TAPS)
    return out


_ALLOWED_SCALES = (0.25, 1.0 / 3.0, 0.5, 1.0, 2.0, 3.0, 4.0)


def _cubic_kernel(t: np.ndarray) -> np.ndarray:
    """Catmull-Rom cubic (a = -0.5)."""
    t = np.abs(t)
    t2 = t * t
    t3 = t2 * t
    near = 1.5 * t3 - 2.5 * t2 + 1.0
    far = -0.5 * t3 + 2.5 * t2 - 4.0 * t + 2.0
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def _resize_weights(in_len: int, out_len: int, scale: float) -> np.ndarray:
    """Dense [out_len, in_len] row-stochastic cubic resampling matrix.

    Downsampling stretches the kernel by 1/scale for antialiasing; source
    indices are clipped to the image (replicate borders) and each row is
    normalized so weights sum to one.
    """
    stretch = max(1.0, 1.0 / scale)
    radius = 2.0 * stretch
    centers = (np.arange(out_len) + 0.5) / scale - 0.5
    lo = np.ceil(centers - radius).astype(np.int64)
    width = int(np.floor(2.0 * radius)) + 2
    offsets = np.arange(width)
    idx = lo[:, None] + offsets[None, :]
    w = _cubic_kernel((idx - centers[:, None]) / stretch)
    w /= w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_len - 1)
    mat = np.zeros((out_len, in_len), dtype=np.float64)
    rows = np.repeat(np.arange(out_len), width)
    np.add.at(mat, (rows, idx.reshape(-1)), w.reshape(-1))
    return mat


def resample_bicubic(img: np.ndarray, scale: float) -> np.ndarray:
    """Separable Catmull-Rom resampling by a fixed up/down factor."""
    if img.ndim != 3:
        raise DimensionError(f"expected [C,H,W], got {img.shape}")
    scale = float(scale)
    if not any(abs(scale - s) < 1e-9 for s in _ALLOWED_SCALES):
        raise ContractError(f"unsupported scale {scale}; allowed: 1/4, 1/3, 1/2, 1, 2, 3, 4")
    _, h, w = img.shape
    out_h = max(1, int(np.floor(h * scale + 0.5)))
    out_w = max(1, int(np.floor(w * scale + 0.5)))
    wh = _resize_weights(h, out_h, scale)
    ww = _resize_weights(w, out_w, scale)
    work = img.astype(np.float64)
    work = np.tensordot(work, wh, axes=([1], [1])).transpose(0, 2, 1)  # rows
    work = np.tensordot(work, ww, axes=([2], [1]))                     # columns
    return np.ascontiguousarray(work.astype(np.float32))


def flip_image(x: np.ndarray, horizontal: bool, vertical: bool, cfa_safe: bool = False) -> np.ndarray:
    """Flip the trailing two axes; cfa_safe flips in 2-pixel blocks so an
    RGGB mosaic keeps its phase."""
    h, w = x.shape[-2], x.shape[-1]
    if cfa_safe and (h % 2 or w % 2):
        raise DimensionError("cfa-safe flips need even dimensions")
    y = x
    if horizontal:
        if cfa_safe:
            y = y.reshape(*y.shape[:-1], w // 2, 2)[..., ::-1, :].reshape(*y.shape)
        else:
            y = y[..., ::-1]
    if vertical:
        if cfa_safe:
            y = y.reshape(*y.shape[:-2], h // 2, 2, w)[..., ::-1, :, :].reshape(*y.shape)
        else:
            y = y[..., ::-1, :]
    return np.ascontiguousarray(y)


def augment_flips(inp: np.ndarray, tgt: np.ndarray, rng: np.random.Generator,
                  p: float = 0.5, cfa_safe: bool = False):
    """Apply the same random horizontal/vertical flips to an image pair."""
    horizontal = bool(rng.random() < p)
    vertical = bool(rng.random() < p)
    return (flip_image(inp, horizontal, vertical, cfa_safe),
            flip_image(tgt, horizontal, vertical, cfa_safe))
