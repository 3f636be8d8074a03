"""Stochastic view-pair generation for pretraining.

Two independently transformed views are produced per image.  Images move
through the pipeline as float32 channel-first arrays in [0, 1]; dataset
normalization is the final step, so every emitted view is already in the
encoder's expected scale.  All randomness comes from the caller's Generator,
making a run reproducible from its seed alone.

Per-image draw order (fixed, documented for reproducibility): crop, flip,
jitter, grayscale, blur, solarize — first for view 1, then for view 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .errors import ContractViolation
from .tensor import Tensor

__all__ = ["TransformConfig", "ViewPair", "sample_views", "normalize_images"]

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class TransformConfig:
    """Knobs for the view sampler.

    blur_prob and solarize_prob are per-view pairs: the two views are
    deliberately asymmetric (heavy blur on one side, solarization on the
    other), which is the usual two-view recipe.
    """
    crop_scale_range: tuple[float, float] = (0.2, 1.0)
    flip_prob: float = 0.5
    jitter_strengths: tuple[float, float, float, float] = (0.4, 0.4, 0.2, 0.1)
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: tuple[float, float] = (0.5, 0.1)
    solarize_prob: tuple[float, float] = (0.0, 0.2)
    output_size: tuple[int, int] = (32, 32)
    norm_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    norm_std: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int | None = None

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ContractViolation(
                f"crop_scale_range must lie in (0,1] with min<=max, got {self.crop_scale_range}")
        probs = (self.flip_prob, self.jitter_prob, self.grayscale_prob,
                 *self.blur_prob, *self.solarize_prob)
        if any(not (0.0 <= p <= 1.0) for p in probs):
            raise ContractViolation("all probabilities must lie in [0,1]")
        if any(s < 0 for s in self.jitter_strengths) or self.jitter_strengths[3] > 0.5:
            raise ContractViolation(
                "jitter strengths must be >= 0 and hue strength <= 0.5")
        if any(d < 1 for d in self.output_size):
            raise ContractViolation("output_size extents must be positive")
        if any(s <= 0 for s in self.norm_std):
            raise ContractViolation("normalization std must be positive")


@dataclass(frozen=True)
class ViewPair:
    """Two augmented views per source image, already normalized."""
    v1: Tensor
    v2: Tensor
    source_indices: np.ndarray

    def __post_init__(self):
        if self.v1.shape != self.v2.shape:
            raise ContractViolation("paired views must share a shape")
        if self.v1.shape[0] != len(self.source_indices):
            raise ContractViolation("one source index per view row required")


def normalize_images(images: np.ndarray, mean, std) -> np.ndarray:
    """Channel-wise (x - mean) / std for an (N,3,H,W) or (3,H,W) array."""
    m = np.asarray(mean, dtype=np.float32).reshape(3, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(3, 1, 1)
    return (images - m) / s


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a (3,h,w) image; half-pixel-centered sampling, edges clamped."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img
    ys = (np.arange(out_h, dtype=np.float32) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float32) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0).astype(np.float32)[None, :, None]
    fx = np.clip(xs - x0, 0.0, 1.0).astype(np.float32)[None, None, :]
    top = img[:, y0[:, None], x0[None, :]] * (1 - fx) + img[:, y0[:, None], x1[None, :]] * fx
    bot = img[:, y1[:, None], x0[None, :]] * (1 - fx) + img[:, y1[:, None], x1[None, :]] * fx
    return top * (1 - fy) + bot * fy


def _random_resized_crop(img: np.ndarray, cfg: TransformConfig,
                         rng: np.random.Generator) -> np.ndarray:
    _, h, w = img.shape
    lo, hi = cfg.crop_scale_range
    ch, cw, top, left = h, w, 0, 0  # fallback: full-image crop
    for _ in range(10):
        area = rng.uniform(lo, hi) * h * w
        aspect = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
        th = int(round(math.sqrt(area / aspect)))
        tw = int(round(math.sqrt(area * aspect)))
        if 1 <= th <= h and 1 <= tw <= w:
            ch, cw = th, tw
            top = int(rng.integers(0, h - th + 1))
            left = int(rng.integers(0, w - tw + 1))
            break
    crop = img[:, top:top + ch, left:left + cw]
    return _bilinear_resize(crop, cfg.output_size[0], cfg.output_size[1])


def _grayscale(img: np.ndarray) -> np.ndarray:
    luma = np.tensordot(_LUMA, img, axes=([0], [0]))
    return np.broadcast_to(luma, img.shape).copy()


def _color_jitter(img: np.ndarray, cfg: TransformConfig,
                  rng: np.random.Generator) -> np.ndarray:
    b, c, s, hmax = cfg.jitter_strengths
    out = img
    if b > 0:
        out = np.clip(out * rng.uniform(1 - b, 1 + b), 0.0, 1.0)
    if c > 0:
        anchor = _grayscale(out).mean(dtype=np.float32)
        out = np.clip(anchor + rng.uniform(1 - c, 1 + c) * (out - anchor), 0.0, 1.0)
    if s > 0:
        gray = _grayscale(out)
        out = np.clip(gray + rng.uniform(1 - s, 1 + s) * (out - gray), 0.0, 1.0)
    if hmax > 0:
        shift = rng.uniform(-hmax, hmax)
        hsv = rgb_to_hsv(np.clip(out, 0.0, 1.0).transpose(1, 2, 0))
        hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
        out = hsv_to_rgb(hsv).transpose(2, 0, 1).astype(np.float32)
    return out.astype(np.float32, copy=False)


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur with zero padding at the borders."""
    r = max(1, int(math.ceil(2.5 * sigma)))
    taps = np.arange(-r, r + 1, dtype=np.float32)
    k = np.exp(-0.5 * (taps / sigma) ** 2)
    k /= k.sum()
    pad = np.pad(img, ((0, 0), (0, 0), (r, r)))
    out = np.zeros_like(img)
    for i, kv in enumerate(k):
        out += kv * pad[:, :, i:i + img.shape[2]]
    pad = np.pad(out, ((0, 0), (r, r), (0, 0)))
    out2 = np.zeros_like(img)
    for i, kv in enumerate(k):
        out2 += kv * pad[:, i:i + img.shape[1], :]
    return out2


def _solarize(img: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.where(img >= threshold, 1.0 - img, img).astype(np.float32)


def _one_view(img: np.ndarray, cfg: TransformConfig, rng: np.random.Generator,
              view: int) -> np.ndarray:
    out = _random_resized_crop(img, cfg, rng)
    if rng.random() < cfg.flip_prob:
        out = out[:, :, ::-1].copy()
    if rng.random() < cfg.jitter_prob:
        out = _color_jitter(out, cfg, rng)
    if rng.random() < cfg.grayscale_prob:
        out = _grayscale(out)
    if rng.random() < cfg.blur_prob[view]:
        out = _gaussian_blur(out, float(rng.uniform(0.1, 2.0)))
    if rng.random() < cfg.solarize_prob[view]:
        out = _solarize(out)
    return normalize_images(out, cfg.norm_mean, cfg.norm_std)


def sample_views(batch: Tensor, cfg: TransformConfig,
                 rng: np.random.Generator | None = None) -> ViewPair:
    """Draw two independent transformations per image in the batch."""
    if rng is None:
        if cfg.seed is None:
            raise ContractViolation("sample_views needs an rng or a config seed")
        rng = np.random.default_rng(cfg.seed)
    data = batch.numpy() if isinstance(batch, Tensor) else np.asarray(batch)
    if data.ndim != 4 or data.shape[1] != 3:
        raise ContractViolation(f"batch must be (N,3,H,W), got {data.shape}")
    n = data.shape[0]
    if n == 0:
        raise ContractViolation("batch must be nonempty")

    oh, ow = cfg.output_size
    v1 = np.empty((n, 3, oh, ow), dtype=np.float32)
    v2 = np.empty((n, 3, oh, ow), dtype=np.float32)
    for i in range(n):
        img = data[i].astype(np.float32, copy=False)
        v1[i] = _one_view(img, cfg, rng, view=0)
        v2[i] = _one_view(img, cfg, rng, view=1)
    return ViewPair(Tensor(v1), Tensor(v2), np.arange(n, dtype=np.int64))
