"""Frozen multi-scale convolutional descriptor pyramid.

A stack of orthogonally initialized convolutions stands in for a pretrained
backbone: weights are a pure function of (seed, channels), never trained,
and the two pyramid levels (H/2 and H/4) feed the matching-cost stage. All
normalization inside the stack is per-position across channels, which keeps
the descriptors exactly shift-equivariant on the interior; reflect padding
keeps constant images constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit as _sigmoid

from .errors import InvalidArgument
from .ops import _im2col, _pad_nchw

_EPS_CHANNEL_NORM = 1e-6


@dataclass(frozen=True)
class ConvBlock:
    weight: np.ndarray  # (Cout, Cin, k, k)
    bias: np.ndarray  # (Cout,)
    stride: int


@dataclass(frozen=True)
class ExtractorWeights:
    seed: int
    channels: int
    blocks: tuple[ConvBlock, ...]


@dataclass(frozen=True)
class FeaturePyramid:
    level_fine: np.ndarray  # (C, H/2, W/2), unit descriptors
    level_coarse: np.ndarray  # (C, H/4, W/4), unit descriptors

    @property
    def channels(self) -> int:
        return self.level_fine.shape[0]


def _orthogonal_rows(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    """Kernel whose flattened (Cout, Cin*k*k) matrix has orthonormal rows."""
    cols = cin * k * k
    if cout > cols:
        raise InvalidArgument(
            f"cannot orthogonalize {cout} rows against {cols} columns"
        )
    a = rng.normal(size=(cols, cout))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # fix signs so the draw is deterministic Haar
    return np.ascontiguousarray(q.T).reshape(cout, cin, k, k)


def init_extractor(seed: int, channels: int = 32) -> ExtractorWeights:
    """Deterministic frozen conv stack: two levels of three blocks each."""
    if channels < 4:
        raise InvalidArgument("extractor needs at least 4 channels")
    rng = np.random.default_rng(np.uint64(seed))
    # (cin, cout, kernel, stride) per block; strides 2 mark level transitions
    layout = [
        (3, channels, 5, 2),
        (channels, channels, 3, 1),
        (channels, channels, 1, 1),
        (channels, channels, 3, 2),
        (channels, channels, 3, 1),
        (channels, channels, 1, 1),
    ]
    blocks = tuple(
        ConvBlock(_orthogonal_rows(rng, cout, cin, k), np.zeros(cout), stride)
        for cin, cout, k, stride in layout
    )
    return ExtractorWeights(seed=int(seed), channels=int(channels), blocks=blocks)


def _conv_raw(x: np.ndarray, blk: ConvBlock) -> np.ndarray:
    n, _, h, w = x.shape
    cout, _, kh, kw = blk.weight.shape
    p = (kh - 1) // 2
    xp = _pad_nchw(x, p, p, "reflect")
    cols = _im2col(xp, kh, kw, blk.stride)  # (N, K, L)
    k = cols.shape[1]
    ho = (h + 2 * p - kh) // blk.stride + 1
    wo = (w + 2 * p - kw) // blk.stride + 1
    out = np.matmul(blk.weight.reshape(cout, k), cols)
    out += blk.bias[:, None]
    return out.reshape(n, cout, ho, wo)


def _channel_norm_swish(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    sd = np.sqrt(x.var(axis=1, keepdims=True) + _EPS_CHANNEL_NORM)
    z = (x - mu) / sd
    return z * _sigmoid(z)


def l2_normalize(vec: np.ndarray, axis: int = 0, eps: float = 1e-12) -> np.ndarray:
    """v / max(||v||, eps); zero vectors stay zero."""
    if eps <= 0:
        raise InvalidArgument("eps must be positive")
    norm = np.sqrt((vec * vec).sum(axis=axis, keepdims=True))
    return vec / np.maximum(norm, eps)


def extract(weights: ExtractorWeights, image: np.ndarray) -> FeaturePyramid:
    """l2-normalized descriptor maps at H/2 and H/4 for a (3, H, W) image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise InvalidArgument(f"expected (3, H, W) image, got {image.shape}")
    _, h, w = image.shape
    if h % 4 != 0 or w % 4 != 0:
        raise InvalidArgument(f"image size {h}x{w} not divisible by 4")
    x = image[None]
    feats = []
    for i, blk in enumerate(weights.blocks):
        x = _channel_norm_swish(_conv_raw(x, blk))
        if i == 2 or i == 5:
            feats.append(l2_normalize(x[0], axis=0))
    return FeaturePyramid(level_fine=feats[0], level_coarse=feats[1])
