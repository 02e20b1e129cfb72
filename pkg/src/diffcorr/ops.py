"""Differentiable operations over :class:`~diffcorr.tensor.Tensor`.

The op set is exactly what the denoising network and its training loop need:
elementwise arithmetic, conv2d, fused group-norm + swish, bilinear grid
sampling, single-head 2-D self-attention, nearest upsampling, channel
concatenation, linear layers and full reductions. Every op has a
hand-derived backward verified against central finite differences in the
test suite. No broadcasting beyond the dedicated bias ops.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit as _sigmoid

from .errors import InvalidArgument
from .tensor import Array, Tensor, active_tape

_PADDING_MODES = ("zero", "reflect")


def _apply(op: str, inputs, out_data: Array, make_backward) -> Tensor:
    """Create the output tensor and record the op if a tape is active."""
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    tape = active_tape()
    if tape is not None and requires:
        tape.record(op, inputs, out, make_backward())
    return out


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise InvalidArgument(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _apply("add", (a, b), a.data + b.data, lambda: lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _apply("sub", (a, b), a.data - b.data, lambda: lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _apply("mul", (a, b), ad * bd, lambda: lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _apply("scale", (x,), x.data * c, lambda: lambda g: (g * c,))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    xd = x.data

    def make():
        def bw(g):
            return (g * (s * (1.0 + xd * (1.0 - s))),)

        return bw

    return _apply("silu", (x,), xd * s, make)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def make():
        def bw(g):
            return tuple(np.split(g, splits, axis=axis))

        return bw

    return _apply("concat", tensors, out, make)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise InvalidArgument("upsample_nearest2x expects NCHW input")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def make():
        def bw(g):
            return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

        return bw

    return _apply("upsample2x", (x,), out, make)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-(sample, channel) bias to an NCHW map (time conditioning)."""
    if x.ndim != 4 or bias.ndim != 2 or x.shape[:2] != bias.shape:
        raise InvalidArgument(
            f"add_channel_bias: got map {x.shape} and bias {bias.shape}"
        )
    out = x.data + bias.data[:, :, None, None]

    def make():
        def bw(g):
            return (g, g.sum(axis=(2, 3)))

        return bw

    return _apply("add_channel_bias", (x, bias), out, make)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: rows of ``x`` (B,K) through weight (O,K) plus bias (O,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise InvalidArgument(f"linear: x {x.shape} vs w {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T + b.data

    def make():
        def bw(g):
            return (g @ wd, g.T @ xd, g.sum(axis=0))

        return bw

    return _apply("linear", (x, w, b), out, make)


def sum_all(x: Tensor) -> Tensor:
    xd = x.data

    def make():
        def bw(g):
            return (np.full_like(xd, g.item()),)

        return bw

    return _apply("sum_all", (x,), np.asarray(x.data.sum()), make)


def mean_all(x: Tensor) -> Tensor:
    xd = x.data
    n = xd.size

    def make():
        def bw(g):
            return (np.full_like(xd, g.item() / n),)

        return bw

    return _apply("mean_all", (x,), np.asarray(x.data.mean()), make)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------


def _pad_nchw(x: Array, ph: int, pw: int, mode: str) -> Array:
    if ph == 0 and pw == 0:
        return x
    if mode == "zero":
        n, c, h, w = x.shape
        out = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
        out[:, :, ph : ph + h, pw : pw + w] = x
        return out
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode="reflect")


def _reflect_index(n: int, p: int) -> Array:
    """Map padded axis positions back to source positions (mirror, no edge repeat)."""
    idx = np.arange(-p, n + p)
    idx = np.abs(idx)
    idx = np.where(idx >= n, 2 * (n - 1) - idx, idx)
    return idx


def _out_extent(size: int, k: int, p: int, stride: int) -> int:
    return (size + 2 * p - k) // stride + 1


def _im2col(xp: Array, kh: int, kw: int, stride: int) -> Array:
    """Column matrix (N, C*kh*kw, Ho*Wo) built from kh*kw contiguous copies.

    The K axis is ordered (channel, dy, dx), matching weight.reshape(Cout, K).
    """
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((n, c, kh, kw, ho, wo))
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, di, dj] = xp[
                :, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride
            ]
    return cols.reshape(n, c * kh * kw, ho * wo)


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor,
    stride: int = 1,
    padding: str = "zero",
) -> Tensor:
    """Cross-correlation with same-style padding of (k-1)/2 per side.

    Output height is floor((H + 2p - kh)/stride) + 1; odd kernels only.
    """
    if padding not in _PADDING_MODES:
        raise InvalidArgument(f"unknown padding mode {padding!r}")
    if x.ndim != 4 or w.ndim != 4:
        raise InvalidArgument("conv2d expects NCHW input and OIHW weight")
    n, cin, h, width = x.shape
    cout, cin_w, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise InvalidArgument("conv2d kernels must be odd")
    if cin != cin_w:
        raise InvalidArgument(f"conv2d: input C={cin} but weight expects {cin_w}")
    if b.shape != (cout,):
        raise InvalidArgument(f"conv2d: bias shape {b.shape} != ({cout},)")
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = _pad_nchw(x.data, ph, pw, padding)
    cols = _im2col(xp, kh, kw, stride)  # (N, K, L)
    k = cols.shape[1]
    ho = _out_extent(h, kh, ph, stride)
    wo = _out_extent(width, kw, pw, stride)
    wmat = w.data.reshape(cout, k)
    out = np.matmul(wmat, cols)  # (N, Cout, L), contiguous
    out += b.data[:, None]
    out = out.reshape(n, cout, ho, wo)

    def make():
        hp, wp = xp.shape[2], xp.shape[3]
        need_dx = x.requires_grad

        def bw(g):
            g3 = g.reshape(n, cout, ho * wo)
            dw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            db = g3.sum(axis=(0, 2))
            if not need_dx:
                return (None, dw, db)
            dcols = np.matmul(wmat.T, g3)  # (N, K, L)
            dcols = dcols.reshape(n, cin, kh, kw, ho, wo)
            dxp = np.zeros((n, cin, hp, wp))
            for di in range(kh):
                for dj in range(kw):
                    dxp[
                        :, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride
                    ] += dcols[:, :, di, dj]
            if ph == 0 and pw == 0:
                dx = dxp
            elif padding == "zero":
                dx = dxp[:, :, ph : ph + h, pw : pw + width]
            else:
                dx = np.zeros((n, cin, h, width))
                ih = _reflect_index(h, ph)
                iw = _reflect_index(width, pw)
                np.add.at(dx, (slice(None), slice(None), ih[:, None], iw[None, :]), dxp)
            return (dx, dw, db)

        return bw

    return _apply("conv2d", (x, w, b), out, make)


# ---------------------------------------------------------------------------
# fused group normalization + swish
# ---------------------------------------------------------------------------


def group_norm_act(
    x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5
) -> Tensor:
    """Per-(sample, group) normalization, affine transform, then x*sigmoid(x)."""
    if x.ndim != 4:
        raise InvalidArgument("group_norm_act expects NCHW input")
    n, c, h, w = x.shape
    if groups < 1 or c % groups != 0:
        raise InvalidArgument(f"channels {c} not divisible by groups {groups}")
    if eps <= 0:
        raise InvalidArgument("eps must be positive")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise InvalidArgument("gamma/beta must have shape (C,)")
    m = (c // groups) * h * w
    xg = x.data.reshape(n, groups, m)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    std = np.sqrt(var + eps)
    xn = ((xg - mu) / std).reshape(n, c, h, w)
    pre = xn * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    sig = _sigmoid(pre)
    out = pre * sig

    def make():
        def bw(g):
            dpre = g * (sig * (1.0 + pre * (1.0 - sig)))
            dgamma = (dpre * xn).sum(axis=(0, 2, 3))
            dbeta = dpre.sum(axis=(0, 2, 3))
            dxn = (dpre * gamma.data[None, :, None, None]).reshape(n, groups, m)
            xng = xn.reshape(n, groups, m)
            dx = (
                dxn
                - dxn.mean(axis=2, keepdims=True)
                - xng * (dxn * xng).mean(axis=2, keepdims=True)
            ) / std
            return (dx.reshape(n, c, h, w), dgamma, dbeta)

        return bw

    return _apply("group_norm_act", (x, gamma, beta), out, make)


# ---------------------------------------------------------------------------
# bilinear grid sampling
# ---------------------------------------------------------------------------


def bilinear_gather(data: Array, cx: Array, cy: Array):
    """Zero-padded bilinear read of NCHW ``data`` at pixel coords (cx, cy).

    Returns the sampled values plus the per-corner values and weights needed
    for gradients. Fully out-of-bounds samples read as 0.
    """
    n, c, h, w = data.shape
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    wx = cx - x0
    wy = cy - y0
    n_ix = np.arange(n).reshape((n,) + (1,) * (cx.ndim - 1))
    corners = []
    out = 0.0
    for yc, xc, wgt in (
        (y0, x0, (1 - wy) * (1 - wx)),
        (y0, x0 + 1, (1 - wy) * wx),
        (y0 + 1, x0, wy * (1 - wx)),
        (y0 + 1, x0 + 1, wy * wx),
    ):
        inside = (xc >= 0) & (xc < w) & (yc >= 0) & (yc < h)
        xcc = np.clip(xc, 0, w - 1)
        ycc = np.clip(yc, 0, h - 1)
        vals = data[n_ix, :, ycc, xcc]  # (N, *grid, C)
        vals = vals * inside[..., None]
        corners.append((ycc, xcc, inside, wgt, vals))
        out = out + vals * wgt[..., None]
    return out, corners, (wx, wy)


def grid_sample_bilinear(x: Tensor, coords: Tensor) -> Tensor:
    """Sample NCHW ``x`` at pixel-unit (x, y) coords of shape (N, H', W', 2)."""
    if x.ndim != 4 or coords.ndim != 4 or coords.shape[-1] != 2:
        raise InvalidArgument("grid_sample expects NCHW input and (N,H',W',2) coords")
    if coords.shape[0] != x.shape[0]:
        raise InvalidArgument("grid_sample: batch size mismatch")
    n, c, h, w = x.shape
    _, ho, wo, _ = coords.shape
    cx = coords.data[..., 0]
    cy = coords.data[..., 1]
    sampled, corners, (wx, wy) = bilinear_gather(x.data, cx, cy)
    out = sampled.transpose(0, 3, 1, 2)

    def make():
        def bw(g):
            gg = g.transpose(0, 2, 3, 1)  # (N,Ho,Wo,C)
            dx = np.zeros_like(x.data)
            n_ix = np.arange(n)[:, None, None]
            c_ix = np.arange(c)[None, None, None, :]
            for ycc, xcc, inside, wgt, _ in corners:
                contrib = gg * (wgt * inside)[..., None]
                np.add.at(
                    dx,
                    (n_ix[..., None], c_ix, ycc[..., None], xcc[..., None]),
                    contrib,
                )
            (_, _, _, _, v00), (_, _, _, _, v01), (_, _, _, _, v10), (_, _, _, _, v11) = corners
            dcx = (gg * ((1 - wy)[..., None] * (v01 - v00) + wy[..., None] * (v11 - v10))).sum(-1)
            dcy = (gg * ((1 - wx)[..., None] * (v10 - v00) + wx[..., None] * (v11 - v01))).sum(-1)
            dcoords = np.stack([dcx, dcy], axis=-1)
            return (dx, dcoords)

        return bw

    return _apply("grid_sample", (x, coords), out, make)


# ---------------------------------------------------------------------------
# single-head 2-D self-attention
# ---------------------------------------------------------------------------


def _softmax_last(s: Array) -> Array:
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def self_attention_2d(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(C)) V with output projection over HW tokens.

    Single head; the residual connection is the caller's responsibility.
    """
    if x.ndim != 4:
        raise InvalidArgument("self_attention_2d expects NCHW input")
    n, c, h, w = x.shape
    for name, m in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
        if m.shape != (c, c):
            raise InvalidArgument(f"{name} must have shape ({c},{c})")
    tok = x.data.reshape(n, c, h * w).transpose(0, 2, 1)  # (N,L,C)
    q = tok @ wq.data.T
    k = tok @ wk.data.T
    v = tok @ wv.data.T
    scl = 1.0 / np.sqrt(c)
    att = _softmax_last((q @ k.transpose(0, 2, 1)) * scl)
    o = att @ v
    y_tok = o @ wo.data.T
    out = y_tok.transpose(0, 2, 1).reshape(n, c, h, w)

    def make():
        def bw(g):
            gy = g.reshape(n, c, h * w).transpose(0, 2, 1)  # (N,L,C)
            dwo = np.einsum("nlc,nld->cd", gy, o)
            do = gy @ wo.data
            datt = do @ v.transpose(0, 2, 1)
            dv = att.transpose(0, 2, 1) @ do
            ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
            ds *= scl
            dq = ds @ k
            dk = ds.transpose(0, 2, 1) @ q
            dwq = np.einsum("nlc,nld->cd", dq, tok)
            dwk = np.einsum("nlc,nld->cd", dk, tok)
            dwv = np.einsum("nlc,nld->cd", dv, tok)
            dtok = dq @ wq.data + dk @ wk.data + dv @ wv.data
            dx = dtok.transpose(0, 2, 1).reshape(n, c, h, w)
            return (dx, dwq, dwk, dwv, dwo)

        return bw

    return _apply("attention2d", (x, wq, wk, wv, wo), out, make)
