"""Conditional denoising network, its training step and checkpoint format.

The network is a small U-Net over the concatenated channels
[F_t, F_init, C^l] (53 channels at the default radius 7): two encoder
scales, a bottleneck with one attention block, two decoder scales with
concatenation skips, and a zero-initialized output head. The model is
x0-parameterized and residual: it predicts F_init + net(...), so a freshly
initialized model is exactly the identity on F_init.

Disabled conditions are replaced by zero channels rather than dropped, so
ablation configurations share one code path and one channel layout. The
regression baseline reuses the same backbone without the F_t channels and
without the time-embedding path.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .diffusion import NoiseSchedule, normalize_flow
from .errors import FormatError, InvalidArgument, TrainingDiverged
from .optim import OptimizerState, optimizer_step
from .tensor import Tape, Tensor, backward, recording, zero_grads

CHECKPOINT_MAGIC = b"DMK1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    """Architecture descriptor; fully determines every tensor shape."""

    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2)
    radius: int = 7
    time_dim: int = 64
    groups: int = 8
    use_init: bool = True
    use_local_cost: bool = True
    mode: str = "diffusion"  # "diffusion" | "regression"

    def __post_init__(self):
        if self.base_channels < 8:
            raise InvalidArgument("base_channels must be >= 8")
        if self.mode not in ("diffusion", "regression"):
            raise InvalidArgument(f"unknown mode {self.mode!r}")
        if self.radius % 2 == 0:
            raise InvalidArgument("radius must be odd")
        if len(self.channel_mults) != 2:
            raise InvalidArgument("exactly two encoder scales are supported")
        if self.mode == "diffusion" and not (self.use_init or self.use_local_cost):
            raise InvalidArgument("diffusion mode needs at least one condition enabled")

    @property
    def cond_channels(self) -> int:
        return 2 + self.radius * self.radius

    @property
    def in_channels(self) -> int:
        flow_channels = 2 if self.mode == "diffusion" else 0
        return flow_channels + self.cond_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        d["channel_mults"] = tuple(d["channel_mults"])
        return cls(**d)


@dataclass
class ConditionPack:
    """Normalized initial flow plus local cost, with ablation flags.

    ``f_init`` is stored in diffusion (normalized) units at the diffusion
    resolution; ``local_cost`` is the (R*R, h, w) window cost. Disabled
    conditions are zero-filled at channel-assembly time.
    """

    f_init: np.ndarray
    local_cost: np.ndarray | None
    radius: int
    use_init: bool = True
    use_local_cost: bool = True

    def __post_init__(self):
        if self.f_init.ndim != 3 or self.f_init.shape[0] != 2:
            raise InvalidArgument("f_init must be (2, h, w)")
        if self.use_local_cost and self.local_cost is None:
            raise InvalidArgument("local cost enabled but not provided")
        if self.local_cost is not None:
            r2 = self.radius * self.radius
            if self.local_cost.shape != (r2,) + self.f_init.shape[1:]:
                raise InvalidArgument(
                    f"local cost shape {self.local_cost.shape} does not match "
                    f"radius {self.radius} at resolution {self.f_init.shape[1:]}"
                )

    @property
    def resolution(self) -> tuple[int, int]:
        return self.f_init.shape[1], self.f_init.shape[2]

    def channel_stack(self) -> np.ndarray:
        """(2 + R*R, h, w) condition channels with zeros for disabled parts."""
        h, w = self.resolution
        r2 = self.radius * self.radius
        init_part = self.f_init if self.use_init else np.zeros((2, h, w))
        cost_part = (
            self.local_cost if self.use_local_cost else np.zeros((r2, h, w))
        )
        return np.concatenate([init_part, cost_part], axis=0)

    def residual_base(self) -> np.ndarray:
        return self.f_init if self.use_init else np.zeros_like(self.f_init)


class DenoiserParams:
    """Ordered named parameters; declaration order defines checkpoint layout."""

    def __init__(self, arch: ArchSpec, tensors: dict[str, Tensor]):
        self.arch = arch
        self.tensors = tensors

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(
            self.arch,
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()},
        )


def _layer_specs(arch: ArchSpec) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) in declaration order."""
    c0 = arch.base_channels * arch.channel_mults[0]
    c1 = arch.base_channels * arch.channel_mults[1]
    e = arch.time_dim
    specs: list[tuple[str, tuple[int, ...], str]] = []

    def conv(name, cin, cout, k):
        specs.append((f"{name}.w", (cout, cin, k, k), "he"))
        specs.append((f"{name}.b", (cout,), "zero"))

    def gn(name, c):
        specs.append((f"{name}.gamma", (c,), "one"))
        specs.append((f"{name}.beta", (c,), "zero"))

    def res(name, cin, cout):
        gn(f"{name}.gn1", cin)
        conv(f"{name}.conv1", cin, cout, 3)
        if arch.mode == "diffusion":
            specs.append((f"{name}.tproj.w", (cout, e), "time"))
            specs.append((f"{name}.tproj.b", (cout,), "zero"))
        gn(f"{name}.gn2", cout)
        conv(f"{name}.conv2", cout, cout, 3)
        if cin != cout:
            conv(f"{name}.skip", cin, cout, 1)

    if arch.mode == "diffusion":
        specs.append(("time_mlp.w1", (e, e), "he"))
        specs.append(("time_mlp.b1", (e,), "zero"))
        specs.append(("time_mlp.w2", (e, e), "he"))
        specs.append(("time_mlp.b2", (e,), "zero"))
    conv("conv_in", arch.in_channels, c0, 3)
    res("enc0", c0, c0)
    conv("down0", c0, c1, 3)
    res("enc1", c1, c1)
    conv("down1", c1, c1, 3)
    res("mid", c1, c1)
    gn("attn.gn", c1)
    for nm in ("wq", "wk", "wv", "wo"):
        specs.append((f"attn.{nm}", (c1, c1), "attn"))
    conv("up1", c1, c1, 3)
    res("dec1", 2 * c1, c1)
    conv("up0", c1, c0, 3)
    res("dec0", 2 * c0, c0)
    gn("out.gn", c0)
    conv("conv_out", c0, 2, 3)
    return specs


def init_denoiser(arch: ArchSpec, seed: int = 0) -> DenoiserParams:
    """Deterministic initialization; the output head starts at exactly zero."""
    rng = np.random.default_rng(np.uint64(seed))
    tensors: dict[str, Tensor] = {}
    for name, shape, kind in _layer_specs(arch):
        if kind == "zero" or name.startswith("conv_out"):
            data = np.zeros(shape)
        elif kind == "one":
            data = np.ones(shape)
        elif kind == "he":
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            data = rng.normal(size=shape) * np.sqrt(2.0 / fan_in)
        elif kind == "attn":
            data = rng.normal(size=shape) / np.sqrt(shape[1])
        elif kind == "time":
            data = rng.normal(size=shape) * np.sqrt(1.0 / shape[1])
        else:  # pragma: no cover
            raise InvalidArgument(f"unknown init kind {kind}")
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return DenoiserParams(arch, tensors)


def sinusoidal_embedding(ts: np.ndarray, dim: int) -> np.ndarray:
    """Standard sinusoidal features with frequencies 10000^(-2k/dim)."""
    half = dim // 2
    freqs = 10000.0 ** (-2.0 * np.arange(half) / dim)
    ang = np.asarray(ts, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _resblock(p: DenoiserParams, name: str, x: Tensor, emb: Tensor | None) -> Tensor:
    arch = p.arch
    h = ops.group_norm_act(x, arch.groups, p[f"{name}.gn1.gamma"], p[f"{name}.gn1.beta"])
    h = ops.conv2d(h, p[f"{name}.conv1.w"], p[f"{name}.conv1.b"])
    if emb is not None:
        bias = ops.linear(emb, p[f"{name}.tproj.w"], p[f"{name}.tproj.b"])
        h = ops.add_channel_bias(h, bias)
    h = ops.group_norm_act(h, arch.groups, p[f"{name}.gn2.gamma"], p[f"{name}.gn2.beta"])
    h = ops.conv2d(h, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"])
    if f"{name}.skip.w" in p.tensors:
        x = ops.conv2d(x, p[f"{name}.skip.w"], p[f"{name}.skip.b"])
    return ops.add(h, x)


def _forward(p: DenoiserParams, x_in: np.ndarray, ts: np.ndarray | None) -> Tensor:
    """U-Net trunk on (B, Cin, H, W); returns the (B, 2, H, W) residual."""
    arch = p.arch
    if x_in.shape[1] != arch.in_channels:
        raise InvalidArgument(
            f"input has {x_in.shape[1]} channels, architecture expects {arch.in_channels}"
        )
    emb = None
    if arch.mode == "diffusion":
        sin = Tensor(sinusoidal_embedding(ts, arch.time_dim))
        emb = ops.silu(ops.linear(sin, p["time_mlp.w1"], p["time_mlp.b1"]))
        emb = ops.linear(emb, p["time_mlp.w2"], p["time_mlp.b2"])
    x = Tensor(x_in)
    h0 = ops.conv2d(x, p["conv_in.w"], p["conv_in.b"])
    h0 = _resblock(p, "enc0", h0, emb)
    h1 = ops.conv2d(h0, p["down0.w"], p["down0.b"], stride=2)
    h1 = _resblock(p, "enc1", h1, emb)
    m = ops.conv2d(h1, p["down1.w"], p["down1.b"], stride=2)
    m = _resblock(p, "mid", m, emb)
    a = ops.group_norm_act(m, p.arch.groups, p["attn.gn.gamma"], p["attn.gn.beta"])
    a = ops.self_attention_2d(a, p["attn.wq"], p["attn.wk"], p["attn.wv"], p["attn.wo"])
    m = ops.add(m, a)
    u1 = ops.conv2d(ops.upsample_nearest2x(m), p["up1.w"], p["up1.b"])
    d1 = _resblock(p, "dec1", ops.concat([u1, h1]), emb)
    u0 = ops.conv2d(ops.upsample_nearest2x(d1), p["up0.w"], p["up0.b"])
    d0 = _resblock(p, "dec0", ops.concat([u0, h0]), emb)
    out = ops.group_norm_act(d0, arch.groups, p["out.gn.gamma"], p["out.gn.beta"])
    return ops.conv2d(out, p["conv_out.w"], p["conv_out.b"])


def denoise_batch(
    p: DenoiserParams,
    f_t: np.ndarray,
    ts: np.ndarray,
    conds: list[ConditionPack],
) -> Tensor:
    """Batched F0_hat (normalized), residual on each pack's base flow."""
    if p.arch.mode != "diffusion":
        raise InvalidArgument("denoise_batch requires a diffusion-mode model")
    if not np.all(np.isfinite(f_t)):
        raise InvalidArgument("non-finite F_t input")
    cond_stack = np.stack([c.channel_stack() for c in conds])
    x_in = np.concatenate([f_t, cond_stack], axis=1)
    residual = _forward(p, x_in, ts)
    base = Tensor(np.stack([c.residual_base() for c in conds]))
    return ops.add(base, residual)


def denoise(p: DenoiserParams, f_t: np.ndarray, t: int, cond: ConditionPack) -> np.ndarray:
    """Single-field denoise: normalized F_t at step t -> normalized F0_hat."""
    if not 1 <= t:
        raise InvalidArgument("t must be >= 1")
    out = denoise_batch(p, f_t[None], np.array([t]), [cond])
    return out.data[0]


def make_denoiser_fn(p: DenoiserParams):
    """Adapter matching the diffusion engine's denoiser(f_t, t, conds) contract."""

    def fn(f_t, t, conds):
        return denoise(p, f_t, int(t), conds)

    return fn


def regression_forward(p: DenoiserParams, cond: ConditionPack) -> np.ndarray:
    """Deterministic single-pass flow estimate (normalized units)."""
    if p.arch.mode != "regression":
        raise InvalidArgument("regression_forward requires a regression-mode model")
    x_in = cond.channel_stack()[None]
    residual = _forward(p, x_in, None)
    return cond.residual_base() + residual.data[0]


def train_step(
    p: DenoiserParams,
    opt_state: OptimizerState,
    batch: list[tuple[np.ndarray, ConditionPack]],
    sched: NoiseSchedule | None,
    rng: np.random.Generator,
) -> float:
    """One optimization step on mean squared flow error; returns the loss.

    Batch items are (ground-truth flow in pixel units, conditions). For
    diffusion-mode models a timestep and noise are drawn per item and the
    noisy flow is formed in closed form; regression models skip both.
    """
    if not batch:
        raise InvalidArgument("batch must be non-empty")
    f0_pix = np.stack([item[0] for item in batch])
    conds = [item[1] for item in batch]
    f0n = normalize_flow(f0_pix)
    params = p.parameters()
    tape = Tape()
    with recording(tape):
        if p.arch.mode == "diffusion":
            if sched is None:
                raise InvalidArgument("diffusion training needs a noise schedule")
            ts = rng.integers(1, sched.T + 1, size=len(batch))
            z = rng.standard_normal(f0n.shape)
            ab = sched.alpha_bar[ts][:, None, None, None]
            f_t = np.sqrt(ab) * f0n + np.sqrt(1.0 - ab) * z
            f0_hat = denoise_batch(p, f_t, ts, conds)
        else:
            cond_stack = np.stack([c.channel_stack() for c in conds])
            residual = _forward(p, cond_stack, None)
            base = Tensor(np.stack([c.residual_base() for c in conds]))
            f0_hat = ops.add(base, residual)
        diff = ops.sub(f0_hat, Tensor(f0n))
        loss = ops.mean_all(ops.mul(diff, diff))
    loss_val = float(loss.data)
    if not np.isfinite(loss_val):
        raise TrainingDiverged(f"non-finite training loss {loss_val}")
    zero_grads(params)
    backward(tape, loss)
    grads = [np.zeros_like(q.data) if q.grad is None else q.grad for q in params]
    optimizer_step(opt_state, params, grads)
    zero_grads(params)
    return loss_val


# ---------------------------------------------------------------------------
# checkpoint format: magic "DMK1" | version u32 | header len u32 | header JSON
# | little-endian float64 parameters in declaration order
# ---------------------------------------------------------------------------


def save_checkpoint(
    p: DenoiserParams,
    path,
    *,
    extractor_seed: int,
    extractor_channels: int,
    schedule_T: int,
    stage: str = "coarse",
) -> None:
    header = {
        "arch": p.arch.to_dict(),
        "extractor_seed": int(extractor_seed),
        "extractor_channels": int(extractor_channels),
        "schedule_T": int(schedule_T),
        "stage": stage,
        "flags": {"use_init": p.arch.use_init, "use_local_cost": p.arch.use_local_cost},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for t in p.parameters():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[DenoiserParams, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    hlen = struct.unpack_from("<I", raw, 8)[0]
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
        arch = ArchSpec.from_dict(header["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from exc
    p = init_denoiser(arch, seed=0)
    offset = 12 + hlen
    for t in p.parameters():
        nbytes = t.size * 8
        if offset + nbytes > len(raw):
            raise FormatError("truncated checkpoint payload")
        t.data = np.frombuffer(raw, dtype="<f8", count=t.size, offset=offset).reshape(
            t.shape
        ).copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError("trailing bytes in checkpoint")
    return p, header
