"""Noise schedule, forward noising and DDIM reverse sampling over flow fields.

Diffusion operates on normalized flows: pixel displacements divided by half
the field's own width/height per axis, so +-half-image motion maps to +-1.
Sampling is x0-parameterized: the denoiser callable returns the clean-flow
estimate, never the noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cost import FlowField
from .errors import InvalidArgument, SamplingFailure

COSINE_S = 0.008
BETA_MAX = 0.999  # keeps alpha_bar strictly positive at t = T


@dataclass(frozen=True)
class NoiseSchedule:
    """beta[t] and cumulative alpha_bar[t] for t = 0..T (alpha_bar[0] = 1)."""

    T: int
    beta: np.ndarray  # (T+1,), beta[0] unused
    alpha_bar: np.ndarray  # (T+1,)

    def sigma(self, t: int, t_prev: int, eta: float) -> float:
        """DDIM noise scale for the transition t -> t_prev."""
        ab_t = self.alpha_bar[t]
        ab_p = self.alpha_bar[t_prev]
        return float(
            eta * np.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_p)
        )


@dataclass
class SamplerConfig:
    steps: int
    eta: float = 0.0
    hypotheses: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidArgument("steps must be >= 1")
        if self.hypotheses < 1:
            raise InvalidArgument("hypotheses must be >= 1")
        if self.eta < 0:
            raise InvalidArgument("eta must be non-negative")


@dataclass
class HypothesisResult:
    mean_flow: FlowField
    variance_map: np.ndarray  # (2, h, w) per-component population variance
    flows: list[FlowField] = field(default_factory=list)


def make_schedule(T: int) -> NoiseSchedule:
    """Cosine cumulative schedule; betas derived and clipped to BETA_MAX."""
    if T < 1:
        raise InvalidArgument("T must be >= 1")
    s = COSINE_S

    def f(u):
        return np.cos(((u + s) / (1.0 + s)) * np.pi / 2.0) ** 2

    ratio = f(np.arange(T + 1) / T) / f(0.0)
    beta = np.zeros(T + 1)
    alpha_bar = np.ones(T + 1)
    for t in range(1, T + 1):
        beta[t] = min(1.0 - ratio[t] / ratio[t - 1], BETA_MAX)
        alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t])
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar)


def normalize_flow(values: np.ndarray) -> np.ndarray:
    """Pixel units -> diffusion units: u / (w/2), v / (h/2)."""
    h, w = values.shape[-2:]
    out = values.copy()
    out[..., 0, :, :] /= w / 2.0
    out[..., 1, :, :] /= h / 2.0
    return out


def denormalize_flow(values: np.ndarray) -> np.ndarray:
    """Diffusion units -> pixel units."""
    h, w = values.shape[-2:]
    out = values.copy()
    out[..., 0, :, :] *= w / 2.0
    out[..., 1, :, :] *= h / 2.0
    return out


def q_sample(f0: np.ndarray, t: int, z: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form forward noising F_t = sqrt(ab_t) F0 + sqrt(1 - ab_t) Z."""
    if not 1 <= t <= sched.T:
        raise InvalidArgument(f"t={t} outside 1..{sched.T}")
    if z.shape != f0.shape:
        raise InvalidArgument(f"noise shape {z.shape} != flow shape {f0.shape}")
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * f0 + np.sqrt(1.0 - ab) * z


def ddim_step(
    f_t: np.ndarray,
    t: int,
    f0_hat: np.ndarray,
    sched: NoiseSchedule,
    eta: float = 0.0,
    z: np.ndarray | None = None,
    t_prev: int | None = None,
) -> np.ndarray:
    """One reverse transition t -> t_prev (default t-1); t_prev = 0 returns f0_hat."""
    if not 1 <= t <= sched.T:
        raise InvalidArgument(f"t={t} outside 1..{sched.T}")
    if t_prev is None:
        t_prev = t - 1
    if not 0 <= t_prev < t:
        raise InvalidArgument(f"t_prev={t_prev} must lie in [0, {t})")
    if t_prev == 0:
        return f0_hat.copy()
    ab_t = sched.alpha_bar[t]
    ab_p = sched.alpha_bar[t_prev]
    sigma = sched.sigma(t, t_prev, eta)
    if sigma**2 > 1.0 - ab_p + 1e-12:
        raise InvalidArgument("sigma^2 exceeds 1 - alpha_bar[t_prev]")
    direction = np.sqrt(max(1.0 - ab_p - sigma**2, 0.0))
    eps = (f_t - np.sqrt(ab_t) * f0_hat) / np.sqrt(1.0 - ab_t)
    out = np.sqrt(ab_p) * f0_hat + direction * eps
    if sigma > 0.0:
        if z is None:
            raise InvalidArgument("stochastic step (eta > 0) requires noise input")
        out = out + sigma * z
    return out


def step_sequence(T: int, steps: int) -> list[int]:
    """Descending sub-sequence of timesteps starting at T and ending at 1."""
    if steps < 1:
        raise InvalidArgument("steps must be >= 1")
    if steps > T:
        raise InvalidArgument(f"steps={steps} exceeds schedule length T={T}")
    taus = np.unique(np.round(np.linspace(T, 1, steps)).astype(int))[::-1]
    return [int(t) for t in taus]


def sample(denoiser, conds, sched: NoiseSchedule, cfg: SamplerConfig, seed=None) -> FlowField:
    """Run the reverse chain from pure noise; returns the flow in pixel units.

    ``denoiser(f_t, t, conds)`` must return the normalized clean-flow
    estimate. ``conds`` must expose ``resolution`` as (h, w).
    """
    h, w = conds.resolution
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    f = rng.standard_normal((2, h, w))
    taus = step_sequence(sched.T, cfg.steps)
    for i, t in enumerate(taus):
        t_prev = taus[i + 1] if i + 1 < len(taus) else 0
        f0_hat = denoiser(f, t, conds)
        if not np.all(np.isfinite(f0_hat)):
            raise SamplingFailure(f"denoiser produced non-finite values at t={t}")
        z = None
        if cfg.eta > 0.0 and t_prev > 0:
            z = rng.standard_normal((2, h, w))
        f = ddim_step(f, t, f0_hat, sched, eta=cfg.eta, z=z, t_prev=t_prev)
    return FlowField(denormalize_flow(f))


def multi_hypothesis(denoiser, conds, sched: NoiseSchedule, cfg: SamplerConfig) -> HypothesisResult:
    """N independent reverse chains; per-pixel mean flow and population variance."""
    flows = [
        sample(denoiser, conds, sched, cfg, seed=cfg.seed + i)
        for i in range(cfg.hypotheses)
    ]
    stack = np.stack([f.values for f in flows])
    mean = stack.mean(axis=0)
    var = stack.var(axis=0) if len(flows) > 1 else np.zeros_like(mean)
    return HypothesisResult(mean_flow=FlowField(mean), variance_map=var, flows=flows)
