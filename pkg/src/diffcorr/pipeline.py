"""Conditioning pipeline for the coarse stage, plus training-free baselines.

Everything here operates at the coarse descriptor resolution (H/4 for H x W
input images). Bridging to full resolution is the cascade's job.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cost import FlowField, argmax_flow, global_cost, local_cost, soft_argmax_flow
from .denoiser import ConditionPack, DenoiserParams, make_denoiser_fn, regression_forward
from .diffusion import (
    HypothesisResult,
    NoiseSchedule,
    SamplerConfig,
    denormalize_flow,
    multi_hypothesis,
    normalize_flow,
)
from .errors import InvalidArgument
from .features import ExtractorWeights, extract


@dataclass(frozen=True)
class MatchingConfig:
    radius: int = 7
    temperature: float = 0.02
    use_init: bool = True
    use_local_cost: bool = True


def coarse_descriptors(extractor: ExtractorWeights, src: np.ndarray, tgt: np.ndarray):
    return extract(extractor, src).level_coarse, extract(extractor, tgt).level_coarse


def build_conditions(
    d_src: np.ndarray,
    d_tgt: np.ndarray,
    mcfg: MatchingConfig,
    f_init: FlowField | None = None,
) -> tuple[ConditionPack, FlowField]:
    """Soft-argmax initialization plus local cost around it.

    ``f_init`` may be supplied (cascade training/inference); otherwise it is
    computed from the global cost volume. The local cost is computed around
    f_init even when the init-flow condition channel is disabled, since the
    window center is part of the local-cost definition, not of the flag.
    """
    if f_init is None:
        f_init = soft_argmax_flow(global_cost(d_src, d_tgt), mcfg.temperature)
    cl = None
    if mcfg.use_local_cost:
        cl = local_cost(d_src, d_tgt, f_init, mcfg.radius).values
    pack = ConditionPack(
        f_init=normalize_flow(f_init.values),
        local_cost=cl,
        radius=mcfg.radius,
        use_init=mcfg.use_init,
        use_local_cost=mcfg.use_local_cost,
    )
    return pack, f_init


def coarse_conditions(
    extractor: ExtractorWeights,
    src: np.ndarray,
    tgt: np.ndarray,
    mcfg: MatchingConfig,
) -> tuple[ConditionPack, FlowField]:
    d_src, d_tgt = coarse_descriptors(extractor, src, tgt)
    return build_conditions(d_src, d_tgt, mcfg)


def matching_config_for(params: DenoiserParams, temperature: float = 0.02) -> MatchingConfig:
    """Matching configuration implied by a checkpoint's declared flags."""
    arch = params.arch
    return MatchingConfig(
        radius=arch.radius,
        temperature=temperature,
        use_init=arch.use_init,
        use_local_cost=arch.use_local_cost,
    )


def check_conditions_match(params: DenoiserParams, pack: ConditionPack) -> None:
    arch = params.arch
    if (
        pack.radius != arch.radius
        or pack.use_init != arch.use_init
        or pack.use_local_cost != arch.use_local_cost
    ):
        raise InvalidArgument(
            "condition pack does not match checkpoint flags: "
            f"pack(radius={pack.radius}, init={pack.use_init}, cost={pack.use_local_cost}) "
            f"vs arch(radius={arch.radius}, init={arch.use_init}, cost={arch.use_local_cost})"
        )


def infer_coarse(
    params: DenoiserParams,
    extractor: ExtractorWeights,
    src: np.ndarray,
    tgt: np.ndarray,
    sched: NoiseSchedule,
    scfg: SamplerConfig,
    temperature: float = 0.02,
) -> HypothesisResult:
    """Multi-hypothesis diffusion inference at the coarse resolution."""
    mcfg = matching_config_for(params, temperature)
    pack, _ = coarse_conditions(extractor, src, tgt, mcfg)
    check_conditions_match(params, pack)
    return multi_hypothesis(make_denoiser_fn(params), pack, sched, scfg)


def softargmax_baseline(
    extractor: ExtractorWeights, src: np.ndarray, tgt: np.ndarray, temperature: float = 0.02
) -> FlowField:
    d_src, d_tgt = coarse_descriptors(extractor, src, tgt)
    return soft_argmax_flow(global_cost(d_src, d_tgt), temperature)


def argmax_baseline(extractor: ExtractorWeights, src: np.ndarray, tgt: np.ndarray) -> FlowField:
    d_src, d_tgt = coarse_descriptors(extractor, src, tgt)
    return argmax_flow(global_cost(d_src, d_tgt))


def regression_infer(
    params: DenoiserParams,
    extractor: ExtractorWeights,
    src: np.ndarray,
    tgt: np.ndarray,
    temperature: float = 0.02,
) -> FlowField:
    """Single-pass regression baseline at the coarse resolution (pixel units)."""
    mcfg = matching_config_for(params, temperature)
    pack, _ = coarse_conditions(extractor, src, tgt, mcfg)
    check_conditions_match(params, pack)
    return FlowField(denormalize_flow(regression_forward(params, pack)))
