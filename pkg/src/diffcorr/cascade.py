"""Flow resampling and the x4 super-resolution diffusion stage.

The upsampler is the coarse denoiser finetuned at the fine resolution. Its
training-time initial flow is the degraded ground truth (block-downsampled
then bilinearly re-upsampled), optionally perturbed by a smooth noise field
that imitates coarse-stage estimation error so the model learns to correct
its conditioning rather than copy it. The local cost comes from the fine
pyramid level, computed at descriptor resolution around the initial flow
and bilinearly upsampled to the flow grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cost import FlowField, local_cost
from .denoiser import ConditionPack, DenoiserParams, make_denoiser_fn
from .diffusion import NoiseSchedule, SamplerConfig, multi_hypothesis, normalize_flow
from .errors import InvalidArgument
from .features import ExtractorWeights, extract
from .pipeline import MatchingConfig, check_conditions_match, infer_coarse


def downsample_flow(flow: FlowField, factor: int) -> FlowField:
    """Block-average displacements and rescale them to the coarse grid."""
    if factor < 1:
        raise InvalidArgument("factor must be >= 1")
    h, w = flow.resolution
    if h % factor or w % factor:
        raise InvalidArgument(f"resolution {h}x{w} not divisible by factor {factor}")
    v = flow.values.reshape(2, h // factor, factor, w // factor, factor)
    return FlowField(v.mean(axis=(2, 4)) / factor)


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channelwise bilinear resize with half-pixel alignment and edge clamp."""
    c, h, w = arr.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = arr[:, y0][:, :, x0] * (1 - wx) + arr[:, y0][:, :, x1] * wx
    bot = arr[:, y1][:, :, x0] * (1 - wx) + arr[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def upsample_flow_bilinear(flow: FlowField, factor: int) -> FlowField:
    """Bilinear spatial interpolation with displacements scaled by factor."""
    if factor < 1:
        raise InvalidArgument("factor must be >= 1")
    h, w = flow.resolution
    return FlowField(resize_bilinear(flow.values, h * factor, w * factor) * factor)


@dataclass
class CascadeConfig:
    factor: int = 4
    finetune_lr: float = 3e-5
    finetune_iters: int = 600
    batch: int = 1
    cond_noise_px: float = 1.0  # smooth F_init perturbation at train time, fine px

    def __post_init__(self):
        if self.factor != 4:
            raise InvalidArgument("the cascade is fixed at factor 4")


def fine_conditions(
    extractor: ExtractorWeights,
    src: np.ndarray,
    tgt: np.ndarray,
    f_init_fine: FlowField,
    mcfg: MatchingConfig,
) -> ConditionPack:
    """Conditions at the fine flow resolution from the fine pyramid level.

    The local cost is computed at the descriptor grid (half the flow
    resolution) around f_init and bilinearly upsampled; similarity values
    are resolution-free so no rescaling applies.
    """
    h, w = f_init_fine.resolution
    if src.shape[1:] != (h, w):
        raise InvalidArgument("f_init must live at the image resolution")
    cl_fine = None
    if mcfg.use_local_cost:
        d_src = extract(extractor, src).level_fine
        d_tgt = extract(extractor, tgt).level_fine
        f_half = downsample_flow(f_init_fine, 2)
        cl_half = local_cost(d_src, d_tgt, f_half, mcfg.radius).values
        cl_fine = resize_bilinear(cl_half, h, w)
    return ConditionPack(
        f_init=normalize_flow(f_init_fine.values),
        local_cost=cl_fine,
        radius=mcfg.radius,
        use_init=mcfg.use_init,
        use_local_cost=mcfg.use_local_cost,
    )


def degraded_ground_truth(flow: FlowField, factor: int) -> FlowField:
    """Down-then-up ground truth: the upsampler's training-time F_init."""
    return upsample_flow_bilinear(downsample_flow(flow, factor), factor)


def smooth_noise_field(
    rng: np.random.Generator, h: int, w: int, factor: int, std_px: float
) -> np.ndarray:
    """Coarse-grid Gaussian error upsampled to (2, h, w); mimics stage-1 error."""
    if std_px <= 0:
        return np.zeros((2, h, w))
    coarse = rng.normal(0.0, std_px, size=(2, h // factor, w // factor))
    return resize_bilinear(coarse, h, w)


def prepare_upsampler(pretrained: DenoiserParams) -> DenoiserParams:
    """Copy the coarse weights; re-zero the residual head for the new stage."""
    if pretrained.arch.mode != "diffusion":
        raise InvalidArgument("upsampler must start from a diffusion-mode checkpoint")
    p = pretrained.copy()
    p["conv_out.w"].data = np.zeros_like(p["conv_out.w"].data)
    p["conv_out.b"].data = np.zeros_like(p["conv_out.b"].data)
    return p


def upsampler_batch(
    extractor: ExtractorWeights,
    pairs,
    ccfg: CascadeConfig,
    mcfg: MatchingConfig,
    rng: np.random.Generator,
) -> list[tuple[np.ndarray, ConditionPack]]:
    """Finetuning items: (fine GT flow, conditions at degraded-GT F_init)."""
    batch = []
    for pair in pairs:
        h, w = pair.resolution
        f_init = degraded_ground_truth(pair.flow, ccfg.factor)
        noise = smooth_noise_field(rng, h, w, ccfg.factor, ccfg.cond_noise_px)
        f_init = FlowField(f_init.values + noise)
        pack = fine_conditions(extractor, pair.src, pair.tgt, f_init, mcfg)
        batch.append((pair.flow.values, pack))
    return batch


def infer_fine(
    up_params: DenoiserParams,
    extractor: ExtractorWeights,
    src: np.ndarray,
    tgt: np.ndarray,
    f_init_fine: FlowField,
    sched: NoiseSchedule,
    scfg: SamplerConfig,
    temperature: float = 0.02,
):
    """Stage-2 multi-hypothesis sampling around a given fine-resolution init."""
    mcfg = MatchingConfig(
        radius=up_params.arch.radius,
        temperature=temperature,
        use_init=up_params.arch.use_init,
        use_local_cost=up_params.arch.use_local_cost,
    )
    pack = fine_conditions(extractor, src, tgt, f_init_fine, mcfg)
    check_conditions_match(up_params, pack)
    return multi_hypothesis(make_denoiser_fn(up_params), pack, sched, scfg)


def cascade_infer_hypotheses(
    coarse_params: DenoiserParams,
    up_params: DenoiserParams,
    extractor: ExtractorWeights,
    src: np.ndarray,
    tgt: np.ndarray,
    sched: NoiseSchedule,
    scfg: SamplerConfig,
    temperature: float = 0.02,
):
    """(fine HypothesisResult, coarse HypothesisResult) for the full cascade."""
    coarse = infer_coarse(coarse_params, extractor, src, tgt, sched, scfg, temperature)
    bridged = upsample_flow_bilinear(coarse.mean_flow, 4)
    fine = infer_fine(
        up_params, extractor, src, tgt, bridged, sched, scfg, temperature
    )
    return fine, coarse


def cascade_infer(
    coarse_params: DenoiserParams,
    up_params: DenoiserParams,
    extractor: ExtractorWeights,
    src: np.ndarray,
    tgt: np.ndarray,
    sched: NoiseSchedule,
    scfg: SamplerConfig,
    temperature: float = 0.02,
) -> FlowField:
    """Stage 1 at coarse resolution, bilinear bridge, stage 2 at fine."""
    fine, _ = cascade_infer_hypotheses(
        coarse_params, up_params, extractor, src, tgt, sched, scfg, temperature
    )
    return fine.mean_flow
