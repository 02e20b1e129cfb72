"""Scikit-learn style estimators over the matching pipeline.

All matchers share the same surface: ``fit(X)`` takes SamplePair-like
objects (images, ground-truth flow, valid mask), ``predict(X)`` takes pairs
or (src, tgt) tuples and returns full-resolution FlowFields, and ``score``
is the negative mean endpoint error, so standard model-selection tooling
(clone, get_params/set_params, grid search) composes with them.

Training-free baselines fit only the frozen extractor; the diffusion and
regression matchers train the conditional network at the coarse resolution;
the cascade matcher adds the finetuned x4 upsampling stage.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .cascade import (
    CascadeConfig,
    cascade_infer,
    prepare_upsampler,
    upsample_flow_bilinear,
)
from .cost import FlowField
from .denoiser import ArchSpec, init_denoiser, regression_forward
from .diffusion import SamplerConfig, denormalize_flow, make_schedule
from .errors import InvalidArgument
from .features import init_extractor
from .metrics import aepe
from .pipeline import (
    MatchingConfig,
    argmax_baseline,
    coarse_conditions,
    infer_coarse,
    softargmax_baseline,
)
from .training import (
    TrainConfig,
    coarse_batcher,
    prepare_coarse_set,
    run_training,
    upsampler_batcher,
)
from .validation import as_image_pairs, as_training_pairs, check_is_fitted


class _MatcherBase(BaseEstimator):
    """Common plumbing: frozen extractor, fine-resolution outputs, scoring."""

    def _fit_extractor(self):
        self.extractor_ = init_extractor(self.extractor_seed, self.extractor_channels)

    def _predict_pair(self, src, tgt) -> FlowField:
        raise NotImplementedError

    def predict(self, X) -> list[FlowField]:
        check_is_fitted(self, self._fitted_attrs)
        return [self._predict_pair(src, tgt) for src, tgt in as_image_pairs(X)]

    def score(self, X, y=None) -> float:
        """Negative mean AEPE over valid pixels (higher is better)."""
        pairs = as_training_pairs(X)
        flows = self.predict(pairs)
        errs = [aepe(f, p.flow, p.valid) for f, p in zip(flows, pairs)]
        return -float(np.mean(errs))


class SoftArgmaxMatcher(_MatcherBase):
    """Training-free baseline: soft-argmax over the global cost volume."""

    _fitted_attrs = ("extractor_",)

    def __init__(self, extractor_seed=0, extractor_channels=32, temperature=0.02):
        self.extractor_seed = extractor_seed
        self.extractor_channels = extractor_channels
        self.temperature = temperature

    def fit(self, X=None, y=None):
        self._fit_extractor()
        return self

    def _predict_pair(self, src, tgt) -> FlowField:
        coarse = softargmax_baseline(self.extractor_, src, tgt, self.temperature)
        return upsample_flow_bilinear(coarse, 4)


class ArgmaxMatcher(_MatcherBase):
    """Training-free baseline: raw argmax over the global cost volume."""

    _fitted_attrs = ("extractor_",)

    def __init__(self, extractor_seed=0, extractor_channels=32):
        self.extractor_seed = extractor_seed
        self.extractor_channels = extractor_channels

    def fit(self, X=None, y=None):
        self._fit_extractor()
        return self

    def _predict_pair(self, src, tgt) -> FlowField:
        return upsample_flow_bilinear(argmax_baseline(self.extractor_, src, tgt), 4)


class _TrainedMatcherBase(_MatcherBase):
    _fitted_attrs = ("extractor_", "params_")

    def _matching(self) -> MatchingConfig:
        return MatchingConfig(
            radius=self.radius,
            temperature=self.temperature,
            use_init=self.use_init,
            use_local_cost=self.use_local_cost,
        )

    def _arch(self, mode: str) -> ArchSpec:
        return ArchSpec(
            base_channels=self.base_channels,
            radius=self.radius,
            time_dim=self.time_dim,
            use_init=self.use_init,
            use_local_cost=self.use_local_cost,
            mode=mode,
        )

    def _fit_network(self, X, mode: str, sched):
        pairs = as_training_pairs(X)
        self._fit_extractor()
        train_set = prepare_coarse_set(self.extractor_, pairs, self._matching())
        params = init_denoiser(self._arch(mode), seed=self.seed)
        tcfg = TrainConfig(
            lr=self.lr,
            iters=self.iters,
            batch=self.batch,
            seed=self.seed,
            weight_decay=self.weight_decay,
        )
        result = run_training(params, coarse_batcher(train_set, tcfg.batch), tcfg, sched)
        self.params_ = params
        self.loss_history_ = result.losses
        return self


class DiffusionMatcher(_TrainedMatcherBase):
    """Conditional diffusion dense matcher (coarse stage, x0-parameterized)."""

    def __init__(
        self,
        base_channels=32,
        radius=7,
        time_dim=64,
        use_init=True,
        use_local_cost=True,
        timesteps=5,
        lr=1e-4,
        iters=2000,
        batch=2,
        weight_decay=0.0,
        seed=0,
        steps=None,
        eta=0.0,
        hypotheses=3,
        extractor_seed=0,
        extractor_channels=32,
        temperature=0.02,
    ):
        self.base_channels = base_channels
        self.radius = radius
        self.time_dim = time_dim
        self.use_init = use_init
        self.use_local_cost = use_local_cost
        self.timesteps = timesteps
        self.lr = lr
        self.iters = iters
        self.batch = batch
        self.weight_decay = weight_decay
        self.seed = seed
        self.steps = steps
        self.eta = eta
        self.hypotheses = hypotheses
        self.extractor_seed = extractor_seed
        self.extractor_channels = extractor_channels
        self.temperature = temperature

    def fit(self, X, y=None):
        self.schedule_ = make_schedule(self.timesteps)
        return self._fit_network(X, "diffusion", self.schedule_)

    def sampler_config(self, seed: int = 0) -> SamplerConfig:
        return SamplerConfig(
            steps=self.steps or self.timesteps,
            eta=self.eta,
            hypotheses=self.hypotheses,
            seed=seed,
        )

    def predict_hypotheses(self, X, seed: int = 0):
        """Coarse-resolution HypothesisResult per pair (mean, variance, flows)."""
        check_is_fitted(self, self._fitted_attrs)
        return [
            infer_coarse(
                self.params_,
                self.extractor_,
                src,
                tgt,
                self.schedule_,
                self.sampler_config(seed),
                self.temperature,
            )
            for src, tgt in as_image_pairs(X)
        ]

    def _predict_pair(self, src, tgt) -> FlowField:
        res = infer_coarse(
            self.params_,
            self.extractor_,
            src,
            tgt,
            self.schedule_,
            self.sampler_config(0),
            self.temperature,
        )
        return upsample_flow_bilinear(res.mean_flow, 4)


class RegressionMatcher(_TrainedMatcherBase):
    """Discriminative baseline: same backbone, one deterministic pass."""

    def __init__(
        self,
        base_channels=32,
        radius=7,
        time_dim=64,
        use_init=True,
        use_local_cost=True,
        lr=1e-4,
        iters=2000,
        batch=2,
        weight_decay=0.0,
        seed=0,
        extractor_seed=0,
        extractor_channels=32,
        temperature=0.02,
    ):
        self.base_channels = base_channels
        self.radius = radius
        self.time_dim = time_dim
        self.use_init = use_init
        self.use_local_cost = use_local_cost
        self.lr = lr
        self.iters = iters
        self.batch = batch
        self.weight_decay = weight_decay
        self.seed = seed
        self.extractor_seed = extractor_seed
        self.extractor_channels = extractor_channels
        self.temperature = temperature

    def fit(self, X, y=None):
        return self._fit_network(X, "regression", None)

    def _predict_pair(self, src, tgt) -> FlowField:
        pack, _ = coarse_conditions(self.extractor_, src, tgt, self._matching())
        coarse = FlowField(denormalize_flow(regression_forward(self.params_, pack)))
        return upsample_flow_bilinear(coarse, 4)


class CascadeMatcher(_MatcherBase):
    """Two-stage matcher: coarse diffusion then the finetuned x4 upsampler."""

    _fitted_attrs = ("extractor_", "coarse_params_", "up_params_")

    def __init__(
        self,
        base_channels=32,
        radius=7,
        time_dim=64,
        timesteps=5,
        lr=1e-4,
        iters=2000,
        batch=2,
        seed=0,
        finetune_lr=3e-5,
        finetune_iters=600,
        finetune_batch=1,
        cond_noise_px=1.0,
        steps=None,
        eta=0.0,
        hypotheses=3,
        extractor_seed=0,
        extractor_channels=32,
        temperature=0.02,
    ):
        self.base_channels = base_channels
        self.radius = radius
        self.time_dim = time_dim
        self.timesteps = timesteps
        self.lr = lr
        self.iters = iters
        self.batch = batch
        self.seed = seed
        self.finetune_lr = finetune_lr
        self.finetune_iters = finetune_iters
        self.finetune_batch = finetune_batch
        self.cond_noise_px = cond_noise_px
        self.steps = steps
        self.eta = eta
        self.hypotheses = hypotheses
        self.extractor_seed = extractor_seed
        self.extractor_channels = extractor_channels
        self.temperature = temperature

    def fit(self, X, y=None):
        pairs = as_training_pairs(X)
        coarse = DiffusionMatcher(
            base_channels=self.base_channels,
            radius=self.radius,
            time_dim=self.time_dim,
            timesteps=self.timesteps,
            lr=self.lr,
            iters=self.iters,
            batch=self.batch,
            seed=self.seed,
            extractor_seed=self.extractor_seed,
            extractor_channels=self.extractor_channels,
            temperature=self.temperature,
        ).fit(pairs)
        self.extractor_ = coarse.extractor_
        self.schedule_ = coarse.schedule_
        self.coarse_params_ = coarse.params_
        self.coarse_loss_history_ = coarse.loss_history_
        ccfg = CascadeConfig(
            finetune_lr=self.finetune_lr,
            finetune_iters=self.finetune_iters,
            batch=self.finetune_batch,
            cond_noise_px=self.cond_noise_px,
        )
        up = prepare_upsampler(self.coarse_params_)
        tcfg = TrainConfig(
            lr=ccfg.finetune_lr, iters=ccfg.finetune_iters, batch=ccfg.batch, seed=self.seed
        )
        mcfg = MatchingConfig(radius=self.radius, temperature=self.temperature)
        result = run_training(
            up, upsampler_batcher(self.extractor_, pairs, ccfg, mcfg), tcfg, self.schedule_
        )
        self.up_params_ = up
        self.finetune_loss_history_ = result.losses
        return self

    def _predict_pair(self, src, tgt) -> FlowField:
        scfg = SamplerConfig(
            steps=self.steps or self.timesteps,
            eta=self.eta,
            hypotheses=self.hypotheses,
            seed=0,
        )
        return cascade_infer(
            self.coarse_params_,
            self.up_params_,
            self.extractor_,
            src,
            tgt,
            self.schedule_,
            scfg,
            self.temperature,
        )


def matcher_for(method: str, **kwargs):
    """Factory used by the CLI: method name -> unfitted estimator."""
    table = {
        "softargmax": SoftArgmaxMatcher,
        "argmax": ArgmaxMatcher,
        "diffusion": DiffusionMatcher,
        "regression": RegressionMatcher,
        "cascade": CascadeMatcher,
    }
    if method not in table:
        raise InvalidArgument(f"unknown method {method!r}; choose from {sorted(table)}")
    cls = table[method]
    import inspect

    allowed = set(inspect.signature(cls.__init__).parameters) - {"self"}
    filtered = {k: v for k, v in kwargs.items() if k in allowed}
    return cls(**filtered)