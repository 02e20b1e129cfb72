"""diffcorr: conditional diffusion dense correspondence at desk scale."""

__version__ = "0.1.0"

from .cost import FlowField, GlobalCost, LocalCost  # noqa: F401
from .denoiser import ArchSpec, ConditionPack, DenoiserParams  # noqa: F401
from .diffusion import HypothesisResult, NoiseSchedule, SamplerConfig  # noqa: F401
from .estimators import (  # noqa: F401
    ArgmaxMatcher,
    CascadeMatcher,
    DiffusionMatcher,
    RegressionMatcher,
    SoftArgmaxMatcher,
)
from .synth import CorruptionSpec, DatasetSpec, SamplePair, WarpSpec  # noqa: F401
