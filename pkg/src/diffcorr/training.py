"""Training loops: coarse-stage training and upsampler finetuning.

Conditions for the coarse stage are precomputed once per pair (they do not
depend on the diffusion timestep) and held as float32 to keep 2000-pair sets
in memory; fine-stage conditions are recomputed per batch because the
conditioning noise changes them every visit.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cascade import CascadeConfig, downsample_flow, upsampler_batch
from .denoiser import ConditionPack, DenoiserParams, train_step
from .diffusion import NoiseSchedule
from .errors import InvalidArgument
from .features import ExtractorWeights
from .optim import OptimizerState
from .pipeline import MatchingConfig, coarse_conditions


@dataclass
class TrainConfig:
    lr: float = 1e-4
    iters: int = 5000
    batch: int = 2
    seed: int = 0
    weight_decay: float = 0.0
    log_every: int = 50
    ckpt_every: int = 1000


@dataclass
class CoarseSet:
    """Precomputed per-pair training inputs at the diffusion resolution."""

    f0: np.ndarray  # (P, 2, h, w) ground-truth flow, pixel units, float32
    f_init: np.ndarray  # (P, 2, h, w) normalized init flow, float32
    local_cost: np.ndarray | None  # (P, R*R, h, w) float32
    valid: np.ndarray  # (P, h, w) bool, all-fine-pixels-valid reduction
    radius: int
    use_init: bool
    use_local_cost: bool

    def __len__(self) -> int:
        return self.f0.shape[0]

    def item(
        self,
        i: int,
        use_init: bool | None = None,
        use_local_cost: bool | None = None,
    ) -> tuple[np.ndarray, ConditionPack]:
        """(F0 pixels, conditions); ablation flags may override the stored ones."""
        pack = ConditionPack(
            f_init=self.f_init[i].astype(np.float64),
            local_cost=(
                self.local_cost[i].astype(np.float64)
                if self.local_cost is not None
                else None
            ),
            radius=self.radius,
            use_init=self.use_init if use_init is None else use_init,
            use_local_cost=(
                self.use_local_cost if use_local_cost is None else use_local_cost
            ),
        )
        return self.f0[i].astype(np.float64), pack


def prepare_coarse_set(
    extractor: ExtractorWeights,
    pairs,
    mcfg: MatchingConfig,
    factor: int = 4,
) -> CoarseSet:
    """Ground truth downsampled to the diffusion grid plus frozen conditions."""
    f0s, inits, costs, valids = [], [], [], []
    for pair in pairs:
        pack, _ = coarse_conditions(extractor, pair.src, pair.tgt, mcfg)
        f0s.append(downsample_flow(pair.flow, factor).values.astype(np.float32))
        inits.append(pack.f_init.astype(np.float32))
        if mcfg.use_local_cost:
            costs.append(pack.local_cost.astype(np.float32))
        h, w = pair.valid.shape
        valids.append(
            pair.valid.reshape(h // factor, factor, w // factor, factor).all(axis=(1, 3))
        )
    return CoarseSet(
        f0=np.stack(f0s),
        f_init=np.stack(inits),
        local_cost=np.stack(costs) if costs else None,
        valid=np.stack(valids),
        radius=mcfg.radius,
        use_init=mcfg.use_init,
        use_local_cost=mcfg.use_local_cost,
    )


def save_coarse_set(path, cs: CoarseSet) -> None:
    np.savez(
        path,
        f0=cs.f0,
        f_init=cs.f_init,
        local_cost=cs.local_cost if cs.local_cost is not None else np.zeros(0, np.float32),
        valid=cs.valid,
        meta=np.array(
            [cs.radius, int(cs.use_init), int(cs.use_local_cost)], dtype=np.int64
        ),
    )


def load_coarse_set(path) -> CoarseSet:
    with np.load(path) as z:
        radius, use_init, use_cost = (int(v) for v in z["meta"])
        lc = z["local_cost"]
        return CoarseSet(
            f0=z["f0"],
            f_init=z["f_init"],
            local_cost=None if lc.size == 0 else lc,
            valid=z["valid"],
            radius=radius,
            use_init=bool(use_init),
            use_local_cost=bool(use_cost),
        )


@dataclass
class TrainResult:
    params: DenoiserParams
    opt_state: OptimizerState
    rng: np.random.Generator
    losses: list[float] = field(default_factory=list)
    start_iter: int = 0

    @property
    def iteration(self) -> int:
        return self.start_iter + len(self.losses)


def run_training(
    params: DenoiserParams,
    batches,
    tcfg: TrainConfig,
    sched: NoiseSchedule | None,
    *,
    opt_state: OptimizerState | None = None,
    rng: np.random.Generator | None = None,
    start_iter: int = 0,
    iters: int | None = None,
    on_step=None,
) -> TrainResult:
    """Drive ``batches(rng) -> batch`` through train_step for ``iters`` steps."""
    if opt_state is None:
        opt_state = OptimizerState(lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    if rng is None:
        rng = np.random.default_rng(tcfg.seed)
    total = tcfg.iters if iters is None else iters
    result = TrainResult(params=params, opt_state=opt_state, rng=rng, start_iter=start_iter)
    for it in range(start_iter, total):
        batch = batches(rng)
        loss = train_step(params, opt_state, batch, sched, rng)
        result.losses.append(loss)
        if on_step is not None:
            on_step(it + 1, loss, result)
    return result


def coarse_batcher(
    cs: CoarseSet,
    batch: int,
    use_init: bool | None = None,
    use_local_cost: bool | None = None,
):
    if len(cs) < 1 or batch < 1:
        raise InvalidArgument("need a non-empty set and positive batch size")

    def batches(rng: np.random.Generator):
        idx = rng.integers(0, len(cs), size=batch)
        return [cs.item(int(i), use_init, use_local_cost) for i in idx]

    return batches


def upsampler_batcher(
    extractor: ExtractorWeights, pairs: list, ccfg: CascadeConfig, mcfg: MatchingConfig
):
    pairs = list(pairs)
    if not pairs:
        raise InvalidArgument("need at least one fine-resolution pair")

    def batches(rng: np.random.Generator):
        idx = rng.integers(0, len(pairs), size=ccfg.batch)
        return upsampler_batch(extractor, [pairs[int(i)] for i in idx], ccfg, mcfg, rng)

    return batches


# ---------------------------------------------------------------------------
# resumable training state (sidecar next to the spec checkpoint format)
# ---------------------------------------------------------------------------


def save_train_state(
    prefix, result: TrainResult, tcfg: TrainConfig, all_losses: list[float] | None = None
) -> None:
    """Write optimizer moments and RNG state so training can resume exactly."""
    prefix = Path(prefix)
    st = result.opt_state
    np.savez(
        prefix.with_suffix(".train.npz"),
        k=np.array([st.k], dtype=np.int64),
        **{f"m_{i}": m for i, m in enumerate(st.m)},
        **{f"v_{i}": v for i, v in enumerate(st.v)},
    )
    losses = result.losses if all_losses is None else all_losses
    state = {
        "iteration": result.iteration,
        "rng_state": result.rng.bit_generator.state,
        "losses": losses,
        "config": {
            "lr": tcfg.lr,
            "iters": tcfg.iters,
            "batch": tcfg.batch,
            "seed": tcfg.seed,
            "weight_decay": tcfg.weight_decay,
        },
        "timestamp": time.time(),
    }
    prefix.with_suffix(".train.json").write_text(json.dumps(state))


def load_train_state(prefix, params: DenoiserParams) -> tuple[OptimizerState, np.random.Generator, int, dict]:
    prefix = Path(prefix)
    meta = json.loads(prefix.with_suffix(".train.json").read_text())
    cfg = meta["config"]
    st = OptimizerState(lr=cfg["lr"], weight_decay=cfg["weight_decay"])
    with np.load(prefix.with_suffix(".train.npz")) as z:
        st.k = int(z["k"][0])
        n = len(params.parameters())
        st.m = [z[f"m_{i}"].copy() for i in range(n)]
        st.v = [z[f"v_{i}"].copy() for i in range(n)]
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return st, rng, int(meta["iteration"]), meta
