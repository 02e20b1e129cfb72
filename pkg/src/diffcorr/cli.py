"""Operator surface: dataset generation, training, inference, evaluation.

Exit codes: 0 success, 2 usage or configuration error, 3 data error
(missing/corrupt inputs), 4 numeric failure (training divergence, sampling
failure). Structural settings come from the JSON config; flags carry paths,
seeds and sweep axes only. Every run writes a manifest next to its output.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .cascade import (
    CascadeConfig,
    cascade_infer_hypotheses,
    prepare_upsampler,
    resize_bilinear,
    upsample_flow_bilinear,
)
from .config import load_config, sha256_file, write_manifest
from .cost import FlowField
from .denoiser import ArchSpec, init_denoiser, load_checkpoint, save_checkpoint
from .diffusion import SamplerConfig, make_schedule
from .errors import (
    ConfigError,
    DataError,
    DiffcorrError,
    FormatError,
    InvalidArgument,
    SamplingFailure,
    TrainingDiverged,
)
from .features import init_extractor
from .imageio import read_ppm, write_ppm
from .metrics import evaluate, flow_to_color, read_flo, write_flo
from .pipeline import (
    MatchingConfig,
    argmax_baseline,
    coarse_conditions,
    infer_coarse,
    softargmax_baseline,
)
from .synth import DatasetSpec, load_dataset, save_dataset
from .training import (
    TrainConfig,
    TrainResult,
    coarse_batcher,
    load_train_state,
    prepare_coarse_set,
    run_training,
    save_train_state,
    upsampler_batcher,
)


def _dataset_spec(cfg: dict) -> DatasetSpec:
    d = cfg["data"]
    return DatasetSpec(
        count=int(d["count"]),
        resolution=int(d["resolution"]),
        magnitude=float(d["magnitude"]),
        textures=tuple(d["textures"]),
        seed=int(d["seed"]),
        corruption_kind=d["corruption_kind"],
        corruption_severity=int(d["corruption_severity"]),
        corrupt_both=bool(d["corrupt_both"]),
    )


def _arch(cfg: dict, mode: str) -> ArchSpec:
    m = cfg["model"]
    return ArchSpec(
        base_channels=int(m["base_channels"]),
        radius=int(m["radius"]),
        time_dim=int(m["time_dim"]),
        use_init=bool(m["use_init"]),
        use_local_cost=bool(m["use_local_cost"]),
        mode=mode,
    )


def _matching(cfg: dict) -> MatchingConfig:
    m = cfg["model"]
    return MatchingConfig(
        radius=int(m["radius"]),
        temperature=float(m["temperature"]),
        use_init=bool(m["use_init"]),
        use_local_cost=bool(m["use_local_cost"]),
    )


def _sampler(cfg: dict, args, seed: int) -> SamplerConfig:
    d = cfg["diffusion"]
    steps = args.steps if getattr(args, "steps", None) else (d["steps"] or d["T"])
    hyp = args.hypotheses if getattr(args, "hypotheses", None) else d["hypotheses"]
    eta = args.eta if getattr(args, "eta", None) is not None else d["eta"]
    return SamplerConfig(steps=int(steps), eta=float(eta), hypotheses=int(hyp), seed=seed)


def _load_stage(path, stage: str):
    params, header = load_checkpoint(path)
    if header.get("stage") != stage:
        raise InvalidArgument(
            f"checkpoint {path} has stage {header.get('stage')!r}, expected {stage!r}"
        )
    return params, header


def _extractor_from_header(header: dict):
    return init_extractor(header["extractor_seed"], header["extractor_channels"])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    spec = _dataset_spec(cfg)
    out = Path(args.out)
    save_dataset(spec, out)
    write_manifest(
        out / "run_manifest.json", "gen-data", cfg, {"out": str(out), "count": spec.count}
    )
    print(f"wrote {spec.count} pairs to {out}")
    return 0


def _train_loop(args, cfg, params, batcher, sched, stage: str, header_extra: dict) -> int:
    t = cfg["train"]
    tcfg = TrainConfig(
        lr=float(t["lr"]) if stage == "coarse" else float(cfg["cascade"]["finetune_lr"]),
        iters=int(t["iters"]) if stage == "coarse" else int(cfg["cascade"]["finetune_iters"]),
        batch=int(t["batch"]) if stage == "coarse" else int(cfg["cascade"]["batch"]),
        seed=int(args.seed if args.seed is not None else t["seed"]),
        weight_decay=float(t["weight_decay"]),
        log_every=int(t["log_every"]),
        ckpt_every=int(t["ckpt_every"]),
    )
    out = Path(args.out)
    prior_losses: list[float] = []
    opt_state = rng = None
    start_iter = 0
    if getattr(args, "resume", False) and out.exists():
        params, _ = load_checkpoint(out)
        opt_state, rng, start_iter, meta = load_train_state(out, params)
        prior_losses = list(meta["losses"])
        print(f"resuming from iteration {start_iter}")
    log_path = out.with_suffix(".losses.log")
    log_fh = open(log_path, "a" if start_iter else "w")
    trace = list(prior_losses)

    def save_all(result: TrainResult):
        save_checkpoint(
            result.params,
            out,
            extractor_seed=cfg["model"]["extractor_seed"],
            extractor_channels=cfg["model"]["extractor_channels"],
            schedule_T=cfg["diffusion"]["T"],
            stage=stage,
        )
        save_train_state(out, result, tcfg, all_losses=trace)

    def on_step(it, loss, result):
        trace.append(loss)
        if it % tcfg.log_every == 0 or it == tcfg.iters:
            log_fh.write(f"{time.time():.3f} {it} {loss:.10f}\n")
            log_fh.flush()
        if it % tcfg.ckpt_every == 0 and it < tcfg.iters:
            save_all(result)

    try:
        result = run_training(
            params,
            batcher,
            tcfg,
            sched,
            opt_state=opt_state,
            rng=rng,
            start_iter=start_iter,
            on_step=on_step,
        )
    finally:
        log_fh.close()
    save_all(result)
    write_manifest(
        out.with_suffix(out.suffix + ".manifest.json"),
        "train" if stage == "coarse" else "finetune-up",
        cfg,
        {
            "dataset": str(args.data),
            "seed": tcfg.seed,
            "iterations": result.iteration,
            "checkpoint_sha256": sha256_file(out),
            **header_extra,
        },
    )
    print(f"trained {result.iteration} iterations; checkpoint at {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    pairs = load_dataset(args.data)
    extractor = init_extractor(
        cfg["model"]["extractor_seed"], cfg["model"]["extractor_channels"]
    )
    mcfg = _matching(cfg)
    print(f"preparing conditions for {len(pairs)} pairs")
    train_set = prepare_coarse_set(extractor, pairs, mcfg)
    arch = _arch(cfg, args.mode)
    params = init_denoiser(arch, seed=int(args.seed if args.seed is not None else cfg["train"]["seed"]))
    sched = make_schedule(int(cfg["diffusion"]["T"])) if args.mode == "diffusion" else None
    batcher = coarse_batcher(train_set, int(cfg["train"]["batch"]))
    return _train_loop(args, cfg, params, batcher, sched, "coarse", {"mode": args.mode})


def cmd_finetune_up(args) -> int:
    cfg = load_config(args.config)
    coarse_params, header = _load_stage(args.coarse, "coarse")
    if coarse_params.arch.mode != "diffusion":
        raise InvalidArgument("finetune-up needs a diffusion-mode coarse checkpoint")
    pairs = load_dataset(args.data)
    subset = int(cfg["cascade"]["train_subset"])
    pairs = pairs[:subset] if subset else pairs
    extractor = _extractor_from_header(header)
    ccfg = CascadeConfig(
        factor=int(cfg["cascade"]["factor"]),
        finetune_lr=float(cfg["cascade"]["finetune_lr"]),
        finetune_iters=int(cfg["cascade"]["finetune_iters"]),
        batch=int(cfg["cascade"]["batch"]),
        cond_noise_px=float(cfg["cascade"]["cond_noise_px"]),
    )
    mcfg = MatchingConfig(
        radius=coarse_params.arch.radius,
        temperature=float(cfg["model"]["temperature"]),
        use_init=coarse_params.arch.use_init,
        use_local_cost=coarse_params.arch.use_local_cost,
    )
    up = prepare_upsampler(coarse_params)
    sched = make_schedule(header["schedule_T"])
    batcher = upsampler_batcher(extractor, pairs, ccfg, mcfg)
    return _train_loop(
        args, cfg, up, batcher, sched, "upsampler", {"coarse_sha256": sha256_file(args.coarse)}
    )


def cmd_infer(args) -> int:
    cfg = load_config(args.config)
    src = read_ppm(args.src)
    tgt = read_ppm(args.tgt)
    if src.shape != tgt.shape:
        raise InvalidArgument(f"image sizes differ: {src.shape} vs {tgt.shape}")
    if src.shape[1] % 4 or src.shape[2] % 4:
        raise InvalidArgument("image size must be divisible by 4")
    seed = int(args.seed or 0)
    variance = None
    used = {}
    if args.baseline:
        ext = init_extractor(
            cfg["model"]["extractor_seed"], cfg["model"]["extractor_channels"]
        )
        if args.baseline == "softargmax":
            flow = upsample_flow_bilinear(
                softargmax_baseline(ext, src, tgt, cfg["model"]["temperature"]), 4
            )
        elif args.baseline == "argmax":
            flow = upsample_flow_bilinear(argmax_baseline(ext, src, tgt), 4)
        else:  # regression
            if not args.coarse:
                raise InvalidArgument("--baseline regression needs --coarse CKPT")
            params, header = _load_stage(args.coarse, "coarse")
            if params.arch.mode != "regression":
                raise InvalidArgument("--baseline regression needs a regression checkpoint")
            from .denoiser import regression_forward
            from .diffusion import denormalize_flow

            ext = _extractor_from_header(header)
            pack, _ = coarse_conditions(
                ext, src, tgt, MatchingConfig(
                    radius=params.arch.radius,
                    temperature=cfg["model"]["temperature"],
                    use_init=params.arch.use_init,
                    use_local_cost=params.arch.use_local_cost,
                ),
            )
            flow = upsample_flow_bilinear(
                FlowField(denormalize_flow(regression_forward(params, pack))), 4
            )
            used["coarse_sha256"] = sha256_file(args.coarse)
    else:
        if not args.coarse:
            raise InvalidArgument("infer needs --coarse (or --baseline)")
        coarse_params, header = _load_stage(args.coarse, "coarse")
        ext = _extractor_from_header(header)
        sched = make_schedule(header["schedule_T"])
        scfg = _sampler(cfg, args, seed)
        used["coarse_sha256"] = sha256_file(args.coarse)
        if args.up:
            up_params, _ = _load_stage(args.up, "upsampler")
            fine, _coarse = cascade_infer_hypotheses(
                coarse_params, up_params, ext, src, tgt, sched, scfg,
                cfg["model"]["temperature"],
            )
            flow = fine.mean_flow
            if scfg.hypotheses > 1:
                variance = fine.variance_map
            used["up_sha256"] = sha256_file(args.up)
        else:
            res = infer_coarse(
                coarse_params, ext, src, tgt, sched, scfg, cfg["model"]["temperature"]
            )
            flow = upsample_flow_bilinear(res.mean_flow, 4)
            if scfg.hypotheses > 1:
                h, w = flow.resolution
                variance = resize_bilinear(res.variance_map, h, w) * 16.0
    out = Path(args.out)
    write_flo(out, flow)
    if variance is not None:
        write_flo(out.parent / "variance.flo", FlowField(variance))
    if args.viz:
        write_ppm(args.viz, flow_to_color(flow))
    write_manifest(
        out.with_suffix(out.suffix + ".manifest.json"),
        "infer",
        cfg,
        {
            "src": str(args.src),
            "tgt": str(args.tgt),
            "seed": seed,
            "baseline": args.baseline,
            "hypotheses": getattr(args, "hypotheses", None),
            "steps": getattr(args, "steps", None),
            **used,
        },
    )
    print(f"wrote {out}")
    return 0


def _eval_predictor(args, cfg, method: str):
    mcfg_t = float(cfg["model"]["temperature"])
    if method in ("softargmax", "argmax"):
        ext = init_extractor(
            cfg["model"]["extractor_seed"], cfg["model"]["extractor_channels"]
        )
        if method == "softargmax":
            return lambda pair, scfg=None: upsample_flow_bilinear(
                softargmax_baseline(ext, pair.src, pair.tgt, mcfg_t), 4
            ), {}
        return lambda pair, scfg=None: upsample_flow_bilinear(
            argmax_baseline(ext, pair.src, pair.tgt), 4
        ), {}
    if method == "regression":
        params, header = _load_stage(args.coarse, "coarse")
        if params.arch.mode != "regression":
            raise InvalidArgument("--method regression needs a regression checkpoint")
        ext = _extractor_from_header(header)
        from .denoiser import regression_forward
        from .diffusion import denormalize_flow

        mc = MatchingConfig(
            radius=params.arch.radius, temperature=mcfg_t,
            use_init=params.arch.use_init, use_local_cost=params.arch.use_local_cost,
        )

        def predict(pair, scfg=None):
            pack, _ = coarse_conditions(ext, pair.src, pair.tgt, mc)
            return upsample_flow_bilinear(
                FlowField(denormalize_flow(regression_forward(params, pack))), 4
            )

        return predict, {"coarse_sha256": sha256_file(args.coarse)}
    coarse_params, header = _load_stage(args.coarse, "coarse")
    ext = _extractor_from_header(header)
    sched = make_schedule(header["schedule_T"])
    extras = {"coarse_sha256": sha256_file(args.coarse)}
    if method == "cascade":
        up_params, _ = _load_stage(args.up, "upsampler")
        extras["up_sha256"] = sha256_file(args.up)

        def predict(pair, scfg):
            fine, _ = cascade_infer_hypotheses(
                coarse_params, up_params, ext, pair.src, pair.tgt, sched, scfg, mcfg_t
            )
            return fine.mean_flow

        return predict, extras

    def predict(pair, scfg):
        res = infer_coarse(coarse_params, ext, pair.src, pair.tgt, sched, scfg, mcfg_t)
        return upsample_flow_bilinear(res.mean_flow, 4)

    return predict, extras


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    pairs = load_dataset(args.data)
    method = args.method
    if method in ("diffusion", "cascade", "regression") and not args.coarse:
        raise InvalidArgument(f"--method {method} needs --coarse")
    if method == "cascade" and not args.up:
        raise InvalidArgument("--method cascade needs --up")
    predict, extras = _eval_predictor(args, cfg, method)
    step_values = [None]
    if args.sweep:
        if not args.sweep.startswith("steps="):
            raise InvalidArgument("only steps sweeps are supported, e.g. --sweep steps=1..5")
        lo, hi = args.sweep[len("steps=") :].split("..")
        step_values = list(range(int(lo), int(hi) + 1))
    out = Path(args.out)
    for step in step_values:
        ns = argparse.Namespace(
            steps=step, hypotheses=args.hypotheses, eta=args.eta
        )
        scfg = _sampler(cfg, ns, int(args.seed or 0))
        manifest = {
            "method": method,
            "dataset": str(args.data),
            "sampler": {
                "steps": scfg.steps,
                "eta": scfg.eta,
                "hypotheses": scfg.hypotheses,
                "seed": scfg.seed,
            },
            "config": cfg,
            **extras,
        }
        report = evaluate(
            lambda pair: predict(pair, scfg),
            pairs,
            manifest=manifest,
            viz_dir=args.viz,
            threads=int(args.threads),
        )
        path = out if step is None else out.with_name(f"{out.stem}_steps{step}{out.suffix}")
        report.write(path)
        print(
            f"{path}: aepe {report.overall['aepe']:.4f} pck1 {report.overall['pck1']:.3f} "
            f"pck3 {report.overall['pck3']:.3f} pck5 {report.overall['pck5']:.3f}"
        )
    return 0


def cmd_viz(args) -> int:
    flow = read_flo(args.flow)
    img = flow_to_color(flow, max_norm=args.max_norm)
    write_ppm(args.out, img)
    if args.gt:
        gt = read_flo(args.gt)
        from .metrics import epe_map

        err = epe_map(flow, gt)
        err = err / max(err.max(), 1e-9)
        write_ppm(
            Path(args.out).with_suffix(".err.ppm"), np.stack([err, err, err])
        )
    write_manifest(
        Path(args.out).with_suffix(".manifest.json"),
        "viz",
        {},
        {"flow": str(args.flow), "gt": str(args.gt) if args.gt else None},
    )
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="diffcorr",
        description="Conditional diffusion dense correspondence on synthetic warps",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config", default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the coarse model (diffusion or regression)")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=("diffusion", "regression"), default="diffusion")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("finetune-up", help="finetune the x4 upsampling stage")
    f.add_argument("--config", default=None)
    f.add_argument("--data", required=True)
    f.add_argument("--coarse", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--seed", type=int, default=None)
    f.add_argument("--resume", action="store_true")
    f.set_defaults(func=cmd_finetune_up)

    i = sub.add_parser("infer", help="estimate flow for one image pair")
    i.add_argument("--config", default=None)
    i.add_argument("--src", required=True)
    i.add_argument("--tgt", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--coarse", default=None)
    i.add_argument("--up", default=None)
    i.add_argument("--baseline", choices=("softargmax", "argmax", "regression"), default=None)
    i.add_argument("--hypotheses", type=int, default=None)
    i.add_argument("--steps", type=int, default=None)
    i.add_argument("--eta", type=float, default=None)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--viz", default=None)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="evaluate a method over a dataset")
    e.add_argument("--config", default=None)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument(
        "--method",
        choices=("diffusion", "cascade", "regression", "argmax", "softargmax"),
        default="diffusion",
    )
    e.add_argument("--coarse", default=None)
    e.add_argument("--up", default=None)
    e.add_argument("--sweep", default=None, help="e.g. steps=1..5")
    e.add_argument("--hypotheses", type=int, default=None)
    e.add_argument("--eta", type=float, default=None)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--viz", default=None)
    e.add_argument("--threads", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz", help="colorize a .flo file")
    v.add_argument("--flow", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--gt", default=None)
    v.add_argument("--max-norm", type=float, default=None)
    v.set_defaults(func=cmd_viz)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidArgument) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (TrainingDiverged, SamplingFailure) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except DiffcorrError as exc:  # any other package error: treat as data
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
