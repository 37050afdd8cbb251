"""Command-line entry point: ``ptclearn {calibrate,map,train,pipeline,profile,eval}``.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from .config import ConfigError, ExperimentConfig
from .cost import CostReport, stage_cost
from .nn import NumericalAbort
from .pipeline import (
    StageError,
    build_model,
    evaluate_split,
    init_from_scratch,
    load_checkpoint,
    load_dataset,
    read_checkpoint,
    run_pipeline,
    RunState,
)
from .sampling import build_column_mask
from .subspace import STAGE_SL
from .zoo import ZooError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML or JSON experiment config (defaults when omitted)")
    p.add_argument("--output", dest="output_dir", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="parallel block workers for IC/PM")
    p.add_argument("--alpha-w", type=float, dest="alpha_w", help="feedback block density")
    p.add_argument("--alpha-c", type=float, dest="alpha_c", help="im2col column density")
    p.add_argument("--alpha-d", type=float, dest="alpha_d", help="kept-iteration probability")
    p.add_argument("--bitwidth", type=int, help="mesh phase bitwidth")
    p.add_argument("--gamma-std", type=float, dest="gamma_std")
    p.add_argument("--crosstalk", type=float)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key, e.g. sl.epochs=5")
    p.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptclearn", description="Photonic tensor-core calibration, mapping and subspace training")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "calibrate": "identity-calibrate every photonic block",
        "map": "map electronic-twin weights onto the (calibrated) blocks",
        "train": "subspace learning, from scratch or from --checkpoint",
        "pipeline": "all enabled stages in order",
        "profile": "projected PTC energy and steps for the configured sampling plan",
        "eval": "accuracy of a checkpoint",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        _common(p)
        if name in ("map", "train", "profile", "eval"):
            p.add_argument("--checkpoint", help="checkpoint JSON to start from", required=(name == "eval"))
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(
        alpha_w=args.alpha_w,
        alpha_c=args.alpha_c,
        alpha_d=args.alpha_d,
        bitwidth=args.bitwidth,
        gamma_std=args.gamma_std,
        crosstalk=args.crosstalk,
        workers=args.workers,
        seed=args.seed,
        output_dir=args.output_dir,
        set=args.set,
    )


def profile(cfg: ExperimentConfig, checkpoint: dict | None = None) -> dict:
    """Analytic SL cost of one configured run versus dense training, plus IC/PM projections."""
    data = load_dataset(cfg)
    model = build_model(cfg)
    state = RunState(cfg, data, model)
    if checkpoint is not None:
        load_checkpoint(model, checkpoint)
    else:
        init_from_scratch(state)
    epochs, _ = cfg.sl.resolved(checkpoint is not None or cfg.pm.enabled)
    batch = cfg.sl.batch_size
    iters = math.ceil(len(data.train) / batch) * epochs
    kept = int(round(iters * cfg.sampling.data_alpha_d))
    model.configure_sampling(cfg.sampling, cfg.seed, STAGE_SL)
    dims = model.profile_dims(cfg.model.shape)
    sparse, dense = CostReport(), CostReport()
    for i, ((d, feedback), layer) in enumerate(zip(dims, model.photonic_layers)):
        fb_mask, _ = layer._feedback_mask()
        col = None
        if cfg.sampling.column_alpha_c < 1 and d.kernel > 1:
            col = build_column_mask(d.h_out, d.w_out, cfg.sampling.column_alpha_c, np.random.default_rng([cfg.seed, STAGE_SL, i, 0, 1]))
        one, base = CostReport(), CostReport()
        one.add_layer(d, batch, col, fb_mask, feedback=feedback)
        base.add_layer(d, batch, feedback=feedback)
        sparse.add({k: v * kept for k, v in one.energy.items()}, {k: v * kept for k, v in one.steps.items()})
        dense.add({k: v * iters for k, v in base.energy.items()}, {k: v * iters for k, v in base.steps.items()})
    sparse.set_baseline("dense", dense)
    layers = model.photonic_layers
    n_equiv = int(round(np.sqrt(np.mean([l.ptc.in_features * l.ptc.out_features for l in layers]))))
    return {
        "sl": sparse.to_dict(),
        "sl_dense": dense.to_dict(),
        "iterations": {"total": iters, "kept": kept, "batch": batch},
        "projected": {
            "IC": stage_cost("IC", len(layers), n_equiv, cfg.model.k, cfg.ic.epochs),
            "PM": stage_cost("PM", len(layers), n_equiv, cfg.model.k, cfg.pm.epochs),
        },
        "csv": sparse.to_csv(),
    }


def _run(args) -> int:
    cfg = load_config(args)
    log = (lambda m: None) if args.quiet else (lambda m: print(m, file=sys.stderr))
    ckpt = read_checkpoint(args.checkpoint) if getattr(args, "checkpoint", None) else None
    stages = {"calibrate": ["IC"], "map": ["PM"], "train": ["SL"], "pipeline": None}
    if args.command in stages:
        state = run_pipeline(cfg, stages[args.command], ckpt, log)
        summary = {"output_dir": cfg.output_dir, "stages": list(state.reports) + (["SL"] if state.metrics else [])}
        if state.metrics:
            summary["final_test_acc"] = state.metrics[-1].test_acc
        if state.twin_acc is not None:
            summary["twin_test_acc"] = state.twin_acc
        print(json.dumps(summary))
        return EXIT_OK
    os.makedirs(cfg.output_dir, exist_ok=True)
    if args.command == "profile":
        report = profile(cfg, ckpt)
        with open(os.path.join(cfg.output_dir, "cost.csv"), "w") as f:
            f.write(report.pop("csv"))
        with open(os.path.join(cfg.output_dir, "cost.json"), "w") as f:
            json.dump(report, f, indent=2)
        print(json.dumps({"energy_ratio": report["sl"].get("energy_ratio"), "step_ratio": report["sl"].get("step_ratio")}))
        return EXIT_OK
    # eval
    data = load_dataset(cfg)
    model = build_model(cfg)
    load_checkpoint(model, ckpt)
    result = {"checkpoint": args.checkpoint, "stage": ckpt.get("stage"), "train": evaluate_split(model, data.train), "test": evaluate_split(model, data.test)}
    with open(os.path.join(cfg.output_dir, "eval.json"), "w") as f:
        json.dump(result, f, indent=2)
    print(json.dumps(result))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as e:
        print(f"stage error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL if isinstance(e.__cause__, ZooError) else EXIT_CONFIG
    except (NumericalAbort, ZooError, FloatingPointError) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
