"""Command-line entry points.

Subcommands mirror the pipeline stages so each is independently invocable:

    qpde generate-data --pde burgers --out data/ --n-train 256 --n-test 64
    qpde train --config run.ini
    qpde calibrate --checkpoint float.qpck --dataset train.qpde --regime w8a8 --out q.qpck
    qpde qat --config run.ini --checkpoint float.qpck --regime w8a8 --out q.qpck
    qpde evaluate --checkpoint model.qpck --dataset test.qpde
    qpde cost --checkpoint model.qpck [--regime w8a8] [--scale 0.5] [--steps 20]
    qpde sweep --config run.ini [--regimes w4a4,w8a8] [--scales 0.5,0.2]
    qpde pareto --results out/results.csv
    qpde plot --results out/results.csv --out out/

QPDE_THREADS bounds sweep worker parallelism. Exit code 0 only when every
requested cell completed.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import cost, datagen, dataio, experiment, quant, train
from .datagen import SolverConfig
from .errors import QpdeError
from .experiment import RunConfig
from .models import build_model
from .quant import QuantRegime
from .rescale import ScaleSpec, wrap_scaled_model


def _cmd_generate_data(args) -> int:
    cfg = SolverConfig(pde=args.pde, n_x=args.nx, n_t=args.nt,
                       fine_factor=args.fine_factor)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, count, seed in (("train", args.n_train, args.seed),
                               ("test", args.n_test, args.seed + 100_000)):
        ds = datagen.generate_dataset(cfg, count, base_seed=seed)
        path = out / f"{args.pde}_{split}.qpde"
        dataio.write_dataset(ds.u, path, ds.meta)
        print(f"wrote {path} ({count} trajectories, shape {ds.u.shape[1:]})")
    return 0


def _load_run(args) -> RunConfig:
    cfg = RunConfig.from_ini(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, train_cfg=replace(cfg.train_cfg, seed=args.seed))
    if getattr(args, "out", None):
        cfg = replace(cfg, out_dir=args.out)
    if getattr(args, "regimes", None):
        cfg = replace(cfg, regimes=tuple(s.strip() for s in args.regimes.split(",")))
    if getattr(args, "scales", None):
        cfg = replace(cfg, scales=tuple(float(s) for s in args.scales.split(",")))
    return cfg


def _cmd_train(args) -> int:
    cfg = _load_run(args)
    ds_train = dataio.read_dataset(cfg.dataset_train)
    ds_test = dataio.read_dataset(cfg.dataset_test)
    tc = replace(cfg.train_cfg, seed=cfg.seed)
    model = build_model(cfg.model_spec(ds_train), cfg.seed)
    hist = train.train(model, ds_train, ds_test, tc)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "float.qpck"
    train.save_checkpoint(path, model, tc, hist)
    (out / "config.ini").write_text(cfg.to_ini())
    print(f"wrote {path} (best val MSE {hist['best_val']:.6g})")
    return 0


def _cmd_calibrate(args) -> int:
    model, _ = train.load_checkpoint(args.checkpoint)
    ds = dataio.read_dataset(args.dataset)
    regime = QuantRegime.parse(args.regime)
    tc = train.TrainConfig(input_steps=model.spec.input_steps,
                           output_steps=model.spec.output_steps,
                           train_steps=model.spec.output_steps,
                           test_steps=model.spec.output_steps)
    inner = model.inner if hasattr(model, "inner") else model
    batches = train.calibration_batches(model, ds, tc)
    calibration = quant.calibrate_model(inner, batches, regime)
    quant.attach_quantizers(inner, regime, calibration)
    train.save_checkpoint(args.out, model)
    for name, (wq, iq) in calibration.items():
        print(f"{name}: weight s={wq.s:.3g}  input s={iq.s:.3g} z={iq.z}")
    print(f"wrote {args.out}")
    return 0


def _cmd_qat(args) -> int:
    cfg = _load_run(args)
    model, _ = train.load_checkpoint(args.checkpoint)
    ds_train = dataio.read_dataset(cfg.dataset_train)
    ds_test = dataio.read_dataset(cfg.dataset_test)
    tc = replace(cfg.train_cfg, seed=cfg.seed)
    regime = QuantRegime.parse(args.regime)
    hist = train.qat_finetune(model, regime, ds_train, ds_test, tc)
    train.save_checkpoint(args.out, model, tc, hist)
    print(f"wrote {args.out} (best val MSE {hist['best_val']:.6g})")
    return 0


def _cmd_evaluate(args) -> int:
    model, info = train.load_checkpoint(args.checkpoint)
    ds = dataio.read_dataset(args.dataset)
    tc_fields = info.get("train_config") or {}
    tc = train.TrainConfig(**tc_fields) if tc_fields else train.TrainConfig(
        input_steps=model.spec.input_steps, output_steps=model.spec.output_steps,
        train_steps=model.spec.output_steps, test_steps=model.spec.output_steps)
    mse = train.evaluate(model, ds, tc)
    print(f"{mse!r}")
    return 0


def _cmd_cost(args) -> int:
    model, info = train.load_checkpoint(args.checkpoint)
    regime = QuantRegime.parse(args.regime) if args.regime else None
    if regime is None and info["meta"].get("regime", "float") != "float":
        regime = QuantRegime.parse(info["meta"]["regime"])
    scale = None
    if hasattr(model, "scale"):
        scale = model.scale
    elif args.scale is not None:
        scale = ScaleSpec.for_model(args.scale, model.spec.grid_size,
                                    model.spec.architecture)
    rep = cost.model_cost(model, regime, scale=scale, rollout_steps=args.steps,
                          verify=args.verify)
    print(rep.to_table())
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_run(args)
    records, failures = experiment.run_experiment(cfg)
    paths = experiment.emit_outputs(records, cfg.out_dir) if records else []
    for p in paths:
        print(f"wrote {p}")
    for cell, err in failures:
        print(f"FAILED {cell}: {err}", file=sys.stderr)
    return 1 if failures else 0


def _cmd_pareto(args) -> int:
    records = experiment.read_records_csv(args.results)
    front = experiment.pareto_front(records)
    print(",".join(experiment.CSV_COLUMNS))
    for r in front:
        print(",".join(r.row()))
    return 0


def _cmd_plot(args) -> int:
    records = experiment.read_records_csv(args.results)
    for p in experiment.emit_outputs(records, args.out):
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qpde", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="solve PDEs into a dataset file")
    g.add_argument("--pde", required=True, choices=datagen.PDES)
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=256)
    g.add_argument("--n-test", type=int, default=64)
    g.add_argument("--nx", type=int, default=128)
    g.add_argument("--nt", type=int, default=41)
    g.add_argument("--fine-factor", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=_cmd_generate_data)

    for name, fn, extras in (
            ("train", _cmd_train, ()),
            ("sweep", _cmd_sweep, ("regimes", "scales")),
    ):
        t = sub.add_parser(name)
        t.add_argument("--config", required=True)
        t.add_argument("--seed", type=int, default=None)
        t.add_argument("--out", default=None)
        for extra in extras:
            t.add_argument(f"--{extra}", default=None)
        t.set_defaults(fn=fn)

    c = sub.add_parser("calibrate", help="attach calibrated quantizers, no training")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--dataset", required=True)
    c.add_argument("--regime", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=_cmd_calibrate)

    q = sub.add_parser("qat", help="quantization-aware fine-tuning of a checkpoint")
    q.add_argument("--config", required=True)
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--regime", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--seed", type=int, default=None)
    q.set_defaults(fn=_cmd_qat)

    e = sub.add_parser("evaluate")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.set_defaults(fn=_cmd_evaluate)

    co = sub.add_parser("cost")
    co.add_argument("--checkpoint", required=True)
    co.add_argument("--regime", default=None)
    co.add_argument("--scale", type=float, default=None)
    co.add_argument("--steps", type=int, default=None)
    co.add_argument("--verify", action="store_true")
    co.set_defaults(fn=_cmd_cost)

    pa = sub.add_parser("pareto")
    pa.add_argument("--results", required=True)
    pa.set_defaults(fn=_cmd_pareto)

    pl = sub.add_parser("plot")
    pl.add_argument("--results", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(fn=_cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except QpdeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
