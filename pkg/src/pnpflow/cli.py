"""Command-line entry point: ``pnpflow {train,sample,solve,eval,gridsearch,check}``.

Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .domain import DomainError, RngState, ShapeError, sample_latent
from .experiment import (
    ConfigError,
    ExperimentConfig,
    build_latent,
    build_model,
    build_target,
    config_to_text,
    grid_search,
    load_config,
    run_experiment,
    set_option,
    write_score_table,
)
from .flows import euler_sample
from .metrics import mse, psnr, ssim
from .training import MlpSpec, TrainConfig, save_params, train_cfm, write_loss_csv

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        set_option(config, key.strip(), value)
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out = args.out
    return config


def cmd_train(args) -> int:
    config = _config(args)
    target = build_target(config.data)
    tr = config.train
    tcfg = TrainConfig(build_latent(config, target.dim), target, batch_size=tr.batch_size,
                       steps=tr.steps, steps_per_epoch=tr.steps_per_epoch, seed=config.seed,
                       coupling=tr.coupling, lr=tr.lr, beta1=tr.beta1, beta2=tr.beta2)
    result = train_cfm(tcfg, MlpSpec(target.dim, tuple(int(h) for h in tr.hidden)))
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    save_params(out / "model.bin", result.field)
    write_loss_csv(out / "loss.csv", result.epoch_losses)
    (out / "config.ini").write_text(config_to_text(config))
    print(f"final epoch loss {result.epoch_losses[-1]:.6f}; wrote {out / 'model.bin'}")
    return EXIT_OK


def cmd_sample(args) -> int:
    config = _config(args)
    target = build_target(config.data)
    field = build_model(config, target)
    latent = build_latent(config, field.dim)
    x0 = sample_latent(latent, args.n, RngState(config.seed))
    pts = euler_sample(field, x0, args.steps)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_points_csv(out / "samples.csv", pts)
    print(f"wrote {args.n} samples to {out / 'samples.csv'}")
    return EXIT_OK


def cmd_solve(args) -> int:
    config = _config(args)
    manifest = run_experiment(config)
    agg = manifest.aggregate
    print(json.dumps(agg, indent=2))
    print(f"manifest: {Path(config.out) / 'manifest.json'}")
    return EXIT_OK if agg["n_failed"] == 0 else EXIT_RUNTIME


def _load_any(path: str) -> np.ndarray:
    if path.endswith(".csv"):
        return io.read_points_csv(path)
    return io.read_netpbm(path)


def cmd_eval(args) -> int:
    ref, est = _load_any(args.reference), _load_any(args.estimate)
    out = {"psnr": psnr(est, ref, args.peak), "mse": mse(est, ref)}
    if ref.ndim >= 2 and not args.reference.endswith(".csv") and min(ref.shape[-2:]) >= 11:
        out["ssim"] = ssim(est, ref, data_range=args.peak)
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_gridsearch(args) -> int:
    config = _config(args)
    alphas = [float(a) for a in args.alphas.split(",")] if args.alphas else None
    steps = [int(n) for n in args.steps.split(",")] if args.steps else None
    kwargs = {}
    if alphas:
        kwargs["alphas"] = alphas
    if steps:
        kwargs["steps_grid"] = steps
    best, table = grid_search(config, **kwargs)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    write_score_table(out / "scores.csv", table)
    (out / "best.ini").write_text(config_to_text(best))
    print(f"best alpha={best.solver.alpha} N={best.solver.steps}; table in {out / 'scores.csv'}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import run_checks

    failed = 0
    for name, ok, detail in run_checks():
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        failed += not ok
    return EXIT_OK if failed == 0 else EXIT_INVALID


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pnpflow", description="PnP flow matching toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config key, e.g. operator.sigma=0.2")

    p = sub.add_parser("train", help="train an MLP velocity field with CFM")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="draw Euler samples from a velocity field")
    common(p)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--steps", type=int, default=100)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("solve", help="run a restoration experiment")
    common(p)
    p.set_defaults(fn=cmd_solve)

    p = sub.add_parser("eval", help="score an estimate against a reference")
    p.add_argument("--reference", required=True)
    p.add_argument("--estimate", required=True)
    p.add_argument("--peak", type=float, default=2.0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gridsearch", help="search (alpha, N) on the validation split")
    common(p)
    p.add_argument("--alphas", help="comma-separated alpha grid")
    p.add_argument("--steps", help="comma-separated step-count grid")
    p.set_defaults(fn=cmd_gridsearch)

    p = sub.add_parser("check", help="run the property suites")
    p.set_defaults(fn=cmd_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, DomainError, ShapeError, FileNotFoundError, io.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
