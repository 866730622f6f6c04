"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data or checkpoint validation error,
3 numerical failure. Errors are reported on stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import contextlib
import datetime as dt
import json
import platform
import sys
from pathlib import Path

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from .autodiff import NonFiniteError, TrainingAborted
from .config import RunConfig, load_config
from .data import CaseDataset, DataValidationError, load_cases, load_directory, write_cases
from .inference import (
    Estimator,
    data_hash,
    dummy_posterior_check,
    posterior_predictive,
    run_sbc,
    sample_posterior,
    summarize_posterior,
    write_delimited,
    write_draws,
    write_forecast,
    write_ranks,
    write_summary,
)
from .models import reference_vector
from .training import CheckpointError, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ helpers
def _versions() -> dict:
    return {"epiflow": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(path: Path, command: str, args: argparse.Namespace, config_hash: str | None,
                   outputs: list, **extra) -> None:
    manifest = {
        "command": command,
        "arguments": {k: v for k, v in vars(args).items() if k != "func"},
        "config_hash": config_hash,
        "seed": args.seed,
        "threads": args.threads,
        "versions": _versions(),
        "created": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
        "outputs": [str(o) for o in outputs],
        **extra,
    }
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _estimator(path: str) -> Estimator:
    return Estimator(load_checkpoint(path))


def _datasets(path: str, cfg: RunConfig, est: Estimator) -> list[CaseDataset]:
    schema = cfg.schema()
    src = Path(path)
    sets = load_directory(src, schema) if src.is_dir() else [load_cases(src, schema)]
    return [ds.select(est.simulator.channels) for ds in sets]


def _meta(est: Estimator, ds: CaseDataset | None, args) -> dict:
    meta = {"checkpoint": est.id, "seed": args.seed}
    if ds is not None:
        meta.update(region=ds.region, start=ds.start.isoformat(), data_hash=data_hash(ds.counts))
    return meta


# ----------------------------------------------------------------- commands
def cmd_train(args) -> list:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    else:
        args.seed = cfg.seed
    tcfg = cfg.train_config(mode=args.mode, iterations=args.iterations, batch_size=args.batch_size)
    from .networks import Amortizer

    sim = cfg.simulator()
    net = Amortizer(cfg.network_config())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log = Path(args.log) if args.log else out.with_name(out.name + ".progress.jsonl")
    with open(log, "w") as fh:
        ckpt = train(tcfg, cfg.space(), sim, net, progress=fh)
    # wall-clock time goes to the manifest so the checkpoint itself is reproducible
    seconds = ckpt.meta.pop("seconds", None)
    save_checkpoint(ckpt, out)
    write_manifest(out.with_name(out.name + ".manifest.json"), "train", args, ckpt.config_hash, [out, log],
                   run_config=cfg.to_dict(), checkpoint_id=ckpt.id, iterations=ckpt.meta["iterations"],
                   training_seconds=seconds)
    print(f"trained {ckpt.meta['iterations']} iterations, final loss {ckpt.history[-1]:.4f} -> {out}")
    return [out, log]


def cmd_simulate(args) -> list:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    args.seed = seed
    sim, space = cfg.simulator(), cfg.space()
    n_days = args.days or cfg.train_config().n_days
    rng = np.random.default_rng(seed)
    if args.medians:
        if cfg.model != "seir":
            raise UsageError("--medians is only available for the seir model")
        theta = np.repeat(reference_vector(sim.param_names[:len(sim.param_names) - sim.n_dummies])[None],
                          args.n, axis=0)
        if sim.n_dummies:
            theta = np.hstack([theta, space.subset(space.names[-sim.n_dummies:]).sample(rng, args.n)])
    else:
        theta = space.sample(rng, args.n)
    batch = sim.simulate_batch(theta, n_days, rng)
    out = _out_dir(args.out)
    cases = _out_dir(out / "cases")
    start = dt.date.fromisoformat(args.start)
    outputs = [out / "parameters.csv"]
    write_delimited(outputs[0], ("sim",) + space.names, [[i, *row] for i, row in enumerate(theta)],
                    {"model": cfg.model, "seed": seed})
    for i in range(args.n):
        if not batch.ok[i]:
            continue
        ds = CaseDataset(f"sim{i:04d}", start, np.round(batch.observed[i]), tuple(sim.channels), sim.population)
        path = cases / f"sim{i:04d}.csv"
        write_cases(path, ds)
        outputs.append(path)
    write_manifest(out / "manifest.json", "simulate", args, cfg.hash(), outputs, n_failed=int((~batch.ok).sum()))
    print(f"wrote {len(outputs) - 1} simulated series to {cases}")
    return outputs


def cmd_infer(args) -> list:
    cfg = load_config(args.config)
    est = _estimator(args.checkpoint)
    before = est.net.weight_hash()
    out = _out_dir(args.out)
    outputs = []
    for k, ds in enumerate(_datasets(args.data, cfg, est)):
        draws = sample_posterior(est, ds.counts, args.samples, rng=np.random.SeedSequence([args.seed, k]))
        draws.seed = args.seed
        draws_path, summary_path = out / f"{ds.region}_draws.csv", out / f"{ds.region}_summary.csv"
        write_draws(draws_path, draws, {"region": ds.region})
        write_summary(summary_path, summarize_posterior(draws), _meta(est, ds, args))
        outputs += [draws_path, summary_path]
    if est.net.weight_hash() != before:
        raise RuntimeError("network weights changed during inference")
    write_manifest(out / "manifest.json", "infer", args, est.ckpt.config_hash, outputs, checkpoint_id=est.id)
    print(f"wrote posterior draws and summaries for {len(outputs) // 2} dataset(s) to {out}")
    return outputs


def cmd_sbc(args) -> list:
    est = _estimator(args.checkpoint)
    ranks = run_sbc(est, n_sims=args.sims, m_sbc=args.draws, rng=args.seed)
    out = _out_dir(args.out)
    write_ranks(out / "ranks.csv", ranks, _meta(est, None, args))
    report = {"threshold": ranks.threshold, "sim_failures": ranks.sim_failures, "parameters": ranks.report()}
    (out / "sbc.json").write_text(json.dumps(report, indent=2) + "\n")
    outputs = [out / "ranks.csv", out / "sbc.json"]
    write_manifest(out / "manifest.json", "sbc", args, est.ckpt.config_hash, outputs, checkpoint_id=est.id)
    n_ok = int(ranks.uniform.sum())
    print(f"SBC: {n_ok}/{len(ranks.names)} parameters pass the chi-square uniformity check")
    return outputs


def cmd_forecast(args) -> list:
    cfg = load_config(args.config)
    est = _estimator(args.checkpoint)
    datasets = _datasets(args.data, cfg, est)
    if len(datasets) != 1:
        raise UsageError("forecast takes a single data file")
    ds = datasets[0]
    rng = np.random.default_rng(args.seed)
    draws = sample_posterior(est, ds.counts, args.samples, rng=rng)
    with _warnings_to_stderr():
        env = posterior_predictive(est, draws, horizon=args.horizon, rng=rng, n_train=len(ds))
    out = _out_dir(args.out)
    dates = ds.future_dates(args.horizon)
    meta = {**_meta(est, ds, args), "divergent_fraction": round(env.divergent_fraction, 4)}
    outputs = [out / "forecast.csv", out / "fit.csv", out / "cumulative.csv"]
    write_forecast(outputs[0], env, dates, meta, horizon_only=True)
    write_forecast(outputs[1], env, dates, meta)
    cum = env.cumulative(anchor=ds.counts[0])
    rows = [[t, dates[t], ch] + [cum[q, t, c] for q in range(len(env.quantiles))]
            for t in range(cum.shape[1]) for c, ch in enumerate(env.channels)]
    write_delimited(outputs[2], ["day", "date", "channel"] + [f"q{100 * q:g}" for q in env.quantiles], rows, meta)
    write_manifest(out / "manifest.json", "forecast", args, est.ckpt.config_hash, outputs, checkpoint_id=est.id,
                   coverage_training_window=env.coverage(ds.counts))
    print(f"{args.horizon}-day forecast for {ds.region} written to {out}")
    return outputs


def cmd_dummy_check(args) -> list:
    est = _estimator(args.checkpoint)
    report = dummy_posterior_check(est, n_test=args.tests, rng=args.seed, m=args.samples)
    out = _out_dir(args.out)
    result = {"dummies": {n: float(k) for n, k in zip(report.names, report.mean_ks)},
              "n_test": args.tests, "samples": args.samples}
    (out / "dummy_check.json").write_text(json.dumps(result, indent=2) + "\n")
    write_manifest(out / "manifest.json", "dummy-check", args, est.ckpt.config_hash, [out / "dummy_check.json"],
                   checkpoint_id=est.id)
    print("mean KS distance: " + ", ".join(f"{n}={k:.3f}" for n, k in result["dummies"].items()))
    return [out / "dummy_check.json"]


@contextlib.contextmanager
def _warnings_to_stderr():
    import warnings

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        yield
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)


# ------------------------------------------------------------------ parser
def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--config", help="run config file or name inside $EPIFLOW_CONFIG_DIR")
    common.add_argument("--seed", type=int, default=None, help="root random seed")
    common.add_argument("--threads", type=int, default=1, help="numeric library threads")

    p = Parser(prog="epiflow", description="Amortized Bayesian inference for epidemic models.")
    p.add_argument("--version", action="version", version=f"epiflow {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=Parser)

    t = sub.add_parser("train", parents=[common], help="train an amortized posterior network")
    t.add_argument("--mode", choices=("offline", "online", "hybrid"))
    t.add_argument("--iterations", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="progress log (JSON lines); default <out>.progress.jsonl")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("simulate", parents=[common], help="simulate case series")
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--days", type=int)
    s.add_argument("--medians", action="store_true", help="use the reference posterior medians (seir)")
    s.add_argument("--start", default="2020-03-01")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    i = sub.add_parser("infer", parents=[common], help="posterior draws and summaries")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True, help="case file or directory of case files")
    i.add_argument("--samples", type=int, default=2000)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("sbc", parents=[common], help="simulation-based calibration")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--sims", type=int, default=1000)
    c.add_argument("--draws", type=int, default=100)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_sbc)

    f = sub.add_parser("forecast", parents=[common], help="posterior predictive forecast")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--horizon", type=int, default=21)
    f.add_argument("--samples", type=int, default=2000)
    f.add_argument("--out", default="forecast")
    f.set_defaults(func=cmd_forecast)

    d = sub.add_parser("dummy-check", parents=[common], help="prior recovery of dummy parameters")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--tests", type=int, default=50)
    d.add_argument("--samples", type=int, default=2000)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dummy_check)
    return p


def _fail(code: int, kind: str, exc: BaseException) -> int:
    reason = " ".join(str(exc).split()) or type(exc).__name__
    print(json.dumps({"error": kind, "code": code, "reason": reason}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("epiflow: a subcommand is required")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        if args.command != "train" and args.command != "simulate" and args.seed is None:
            args.seed = 0
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except (UsageError, FileNotFoundError, IsADirectoryError) as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except (TrainingAborted, NonFiniteError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numerical", exc)
    except (DataValidationError, CheckpointError, ValueError, KeyError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
