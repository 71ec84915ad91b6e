"""Command-line interface: run experiments, sweep an axis, diagnose a model."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import __version__, diagnostics, engine, nn
from .config import (ConfigError, build_config, config_dict, config_items,
                     parse_config, parse_config_raw)
from .data import FormatError
from .engine import DivergenceError, RunConfig
from .regularizers import KINDS

CSV_HEADER = "round,test_acc_global,test_acc_allavg,ce_loss,asd_loss,gd,lr,sampled_count"

SWEEP_AXES = ("lambda", "delta", "regularizer")


def _fmt(v: float) -> str:
    return repr(float(v))


def _fmt_gd(gd: float | None) -> str:
    if gd is None:
        return ""
    if math.isinf(gd):
        return "inf"
    return repr(float(gd))


def _metrics_row(m: engine.RoundMetrics) -> str:
    return ",".join([
        str(m.round),
        _fmt(m.test_acc_global),
        _fmt(m.test_acc_allavg),
        _fmt(m.ce_loss),
        _fmt(m.asd_loss),
        _fmt_gd(m.gd),
        _fmt(m.lr),
        str(m.sampled_count),
    ])


def run_experiment(cfg: RunConfig, out_dir: str, echo=None) -> dict:
    """Execute one run, streaming metrics.csv; returns the summary dict.

    Rows are flushed as rounds complete, so a run that dies mid-way leaves a
    valid partial CSV behind. The summary (and optional spectral report and
    final model) are only written on success.
    """
    cfg = cfg.resolved()
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "metrics.csv")

    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        for key, val in config_items(cfg):
            fh.write(f"# {key} = {val}\n")
        fh.write(f"# version = {__version__}\n")
        fh.write(CSV_HEADER + "\n")
        fh.flush()

        def on_round(m: engine.RoundMetrics) -> None:
            fh.write(_metrics_row(m) + "\n")
            fh.flush()
            if echo is not None:
                echo(m)

        result = engine.run(cfg, on_round=on_round)

    finite_gd = [m.gd for m in result.metrics
                 if m.gd is not None and math.isfinite(m.gd)]
    summary = {
        "version": __version__,
        "seed": cfg.seed,
        "config": config_dict(cfg),
        "rounds_completed": len(result.metrics),
        "final_acc_global": result.metrics[-1].test_acc_global if result.metrics else None,
        "final_acc_allavg": result.metrics[-1].test_acc_allavg if result.metrics else None,
        "gd_max": max(finite_gd) if finite_gd else None,
        "spectral": None,
    }
    if cfg.spectral:
        report = diagnostics.spectral_report(
            result.final_global, result.test,
            iters=cfg.spectral_iters, tol=cfg.spectral_tol,
            probes=cfg.spectral_probes, seed=cfg.spectral_seed)
        summary["spectral"] = report.to_dict()
    if cfg.save_model:
        nn.save_params(os.path.join(out_dir, "model_final.bin"), result.final_global)

    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8",
              newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    every = max(1, cfg.rounds // 10) if cfg.rounds else 1

    def echo(m: engine.RoundMetrics) -> None:
        if m.round % every == 0 or m.round == cfg.rounds - 1:
            gd = f" gd={m.gd:.4f}" if m.gd is not None else ""
            print(f"round {m.round:4d}  acc={m.test_acc_global:.4f} "
                  f"allavg={m.test_acc_allavg:.4f}  ce={m.ce_loss:.4f}{gd}")

    summary = run_experiment(cfg, args.out, echo=echo)
    print(f"final accuracy: global={summary['final_acc_global']} "
          f"all_client_avg={summary['final_acc_allavg']}")
    print(f"wrote {os.path.join(args.out, 'metrics.csv')}")
    return 0


def _apply_axis(values: dict, axis: str, value: str) -> dict:
    out = dict(values)
    if axis == "lambda":
        out["lambda"] = float(value)
    elif axis == "delta":
        out["delta"] = float(value)
    elif axis == "regularizer":
        if value not in KINDS:
            raise ConfigError(f"unknown regularizer {value!r}; expected one of {KINDS}")
        out["regularizer"] = value
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    return out


def _cmd_sweep(args) -> int:
    raw = parse_config_raw(args.config)
    base_seed = int(raw.get("seed", 0))
    axis_values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not axis_values:
        raise ConfigError("sweep needs at least one axis value")

    failures = 0
    rows = []
    for value in axis_values:
        accs = []
        for rep in range(args.repeats):
            # Same derived seed set for every axis value: repeat r always
            # uses base_seed + r, and data/partition seeds derive from it
            # unless the config pinned them explicitly.
            cell = _apply_axis(raw, args.axis, value)
            cell["seed"] = base_seed + rep
            cfg = build_config(cell, source=str(args.config))
            cell_dir = os.path.join(args.out, f"{args.axis}={value}", f"rep{rep}")
            try:
                summary = run_experiment(cfg, cell_dir)
            except (DivergenceError, FormatError, ValueError) as exc:
                failures += 1
                print(f"sweep cell {args.axis}={value} rep{rep} failed: {exc}",
                      file=sys.stderr)
                continue
            accs.append(summary["final_acc_allavg"])
            print(f"{args.axis}={value} rep{rep}: "
                  f"final all-client-avg accuracy {summary['final_acc_allavg']}")
        if accs:
            arr = np.asarray(accs, dtype=np.float64)
            std = arr.std(ddof=1) if arr.size > 1 else 0.0
            rows.append((value, arr.size, _fmt(arr.mean()), _fmt(std)))
        else:
            rows.append((value, 0, "", ""))

    os.makedirs(args.out, exist_ok=True)
    sweep_path = os.path.join(args.out, "sweep.csv")
    with open(sweep_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("axis,value,repeats,final_acc_allavg_mean,final_acc_allavg_std\n")
        for value, n, mean, std in rows:
            fh.write(f"{args.axis},{value},{n},{mean},{std}\n")
    print(f"wrote {sweep_path}")
    return 1 if failures else 0


def _cmd_diagnose(args) -> int:
    cfg = parse_config(args.config)
    params = nn.load_params(args.model)
    _, test = engine.prepare_data(cfg)
    if int(params.dims[0]) != test.dim or int(params.dims[-1]) != test.num_classes:
        raise ConfigError(
            f"model geometry {params.dims.tolist()} does not match the "
            f"config's evaluation data ({test.dim} features, "
            f"{test.num_classes} classes)"
        )
    report = diagnostics.spectral_report(
        params, test, iters=cfg.spectral_iters, tol=cfg.spectral_tol,
        probes=cfg.spectral_probes, seed=cfg.spectral_seed)
    payload = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(payload)
    sys.stdout.write(payload)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Deterministic federated-learning simulator with "
                    "self-distillation regularizers and drift diagnostics.",
    )
    parser.add_argument("--version", action="version", version=f"fedsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a config file")
    p_run.add_argument("config", help="experiment file (flat key = value)")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.set_defaults(fn=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="run one axis of configs with repeats")
    p_sweep.add_argument("config", help="base experiment file")
    p_sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated axis values")
    p_sweep.add_argument("--repeats", type=int, default=3,
                         help="repeats per value (default 3)")
    p_sweep.add_argument("--out", required=True, help="output directory")
    p_sweep.set_defaults(fn=_cmd_sweep)

    p_diag = sub.add_parser("diagnose", help="curvature report for a saved model")
    p_diag.add_argument("config", help="experiment file describing the eval data")
    p_diag.add_argument("--model", required=True, help="saved parameter file")
    p_diag.add_argument("--out", help="also write the JSON report here")
    p_diag.set_defaults(fn=_cmd_diagnose)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
