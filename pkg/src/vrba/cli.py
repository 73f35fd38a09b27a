"""Command-line entry point: train-pinn, train-op, verify, report."""

from __future__ import annotations

import argparse
import json
import os
import sys


def _cap_threads():
    """VRBA_THREADS caps BLAS/parallel thread pools (best effort: set before
    numpy spins up its backends)."""
    cap = os.environ.get("VRBA_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _add_common(p):
    p.add_argument("--config", default=None, help="JSON configuration file")
    p.add_argument("--mode", default=None, help="baseline | vrba_weighting | vrba_sampling | vrba_hybrid")
    p.add_argument("--potential", default=None, help="exponential | quadratic")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory for run artifacts")


def build_parser():
    parser = argparse.ArgumentParser(prog="vrba", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-pinn", help="train a PINN problem")
    _add_common(p)
    p.add_argument("--problem", default=None, help="poisson | burgers | allen_cahn")

    p = sub.add_parser("train-op", help="train the toy operator model")
    _add_common(p)
    p.add_argument("--dataset", default=None, help="dataset file (generated when absent)")

    p = sub.add_parser("verify", help="run the variational-formula checks")
    p.add_argument("--out", default=None, help="optional CSV output path")

    p = sub.add_parser("report", help="aggregate multi-seed run directories")
    p.add_argument("run_dirs", nargs="+", help="run directories with summary.json")
    p.add_argument("--out", default=None, help="optional CSV output path")
    return parser


def _overrides(args, keys):
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _write_run_dir(out_dir, cfg, records_path_hint, summary):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        fh.write(cfg.to_json() + "\n")
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        fh.write(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def cmd_train_pinn(args):
    from .config import parse_config, require
    from . import models
    from .problems import TrainingDiverged, train_pinn

    cfg = parse_config(args.config, _overrides(args, ("problem", "mode", "potential", "seed", "iters", "out")))
    require(cfg, "problem")
    out_dir = cfg.out or f"runs/{cfg.problem}-{cfg.mode}-seed{cfg.seed}"
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "log.csv")
    try:
        result = train_pinn(cfg, log_path=log_path)
    except TrainingDiverged as err:
        print(f"aborted: {err}", file=sys.stderr)
        if err.record is not None:
            print(err.record.csv_row(), file=sys.stderr)
        return 3
    _write_run_dir(out_dir, cfg, log_path, result.summary)
    models.save_checkpoint(os.path.join(out_dir, "checkpoint.txt"),
                           result.params, result.model_config, cfg.seed)
    final = result.summary["final"]
    print(f"{cfg.problem} {cfg.mode}/{cfg.potential} seed={cfg.seed}: "
          f"rel_l2={final['rel_l2']:.4e} loss_E={final['loss_E']:.4e} -> {out_dir}")
    return 0


def cmd_train_op(args):
    from .config import parse_config
    from .operators import (
        OscillatorCoefficients, generate_dataset, load_dataset,
        save_dataset, save_operator_checkpoint, train_operator,
    )

    cfg = parse_config(args.config, _overrides(args, ("mode", "potential", "seed", "iters", "out", "dataset")))
    out_dir = cfg.out or f"runs/operator-{cfg.mode}-seed{cfg.seed}"
    os.makedirs(out_dir, exist_ok=True)
    if cfg.dataset and os.path.exists(cfg.dataset):
        ds = load_dataset(cfg.dataset)
    else:
        ds = generate_dataset(
            cfg.n_func, cfg.n_sensor, cfg.n_grid, cfg.kernel_length,
            OscillatorCoefficients(), seed=cfg.dataset_seed,
            t_final=cfg.t_final, ramp_tau=cfg.ramp_tau,
        )
        path = cfg.dataset or os.path.join(out_dir, "dataset.bin")
        save_dataset(path, ds)
    log_path = os.path.join(out_dir, "log.csv")
    try:
        result = train_operator(ds, cfg, log_path=log_path)
    except RuntimeError as err:
        print(f"aborted: {err}", file=sys.stderr)
        return 3
    _write_run_dir(out_dir, cfg, log_path, result.summary)
    save_operator_checkpoint(os.path.join(out_dir, "checkpoint.txt"),
                             result.params, result.model, cfg.seed)
    final = result.summary["final"]
    print(f"operator {cfg.mode}/{cfg.potential} seed={cfg.seed}: "
          f"test_rel_l2={final['test_rel_l2']:.4e} -> {out_dir}")
    return 0


def cmd_verify(args):
    from .varlab import run_verification

    rows = run_verification()
    lines = ["check,measured,tolerance,status"] + [r.csv_row() for r in rows]
    text = "\n".join(lines)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    failed = [r for r in rows if not r.passed]
    print(f"\n{len(rows) - len(failed)}/{len(rows)} checks passed")
    return 1 if failed else 0


_REPORT_FIELDS = ("rel_l2", "test_rel_l2", "loss_E", "loss", "variance", "snr")


def cmd_report(args):
    import numpy as np

    rows = []
    for run_dir in args.run_dirs:
        with open(os.path.join(run_dir, "summary.json")) as fh:
            summary = json.load(fh)
        final = summary.get("final", {})
        rows.append({
            "run": run_dir,
            "mode": summary.get("mode", ""),
            "potential": summary.get("potential", ""),
            "seed": summary.get("seed", ""),
            **{k: final[k] for k in _REPORT_FIELDS if k in final},
        })
    metrics = [k for k in _REPORT_FIELDS if all(k in r for r in rows)]
    header = ["run", "mode", "potential", "seed"] + metrics
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(str(r[k]) for k in header))
    for stat, fn in (("median", np.median), ("iqr", lambda v: np.subtract(*np.percentile(v, [75, 25])))):
        cells = [stat, "", "", ""]
        for k in metrics:
            vals = np.array([float(r[k]) for r in rows])
            cells.append(repr(float(fn(vals))))
        lines.append(",".join(cells))
    text = "\n".join(lines)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return 0


def main(argv=None):
    _cap_threads()
    args = build_parser().parse_args(argv)
    handlers = {
        "train-pinn": cmd_train_pinn,
        "train-op": cmd_train_op,
        "verify": cmd_verify,
        "report": cmd_report,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
