"""Command-line front end: rank sweeps, rank selection, ensemble runs, and
fitting user-supplied CSV data.

Experiments are configured by a JSON file matching the SimConfig schema
(lower_snake_case field names; the ridge parameter is spelled "lambda");
flags only override scalars.  Outputs are CSV/JSON files plus a
manifest.json sufficient to re-run the command identically.

Exit codes: 0 ok, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .mc import (
    FitterSpec,
    ensemble_experiment,
    resolve_workers,
    select_rank,
    sweep_ranks,
)
from .multiway import NumericalError
from .optimism import CriterionReport, cv_risk
from .regress import Dataset, fit_cp_regression, fit_tucker_regression, predict_many
from .simgen import SimConfig

SWEEP_HEADER = ["rank", "criterion", "value", "stderr", "n_train", "noise_frac",
                "lambda", "seed"]
ENSEMBLE_HEADER = ["K", "rank", "ens_mean", "ens_stderr", "bound_mean",
                   "bound_stderr", "seed"]


class UsageError(Exception):
    """Configuration or argument problem: exit code 2."""


def _fmt(x) -> str:
    if x is None:
        return ""
    return f"{x:.12g}"


def _rank_str(label) -> str:
    if isinstance(label, (tuple, list)):
        return "x".join(str(int(r)) for r in label)
    return str(int(label))


def _parse_rank(text: str):
    if "x" in text:
        return tuple(int(p) for p in text.split("x"))
    return int(text)


def _load_config(path: str) -> SimConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    try:
        return SimConfig.from_json_dict(raw)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"config {path}: {exc}") from exc


def _apply_overrides(cfg: SimConfig, args) -> SimConfig:
    updates = {}
    for flag, fieldname in (("n_train", "n_train"), ("n_test", "n_test"),
                            ("noise_frac", "noise_frac"), ("seed", "seed"),
                            ("replicates", "replicates"), ("lam", "lam")):
        value = getattr(args, flag, None)
        if value is not None:
            updates[fieldname] = value
    if not updates:
        return cfg
    d = cfg.to_json_dict()
    for k, v in updates.items():
        d["lambda" if k == "lam" else k] = v
    try:
        return SimConfig.from_json_dict(d)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _expand_ranks(spec: str, cfg: SimConfig):
    """'1-6' or '1,2,3'; for a Tucker truth, r expands to (r,..,r)."""
    spec = spec.strip()
    try:
        if "-" in spec and "x" not in spec and "," not in spec:
            lo, hi = spec.split("-")
            values = list(range(int(lo), int(hi) + 1))
        else:
            values = [_parse_rank(p) for p in spec.split(",")]
    except ValueError as exc:
        raise UsageError(f"cannot parse ranks {spec!r}") from exc
    if not values:
        raise UsageError("empty rank list")
    if cfg.true_kind == "tucker":
        nmodes = len(cfg.shape)
        values = [v if isinstance(v, tuple) else (v,) * nmodes for v in values]
    return values


def _write_manifest(out_dir: str, command: str, cfg_dict: dict, outputs, started: float):
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg_dict,
        "seed": cfg_dict.get("seed"),
        "started_utc": datetime.fromtimestamp(started, tz=timezone.utc).isoformat(),
        "elapsed_seconds": time.time() - started,
        "outputs": sorted(outputs),
    }
    path = os.path.join(out_dir, "manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def _open_csv(path: str):
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_sweep(args) -> int:
    started = time.time()
    cfg = _apply_overrides(_load_config(args.config), args)
    ranks = _expand_ranks(args.ranks, cfg)
    criteria = tuple(args.criteria.split(","))
    fitter = FitterSpec(kind=args.fitter)
    workers = resolve_workers(args.threads)
    try:
        report = sweep_ranks(cfg, fitter, ranks, criteria=criteria,
                             cv_folds=args.cv_folds, workers=workers)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "sweep.csv")
    fh, writer = _open_csv(csv_path)
    with fh:
        writer.writerow(SWEEP_HEADER)
        for row in report.rows:
            for crit, value, stderr in _criterion_cells(row, criteria):
                writer.writerow([
                    _rank_str(row.rank_label), crit, _fmt(value), _fmt(stderr),
                    cfg.n_train, _fmt(cfg.noise_frac), _fmt(cfg.lam), cfg.seed,
                ])
    _write_manifest(args.out, "sweep", cfg.to_json_dict(), [csv_path], started)
    print(f"wrote {csv_path}")
    return 0


def _criterion_cells(row: CriterionReport, criteria):
    cells = []
    mapping = {
        "optimism": (row.optimism_mc_mean, row.optimism_mc_stderr),
        "closed": (row.optimism_closed, None),
        "aic": (row.aic, None),
        "bic": (row.bic, None),
        "cv": (row.cv_risk, None),
    }
    for crit in criteria:
        if crit in mapping and mapping[crit][0] is not None:
            cells.append((crit, mapping[crit][0], mapping[crit][1]))
    # always emit the fit-quality rows so `select --stability-filter` can work
    if row.train_mse is not None:
        cells.append(("train_mse", row.train_mse, None))
    if row.test_mse is not None:
        cells.append(("test_mse", row.test_mse, None))
    return cells


def cmd_select(args) -> int:
    rows = {}
    try:
        with open(args.sweep_csv) as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != SWEEP_HEADER:
                raise UsageError(
                    f"{args.sweep_csv} does not look like a sweep.csv "
                    f"(header {reader.fieldnames})"
                )
            for rec in reader:
                label = _parse_rank(rec["rank"])
                rows.setdefault(label, {})[rec["criterion"]] = float(rec["value"])
    except OSError as exc:
        raise UsageError(f"cannot read {args.sweep_csv}: {exc}") from exc
    if not rows:
        raise UsageError(f"{args.sweep_csv} contains no data rows")
    criterion = args.criterion
    field = {"optimism": "optimism_mc_mean", "closed": "optimism_closed",
             "aic": "aic", "bic": "bic", "cv": "cv_risk"}.get(criterion)
    if field is None:
        raise UsageError(f"unknown criterion {criterion!r}")
    reports = []
    for label, vals in rows.items():
        if criterion not in vals:
            raise UsageError(f"criterion {criterion!r} missing for rank {label}")
        reports.append(CriterionReport(
            rank_label=label,
            **{field: vals[criterion]},
            train_mse=vals.get("train_mse"),
        ))
    from .mc import SweepReport

    report = SweepReport(rows=tuple(reports),
                         config=SimConfig(shape=(1,), n_train=2, replicates=2),
                         elapsed=0.0)
    chosen = select_rank(report, criterion,
                         stability_multiple=args.stability_filter)
    value = None
    for rec in reports:
        if rec.rank_label == chosen:
            value = getattr(rec, field)
    print(json.dumps({"criterion": criterion,
                      "rank": _rank_str(chosen),
                      "value": value}))
    return 0


def cmd_ensemble(args) -> int:
    started = time.time()
    cfg = _apply_overrides(_load_config(args.config), args)
    ks = [int(k) for k in args.members.split(",")]
    rank = args.rank if args.rank is not None else int(cfg.true_rank)
    if any(k < 1 for k in ks):
        raise UsageError("member counts must be positive")
    if args.subset_size < 1 or args.subset_size > cfg.n_train:
        raise UsageError(
            f"subset size {args.subset_size} invalid for n_train={cfg.n_train}"
        )
    workers = resolve_workers(args.threads)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "ensemble.csv")
    fh, writer = _open_csv(csv_path)
    with fh:
        writer.writerow(ENSEMBLE_HEADER)
        for k in ks:
            ens, bound = ensemble_experiment(cfg, k, args.subset_size, rank,
                                             workers=workers)
            writer.writerow([k, _rank_str(rank), _fmt(ens.mean), _fmt(ens.stderr),
                             _fmt(bound.mean), _fmt(bound.stderr), cfg.seed])
    _write_manifest(args.out, "ensemble", cfg.to_json_dict(), [csv_path], started)
    print(f"wrote {csv_path}")
    return 0


def cmd_fit(args) -> int:
    started = time.time()
    shape = tuple(int(s) for s in args.shape.split(","))
    if any(s < 1 for s in shape):
        raise UsageError("mode sizes must be positive")
    rank = _parse_rank(args.rank)
    if args.model == "cp":
        if not isinstance(rank, int) or rank < 1:
            raise UsageError("CP rank must be a positive integer")
    else:
        rank = (rank,) * len(shape) if isinstance(rank, int) else rank
        if len(rank) != len(shape) or any(r < 1 for r in rank):
            raise UsageError("Tucker rank must have one positive entry per mode")

    d = int(np.prod(shape))
    covs, ys = [], []
    try:
        with open(args.data) as fh:
            for i, rec in enumerate(csv.reader(fh), start=1):
                if not rec:
                    continue
                if len(rec) != d + 1:
                    raise UsageError(
                        f"row {i} of {args.data} has {len(rec)} fields, "
                        f"expected {d + 1} (vec entries plus response)"
                    )
                values = np.array([float(v) for v in rec])
                covs.append(values[:d].reshape(shape, order="F"))
                ys.append(values[d])
    except OSError as exc:
        raise UsageError(f"cannot read {args.data}: {exc}") from exc
    if not covs:
        raise UsageError(f"{args.data} contains no data rows")
    data = Dataset(covariates=np.stack(covs), responses=np.array(ys))
    lam = args.lam

    def fit(dataset: Dataset):
        if args.model == "cp":
            return fit_cp_regression(dataset, rank, lam, seed=args.seed)
        return fit_tucker_regression(dataset, rank, lam, seed=args.seed)

    model = fit(data)
    folds = min(args.cv_folds, data.n)
    risk = cv_risk(data, lambda tr: (lambda covs: predict_many(fit(tr), covs)),
                   folds, seed=args.seed)

    # hold-out MC optimism from repeated splits of the provided data
    rng = np.random.default_rng(np.random.SeedSequence(entropy=args.seed,
                                                       spawn_key=(71,)))
    opts = []
    n_hold = max(1, int(round(data.n * args.holdout_frac)))
    if data.n - n_hold < 2:
        raise UsageError("not enough rows for the hold-out split")
    for _ in range(args.mc_splits):
        perm = rng.permutation(data.n)
        hold, keep = perm[:n_hold], perm[n_hold:]
        sub = Dataset(covariates=data.covariates[keep], responses=data.responses[keep])
        m = fit(sub)
        test_mse = float(np.mean(
            (data.responses[hold] - predict_many(m, data.covariates[hold])) ** 2))
        opts.append(test_mse - m.train_mse)
    opts = np.asarray(opts)

    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "fit.json")
    result = {
        "model": args.model,
        "rank": _rank_str(rank),
        "lambda": model.lam,
        "shape": list(shape),
        "n": data.n,
        "train_mse": model.train_mse,
        "cv_risk": risk,
        "cv_folds": folds,
        "mc_optimism": {
            "mean": float(opts.mean()),
            "stderr": float(opts.std(ddof=1) / np.sqrt(len(opts))) if len(opts) > 1 else 0.0,
            "splits": int(args.mc_splits),
            "holdout_frac": args.holdout_frac,
        },
        "converged": bool(model.fit_meta.get("converged", False)),
    }
    with open(out_path, "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(args.out, "fit",
                    {"data": args.data, "shape": list(shape), "model": args.model,
                     "rank": _rank_str(rank), "lambda": lam, "seed": args.seed},
                    [out_path], started)
    print(json.dumps({"train_mse": model.train_mse, "cv_risk": risk,
                      "mc_optimism": result["mc_optimism"]["mean"]}))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tensopt",
        description="Low-rank tensor regression with optimism-based rank selection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def _common(p):
        p.add_argument("--threads", type=int, default=1,
                       help="worker processes (env TENSOPT_THREADS overrides)")

    p = sub.add_parser("sweep", help="rank sweep with MC/closed-form criteria")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ranks", default="1-6")
    p.add_argument("--criteria", default="optimism,closed")
    p.add_argument("--fitter", choices=["oracle_cp", "cp", "tucker"],
                   default="oracle_cp")
    p.add_argument("--cv-folds", type=int, default=5)
    for flag, typ in (("--n-train", int), ("--n-test", int), ("--noise-frac", float),
                      ("--seed", int), ("--replicates", int), ("--lam", float)):
        p.add_argument(flag, dest=flag[2:].replace("-", "_"), type=typ, default=None)
    _common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("select", help="pick the rank minimizing a criterion")
    p.add_argument("sweep_csv")
    p.add_argument("--criterion", default="optimism")
    p.add_argument("--stability-filter", type=float, default=None, nargs="?",
                   const=10.0,
                   help="exclude ranks with train MSE above this multiple of the "
                        "sweep median (default multiple: 10)")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("ensemble", help="ensemble optimism vs weighted-average bound")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--members", default="2,4,8", help="comma list of K values")
    p.add_argument("--subset-size", type=int, required=True)
    p.add_argument("--rank", type=int, default=None)
    for flag, typ in (("--n-train", int), ("--n-test", int), ("--noise-frac", float),
                      ("--seed", int), ("--replicates", int), ("--lam", float)):
        p.add_argument(flag, dest=flag[2:].replace("-", "_"), type=typ, default=None)
    _common(p)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("fit", help="fit a CSV dataset (vec entries + response per row)")
    p.add_argument("--data", required=True)
    p.add_argument("--shape", required=True, help="comma-separated mode sizes")
    p.add_argument("--model", choices=["cp", "tucker"], default="cp")
    p.add_argument("--rank", required=True)
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--cv-folds", type=int, default=5)
    p.add_argument("--mc-splits", type=int, default=20)
    p.add_argument("--holdout-frac", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_fit)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
