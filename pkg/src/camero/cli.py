"""Config-driven experiment runner.

Subcommands:

* ``run`` — execute a config's sweep points x seeds, writing one report
  directory per run plus an index.json; deterministic re-runs produce
  identical artifacts (timing fields aside).
* ``compare`` — aggregate one or more indexes into a method comparison
  table (CSV and aligned text), mean +/- std over seeds per row.
* ``figdata`` — emit long-format (x, series, value, seed) CSV for one of
  the supported diagnostic figures.
* ``predict`` — batch prediction from a checkpoint over a feature CSV.

Exit codes: 0 success, 1 config/validation problem, 2 runtime failure.
The default output root is ./runs, overridable with $CAMERO_OUT_ROOT.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, build_dataset, config_from_dict, parse_config
from .ensemble import predict as ensemble_predict
from .errors import CameroError, ContractError, SpecError
from .metrics import seed_variance
from .model import load_checkpoint
from .train import RunReport, run_training

OUT_ROOT_ENV = "CAMERO_OUT_ROOT"

FIGURES = {
    "branch_similarity": "model.share_depth",
    "diversity_vs_strength": "perturbation.p",
    "variance_vs_strength": "perturbation.p",
    "alpha_sweep": "train.alpha",
}

#: window of trailing steps summarized by the diversity figure
DIVERSITY_WINDOW = 100


# -- atomic artifact writing -----------------------------------------------------

def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _steps_csv(report: RunReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "task_loss", "consistency_loss", "total_loss",
                     "dev_metric"])
    dev_at = {e.step: e.ensemble_metric for e in report.evals}
    for s in report.steps:
        dev = repr(dev_at[s.step]) if s.step in dev_at else ""
        writer.writerow([s.step, repr(s.task_loss), repr(s.consistency_loss),
                         repr(s.total_loss), dev])
    return buf.getvalue()


def _run_id(overrides: dict, seed: int) -> str:
    parts = [f"{key}={value}" for key, value in sorted(overrides.items())]
    parts.append(f"seed={seed}")
    return re.sub(r"[^\w.=-]", "-", "__".join(parts))


def _execute_run(payload: dict) -> dict:
    """Worker: one (sweep point, seed) training run, written to disk."""
    config, errors = config_from_dict(payload["raw"])
    if errors:
        raise SpecError("; ".join(errors))
    if payload["overrides"]:
        config = config.with_overrides(payload["overrides"])
    dataset = build_dataset(config.dataset)
    report = run_training(config.model, config.train_for_seed(payload["seed"]), dataset)

    run_dir = Path(payload["run_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_atomic(run_dir / "report.json",
                  json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    _write_atomic(run_dir / "steps.csv", _steps_csv(report))
    return {
        "id": run_dir.name,
        "dir": run_dir.name,
        "seed": payload["seed"],
        "overrides": payload["overrides"],
        "method": report.method,
        "num_branches": config.model.num_branches,
        "metric_name": report.metric_name,
        "final_metric": report.final_metric,
        "parameter_count": report.parameter_count,
        "status": "ok",
    }


def _resolve_out_dir(args_out, config: ExperimentConfig, config_path: Path) -> Path:
    if args_out:
        return Path(args_out)
    if config.out:
        return Path(config.out)
    root = os.environ.get(OUT_ROOT_ENV, "runs")
    return Path(root) / config_path.stem


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise SpecError(f"--set needs key=value, got {text!r}")
    key, raw_value = text.split("=", 1)
    try:
        import tomllib as _toml
    except ModuleNotFoundError:
        import tomli as _toml
    try:
        value = _toml.loads(f"v = {raw_value}")["v"]
    except _toml.TOMLDecodeError:
        value = raw_value  # bare string
    return key.strip(), value


def cmd_run(args) -> int:
    config_path = Path(args.config)
    if not config_path.exists():
        print(f"config not found: {config_path}", file=sys.stderr)
        return 1
    config, errors = parse_config(config_path.read_text(encoding="utf-8"))
    if errors:
        print("invalid config:", file=sys.stderr)
        for problem in errors:
            print(f"  {problem}", file=sys.stderr)
        return 1
    overrides = {}
    if args.seeds:
        overrides["run.seeds"] = [int(s) for s in args.seeds.split(",")]
    for item in args.set or []:
        key, value = _parse_override(item)
        overrides[key] = value
    if overrides:
        config = config.with_overrides(overrides)

    out_dir = _resolve_out_dir(args.out, config, config_path)
    out_dir.mkdir(parents=True, exist_ok=True)

    payloads = []
    for point in config.sweep_points():
        for seed in config.seeds:
            run_id = _run_id(point, seed)
            payloads.append({
                "raw": config.raw,
                "overrides": point,
                "seed": seed,
                "run_dir": str(out_dir / run_id),
            })

    index = {"config": config.raw, "runs": []}
    index_path = out_dir / "index.json"
    failures = 0

    def record(entry: dict) -> None:
        index["runs"].append(entry)
        _write_atomic(index_path, json.dumps(index, sort_keys=True, indent=2) + "\n")

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_execute_run, p) for p in payloads]
            for payload, future in zip(payloads, futures):
                try:
                    record(future.result())
                except CameroError as exc:
                    failures += 1
                    print(f"run {payload['run_dir']} failed: {exc}", file=sys.stderr)
                    record({"id": Path(payload["run_dir"]).name,
                            "seed": payload["seed"],
                            "overrides": payload["overrides"],
                            "status": "failed", "error": str(exc)})
    else:
        for payload in payloads:
            try:
                record(_execute_run(payload))
            except CameroError as exc:
                failures += 1
                print(f"run {payload['run_dir']} failed: {exc}", file=sys.stderr)
                record({"id": Path(payload["run_dir"]).name,
                        "seed": payload["seed"],
                        "overrides": payload["overrides"],
                        "status": "failed", "error": str(exc)})

    ok = len(payloads) - failures
    print(f"{ok}/{len(payloads)} runs completed; index at {index_path}")
    return 2 if failures else 0


# -- compare ---------------------------------------------------------------------

def _load_index(path: Path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _load_report(index_path: Path, entry: dict) -> RunReport:
    report_path = index_path.parent / entry["dir"] / "report.json"
    with open(report_path, "r", encoding="utf-8") as fh:
        return RunReport.from_dict(json.load(fh))


def cmd_compare(args) -> int:
    groups: dict[tuple, list[RunReport]] = {}
    for index_arg in args.indexes:
        index_path = Path(index_arg)
        index = _load_index(index_path)
        for entry in index["runs"]:
            if entry.get("status") != "ok":
                continue
            key = (entry["method"], entry["num_branches"],
                   json.dumps(entry["overrides"], sort_keys=True))
            groups.setdefault(key, []).append(_load_report(index_path, entry))

    if not groups:
        print("no completed runs found", file=sys.stderr)
        return 1
    metric_names = {reports[0].metric_name for reports in groups.values()}
    if len(metric_names) > 1:
        raise ContractError(f"incompatible metric sets: {sorted(metric_names)}")
    metric_name = metric_names.pop()

    rows = []
    for (method, m, overrides_json) in sorted(groups):
        reports = groups[(method, m, overrides_json)]
        if len(reports) >= 2:
            summary = seed_variance(reports)
            mean, std = summary.mean, repr(summary.std)
        else:
            mean, std = reports[0].final_metric, ""
        overrides = json.loads(overrides_json)
        rows.append({
            "method": method,
            "num_branches": m,
            "parameters": reports[0].parameter_count,
            "metric": metric_name,
            "mean": repr(mean),
            "std": std,
            "n_runs": len(reports),
            "overrides": ";".join(f"{k}={v}" for k, v in sorted(overrides.items())),
        })

    fields = ["method", "num_branches", "parameters", "metric", "mean", "std",
              "n_runs", "overrides"]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    csv_text = buf.getvalue()
    if args.out:
        _write_atomic(Path(args.out), csv_text)

    widths = {f: max(len(f), *(len(str(r[f])) for r in rows)) for f in fields}
    print("  ".join(f.ljust(widths[f]) for f in fields))
    for r in rows:
        print("  ".join(str(r[f]).ljust(widths[f]) for f in fields))
    return 0


# -- figdata ---------------------------------------------------------------------

def _figure_value(figure: str, report: RunReport) -> float:
    if figure == "diversity_vs_strength":
        trace = [s.consistency_loss for s in report.steps[-DIVERSITY_WINDOW:]]
        return float(np.mean(trace))
    if figure == "branch_similarity":
        sim = np.array(report.similarity)
        off = sim[~np.eye(len(sim), dtype=bool)]
        return float(off.mean())
    return report.final_metric  # variance_vs_strength, alpha_sweep


_FIGURE_SERIES = {
    "branch_similarity": "mean_offdiag_similarity",
    "diversity_vs_strength": f"consistency_final{DIVERSITY_WINDOW}",
    "variance_vs_strength": "final_metric",
    "alpha_sweep": "final_metric",
}


def cmd_figdata(args) -> int:
    index_path = Path(args.index)
    index = _load_index(index_path)
    axis = FIGURES[args.figure]
    if axis not in index["config"].get("sweep", {}):
        raise ContractError(
            f"figdata {args.figure} needs a sweep over {axis}, which the index lacks")

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["x", "series", "value", "seed"])
    series = _FIGURE_SERIES[args.figure]
    for entry in index["runs"]:
        if entry.get("status") != "ok":
            continue
        report = _load_report(index_path, entry)
        x = entry["overrides"][axis]
        writer.writerow([repr(x) if isinstance(x, float) else x, series,
                         repr(_figure_value(args.figure, report)), entry["seed"]])
    text = buf.getvalue()
    if args.out:
        _write_atomic(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return 0


# -- predict ---------------------------------------------------------------------

def _read_feature_csv(path: Path) -> np.ndarray:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = [row for row in csv.reader(fh) if row]
    if not rows:
        raise SpecError(f"{path}: empty feature file")

    def numeric(row):
        try:
            return [float(c) for c in row]
        except ValueError:
            return None

    first = numeric(rows[0])
    body = rows if first is not None else rows[1:]
    parsed = [numeric(row) for row in body]
    if any(p is None for p in parsed):
        raise SpecError(f"{path}: non-numeric feature rows")
    return np.asarray(parsed, dtype=np.float64)


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    features = _read_feature_csv(Path(args.input))
    pred = ensemble_predict(model, features)
    m = model.num_branches

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if model.spec.task == "classification":
        writer.writerow([f"branch{j}_label" for j in range(1, m + 1)] + ["ensemble_label"])
        branch_labels = [g.argmax(axis=-1) for g in pred.branch_logits]
        for i in range(len(features)):
            writer.writerow([int(bl[i]) for bl in branch_labels] + [int(pred.labels[i])])
    else:
        writer.writerow([f"branch{j}_value" for j in range(1, m + 1)] + ["ensemble_value"])
        for i in range(len(features)):
            writer.writerow([repr(float(g[i, 0])) for g in pred.branch_logits]
                            + [repr(float(pred.values[i]))])
    text = buf.getvalue()
    if args.out:
        _write_atomic(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return 0


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="camero",
        description="consistency-regularized weight-shared ensemble experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a config's sweep x seeds")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", help="output directory (default: config [run].out, "
                                     f"else ${OUT_ROOT_ENV}/<config-stem>)")
    p_run.add_argument("--seeds", help="comma-separated seed list override")
    p_run.add_argument("--jobs", type=int, default=1, help="parallel worker count")
    p_run.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="aggregate indexes into a method table")
    p_cmp.add_argument("indexes", nargs="+")
    p_cmp.add_argument("--out", help="also write the table as CSV here")
    p_cmp.set_defaults(func=cmd_compare)

    p_fig = sub.add_parser("figdata", help="plot-ready CSV for a diagnostic figure")
    p_fig.add_argument("index")
    p_fig.add_argument("--figure", required=True, choices=sorted(FIGURES))
    p_fig.add_argument("--out")
    p_fig.set_defaults(func=cmd_figdata)

    p_pred = sub.add_parser("predict", help="batch predictions from a checkpoint")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--input", required=True, help="feature CSV")
    p_pred.add_argument("--out")
    p_pred.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SpecError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 1
    except CameroError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
