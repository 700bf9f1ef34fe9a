"""Command line entry point: ``cgsta <command> ...``.

Exit codes: 0 success, 1 usage/config/data error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, DataConfig, RunConfig, load_config, override
from .dataio import (DataError, SyntheticConfig, TimeSeries, apply_normalizer,
                     gen_synthetic_with_log, load_csv, load_labels, make_windows, save_csv)
from .metrics import (MetricError, aggregate_table, evaluate, write_aggregate_csv,
                      write_metrics_csv)
from .model import score_series, window_terms
from .trainer import (CDS_COLUMNS, HISTORY_COLUMNS, VARIANTS, CheckpointError, TrainingError,
                      load_checkpoint, save_checkpoint, train)

log = logging.getLogger("cgsta")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
ALPHA_GRID = (0.70, 0.75, 0.80, 0.85, 0.90, 0.95)
GAMMA_GRID = (0.80, 0.85, 0.90, 0.95)
BETA_GRID = (0.0, 0.1, 0.2, 0.35, 0.5)
SWEEP_COLUMNS = ("param", "value", "seed", "auroc", "auprc")
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ plumbing

def fingerprint(series: TimeSeries) -> dict:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(series.values[0], dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(series.values[-1], dtype="<f8").tobytes())
    return {"length": series.T, "K": series.K, "edge_rows_sha256": h.hexdigest()}


def write_manifest(out: Path, command: str, config: dict, seed, data: dict | None,
                   extra: dict | None = None) -> None:
    """One manifest per output directory; ``created`` is the only volatile field."""
    doc = {"command": command, "tool_version": __version__, "seed": seed,
           "config": config, "data": data, **(extra or {}),
           "created": time.strftime("%Y-%m-%dT%H:%M:%S")}
    (out / MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_rows(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c]) for c in columns])


def _cell(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_file(data: Path, name: str) -> Path:
    p = data / name if data.is_dir() else data
    if not p.exists():
        raise DataError(f"data file not found: {p}")
    return p


def load_train(data: Path, dcfg: DataConfig) -> TimeSeries:
    path = _data_file(data, dcfg.train_file)
    # a label column in the training file is tolerated and ignored
    label = dcfg.label_column if _has_column(path, dcfg) else None
    return load_csv(path, dcfg.has_header, label, dcfg.dropped, dcfg.fill_missing)


def load_test(data: Path, dcfg: DataConfig, need_labels: bool) -> TimeSeries:
    path = _data_file(data, dcfg.test_file) if data.is_dir() else data
    if dcfg.label_file:
        series = load_csv(path, dcfg.has_header, None, dcfg.dropped, dcfg.fill_missing)
        lab_path = data / dcfg.label_file if data.is_dir() else path.parent / dcfg.label_file
        if lab_path.exists():
            labels = load_labels(lab_path, dcfg.label_column, dcfg.has_header)
            if labels.size != series.T:
                raise DataError(f"{lab_path}: {labels.size} labels for {series.T} rows")
            series = TimeSeries(series.values, series.variable_names, labels)
    else:
        label = dcfg.label_column if _has_column(path, dcfg) else None
        series = load_csv(path, dcfg.has_header, label, dcfg.dropped, dcfg.fill_missing)
    if need_labels and series.labels is None:
        raise DataError(f"{path}: evaluation needs labels (column {dcfg.label_column!r})")
    return series


def _has_column(path: Path, dcfg: DataConfig) -> bool:
    if not dcfg.has_header:
        return False
    with open(path, newline="", encoding="utf-8") as fh:
        first = next(csv.reader(fh), [])
    return dcfg.label_column in [h.strip() for h in first]


def _resolve(cfg: RunConfig, series: TimeSeries, variant: str | None = None,
             seed: int | None = None) -> RunConfig:
    """Bind the model width to the data and apply command-line overrides."""
    model = replace(cfg.model, K=series.K)
    if variant is not None:
        cfg = RunConfig(cfg.model, replace(cfg.train, variant=variant), cfg.data)
    if seed is not None:
        cfg = RunConfig(cfg.model, replace(cfg.train, seed=seed), cfg.data)
    model = replace(model, single_scale=cfg.train.variant == "no_dlgc")
    out = RunConfig(model, cfg.train, cfg.data)
    out.validate()
    return out


def _config(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def fit_and_eval(cfg: RunConfig, train_series: TimeSeries, test_series: TimeSeries,
                 stride_test: int = 1):
    """Train one run and score the test series. Returns (TrainResult, ScoreSeries, EvalResult)."""
    result = train(cfg.train, cfg.model, train_series)
    model = result.model
    scores = score_series(model, apply_normalizer(model.normalizer, test_series), stride_test)
    ev = evaluate(scores.scores, test_series.labels, cfg.train.seed)
    return result, scores, ev


def write_scores(path: Path, scores, labels=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "score", "coverage"] + (["label"] if labels is not None else []))
        for t in range(scores.scores.size):
            s = scores.scores[t]
            row = [t, "" if np.isnan(s) else repr(float(s)), int(scores.coverage[t])]
            if labels is not None:
                row.append(int(labels[t]))
            w.writerow(row)


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    cfg = SyntheticConfig(K=args.k, n_groups=args.groups, T_train=args.t_train,
                          T_test=args.t_test, anomaly_rate=args.rate, seed=args.seed)
    train_s, test_s, segments = gen_synthetic_with_log(cfg)
    out = _outdir(args.out)
    save_csv(out / "train.csv", train_s)
    save_csv(out / "test.csv", test_s)
    with open(out / "anomalies.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "start", "length", "variables"])
        for sg in segments:
            w.writerow([sg.kind, sg.start, sg.length, " ".join(map(str, sg.variables))])
    write_manifest(out, "synth", asdict(cfg), cfg.seed, fingerprint(test_s),
                   {"label_rate": float(test_s.labels.mean())})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args.config)
    data = Path(args.data)
    series = load_train(data, cfg.data)
    cfg = _resolve(cfg, series, args.variant)
    out = _outdir(args.out)
    try:
        result = train(cfg.train, cfg.model, series)
    except TrainingError as exc:
        diag = out / "diagnostics.json"
        diag.write_text(json.dumps({"step": exc.step, "error": str(exc),
                                    "last_terms": exc.last_terms}, indent=2) + "\n")
        print(f"numeric failure: {exc}; diagnostics in {diag}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(out / "checkpoint.cgsta", result.model, result.bank, cfg.train)
    _write_rows(out / "history.csv", HISTORY_COLUMNS, result.history)
    _write_rows(out / "cds_log.csv", CDS_COLUMNS, result.cds_log)
    with open(out / "augment_log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "row", "strategy"])
        w.writerows(result.augment_log)
    write_manifest(out, "train", cfg.as_dict(), cfg.train.seed, fingerprint(series),
                   {"best_epoch": result.best_epoch, "steps": len(result.history)})
    return EXIT_OK


def _load_model(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc


def _scored_test(args, need_labels: bool):
    model, bank, tcfg = _load_model(args.checkpoint)
    dcfg = _config(getattr(args, "config", None)).data
    series = load_test(Path(args.data), dcfg, need_labels)
    if series.K != model.cfg.K:
        raise DataError(f"checkpoint expects K={model.cfg.K}, data has K={series.K}")
    scores = score_series(model, apply_normalizer(model.normalizer, series),
                          getattr(args, "stride", 1))
    return model, tcfg, series, scores


def cmd_eval(args) -> int:
    model, tcfg, series, scores = _scored_test(args, need_labels=True)
    out = _outdir(args.out)
    write_scores(out / "scores.csv", scores, series.labels)
    ev = evaluate(scores.scores, series.labels, tcfg.seed)
    write_metrics_csv(out / "metrics.csv", [(Path(args.data).stem, tcfg.variant, ev)])
    write_manifest(out, "eval", {"checkpoint": str(args.checkpoint), "train": asdict(tcfg)},
                   tcfg.seed, fingerprint(series))
    print(f"auroc={ev.auroc:.4f} auprc={ev.auprc:.4f} f1={ev.f1:.4f}")
    return EXIT_OK


def cmd_score(args) -> int:
    model, tcfg, series, scores = _scored_test(args, need_labels=False)
    out = _outdir(args.out)
    write_scores(out / "scores.csv", scores, series.labels)
    write_manifest(out, "score", {"checkpoint": str(args.checkpoint), "stride": args.stride},
                   tcfg.seed, fingerprint(series))
    return EXIT_OK


def _run_job(job: tuple) -> tuple:
    """One isolated train+eval; returns (key, EvalResult or error text)."""
    key, cfg, train_s, test_s = job
    try:
        _, _, ev = fit_and_eval(cfg, train_s, test_s)
        return key, ev
    except (TrainingError, MetricError, ValueError) as exc:
        return key, f"{type(exc).__name__}: {exc}"


def _run_jobs(jobs: list, parallel: int) -> list:
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_run_job, jobs))
    done = []
    for job in jobs:
        done.append(_run_job(job))
        log.info("finished %s", done[-1][0])
    return done


def _seed_list(n: int) -> list[int]:
    if n < 1:
        raise UsageError("--seeds must be >= 1")
    return list(range(n))


def cmd_ablate(args) -> int:
    base = _config(args.config)
    data = Path(args.data)
    train_s = load_train(data, base.data)
    test_s = load_test(data, base.data, need_labels=True)
    jobs = [((v, s), _resolve(base, train_s, v, s), train_s, test_s)
            for v in VARIANTS for s in _seed_list(args.seeds)]
    done = _run_jobs(jobs, args.parallel)
    out = _outdir(args.out)
    dataset = data.name if data.is_dir() else data.stem
    rows = [(dataset, v, ev) for (v, s), ev in done if not isinstance(ev, str)]
    failures = {f"{v}/{s}": ev for (v, s), ev in done if isinstance(ev, str)}
    write_metrics_csv(out / "metrics.csv", rows)
    table = [{"dataset": dataset, "variant": v, "seed": ev.seed, **{m: getattr(ev, m) for m in
             ("auroc", "auprc", "f1", "threshold")}} for dataset, v, ev in rows]
    write_aggregate_csv(out / "aggregate.csv", aggregate_table(table) if table else [])
    write_manifest(out, "ablate", base.as_dict(), _seed_list(args.seeds), fingerprint(test_s),
                   {"failures": failures, "partial": bool(failures),
                    "single_seed_warning": args.seeds < 2})
    for name, msg in failures.items():
        print(f"run {name} failed: {msg}", file=sys.stderr)
    return EXIT_OK if rows else EXIT_NUMERIC


_SWEEP_TARGETS = {"alpha": ("train", "alpha"), "gamma": ("train", "gamma"),
                  "beta": ("train", "beta")}
_DEFAULT_GRIDS = {"alpha": ALPHA_GRID, "gamma": GAMMA_GRID, "beta": BETA_GRID}


def parse_values(text: str | None, param: str) -> list[float]:
    if text is None:
        return list(_DEFAULT_GRIDS[param])
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be comma-separated numbers, got {text!r}") from None
    if not values:
        raise UsageError("--values is empty")
    return values


def cmd_sweep(args) -> int:
    base = _config(args.config)
    values = parse_values(args.values, args.param)
    data = Path(args.data)
    train_s = load_train(data, base.data)
    test_s = load_test(data, base.data, need_labels=True)
    section, key = _SWEEP_TARGETS[args.param]
    jobs = []
    for value in values:
        try:
            cfg = override(base, section, key, value)
        except ConfigError as exc:
            raise UsageError(f"{args.param}={value}: {exc}") from exc
        for s in _seed_list(args.seeds):
            jobs.append(((value, s), _resolve(cfg, train_s, seed=s), train_s, test_s))
    done = _run_jobs(jobs, args.parallel)
    out = _outdir(args.out)
    rows, failures = [], {}
    for (value, s), ev in done:
        if isinstance(ev, str):
            failures[f"{value}/{s}"] = ev
            continue
        rows.append({"param": args.param, "value": value, "seed": s,
                     "auroc": ev.auroc, "auprc": ev.auprc})
    _write_rows(out / f"sweep_{args.param}.csv", SWEEP_COLUMNS, rows)
    write_manifest(out, "sweep", base.as_dict(), _seed_list(args.seeds), fingerprint(test_s),
                   {"param": args.param, "values": values, "failures": failures})
    return EXIT_OK if not failures else EXIT_NUMERIC


def _write_matrix(path: Path, A: np.ndarray, names) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + list(names))
        for name, row in zip(names, A):
            w.writerow([name] + [repr(float(v)) for v in row])


def cmd_case(args) -> int:
    model, bank, tcfg = _load_model(args.checkpoint)
    dcfg = _config(getattr(args, "config", None)).data
    series = load_test(Path(args.data), dcfg, need_labels=False)
    if series.K != model.cfg.K:
        raise DataError(f"checkpoint expects K={model.cfg.K}, data has K={series.K}")
    L = model.cfg.L
    n_windows = series.T - L + 1
    if not 0 <= args.index < n_windows:
        raise UsageError(f"--index must lie in [0, {n_windows - 1}]")
    if not 1 <= args.topk <= series.K:
        raise UsageError(f"--topk must lie in [1, {series.K}]")
    norm = apply_normalizer(model.normalizer, series)
    window = make_windows(norm, L, 1).windows[args.index:args.index + 1]
    terms, graphs = window_terms(model, window)
    per_sensor = terms[0].T                                    # K x L
    ranking = np.argsort(-np.nanmean(per_sensor, axis=1), kind="stable")[:args.topk]
    out = _outdir(args.out)
    names = series.variable_names
    with open(out / "sensor_scores.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sensor", "mean"] + [f"t{args.index + t}" for t in range(L)])
        for k in ranking:
            w.writerow([names[k], repr(float(np.nanmean(per_sensor[k])))]
                       + ["" if np.isnan(v) else repr(float(v)) for v in per_sensor[k]])
    dyn = graphs.A_local.data[0]
    _write_matrix(out / "A_local_dyn.csv", dyn, names)
    _write_matrix(out / "A_regional.csv", np.asarray(graphs.A_regional), names)
    _write_matrix(out / "A_global.csv", np.asarray(graphs.A_global), names)
    if bank is not None and "local" in bank.A_stable:
        stable = bank.A_stable["local"]
        _write_matrix(out / "A_local_stable.csv", stable, names)
        _write_matrix(out / "delta_local.csv", np.abs(dyn - stable), names)
    else:
        print("checkpoint has no stable bank; skipping A_local_stable and delta_local",
              file=sys.stderr)
    write_manifest(out, "case", {"checkpoint": str(args.checkpoint), "index": args.index,
                                 "topk": args.topk}, tcfg.seed, fingerprint(series))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cgsta", description="Graph-based multivariate "
                                "time-series anomaly detection.")
    p.add_argument("--version", action="version", version=f"cgsta {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic train/test corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int, default=12)
    s.add_argument("--groups", type=int, default=3)
    s.add_argument("--t-train", type=int, default=20000)
    s.add_argument("--t-test", type=int, default=4000)
    s.add_argument("--rate", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train one variant and write a checkpoint")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--variant", choices=VARIANTS)
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "score labelled data and compute metrics"),
                                 ("score", cmd_score, "write per-step anomaly scores")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--config", help="only the [data] section is used")
        if name == "score":
            s.add_argument("--stride", type=int, default=1)
        s.set_defaults(func=func)

    s = sub.add_parser("ablate", help="all four variants over several seeds")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--parallel", type=int, default=1)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sweep", help="one loss weight or momentum over a grid")
    s.add_argument("--param", required=True, choices=tuple(_SWEEP_TARGETS))
    s.add_argument("--values", help="comma-separated; defaults to the standard grid")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", type=int, default=2)
    s.add_argument("--parallel", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("case", help="export graphs and sensor scores for one window")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--index", type=int, required=True)
    s.add_argument("--topk", type=int, default=5)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="only the [data] section is used")
    s.set_defaults(func=cmd_case)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:        # argparse already printed the message
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DataError, CheckpointError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
