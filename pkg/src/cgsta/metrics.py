"""Point-wise evaluation: AUROC, AUPRC, best F1, seed aggregation, paired t-test."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import betainc
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _prepare(scores, labels, mask=None):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise MetricError(f"scores and labels differ in length: {scores.size} vs {labels.size}")
    keep = ~np.isnan(scores)
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool).ravel()
    scores, labels = scores[keep], labels[keep]
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be 0/1")
    return scores, labels.astype(np.int64)


def _need_both(labels) -> None:
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise MetricError("both classes must be present")


def auroc(scores, labels, mask=None) -> float:
    """Exact rank-based AUROC; tied pairs count one half."""
    s, y = _prepare(scores, labels, mask)
    _need_both(y)
    ranks = rankdata(s)           # average ranks give the 0.5 tie credit
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _desc_order(s: np.ndarray) -> np.ndarray:
    # score descending, index ascending among ties
    return np.lexsort((np.arange(s.size), -s))


def auprc(scores, labels, mask=None) -> float:
    """Average precision, ranking by (score desc, index asc)."""
    s, y = _prepare(scores, labels, mask)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("auprc needs at least one positive")
    y_sorted = y[_desc_order(s)]
    tp = np.cumsum(y_sorted)
    precision = tp / np.arange(1, y.size + 1)
    # running sum in rank order; numpy's pairwise sum differs in the last bit
    return float(np.cumsum(precision[y_sorted == 1])[-1] / n_pos)


def best_f1(scores, labels, mask=None) -> tuple[float, float]:
    """Max point-level F1 over thresholds at distinct scores (score >= thr flags).

    Returns (f1, threshold); on ties the smallest threshold wins.
    """
    s, y = _prepare(scores, labels, mask)
    _need_both(y)
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    # the last index of each distinct value is where "score >= value" ends
    last = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp_at = tp[last]
    n_pred = last + 1
    n_pos = int(y.sum())
    f1 = 2.0 * tp_at / (n_pred + n_pos)
    best = f1.max()
    # thresholds descend along `last`; the final maximiser is the smallest one
    pick = np.flatnonzero(f1 == best)[-1]
    return float(best), float(s_sorted[last[pick]])


@dataclass(frozen=True)
class EvalResult:
    auroc: float
    auprc: float
    f1: float
    threshold: float
    n_pos: int
    n_neg: int
    seed: int = 0


def evaluate(scores, labels, seed: int = 0, mask=None) -> EvalResult:
    """All three metrics over the scored steps (NaN scores are skipped)."""
    s, y = _prepare(scores, labels, mask)
    f1, thr = best_f1(s, y)
    n_pos = int(y.sum())
    return EvalResult(auroc(s, y), auprc(s, y), f1, thr, n_pos, int(y.size - n_pos), seed)


@dataclass(frozen=True)
class Aggregate:
    mean: float
    std: float
    n: int
    warning: bool          # fewer than two values: std is reported as 0


def aggregate_seeds(values) -> Aggregate:
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise MetricError("no values to aggregate")
    if v.size < 2:
        return Aggregate(float(v[0]), 0.0, 1, True)
    if (v == v[0]).all():
        # exact zero spread; v.std() can leave rounding residue
        return Aggregate(float(v[0]), 0.0, int(v.size), False)
    return Aggregate(float(v.mean()), float(v.std()), int(v.size), False)


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired t-test on a - b with n-1 degrees of freedom."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.ndim != 1 or d.size < 2:
        raise MetricError("paired t-test needs two equal-length samples with n >= 2")
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise MetricError("degenerate t-test")
    n = d.size
    t = d.mean() / (sd / np.sqrt(n))
    df = n - 1
    p = betainc(df / 2.0, 0.5, df / (df + t * t))
    return float(t), float(p)


# ---------------------------------------------------------------- CSV output

METRIC_COLUMNS = ("dataset", "variant", "seed", "auroc", "auprc", "f1", "threshold")
AGGREGATE_COLUMNS = ("dataset", "variant", "metric", "mean", "std", "p_vs_runner_up")
METRIC_NAMES = ("auroc", "auprc", "f1")


def write_metrics_csv(path, rows) -> None:
    """rows: iterables of (dataset, variant, EvalResult)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for dataset, variant, r in rows:
            w.writerow([dataset, variant, r.seed, repr(r.auroc), repr(r.auprc), repr(r.f1),
                        repr(r.threshold)])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0].keys()) != METRIC_COLUMNS:
        raise MetricError(f"{path}: unexpected header {tuple(rows[0].keys())}")
    for r in rows:
        r["seed"] = int(r["seed"])
        for k in ("auroc", "auprc", "f1", "threshold"):
            r[k] = float(r[k])
    return rows


def aggregate_table(rows: list[dict]) -> list[dict]:
    """Mean/std per (dataset, variant, metric) plus a paired p-value.

    Within each dataset the best variant by mean is tested against the
    runner-up on seeds they share; other variants are tested against the
    best. Empty p means the test was not possible.
    """
    out = []
    for dataset in dict.fromkeys(r["dataset"] for r in rows):
        sub = [r for r in rows if r["dataset"] == dataset]
        variants = list(dict.fromkeys(r["variant"] for r in sub))
        for metric in METRIC_NAMES:
            by_var = {v: {r["seed"]: r[metric] for r in sub if r["variant"] == v} for v in variants}
            means = {v: aggregate_seeds(by_var[v].values()) for v in variants}
            ranked = sorted(variants, key=lambda v: -means[v].mean)
            for v in variants:
                other = (ranked[1] if len(ranked) > 1 else None) if v == ranked[0] else ranked[0]
                p = ""
                if other is not None:
                    common = sorted(set(by_var[v]) & set(by_var[other]))
                    if len(common) >= 2:
                        try:
                            p = repr(paired_t_test([by_var[v][s] for s in common],
                                                   [by_var[other][s] for s in common])[1])
                        except MetricError:
                            p = ""
                out.append({"dataset": dataset, "variant": v, "metric": metric,
                            "mean": repr(means[v].mean), "std": repr(means[v].std),
                            "p_vs_runner_up": p})
    return out


def write_aggregate_csv(path, table: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=AGGREGATE_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(table)
