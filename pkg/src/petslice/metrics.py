"""Exact evaluation: ROC/PR curves, confusion-based metrics, SUVmax analyses.

Scored rows are dicts with ``sample_id``, ``patient_id``, ``p``, ``pred``,
``label`` and ``tumor_suvmax`` (None on negative rows). Undefined metrics
(zero denominators, single-class sets) are reported as None rather than
raising or substituting 0/1.
"""

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
METRIC_NAMES = ("sensitivity", "specificity", "precision", "npv", "accuracy", "balanced_accuracy", "f1")


def _arrays(p, y):
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    y = np.asarray(y).reshape(-1).astype(np.int64)
    if p.shape != y.shape:
        raise ValueError(f"{p.size} scores but {y.size} labels")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    return p, y


def _threshold_counts(p, y):
    """Distinct thresholds (descending) with cumulative TP and FP at p >= threshold."""
    order = np.argsort(-p, kind="stable")
    ps, ys = p[order], y[order]
    tp = np.cumsum(ys)
    fp = np.cumsum(1 - ys)
    # last index of each run of equal scores
    last = np.r_[np.nonzero(ps[1:] != ps[:-1])[0], ps.size - 1]
    return ps[last], tp[last], fp[last]


def roc_auroc(p, y):
    """ROC points ``[(threshold, fpr, tpr), ...]`` and trapezoidal AUROC.

    The area is accumulated in integer pair counts and divided once, so it
    equals the concordance statistic (ties counted half) exactly.
    """
    p, y = _arrays(p, y)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"AUROC undefined: {n_pos} positives and {n_neg} negatives")
    thr, tp, fp = _threshold_counts(p, y)
    tp0 = np.r_[0, tp]
    fp0 = np.r_[0, fp]
    twice_area = int(np.sum((fp0[1:] - fp0[:-1]) * (tp0[1:] + tp0[:-1])))
    auroc = twice_area / (2 * n_pos * n_neg)
    points = [(float("inf"), 0.0, 0.0)] + [
        (float(t), a / n_neg, b / n_pos) for t, a, b in zip(thr, fp.tolist(), tp.tolist())
    ]
    return points, auroc


def pr_auprc(p, y):
    """PR points ``[(threshold, recall, precision), ...]`` and step-sum AUPRC.

    AUPRC = sum_k (R_k - R_{k-1}) * P_k over distinct thresholds, descending.
    """
    p, y = _arrays(p, y)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("AUPRC undefined: no positive rows")
    thr, tp, fp = _threshold_counts(p, y)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    prev = np.r_[0.0, recall[:-1]]
    auprc = float(np.sum((recall - prev) * precision))
    points = [(float(t), float(r), float(q)) for t, r, q in zip(thr, recall, precision)]
    return points, auprc


def confusion_matrix(pred, y):
    """(TP, FP, TN, FN)."""
    pred, y = _arrays(pred, y)
    pred = pred.astype(np.int64)
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    tn = int(np.sum((pred == 0) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    return tp, fp, tn, fn


def _ratio(a, b):
    return a / b if b else None


def binary_metrics(confusion):
    tp, fp, tn, fn = confusion
    sens = _ratio(tp, tp + fn)
    spec = _ratio(tn, tn + fp)
    return {
        "sensitivity": sens,
        "specificity": spec,
        "precision": _ratio(tp, tp + fp),
        "npv": _ratio(tn, tn + fn),
        "accuracy": _ratio(tp + tn, tp + fp + tn + fn),
        "balanced_accuracy": (sens + spec) / 2 if sens is not None and spec is not None else None,
        "f1": _ratio(2 * tp, 2 * tp + fp + fn),
    }


def macro_average(metric_maps):
    """Mean of each metric over the maps where it is defined, plus exclusion counts."""
    means, excluded = {}, {}
    for name in METRIC_NAMES:
        vals = [m[name] for m in metric_maps if m[name] is not None]
        means[name] = float(np.mean(vals)) if vals else None
        excluded[name] = len(metric_maps) - len(vals)
    return means, excluded


def per_patient_metrics(rows):
    """Confusion and metrics per patient, with macro-averages over patients."""
    groups = {}
    for r in rows:
        groups.setdefault(r["patient_id"], []).append(r)
    patients = {}
    for pid in sorted(groups):
        g = groups[pid]
        conf = confusion_matrix([r["pred"] for r in g], [r["label"] for r in g])
        patients[pid] = {"n": len(g), "confusion": list(conf), "metrics": binary_metrics(conf)}
    means, excluded = macro_average([v["metrics"] for v in patients.values()])
    return {"patients": patients, "macro": means, "excluded": excluded}


def _positive_suvmax(rows):
    pos = [r for r in rows if r["label"] == 1]
    for r in pos:
        if r.get("tumor_suvmax") is None:
            raise ValueError(f"positive row {r.get('sample_id')} has no tumor_suvmax")
    return pos


def tp_fn_suvmax_histogram(rows, bin_width=1.0):
    """TP/FN counts of positive rows in SUVmax bins [k*w, (k+1)*w), k >= 0."""
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    pos = _positive_suvmax(rows)
    if not pos:
        return []
    idx = [int(np.floor(r["tumor_suvmax"] / bin_width)) for r in pos]
    n_bins = max(idx) + 1
    tp = [0] * n_bins
    fn = [0] * n_bins
    for k, r in zip(idx, pos):
        if r["pred"] == 1:
            tp[k] += 1
        else:
            fn[k] += 1
    return [{"bin_lo": k * bin_width, "bin_hi": (k + 1) * bin_width, "tp": tp[k], "fn": fn[k]}
            for k in range(n_bins)]


def sensitivity_suvmax_sweep(rows):
    """``[(u_i, subset_size, sensitivity), ...]`` for i = 1 .. floor(0.95 m).

    Positives are sorted by tumor SUVmax ascending; subset i holds every
    positive with SUVmax >= u_i, so tied values share one subset. One point
    is reported per index i, duplicates included.
    """
    pos = _positive_suvmax(rows)
    m = len(pos)
    if m < 2:
        raise ValueError(f"sensitivity sweep needs at least 2 positive rows, got {m}")
    u = np.array([r["tumor_suvmax"] for r in pos], dtype=np.float64)
    hit = np.array([1 if r["pred"] == 1 else 0 for r in pos], dtype=np.int64)
    order = np.argsort(u, kind="stable")
    u, hit = u[order], hit[order]
    tail_tp = np.r_[np.cumsum(hit[::-1])[::-1], 0]
    out = []
    for i in range(int(np.floor(0.95 * m))):
        start = int(np.searchsorted(u, u[i], side="left"))
        size = m - start
        out.append((float(u[i]), size, int(tail_tp[start]) / size))
    return out


@dataclass
class EvalReport:
    name: str
    n: int
    n_positive: int
    threshold: float
    auroc: float
    auprc: float
    confusion: list
    metrics: dict
    per_patient: dict
    suvmax_hist: list
    sensitivity_sweep: list
    roc_points: list = field(repr=False, default_factory=list)
    pr_points: list = field(repr=False, default_factory=list)
    config_hash: str = None
    schema_version: int = SCHEMA_VERSION
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["roc_points"] = [list(pt) for pt in self.roc_points]
        d["pr_points"] = [list(pt) for pt in self.pr_points]
        d["sensitivity_sweep"] = [list(pt) for pt in self.sensitivity_sweep]
        return d


def evaluate(rows, name="test", threshold=0.5, bin_width=1.0, config_hash=None, extra=None):
    """Full report for one scored set; undefined quantities are None."""
    p = [r["p"] for r in rows]
    y = [r["label"] for r in rows]
    n_pos = int(sum(y))
    roc_points, auroc = ([], None)
    if 0 < n_pos < len(rows):
        roc_points, auroc = roc_auroc(p, y)
    pr_points, auprc = ([], None)
    if n_pos > 0:
        pr_points, auprc = pr_auprc(p, y)
    conf = confusion_matrix([r["pred"] for r in rows], y)
    sweep = sensitivity_suvmax_sweep(rows) if n_pos >= 2 else []
    return EvalReport(
        name=name, n=len(rows), n_positive=n_pos, threshold=threshold, auroc=auroc, auprc=auprc,
        confusion=list(conf), metrics=binary_metrics(conf), per_patient=per_patient_metrics(rows),
        suvmax_hist=tp_fn_suvmax_histogram(rows, bin_width), sensitivity_sweep=sweep,
        roc_points=roc_points, pr_points=pr_points, config_hash=config_hash, extra=dict(extra or {}),
    )



def _clean(obj):
    """Infinite floats (the ROC start threshold) become the string "inf"."""
    if isinstance(obj, float) and np.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_csv(path, header, rows, config_hash=None):
    with open(path, "w", newline="") as fh:
        if config_hash is not None:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else ("" if v is None else v) for v in r])


def write_report(report, directory, stem=None):
    """Writes ``<stem>.json`` plus ROC, PR, sweep and histogram CSVs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = stem or report.name
    h = report.config_hash
    (directory / f"{stem}.json").write_text(json.dumps(_clean(report.to_dict()), sort_keys=True, indent=1) + "\n")
    write_csv(directory / f"{stem}_roc.csv", ["threshold", "x", "y"], report.roc_points, h)
    write_csv(directory / f"{stem}_pr.csv", ["threshold", "x", "y"], report.pr_points, h)
    write_csv(directory / f"{stem}_sweep.csv", ["u_i", "subset_size", "sensitivity"], report.sensitivity_sweep, h)
    write_csv(directory / f"{stem}_hist.csv", ["bin_lo", "bin_hi", "tp", "fn"],
              [(b["bin_lo"], b["bin_hi"], b["tp"], b["fn"]) for b in report.suvmax_hist], h)
    return directory / f"{stem}.json"


def load_report(path):
    return json.loads(Path(path).read_text())
