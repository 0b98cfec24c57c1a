"""Confusion matrices, precision/recall/F1 and report tables.

Undefined metrics, where a class has no predictions or no true instances, are
reported as ``None`` and listed in ``EvalReport.undefined``.  They are never
silently coerced to zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError

N_BOOTSTRAP = 1000


@dataclass
class ConfusionMatrix:
    labels: list
    counts: np.ndarray  # counts[i, j]: true class i predicted as j

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp(self):
        return np.diag(self.counts)

    def fp(self):
        return self.counts.sum(axis=0) - self.tp()

    def fn(self):
        return self.counts.sum(axis=1) - self.tp()

    def tn(self):
        return self.total - self.tp() - self.fp() - self.fn()


def confusion_matrix(truth, predicted, classes) -> ConfusionMatrix:
    classes = list(classes)
    truth, predicted = list(truth), list(predicted)
    if len(truth) != len(predicted):
        raise ArgumentError(f"{len(truth)} true labels but {len(predicted)} predictions")
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(truth, predicted):
        try:
            counts[index[t], index[p]] += 1
        except KeyError as exc:
            raise ArgumentError(f"label {exc.args[0]!r} is not one of {classes}") from None
    return ConfusionMatrix(classes, counts)


def _ratio(num, den):
    return None if den == 0 else num / den


def _per_class(counts):
    tp = np.diag(counts).astype(np.float64)
    pred = counts.sum(axis=0)
    true = counts.sum(axis=1)
    out = []
    for l in range(len(tp)):
        p = _ratio(tp[l], pred[l])
        r = _ratio(tp[l], true[l])
        f_den = pred[l] + true[l]  # 2TP + FP + FN
        f = _ratio(2 * tp[l], f_den)
        out.append((p, r, f))
    return out


@dataclass
class ClassMetrics:
    label: str
    precision: object
    recall: object
    f1: object
    support: int
    ci_precision: object = None
    ci_recall: object = None
    ci_f1: object = None


@dataclass
class EvalReport:
    level: str
    accuracy: float
    micro_precision: float
    micro_recall: float
    micro_f1: float
    per_class: list
    n: int
    macro_f1: object = None
    undefined: list = field(default_factory=list)
    ci_accuracy: object = None


def _bootstrap(counts, n_boot, seed):
    """95% CI halfwidths by resampling instances (multinomial over the cells)."""
    rng = np.random.default_rng(seed)
    total = int(counts.sum())
    flat = counts.reshape(-1).astype(np.float64) / total
    L = counts.shape[0]
    samples = rng.multinomial(total, flat, size=n_boot).reshape(n_boot, L, L)
    stats = np.full((n_boot, L, 3), np.nan)
    acc = np.empty(n_boot)
    for b in range(n_boot):
        for l, trio in enumerate(_per_class(samples[b])):
            stats[b, l] = [np.nan if v is None else v for v in trio]
        acc[b] = np.trace(samples[b]) / total

    def half(v):
        v = v[~np.isnan(v)]
        if len(v) < 2:
            return None
        lo, hi = np.percentile(v, [2.5, 97.5])
        return float((hi - lo) / 2)

    per = [[half(stats[:, l, k]) for k in range(3)] for l in range(L)]
    return per, half(acc)


def metrics(cm: ConfusionMatrix, level="", n_bootstrap=N_BOOTSTRAP, seed=0) -> EvalReport:
    """Accuracy, micro-averaged P/R/F1, per-class P/R/F1 with bootstrap 95% CI halfwidths."""
    counts = np.asarray(cm.counts)
    total = int(counts.sum())
    if total == 0:
        raise ArgumentError("cannot compute metrics on an empty confusion matrix")
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    acc = float(tp.sum() / total)
    micro_p = float(tp.sum() / (tp.sum() + fp.sum()))
    micro_r = float(tp.sum() / (tp.sum() + fn.sum()))
    micro_f = float(2 * tp.sum() / (2 * tp.sum() + fp.sum() + fn.sum()))
    per, undefined = [], []
    ci, ci_acc = (_bootstrap(counts, n_bootstrap, seed) if n_bootstrap else
                  ([[None] * 3] * len(cm.labels), None))
    for l, (p, r, f) in enumerate(_per_class(counts)):
        name = cm.labels[l]
        for metric, v in (("precision", p), ("recall", r), ("f1", f)):
            if v is None:
                undefined.append(f"{name}.{metric}")
        per.append(ClassMetrics(name, p, r, f, int(counts[l].sum()), *ci[l]))
    f1s = [c.f1 for c in per]
    macro = None if any(v is None for v in f1s) else float(np.mean(f1s))
    if macro is None:
        undefined.append("macro_f1")
    return EvalReport(level, acc, micro_p, micro_r, micro_f, per, total, macro, undefined, ci_acc)


def macro_f1(truth, predicted, classes) -> float:
    """Mean per-class F1.  A class that is never true and never predicted counts as F1 0."""
    cm = confusion_matrix(truth, predicted, classes)
    return float(np.mean([0.0 if f is None else f for _, _, f in _per_class(cm.counts)]))


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

CSV_FIELDS = ["level", "class", "precision", "precision_ci", "recall", "recall_ci", "f1", "f1_ci",
              "support"]


def _num(v):
    return "" if v is None else repr(float(v))


def _pct(v, ci):
    if v is None:
        return "undefined"
    s = f"{100 * v:.2f}"
    return s if ci is None else f"{s} ± {100 * ci:.2f}"


def report_rows(reports):
    for rep in reports:
        for c in rep.per_class:
            yield rep, c


def report_tables(reports, out_dir, stem="report"):
    """Write ``<stem>.csv`` (full precision) and ``<stem>.txt`` (percent, mean ± CI).

    One row per class per level.  Returns the two paths.
    """
    if not reports:
        raise ArgumentError("report_tables needs at least one report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, txt_path = out / f"{stem}.csv", out / f"{stem}.txt"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for rep, c in report_rows(reports):
            w.writerow([rep.level, c.label, _num(c.precision), _num(c.ci_precision), _num(c.recall),
                        _num(c.ci_recall), _num(c.f1), _num(c.ci_f1), c.support])
    header = ["Level", "Class", "Precision", "Recall", "F1-Score", "Support"]
    rows = [[str(rep.level), str(c.label), _pct(c.precision, c.ci_precision), _pct(c.recall, c.ci_recall),
             _pct(c.f1, c.ci_f1), str(c.support)] for rep, c in report_rows(reports)]
    widths = [max(len(r[i]) for r in rows + [header]) for i in range(len(header))]
    lines = ["  ".join(h.ljust(wd) for h, wd in zip(header, widths)).rstrip(),
             "  ".join("-" * wd for wd in widths)]
    lines += ["  ".join(v.ljust(wd) for v, wd in zip(r, widths)).rstrip() for r in rows]
    lines.append("")
    for rep in reports:
        lines.append(f"{rep.level or 'all'}: accuracy {_pct(rep.accuracy, rep.ci_accuracy)}, "
                     f"micro F1 {_pct(rep.micro_f1, None)}, n={rep.n}"
                     " (± is a bootstrap 95% CI halfwidth)")
    txt_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return csv_path, txt_path


def read_report_csv(path):
    """Parse a CSV written by :func:`report_tables` back into dict rows."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            parsed = {"level": row["level"], "class": row["class"], "support": int(row["support"])}
            for k in CSV_FIELDS[2:-1]:
                parsed[k] = None if row[k] == "" else float(row[k])
            out.append(parsed)
    return out

