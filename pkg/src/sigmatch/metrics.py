"""Confusion ledger, yield / FPR / accuracy, threshold sweeps and the
enroll-and-query benchmark.

Query outcomes fall into five cells::

                      correct   wrong   rejected
    enrolled class      n1        n2       n3
    absent class      (n4=0)      n5       n6

A query of an absent class can never be labeled correctly, so there is no
``n4`` counter at all; the property always reads 0.
"""
import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write
from .errors import InputError, UndefinedMetric
from .matcher import MAX_DISTANCE, TemplateDB, match_batch

ABSENT = None
REPORT_COLUMNS = ("threshold", "yield", "fpr", "accuracy", "n1", "n2", "n3", "n5", "n6")
TIMING_COLUMNS = ("templates", "queries", "total_seconds", "per_query_microseconds")
DEFAULT_GRID_SIZE = 200


@dataclass(frozen=True)
class ConfusionCounts:
    n1: int = 0
    n2: int = 0
    n3: int = 0
    n5: int = 0
    n6: int = 0

    def __post_init__(self):
        for name in ("n1", "n2", "n3", "n5", "n6"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be non-negative")

    @property
    def n4(self) -> int:
        return 0

    @property
    def enrolled_queries(self) -> int:
        return self.n1 + self.n2 + self.n3

    @property
    def absent_queries(self) -> int:
        return self.n5 + self.n6

    @property
    def total(self) -> int:
        return self.enrolled_queries + self.absent_queries

    def as_tuple(self) -> tuple:
        return (self.n1, self.n2, self.n3, self.n4, self.n5, self.n6)

    @classmethod
    def from_tuple(cls, values):
        n1, n2, n3, n4, n5, n6 = values
        if n4 != 0:
            raise InputError("n4 must be 0: an absent identity cannot be labeled correctly")
        return cls(n1, n2, n3, n5, n6)


def tally(results, truth) -> ConfusionCounts:
    """Count match outcomes against ground truth (an identity, or ``ABSENT``)."""
    results, truth = list(results), list(truth)
    if len(results) != len(truth):
        raise InputError(f"{len(results)} results but {len(truth)} truth labels")
    n1 = n2 = n3 = n5 = n6 = 0
    for res, t in zip(results, truth):
        if t is ABSENT:
            if res.accepted:
                n5 += 1
            else:
                n6 += 1
        elif not res.accepted:
            n3 += 1
        elif res.identity == str(t):
            n1 += 1
        else:
            n2 += 1
    return ConfusionCounts(n1, n2, n3, n5, n6)


def yield_rate(c: ConfusionCounts) -> float:
    den = c.n1 + c.n2 + c.n3
    if den == 0:
        raise UndefinedMetric("yield is undefined without enrolled-class queries")
    return (c.n1 + c.n2) / den


def fpr(c: ConfusionCounts) -> float:
    den = c.n5 + c.n6
    if den == 0:
        raise UndefinedMetric("false positive rate is undefined without absent-class queries")
    return c.n5 / den


def accuracy(c: ConfusionCounts) -> float:
    den = c.n1 + c.n2
    if den == 0:
        raise UndefinedMetric("accuracy is undefined when no enrolled-class query is labeled")
    return c.n1 / den


def _maybe(metric, c):
    try:
        return metric(c)
    except UndefinedMetric:
        return None


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    yield_: float | None
    fpr: float | None
    accuracy: float | None
    counts: ConfusionCounts


@dataclass
class RocCurve:
    points: list

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    @property
    def thresholds(self) -> list:
        return [p.threshold for p in self.points]

    def at_yield(self, target: float) -> RocPoint | None:
        """Lowest-threshold point whose yield reaches ``target``."""
        for p in self.points:
            if p.yield_ is not None and p.yield_ >= target:
                return p
        return None


def _check_thresholds(thresholds):
    t = np.asarray(thresholds, dtype=np.float64).reshape(-1)
    if t.size == 0:
        raise InputError("at least one threshold is required")
    if not np.all(np.isfinite(t)):
        raise InputError("thresholds must be finite")
    if np.any(np.diff(t) <= 0):
        raise InputError("thresholds must be strictly ascending")
    return t


def default_thresholds(n: int = DEFAULT_GRID_SIZE) -> np.ndarray:
    return np.linspace(0.0, MAX_DISTANCE, n)


def sweep_outcomes(nearest_identity, best_distance, truth, thresholds) -> RocCurve:
    """Sweep thresholds over precomputed nearest-template outcomes.

    ``nearest_identity[i]`` is the closest template for query ``i`` (``None``
    for an empty database) at ``best_distance[i]``.
    """
    t = _check_thresholds(thresholds)
    truth = list(truth)
    dist = np.asarray(best_distance, dtype=np.float64)
    if len(truth) != dist.size or len(nearest_identity) != dist.size:
        raise InputError("nearest identities, distances and truth must have equal lengths")
    present = np.array([x is not ABSENT for x in truth], dtype=bool)
    correct = np.array([x is not ABSENT and n is not None and n == str(x)
                        for n, x in zip(nearest_identity, truth)], dtype=bool)
    points = []
    for thr in t.tolist():
        acc = dist <= thr
        counts = ConfusionCounts(
            n1=int(np.sum(present & acc & correct)),
            n2=int(np.sum(present & acc & ~correct)),
            n3=int(np.sum(present & ~acc)),
            n5=int(np.sum(~present & acc)),
            n6=int(np.sum(~present & ~acc)),
        )
        points.append(RocPoint(thr, _maybe(yield_rate, counts), _maybe(fpr, counts),
                               _maybe(accuracy, counts), counts))
    return RocCurve(points)


def roc_sweep(db: TemplateDB, queries, truth, thresholds=None) -> RocCurve:
    """Yield / FPR / accuracy at each threshold; distances are computed once."""
    thresholds = default_thresholds() if thresholds is None else thresholds
    _check_thresholds(thresholds)
    batch = match_batch(db, queries, MAX_DISTANCE)
    return sweep_outcomes([r.nearest for r in batch], [r.distance for r in batch], truth, thresholds)


@dataclass
class BenchmarkReport:
    curve: RocCurve
    n_templates: int
    n_queries: int
    total_seconds: float
    template_indices: list = field(repr=False)
    query_indices: list = field(repr=False)
    truth: list = field(repr=False)

    @property
    def per_query_microseconds(self) -> float:
        return 1e6 * self.total_seconds / self.n_queries if self.n_queries else 0.0

    def timing_row(self) -> tuple:
        return (self.n_templates, self.n_queries, self.total_seconds, self.per_query_microseconds)


def _embed(model, features):
    if model is None:
        return np.asarray(features, dtype=np.float64)
    return np.asarray(model.embed(features), dtype=np.float64)


def enrollment_plan(ds, enroll_fraction: float = 0.6, seed: int = 0, template_selection: str = "first"):
    """Choose enrolled classes and their single template example.

    Returns ``(template_indices, query_indices, truth)``; templates are in
    dataset order, queries are every other example in dataset order, and
    ``truth[i]`` is the class of query ``i`` or ``ABSENT``.
    """
    if not 0 < enroll_fraction <= 1:
        raise InputError(f"enroll_fraction must lie in (0, 1], got {enroll_fraction}")
    if template_selection not in ("first", "random"):
        raise InputError("template_selection must be 'first' or 'random'")
    if len(ds) == 0:
        raise InputError("benchmark dataset is empty")
    rng = np.random.default_rng(seed)
    classes = sorted(ds.class_index)
    n_enroll = max(1, int(math.floor(enroll_fraction * len(classes) + 0.5)))
    enrolled = {classes[i] for i in rng.permutation(len(classes))[:n_enroll].tolist()}
    template_of = {}
    for c in sorted(enrolled):
        members = ds.class_index[c]
        template_of[c] = members[0] if template_selection == "first" else int(rng.choice(members))
    templates = sorted(template_of.values())
    is_template = set(templates)
    queries = [i for i in range(len(ds)) if i not in is_template]
    labels = ds.labels.tolist()
    truth = [str(labels[i]) if labels[i] in enrolled else ABSENT for i in queries]
    return templates, queries, truth


def benchmark(model, bench_ds, enroll_fraction: float = 0.6, seed: int = 0, thresholds=None,
              template_selection: str = "first", train_classes=None) -> BenchmarkReport:
    """Enroll one example for a fraction of the classes, query everything else
    and sweep the rejection threshold.

    ``model=None`` matches on the raw features.
    """
    if train_classes is not None and set(train_classes) & set(bench_ds.class_index):
        raise InputError("benchmark classes overlap the training classes")
    thresholds = default_thresholds() if thresholds is None else thresholds
    _check_thresholds(thresholds)
    templates, queries, truth = enrollment_plan(bench_ds, enroll_fraction, seed, template_selection)
    sigs = _embed(model, bench_ds.features)
    db = TemplateDB(sigs.shape[1])
    db.enroll_many([str(c) for c in bench_ds.labels[templates].tolist()], sigs[templates])
    if queries:
        batch = match_batch(db, sigs[queries], MAX_DISTANCE)
        nearest = [r.nearest for r in batch]
        dist = [r.distance for r in batch]
        seconds = batch.total_seconds
    else:
        nearest, dist, seconds = [], [], 0.0
    curve = sweep_outcomes(nearest, dist, truth, thresholds)
    return BenchmarkReport(curve, len(templates), len(queries), seconds, templates, queries, truth)


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v))


def report_csv(curve: RocCurve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for p in curve:
        c = p.counts
        w.writerow([_fmt(p.threshold), _fmt(p.yield_), _fmt(p.fpr), _fmt(p.accuracy),
                    c.n1, c.n2, c.n3, c.n5, c.n6])
    return buf.getvalue()


def timing_csv(report: BenchmarkReport) -> str:
    t, q, s, us = report.timing_row()
    return ",".join(TIMING_COLUMNS) + "\n" + f"{t},{q},{s!r},{us!r}\n"


def write_report(curve: RocCurve, path) -> None:
    with atomic_write(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(report_csv(curve))


def read_report(path) -> RocCurve:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))

    def opt(s):
        return float(s) if s != "" else None

    points = []
    for r in rows:
        counts = ConfusionCounts(*(int(r[k]) for k in ("n1", "n2", "n3", "n5", "n6")))
        points.append(RocPoint(float(r["threshold"]), opt(r["yield"]), opt(r["fpr"]),
                               opt(r["accuracy"]), counts))
    return RocCurve(points)


def plot_curves(curve: RocCurve, prefix) -> list:
    """Write yield-vs-accuracy and yield-vs-FPR line charts as SVG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    for metric, label in (("accuracy", "Accuracy"), ("fpr", "False positive rate")):
        pts = [(p.yield_, getattr(p, metric)) for p in curve
               if p.yield_ is not None and getattr(p, metric) is not None]
        fig, ax = plt.subplots(figsize=(5, 4))
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, marker=".", linewidth=1)
        ax.set_xlabel("Yield")
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
        path = f"{prefix}_yield_vs_{metric}.svg"
        with atomic_write(path, "wb") as fh:
            fig.savefig(fh, format="svg")
        plt.close(fig)
        written.append(path)
    return written
