"""Accuracy / per-class F1 reports, relative comparison tables and the latency harness."""

from __future__ import annotations

import json
import math
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .models import DatasetArrays, ModelBundle, predict
from .text import LabeledExample, Query, UserContext
from .training import predict_arrays


@dataclass(frozen=True)
class EvalReport:
    labels: tuple[str, ...]
    accuracy: float
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    support: tuple[int, ...]
    confusion: tuple[tuple[int, ...], ...]  # rows: truth, columns: prediction
    count: int

    def f1_of(self, label: str) -> float:
        return self.f1[self.labels.index(label)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["labels"] = list(self.labels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> EvalReport:
        return cls(
            tuple(d["labels"]),
            float(d["accuracy"]),
            tuple(d["precision"]),
            tuple(d["recall"]),
            tuple(d["f1"]),
            tuple(d["support"]),
            tuple(tuple(r) for r in d["confusion"]),
            int(d["count"]),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> EvalReport:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _div(a: float, b: float) -> float:
    return a / b if b else 0.0


def report_from_predictions(y_true: Sequence[int], y_pred: Sequence[int], labels: Sequence[str]) -> EvalReport:
    """Confusion-matrix metrics; any 0/0 precision, recall or F1 is reported as 0."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    c = len(labels)
    if y_true.shape != y_pred.shape:
        raise ValueError("truth and prediction lengths differ")
    if len(y_true) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if y_true.min() < 0 or y_true.max() >= c or y_pred.min() < 0 or y_pred.max() >= c:
        raise ValueError(f"label ids outside the {c}-label set")
    cm = np.zeros((c, c), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    tp = np.diag(cm)
    prec = [_div(tp[k], cm[:, k].sum()) for k in range(c)]
    rec = [_div(tp[k], cm[k].sum()) for k in range(c)]
    f1 = [_div(2 * p * r, p + r) for p, r in zip(prec, rec)]
    return EvalReport(
        labels=tuple(labels),
        accuracy=float(tp.sum() / cm.sum()),
        precision=tuple(float(x) for x in prec),
        recall=tuple(float(x) for x in rec),
        f1=tuple(float(x) for x in f1),
        support=tuple(int(x) for x in cm.sum(axis=1)),
        confusion=tuple(tuple(int(x) for x in row) for row in cm),
        count=int(cm.sum()),
    )


def evaluate(bundle: ModelBundle, dataset: Sequence[LabeledExample]) -> EvalReport:
    """Argmax predictions of ``bundle`` scored against the dataset labels."""
    if not dataset:
        raise ValueError("cannot evaluate an empty dataset")
    c = len(bundle.labels)
    if any(not 0 <= e.label < c for e in dataset):
        raise ValueError(f"dataset labels do not fit the bundle's {c}-label set")
    data = DatasetArrays.build(bundle.config, dataset)
    pred = predict_arrays(bundle.config, bundle.tensors(), data)
    return report_from_predictions(data.labels, pred, bundle.labels.names)


# ---------------------------------------------------------------------------
# comparison tables
# ---------------------------------------------------------------------------


def relative_delta(value: float, base: float) -> float:
    """Percentage change of ``value`` over ``base``; NaN when the base is 0."""
    return (value - base) / base * 100.0 if base else float("nan")


@dataclass(frozen=True)
class ComparisonRow:
    name: str
    d_accuracy: float | None
    d_f1: tuple[float, ...] | None


@dataclass(frozen=True)
class ComparisonTable:
    baseline: str
    labels: tuple[str, ...]
    rows: tuple[ComparisonRow, ...]

    def to_dict(self) -> dict:
        return {"baseline": self.baseline, "labels": list(self.labels), "rows": [asdict(r) for r in self.rows]}

    def render(self) -> str:
        head = ["Model", "Accuracy"] + [f"F1 ({lab.lower()})" for lab in self.labels]
        body = []
        for r in self.rows:
            if r.d_accuracy is None:
                body.append([r.name] + ["-"] * (len(head) - 1))
            else:
                body.append([r.name] + [_fmt_pct(r.d_accuracy)] + [_fmt_pct(x) for x in r.d_f1])
        widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
        lines = []
        for row in [head] + body:
            cells = [row[0].ljust(widths[0])] + [cell.rjust(w) for cell, w in zip(row[1:], widths[1:])]
            lines.append("  ".join(cells).rstrip())
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


def _fmt_pct(x: float) -> str:
    return "n/a" if math.isnan(x) else f"{x:+.2f}%"


def compare_models(reports: Mapping[str, EvalReport], baseline: str) -> ComparisonTable:
    """Relative deltas of every report against ``baseline``; baseline first, then input order."""
    if baseline not in reports:
        raise KeyError(f"baseline {baseline!r} not among reports {list(reports)}")
    base = reports[baseline]
    for name, r in reports.items():
        if r.labels != base.labels:
            raise ValueError(f"report {name!r} uses a different label set")
    rows = [ComparisonRow(baseline, None, None)]
    for name, r in reports.items():
        if name == baseline:
            continue
        rows.append(ComparisonRow(
            name,
            relative_delta(r.accuracy, base.accuracy),
            tuple(relative_delta(a, b) for a, b in zip(r.f1, base.f1)),
        ))
    return ComparisonTable(baseline, base.labels, tuple(rows))


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------


def percentile(samples: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the value at sorted index ceil(p * n) - 1."""
    if not len(samples):
        raise ValueError("percentile of an empty sample")
    if not 0.0 < p <= 1.0:
        raise ValueError("p must be in (0, 1]")
    s = sorted(samples)
    rank = math.ceil(round(p * len(s), 9))
    return s[max(rank, 1) - 1]


@dataclass(frozen=True)
class LatencyStats:
    count: int
    p50: float
    p90: float
    p99: float
    max: float

    @classmethod
    def from_samples(cls, samples_us: Sequence[float]) -> LatencyStats:
        return cls(len(samples_us), percentile(samples_us, 0.5), percentile(samples_us, 0.9),
                   percentile(samples_us, 0.99), float(max(samples_us)))


def machine_descriptor() -> str:
    import numpy

    cpu = platform.processor() or platform.machine()
    return f"{platform.platform()}; cpu={cpu}; cores={os.cpu_count()}; python={platform.python_version()}; numpy={numpy.__version__}"


@dataclass
class LatencyReport:
    models: dict[str, LatencyStats] = field(default_factory=dict)
    machine: str = field(default_factory=machine_descriptor)

    def to_dict(self) -> dict:
        return {"machine": self.machine, "models": {k: asdict(v) for k, v in self.models.items()}}

    def render(self) -> str:
        head = ["Model", "n", "p50 us", "p90 us", "p99 us", "max us"]
        rows = [[k, str(v.count)] + [f"{x:.1f}" for x in (v.p50, v.p90, v.p99, v.max)] for k, v in self.models.items()]
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        out = ["  ".join([r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]) for r in [head] + rows]
        return "\n".join(out + [f"machine: {self.machine}"])


def measure_latency(
    bundle: ModelBundle | None,
    queries: Sequence[Query],
    n_warmup: int = 100,
    n_measured: int = 1000,
    name: str = "model",
    users: Sequence[UserContext | None] | None = None,
    predict_fn: Callable[[Query, UserContext | None], object] | None = None,
    timer: Callable[[], int] = time.perf_counter_ns,
) -> LatencyReport:
    """Batch-1 timing of ``predict`` cycling through ``queries``; warmup calls are discarded."""
    if not queries:
        raise ValueError("latency workload is empty")
    if n_measured < 1000:
        raise ValueError("need at least 1000 measured samples for a reportable p99")
    fn = predict_fn or (lambda q, u: predict(bundle, q, u))
    users = users or [None] * len(queries)
    n = len(queries)
    for i in range(n_warmup):
        fn(queries[i % n], users[i % n])
    samples = []
    for i in range(n_measured):
        q, u = queries[i % n], users[i % n]
        t0 = timer()
        fn(q, u)
        samples.append((timer() - t0) / 1000.0)
    return LatencyReport({name: LatencyStats.from_samples(samples)})
