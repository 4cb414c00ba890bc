"""Balanced accuracy, missing-modality subset evaluation, AULC and rank summaries."""

from __future__ import annotations

import math
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .masks import nonempty_subsets, subset_name


def balanced_accuracy(preds, labels, n_classes: int | None = None) -> float:
    """Mean per-class recall over the classes that occur in ``labels``."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("balanced accuracy of an empty set")
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in shape")
    k = int(max(labels.max(), preds.max())) + 1 if n_classes is None else n_classes
    support = np.bincount(labels, minlength=k)
    hits = np.bincount(labels[preds == labels], minlength=k)
    present = support > 0
    return float(np.mean(hits[present] / support[present]))


def subset_eval(model, test, n_modalities: int | None = None) -> dict[str, float]:
    """Balanced accuracy with every other modality masked, for all nonempty subsets."""
    M = n_modalities or model.cfg.n_modalities
    out = {}
    for s in nonempty_subsets(M):
        preds = model.predict(test.with_presence(s))
        out[subset_name(s, M)] = balanced_accuracy(preds, test.labels, model.cfg.n_classes)
    return out


@dataclass
class LearningCurve:
    subset: str
    acc: list[float]  # acc[0] == 0 by convention; acc[i] after the i-th evaluation

    def __post_init__(self):
        if not self.acc or self.acc[0] != 0:
            raise ValueError("learning curve must start with ACC(0) = 0")
        if any(not 0.0 <= a <= 1.0 for a in self.acc):
            raise ValueError("accuracies must lie in [0, 1]")

    @property
    def n(self) -> int:
        return len(self.acc) - 1

    @classmethod
    def from_evaluations(cls, subset: str, accs: Iterable[float]) -> "LearningCurve":
        return cls(subset, [0.0] + [float(a) for a in accs])


def aulc(curve: LearningCurve | Iterable[float]) -> float:
    """Trapezoidal area under ACC(0..N) with unit spacing; lies in [0, N]."""
    acc = curve.acc if isinstance(curve, LearningCurve) else list(curve)
    if len(acc) < 2:
        raise ValueError("AULC needs N >= 1")
    return float(sum((acc[i] + acc[i + 1]) / 2.0 for i in range(len(acc) - 1)))


# ------------------------------------------------------------------ aggregation

@dataclass
class Cell:
    dataset: str
    regime: str
    strategy: str
    subset: str
    values: list[float] = field(default_factory=list)
    scale: int = 1

    @property
    def mean(self) -> float:
        return statistics.fmean(self.values)

    @property
    def std(self) -> float:
        return statistics.stdev(self.values) if len(self.values) > 1 else 0.0

    @property
    def n(self) -> int:
        return len(self.values)

    def display(self) -> str:
        return f"{self.mean * self.scale:.2f} ± {self.std * self.scale:.2f}"


def strategy_label(strategy: str, moddrop: bool) -> str:
    return f"{strategy}+moddrop" if moddrop else strategy


def aggregate(records: Iterable[Mapping]) -> list[Cell]:
    """Mean / sample std of AULC per (dataset, regime, strategy, subset).

    Each record is a summary dict with keys ``dataset``, ``regime``,
    ``strategy``, ``moddrop``, ``aulc`` (subset -> value) and optionally
    ``partial_subsets``; partially predictive subsets are flagged for x10 display.
    """
    cells: dict[tuple, Cell] = {}
    for rec in sorted(records, key=lambda r: str(r.get("run_id", ""))):
        strat = strategy_label(rec["strategy"], bool(rec.get("moddrop", False)))
        partial = set(rec.get("partial_subsets", []))
        for subset, value in rec["aulc"].items():
            key = (rec["dataset"], rec["regime"], strat, subset)
            if key not in cells:
                cells[key] = Cell(*key, scale=10 if subset in partial else 1)
            cells[key].values.append(float(value))
    for c in cells.values():
        c.values.sort()
    return [cells[k] for k in sorted(cells)]


def curve_table(records: Iterable[Mapping]) -> list[dict]:
    """Mean / std of balanced accuracy per iteration, for the learning-curve plots."""
    acc: dict[tuple, list[list[float]]] = defaultdict(list)
    for rec in records:
        strat = strategy_label(rec["strategy"], bool(rec.get("moddrop", False)))
        for subset, values in rec["curves"].items():
            acc[(rec["dataset"], rec["regime"], strat, subset)].append(values)
    rows = []
    for key in sorted(acc):
        runs = acc[key]
        length = min(len(r) for r in runs)
        for i in range(length):
            vals = sorted(r[i] for r in runs)
            rows.append({
                "dataset": key[0], "regime": key[1], "strategy": key[2], "subset": key[3],
                "iteration": i, "mean": statistics.fmean(vals),
                "std": statistics.stdev(vals) if len(vals) > 1 else 0.0, "n": len(vals),
            })
    return rows


# ------------------------------------------------------------------------ ranks

def rank_descending(values: Mapping[str, float]) -> dict[str, float]:
    """Rank 1 = largest value; tied values share the mean of their ranks."""
    items = sorted(values.items(), key=lambda kv: -kv[1])
    ranks: dict[str, float] = {}
    i = 0
    while i < len(items):
        j = i
        while j + 1 < len(items) and items[j + 1][1] == items[i][1]:
            j += 1
        r = (i + 1 + j + 1) / 2.0
        for k in range(i, j + 1):
            ranks[items[k][0]] = r
        i = j + 1
    return ranks


def rank_summary(cells: Iterable[Cell], metric_selector: Callable[[str], str] | Mapping[str, str]) -> dict[str, dict[str, float]]:
    """Per regime, the sum over datasets of each strategy's rank on the selected subset.

    ``metric_selector`` maps a dataset name to the subset whose mean AULC is ranked.
    Lower sums are better.
    """
    select = metric_selector if callable(metric_selector) else metric_selector.__getitem__
    by_cell: dict[tuple[str, str], dict[str, float]] = defaultdict(dict)
    for c in cells:
        if c.subset == select(c.dataset):
            by_cell[(c.regime, c.dataset)][c.strategy] = c.mean
    strategies_per_regime: dict[str, set] = defaultdict(set)
    for (regime, _), vals in by_cell.items():
        strategies_per_regime[regime] |= set(vals)
    out: dict[str, dict[str, float]] = {}
    for (regime, dataset), vals in sorted(by_cell.items()):
        missing = strategies_per_regime[regime] - set(vals)
        if missing:
            raise ValueError(f"missing cells for {sorted(missing)} in {dataset}/{regime}")
        sums = out.setdefault(regime, defaultdict(float))
        for s, r in rank_descending(vals).items():
            sums[s] += r
    return {reg: dict(sorted(v.items())) for reg, v in out.items()}


def mean_std(values: Iterable[float]) -> tuple[float, float]:
    vals = list(values)
    if not vals:
        return math.nan, math.nan
    return statistics.fmean(vals), (statistics.stdev(vals) if len(vals) > 1 else 0.0)
