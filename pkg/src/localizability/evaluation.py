"""Per-axis classification metrics, precision-recall sweeps and the
comparison between the learned classifier and the eigenvalue baseline."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .registration import AXES, eigen_flags, hessian_at


class MissingGroundTruthError(ValueError):
    pass


@dataclass
class AxisMetrics:
    """Confusion counts and derived scores per axis; positive means non-localizable."""

    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray

    @classmethod
    def from_counts(cls, tp, fp, tn, fn) -> "AxisMetrics":
        return cls(*(np.asarray(v, dtype=np.int64).reshape(-1) for v in (tp, fp, tn, fn)))

    @property
    def n(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.tn[0] + self.fn[0])

    @staticmethod
    def _ratio(num, den):
        num = np.asarray(num, dtype=float)
        den = np.asarray(den, dtype=float)
        undefined = den == 0
        return np.where(undefined, 0.0, num / np.where(undefined, 1.0, den)), undefined

    @property
    def accuracy(self):
        return (self.tp + self.tn) / np.maximum(self.tp + self.fp + self.tn + self.fn, 1)

    @property
    def precision(self):
        return self._ratio(self.tp, self.tp + self.fp)[0]

    @property
    def recall(self):
        return self._ratio(self.tp, self.tp + self.fn)[0]

    @property
    def precision_undefined(self):
        return (self.tp + self.fp) == 0

    @property
    def recall_undefined(self):
        return (self.tp + self.fn) == 0

    @property
    def f1(self):
        p, r = self.precision, self.recall
        return self._ratio(2 * p * r, p + r)[0]

    def pooled(self) -> "AxisMetrics":
        """All axis decisions pooled into one confusion table."""
        return AxisMetrics.from_counts(self.tp.sum(), self.fp.sum(), self.tn.sum(), self.fn.sum())

    def to_json(self) -> dict:
        per_axis = {}
        for i, a in enumerate(AXES[:len(self.tp)]):
            per_axis[a] = {
                "accuracy": float(self.accuracy[i]), "precision": float(self.precision[i]),
                "recall": float(self.recall[i]), "f1": float(self.f1[i]),
                "tp": int(self.tp[i]), "fp": int(self.fp[i]),
                "tn": int(self.tn[i]), "fn": int(self.fn[i]),
                "precision_undefined": bool(self.precision_undefined[i]),
                "recall_undefined": bool(self.recall_undefined[i]),
            }
        pooled = self.pooled()
        return {
            "samples": self.n,
            "per_axis": per_axis,
            "macro": {k: float(np.mean(getattr(self, k)))
                      for k in ("accuracy", "precision", "recall", "f1")},
            "pooled": {k: float(getattr(pooled, k)[0])
                       for k in ("accuracy", "precision", "recall", "f1")},
        }


def compute_metrics(predictions, truths) -> AxisMetrics:
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(truths, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"predictions {pred.shape} and truths {true.shape} differ in shape")
    if pred.size == 0:
        raise ValueError("cannot compute metrics on an empty set")
    pred = pred.reshape(len(pred), -1).astype(bool)
    true = true.reshape(len(true), -1).astype(bool)
    return AxisMetrics.from_counts((pred & true).sum(0), (pred & ~true).sum(0),
                                   (~pred & ~true).sum(0), (~pred & true).sum(0))


def pr_curve(probabilities, truths, axis: int, steps: int = 99):
    """``(tau, precision, recall)`` for ``steps`` thresholds evenly inside (0, 1)."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    p = np.asarray(probabilities, dtype=float).reshape(-1, 6)[:, axis]
    t = np.asarray(truths).reshape(-1, 6)[:, axis].astype(bool)
    if len(p) == 0:
        raise ValueError("empty probability set")
    out = []
    for tau in np.linspace(0.0, 1.0, steps + 2)[1:-1]:
        pred = p > tau
        tp = int(np.sum(pred & t))
        fp = int(np.sum(pred & ~t))
        fn = int(np.sum(~pred & t))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        out.append((float(tau), prec, rec))
    return out


def select_threshold(curve, min_precision: float = 0.0) -> float:
    """Threshold with the best F1 among curve points meeting ``min_precision``."""
    best, best_tau = -1.0, 0.5
    for tau, p, r in curve:
        if p < min_precision:
            continue
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        if f1 > best:
            best, best_tau = f1, tau
    return best_tau


def agreement_f1(metrics: AxisMetrics) -> np.ndarray:
    """Per-axis F1, counting an axis with neither true nor predicted positives as 1."""
    f1 = metrics.f1.copy()
    empty = (metrics.tp + metrics.fp + metrics.fn) == 0
    f1[empty] = 1.0
    return f1


# --------------------------------------------------------------------------
# baseline comparison


def smallest_eigenvalues(clouds, k: int = 10):
    """Eigen-decomposition of each cloud's self-registration Hessian."""
    out = []
    for c in clouds:
        w, v = np.linalg.eigh(hessian_at(c, k=k))
        out.append((w, v))
    return out


def eigen_histogram(values, bins: int = 30):
    """Log-spaced histogram; returns ``(bin_centres, counts)``."""
    v = np.asarray(values, dtype=float)
    v = v[v > 0]
    if len(v) == 0:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    lo, hi = np.log10(v.min()), np.log10(v.max())
    if hi - lo < 1e-9:
        lo, hi = lo - 0.5, hi + 0.5
    # bin in log space so the extremes land inside the outer edges
    counts, edges = np.histogram(np.log10(v), bins=bins, range=(lo, hi))
    return 10.0 ** (0.5 * (edges[:-1] + edges[1:])), counts


@dataclass
class ComparisonReport:
    eigen_thresholds: list
    baseline: list  # AxisMetrics per threshold
    baseline_per_env: dict  # env -> list of AxisMetrics per threshold
    network: AxisMetrics | None
    network_per_env: dict
    eigen_values: dict = field(default_factory=dict)  # sensor -> smallest eigenvalues

    def universal_thresholds(self, min_f1: float = 0.9) -> list:
        """Thresholds whose agreement F1 reaches ``min_f1`` on every axis of every environment."""
        out = []
        for i, thr in enumerate(self.eigen_thresholds):
            if all(np.all(agreement_f1(m[i]) >= min_f1) for m in self.baseline_per_env.values()):
                out.append(thr)
        return out

    def network_meets(self, min_f1: float = 0.9) -> bool:
        if not self.network_per_env:
            return False
        return all(np.all(agreement_f1(m) >= min_f1) for m in self.network_per_env.values())

    def to_json(self, min_f1: float = 0.9) -> dict:
        best = {env: float(self.eigen_thresholds[int(np.argmax(
            [agreement_f1(m).min() for m in ms]))]) for env, ms in self.baseline_per_env.items()}
        return {
            "eigen_thresholds": [float(t) for t in self.eigen_thresholds],
            "baseline": [m.to_json() for m in self.baseline],
            "baseline_per_env": {env: [m.to_json() for m in ms]
                                 for env, ms in sorted(self.baseline_per_env.items())},
            "best_threshold_per_env": dict(sorted(best.items())),
            "universal_thresholds": [float(t) for t in self.universal_thresholds(min_f1)],
            "network": self.network.to_json() if self.network is not None else None,
            "network_per_env": {env: m.to_json() for env, m in sorted(self.network_per_env.items())},
            "network_meets_f1": self.network_meets(min_f1),
            "min_f1": min_f1,
            "eigen_median": {s: float(np.median(v)) for s, v in sorted(self.eigen_values.items())},
        }


def _group(samples):
    groups = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.provenance.env, []).append(i)
    return groups


def compare_methods(samples, eigen_thresholds, network_predictions=None, *,
                    sensor_sets: dict | None = None, normal_neighbors: int = 10) -> ComparisonReport:
    """Score the eigenvalue baseline at each threshold, and optionally the network.

    ``network_predictions`` holds one binary 6-vector per sample.
    ``sensor_sets`` maps a sensor name to extra clouds whose smallest
    eigenvalues are collected for the distribution comparison.
    """
    samples = list(samples)
    if not samples:
        raise MissingGroundTruthError("no samples to compare on")
    if any(getattr(s, "target", None) is None for s in samples):
        raise MissingGroundTruthError("every sample needs a Monte Carlo label")
    truths = np.array([s.target for s in samples])
    eig = smallest_eigenvalues([s.cloud for s in samples], normal_neighbors)
    groups = _group(samples)
    baseline, per_env = [], {env: [] for env in groups}
    for thr in eigen_thresholds:
        flags = np.array([eigen_flags(w, v, thr) for w, v in eig])
        baseline.append(compute_metrics(flags, truths))
        for env, idx in groups.items():
            per_env[env].append(compute_metrics(flags[idx], truths[idx]))
    net, net_env = None, {}
    if network_predictions is not None:
        pred = np.asarray(network_predictions)
        net = compute_metrics(pred, truths)
        net_env = {env: compute_metrics(pred[idx], truths[idx]) for env, idx in groups.items()}
    eig_values = {}
    for name, clouds in (sensor_sets or {}).items():
        eig_values[name] = np.array([w[0] for w, _ in smallest_eigenvalues(clouds, normal_neighbors)])
    return ComparisonReport(list(eigen_thresholds), baseline, per_env, net, net_env, eig_values)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_report(report: ComparisonReport, directory, min_f1: float = 0.9) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "comparison.json").write_text(json.dumps(report.to_json(min_f1), indent=1, sort_keys=True))
    for sensor, values in sorted(report.eigen_values.items()):
        centres, counts = eigen_histogram(values)
        write_csv(directory / f"eigen_hist_{sensor}.csv", ("value", "count"),
                  [(f"{c:.9g}", int(n)) for c, n in zip(centres, counts)])
    return directory
