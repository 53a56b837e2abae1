"""Absolute and relative trajectory errors, per-method aggregation, paired sign tests.

Trajectories are (T+1, 3) arrays of [x, y, heading]. Both trajectories of a
pair start from the same pose, so no alignment is applied, and the start pose
(always error-free) is left out of the absolute statistics.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, NamedTuple, Sequence

import numpy as np


class ErrorStats(NamedTuple):
    rmse: float
    mean: float
    final: float = float("nan")


def _check(pred, ref):
    pred = np.asarray(pred, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if pred.shape != ref.shape:
        raise ValueError(f"trajectory length mismatch: {pred.shape} vs {ref.shape}")
    if pred.ndim != 2 or pred.shape[0] < 2 or pred.shape[1] < 3:
        raise ValueError("trajectories need at least two [x, y, heading] poses")
    return pred, ref


def _wrap_deg(a):
    """Wrap degrees to (-180, 180]."""
    return 180.0 - np.mod(180.0 - a, 360.0)


def _stats(e: np.ndarray, with_final: bool = True) -> ErrorStats:
    rmse = float(np.sqrt(np.mean(e * e)))
    mean = float(np.mean(e))
    return ErrorStats(rmse, mean, float(e[-1]) if with_final else float("nan"))


def ate_xy_errors(pred, ref) -> np.ndarray:
    pred, ref = _check(pred, ref)
    return np.linalg.norm(pred[1:, :2] - ref[1:, :2], axis=1)


def ate_xy(pred, ref) -> ErrorStats:
    return _stats(ate_xy_errors(pred, ref))


def ate_heading(pred, ref) -> ErrorStats:
    pred, ref = _check(pred, ref)
    e = np.abs(_wrap_deg(np.degrees(pred[1:, 2] - ref[1:, 2])))
    return _stats(e)


def rpe_xy(pred, ref) -> ErrorStats:
    pred, ref = _check(pred, ref)
    e = np.linalg.norm(np.diff(pred[:, :2], axis=0) - np.diff(ref[:, :2], axis=0), axis=1)
    return _stats(e, with_final=False)


def rpe_heading(pred, ref) -> ErrorStats:
    pred, ref = _check(pred, ref)
    e = np.abs(_wrap_deg(np.degrees(np.diff(pred[:, 2]) - np.diff(ref[:, 2]))))
    return _stats(e, with_final=False)


COLUMNS = (
    ("ate_xy", "rmse"), ("ate_xy", "mean"), ("ate_xy", "final"),
    ("ate_hdg", "rmse"), ("ate_hdg", "mean"), ("ate_hdg", "final"),
    ("rpe_xy", "rmse"), ("rpe_xy", "mean"),
    ("rpe_hdg", "rmse"), ("rpe_hdg", "mean"),
)


def episode_metrics(pred, ref) -> Dict[str, float]:
    """Flat dict keyed like ``ate_xy_final`` for one trajectory pair."""
    groups = {"ate_xy": ate_xy(pred, ref), "ate_hdg": ate_heading(pred, ref),
              "rpe_xy": rpe_xy(pred, ref), "rpe_hdg": rpe_heading(pred, ref)}
    return {f"{g}_{s}": getattr(groups[g], s) for g, s in COLUMNS}


def sign_test(deltas: Iterable[float]) -> float:
    """One-sided exact sign test p-value for 'deltas tend to be positive' (zeros dropped)."""
    d = np.asarray(list(deltas), dtype=float)
    d = d[d != 0]
    n = d.size
    if n == 0:
        return 1.0
    k = int(np.sum(d > 0))
    return sum(math.comb(n, i) for i in range(k, n + 1)) / 2.0 ** n


@dataclass
class PairedComparison:
    better: str
    worse: str
    metric: str
    n: int
    wins: int
    mean_delta: float
    p_value: float

    @property
    def win_rate(self) -> float:
        return self.wins / self.n if self.n else 0.0


@dataclass
class MetricTable:
    rows: Dict[str, Dict[str, float]]
    n_episodes: Dict[str, int]
    per_episode: Dict[str, List[Dict[str, float]]] = field(default_factory=dict)

    def best(self) -> Dict[str, str]:
        """Lowest method per column."""
        out = {}
        for g, s in COLUMNS:
            key = f"{g}_{s}"
            out[key] = min(self.rows, key=lambda m: self.rows[m][key])
        return out

    def compare(self, better: str, worse: str, metric: str) -> PairedComparison:
        """Paired per-episode deltas (worse - better) matched by episode index."""
        a = {e["index"]: e[metric] for e in self.per_episode[better]}
        b = {e["index"]: e[metric] for e in self.per_episode[worse]}
        common = sorted(set(a) & set(b))
        deltas = np.array([b[i] - a[i] for i in common])
        return PairedComparison(better, worse, metric, len(common), int(np.sum(deltas > 0)),
                                float(deltas.mean()) if len(deltas) else float("nan"),
                                sign_test(deltas))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "episodes"] + [f"{g}_{s}" for g, s in COLUMNS])
        for m, row in self.rows.items():
            w.writerow([m, self.n_episodes[m]] + [repr(row[f"{g}_{s}"]) for g, s in COLUMNS])
        return buf.getvalue()

    def to_text(self) -> str:
        best = self.best()
        head = ["method"] + [f"{g}_{s}" for g, s in COLUMNS]
        lines = []
        width = max(len(m) for m in self.rows) + 2
        lines.append(head[0].ljust(width) + "".join(h.rjust(14) for h in head[1:]))
        for m, row in self.rows.items():
            cells = []
            for g, s in COLUMNS:
                key = f"{g}_{s}"
                mark = "*" if best[key] == m else " "
                cells.append(f"{row[key]:.4f}{mark}".rjust(14))
            lines.append(m.ljust(width) + "".join(cells))
        lines.append("* best per column; per-episode metrics averaged within each method; "
                     "start pose excluded from ATE")
        return "\n".join(lines) + "\n"


def aggregate(records: Iterable) -> MetricTable:
    """Average per-episode metrics within each method (episodes weigh equally)."""
    groups: Dict[str, List[Dict[str, float]]] = {}
    for r in records:
        m = r.method.value if hasattr(r.method, "value") else str(r.method)
        e = episode_metrics(r.poses, r.gt_poses)
        e["index"] = r.index
        groups.setdefault(m, []).append(e)
    if not groups:
        raise ValueError("no episode records to aggregate")
    rows, counts = {}, {}
    for m, eps in groups.items():
        if not eps:
            raise ValueError(f"method {m} has no episodes")
        eps.sort(key=lambda e: e["index"])
        rows[m] = {f"{g}_{s}": float(np.mean([e[f"{g}_{s}"] for e in eps])) for g, s in COLUMNS}
        counts[m] = len(eps)
    return MetricTable(rows, counts, groups)
