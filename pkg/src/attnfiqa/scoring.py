"""Quality scores from captured pre-softmax attention.

The flattened attention vector is laid out head-major, then row-major inside
each ``N x N`` matrix.  Heads are numbered from 1 in the public API.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

METRICS = ("mean", "max", "median", "inv_std")
CONCAT = "concat"
AVG_OF_HEADS = "avg_of_heads"


class DegenerateDispersionError(ValueError):
    """The attention values have (near) zero spread, so 1/std is undefined."""


@dataclass(frozen=True)
class QualityScore:
    value: float
    strategy: str
    metric: str
    block: int


def head_strategy(h):
    return f"head_{h}"


def parse_strategy(name, num_heads=None):
    """Return ``(kind, head)``; ``kind`` is ``concat``, ``avg_of_heads`` or ``head``."""
    if name in (CONCAT, AVG_OF_HEADS):
        return name, None
    if name.startswith("head_"):
        try:
            h = int(name[5:])
        except ValueError:
            raise ValueError(f"unknown strategy {name!r}") from None
        if h < 1 or (num_heads is not None and h > num_heads):
            raise ValueError(f"head index out of range in {name!r}")
        return "head", h
    raise ValueError(f"unknown strategy {name!r}")


def flatten_attention(cap):
    return cap.heads.reshape(-1)


def aggregate(v, metric="mean"):
    """Reduce an attention vector to a scalar with the named metric."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("cannot aggregate an empty vector")
    if metric == "mean":
        return float(v.mean())
    if metric == "max":
        return float(v.max())
    if metric == "median":
        return float(np.median(v))
    if metric == "inv_std":
        std = float(v.std())
        if std < 1e-12:
            raise DegenerateDispersionError("standard deviation below 1e-12")
        return 1.0 / std
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def concat_quality(cap, metric="mean"):
    return QualityScore(aggregate(flatten_attention(cap), metric), CONCAT, metric, cap.block_index)


def per_head_quality(cap, h, metric="mean"):
    if not 1 <= h <= cap.num_heads:
        raise IndexError(f"head index {h} outside [1, {cap.num_heads}]")
    return QualityScore(aggregate(cap.heads[h - 1], metric), head_strategy(h), metric, cap.block_index)


def avg_of_heads_quality(cap, metric="mean"):
    values = [per_head_quality(cap, h, metric).value for h in range(1, cap.num_heads + 1)]
    return QualityScore(float(np.mean(values)), AVG_OF_HEADS, metric, cap.block_index)


def quality(cap, strategy=CONCAT, metric="mean"):
    kind, h = parse_strategy(strategy, cap.num_heads)
    if kind == CONCAT:
        return concat_quality(cap, metric)
    if kind == AVG_OF_HEADS:
        return avg_of_heads_quality(cap, metric)
    return per_head_quality(cap, h, metric)


def normalize_scores(scores):
    """Min-max scale to [0, 1]; a constant list maps to 0.5 everywhere."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("cannot normalize an empty score list")
    lo, hi = s.min(), s.max()
    if hi == lo:
        return [0.5] * s.size
    return list((s - lo) / (hi - lo))


@dataclass(frozen=True)
class GroupSummary:
    group: str
    count: int
    mean: float
    median: float
    q1: float
    q3: float
    min: float
    max: float


def group_statistics(scores, labels):
    """Per-group count, mean and five-number summary.

    Groups come back in natural label order (``Q2`` before ``Q10``); quartiles
    use linear interpolation between order statistics.
    """
    if len(scores) != len(labels):
        raise ValueError(f"{len(scores)} scores but {len(labels)} labels")
    groups = {}
    for s, g in zip(scores, labels):
        if g is None or str(g) == "":
            raise ValueError("empty group label")
        groups.setdefault(str(g), []).append(float(s))
    out = []
    for g in sorted(groups, key=_natural_key):
        v = np.asarray(groups[g])
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        out.append(GroupSummary(g, int(v.size), float(v.mean()), float(med),
                                float(q1), float(q3), float(v.min()), float(v.max())))
    return out


def _natural_key(label):
    return [(0, int(t), "") if t.isdigit() else (1, 0, t) for t in re.split(r"(\d+)", label)]


SCORE_COLUMNS = ("path", "raw_score", "strategy", "metric", "block")


def format_score(value):
    """Round-trippable text for a score; NaN for undefined values."""
    return "nan" if value is None or not np.isfinite(value) else repr(float(value))


def write_scores(fh, rows, extra_columns=()):
    """Write ``(path, QualityScore, *extra)`` rows as CSV to an open text file."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SCORE_COLUMNS + tuple(extra_columns))
    for path, score, *extra in rows:
        w.writerow([path, format_score(score.value), score.strategy, score.metric,
                    score.block, *extra])


def read_scores(path, key="path"):
    """Read a score CSV into ``{key: raw_score}``.

    ``key="stem"`` keys rows by the file stem of the ``path`` column instead
    of the full string.  Duplicate keys are an error.
    """
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "raw_score"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns path,raw_score")
        for row in reader:
            k = Path(row["path"]).stem if key == "stem" else row["path"]
            if k in out:
                raise ValueError(f"{path}: duplicate score key {k!r}")
            out[k] = float(row["raw_score"])
    return out
