"""Verification metrics and error-versus-discard (EDC) curves.

Conventions: a comparison *matches* when its similarity is ``>= threshold``,
so FMR counts impostor similarities ``>= t`` and FNMR counts genuine
similarities ``< t``.  Discarding works on samples; a pair is kept only while
both of its samples are kept.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

GENUINE = "genuine"
IMPOSTOR = "impostor"
_LABELS = {"genuine": GENUINE, "1": GENUINE, "mated": GENUINE,
           "impostor": IMPOSTOR, "0": IMPOSTOR, "nonmated": IMPOSTOR}

DEFAULT_GRID = tuple(i / 100 for i in range(99))


@dataclass
class EmbeddingSet:
    ids: list
    vectors: np.ndarray
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ValueError(f"{len(self.ids)} ids for embeddings of shape {self.vectors.shape}")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate sample ids")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.any(norms == 0):
            raise ValueError(f"zero embedding for id {self.ids[int(np.argmin(norms))]!r}")
        self._index = {sid: i for i, sid in enumerate(self.ids)}

    def __contains__(self, sid):
        return sid in self._index

    def vector(self, sid):
        try:
            return self.vectors[self._index[sid]]
        except KeyError:
            raise KeyError(f"unknown sample id {sid!r}") from None


@dataclass(frozen=True)
class Pair:
    id_a: str
    id_b: str
    genuine: bool


@dataclass
class EDCCurve:
    discard_fractions: np.ndarray
    fnmr: np.ndarray
    threshold: float
    target_fmr: float

    def points(self):
        return list(zip(self.discard_fractions.tolist(), self.fnmr.tolist()))


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def fmr_at_threshold(impostor_sims, t):
    sims = np.asarray(impostor_sims, dtype=np.float64)
    if sims.size == 0:
        raise ValueError("no impostor similarities")
    return float(np.count_nonzero(sims >= t) / sims.size)


def fnmr_at_threshold(genuine_sims, t):
    sims = np.asarray(genuine_sims, dtype=np.float64)
    if sims.size == 0:
        raise ValueError("no genuine similarities")
    return float(np.count_nonzero(sims < t) / sims.size)


def calibrate_threshold(impostor_sims, target_fmr):
    """Smallest impostor similarity ``t`` with ``FMR(t) <= target_fmr``.

    Without ties this is ``sorted(sims)[ceil((1 - target_fmr) * n)]``.  When
    no observed similarity qualifies (``target_fmr < 1/n``, or ties at the top)
    the next float above the maximum is returned, giving FMR 0.
    """
    sims = np.sort(np.asarray(impostor_sims, dtype=np.float64))
    if sims.size == 0:
        raise ValueError("no impostor similarities to calibrate on")
    if not 0.0 < target_fmr < 1.0:
        raise ValueError("target_fmr must lie in (0, 1)")
    candidates = np.unique(sims)
    # number of sims >= each candidate
    at_or_above = sims.size - np.searchsorted(sims, candidates, side="left")
    ok = np.nonzero(at_or_above / sims.size <= target_fmr)[0]
    if ok.size:
        return float(candidates[ok[0]])
    return float(np.nextafter(sims[-1], np.inf))


def discard_count(fraction, num_samples):
    """``floor(fraction * num_samples)``, tolerant to binary rounding of the grid."""
    return int(math.floor(fraction * num_samples + 1e-9))


def _check_grid(grid):
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)
    if grid.size == 0:
        raise ValueError("empty discard grid")
    if grid[0] != 0.0:
        raise ValueError("discard grid must start at 0")
    if np.any(np.diff(grid) <= 0) or grid[-1] > 1.0:
        raise ValueError("discard grid must increase strictly within [0, 1]")
    return grid


def pair_similarities(emb, pairs):
    sims = np.empty(len(pairs))
    for k, p in enumerate(pairs):
        sims[k] = cosine_similarity(emb.vector(p.id_a), emb.vector(p.id_b))
    return sims


def edc_curve(emb, pairs, qualities, target_fmr=1e-3, grid=DEFAULT_GRID):
    """FNMR at a fixed threshold as low-quality samples are discarded.

    The threshold is calibrated once on every impostor pair.  At fraction
    ``r`` the ``floor(r * n)`` lowest-quality samples are removed (``n`` =
    distinct samples referenced by ``pairs``; ties broken by ascending id).
    When no genuine pair survives the previous FNMR is carried forward.
    """
    grid = _check_grid(grid)
    pairs = list(pairs)
    for p in pairs:
        for sid in (p.id_a, p.id_b):
            if sid not in emb:
                raise KeyError(f"unknown sample id {sid!r}")
            if sid not in qualities:
                raise KeyError(f"missing quality for sample {sid!r}")
    genuine = np.array([p.genuine for p in pairs], dtype=bool)
    if not genuine.any() or genuine.all():
        raise ValueError("need at least one genuine and one impostor pair")

    sims = pair_similarities(emb, pairs)
    threshold = calibrate_threshold(sims[~genuine], target_fmr)
    non_match = genuine & (sims < threshold)

    samples = sorted({p.id_a for p in pairs} | {p.id_b for p in pairs},
                     key=lambda sid: (float(qualities[sid]), sid))
    rank = {sid: i for i, sid in enumerate(samples)}
    # a pair disappears once its lower-ranked sample is discarded
    pair_rank = np.array([min(rank[p.id_a], rank[p.id_b]) for p in pairs])

    fnmr = np.empty(grid.size)
    last = None
    for g, r in enumerate(grid):
        alive = genuine & (pair_rank >= discard_count(r, len(samples)))
        n_alive = np.count_nonzero(alive)
        if n_alive:
            last = np.count_nonzero(non_match & alive) / n_alive
        fnmr[g] = last
    return EDCCurve(grid, fnmr, threshold, target_fmr)


def pauc(curve, max_discard=0.3):
    """Trapezoidal area under FNMR over discard fractions ``[0, max_discard]``.

    The area is raw (not normalized by ``max_discard``).  If ``max_discard``
    falls between grid points the curve is linearly interpolated there.
    """
    r = np.asarray(curve.discard_fractions, dtype=np.float64)
    f = np.asarray(curve.fnmr, dtype=np.float64)
    tol = 1e-12
    if r[-1] < max_discard - tol:
        raise ValueError(f"curve ends at {r[-1]}, before max_discard={max_discard}")
    inside = r <= max_discard + tol
    xs, ys = r[inside], f[inside]
    if xs[-1] < max_discard - tol:
        xs = np.append(xs, max_discard)
        ys = np.append(ys, np.interp(max_discard, r, f))
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))


def auc(curve):
    return pauc(curve, float(curve.discard_fractions[-1]))


# -- file formats ---------------------------------------------------------------

def read_pairs(path):
    """Pairs CSV with columns ``id_a,id_b,label`` (header optional)."""
    pairs = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or not "".join(row).strip():
                continue
            if lineno == 1 and [c.strip() for c in row[:3]] == ["id_a", "id_b", "label"]:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected id_a,id_b,label")
            label = _LABELS.get(row[2].strip().lower())
            if label is None:
                raise ValueError(f"{path}:{lineno}: unknown label {row[2]!r}")
            pairs.append(Pair(row[0].strip(), row[1].strip(), label == GENUINE))
    return pairs


def write_curve(path, curve):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["r", "fnmr"])
        for r, f in curve.points():
            w.writerow([repr(r), repr(f)])
