"""DCG against expert labels, Kendall's tau against simulator truth, and
weighted-sum ensembles of relevance models."""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import CompatibilityError, ConfigError, CoverageError

CUTOFFS = (1, 3, 5, 10)


def dcg_at_n(labels, n: int) -> float:
    """``sum_k G_k / log2(k + 1)`` over the first ``n`` ranked labels (raw gains)."""
    if n < 1:
        raise ValueError(f"cutoff must be at least 1, got {n}")
    total = 0.0
    for k, g in enumerate(labels[:n], start=1):
        total += g / math.log2(k + 1)
    return total


@dataclass
class DcgReport:
    per_query: dict = field(default_factory=dict)  # query_id -> tuple of DCG at CUTOFFS
    mean: dict = field(default_factory=dict)  # cutoff -> mean DCG

    @property
    def n_queries(self) -> int:
        return len(self.per_query)

    def lines(self, per_query: bool = False):
        yield "metric\tmean\tn_queries\n"
        for c in CUTOFFS:
            yield f"DCG@{c}\t{self.mean[c]!r}\t{self.n_queries}\n"
        if per_query:
            yield "#query_id\t" + "\t".join(f"DCG@{c}" for c in CUTOFFS) + "\n"
            for q in sorted(self.per_query):
                yield q + "\t" + "\t".join(repr(v) for v in self.per_query[q]) + "\n"

    def to_tsv(self, per_query: bool = False) -> str:
        return "".join(self.lines(per_query))


def ranked_labels(doc_scores: dict, doc_labels: dict) -> list:
    """Labels of the annotated docs sorted by descending score, doc_id ascending on ties."""
    order = sorted(doc_labels, key=lambda d: (-doc_scores[d], d))
    return [doc_labels[d] for d in order]


def evaluate(scores, annotations) -> DcgReport:
    """Per-query and mean DCG@{1,3,5,10} of ``scores`` on annotated queries.

    ``scores`` maps query_id -> {doc_id: score}.  Only annotated documents are
    ranked.
    """
    labels = defaultdict(dict)
    for a in annotations:
        labels[a.query_id][a.doc_id] = a.label
    missing = [(q, d) for q, docs in labels.items() for d in docs
               if d not in scores.get(q, {})]
    if missing:
        raise CoverageError(sorted(missing))
    report = DcgReport()
    for q in sorted(labels):
        ranked = ranked_labels(scores[q], labels[q])
        report.per_query[q] = tuple(dcg_at_n(ranked, c) for c in CUTOFFS)
    for j, c in enumerate(CUTOFFS):
        vals = [v[j] for v in report.per_query.values()]
        report.mean[c] = float(sum(vals) / len(vals)) if vals else 0.0
    return report


def scores_by_query(arrays, values) -> dict:
    out = {}
    for i, q in enumerate(arrays.query_ids):
        sl = arrays.session_rows(i)
        out[q] = dict(zip(arrays.doc_ids[sl], (float(v) for v in values[sl])))
    return out


def mean_dcg_for_model(model, arrays, annotations, n: int = 10) -> float:
    from .estimator import predict_relevance

    scores = scores_by_query(arrays, predict_relevance(model, arrays.features))
    anns = [a for a in annotations if a.query_id in scores]
    if not anns:
        return float("nan")
    return evaluate(scores, anns).mean[n]


def kendall_tau(ranking, truth) -> float:
    """Kendall's tau-b between two score assignments over the same items.

    ``ranking`` and ``truth`` map item -> score (higher ranks first); lists are
    read as orders, first item highest.
    """
    ranking = _as_scores(ranking)
    truth = _as_scores(truth)
    if set(ranking) != set(truth):
        raise KeyError("ranking and ground truth cover different items")
    items = sorted(ranking)
    x = np.array([ranking[i] for i in items], dtype=np.float64)
    y = np.array([truth[i] for i in items], dtype=np.float64)
    dx = np.sign(x[:, None] - x[None, :])
    dy = np.sign(y[:, None] - y[None, :])
    iu = np.triu_indices(len(items), k=1)
    dx, dy = dx[iu], dy[iu]
    s = float((dx * dy).sum())
    n0 = len(dx)
    tx = float((dx == 0).sum())
    ty = float((dy == 0).sum())
    denom = math.sqrt((n0 - tx) * (n0 - ty))
    return s / denom if denom else 0.0


def _as_scores(obj) -> dict:
    if isinstance(obj, dict):
        return obj
    obj = list(obj)
    return {item: float(len(obj) - i) for i, item in enumerate(obj)}


@dataclass
class EnsembleSpec:
    members: list  # [(checkpoint path, weight)]

    def __post_init__(self):
        if not self.members:
            raise ConfigError("an ensemble needs at least one member")
        for path, w in self.members:
            if not math.isfinite(w):
                raise ConfigError(f"non-finite weight for {path}")

    @classmethod
    def parse(cls, lines) -> "EnsembleSpec":
        members = []
        for lineno, line in enumerate(lines, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ConfigError(f"line {lineno}: expected 'path<TAB>weight'")
            try:
                members.append((parts[0], float(parts[1])))
            except ValueError:
                raise ConfigError(f"line {lineno}: bad weight {parts[1]!r}") from None
        return cls(members)

    def lines(self):
        for path, w in self.members:
            yield f"{path}\t{w!r}\n"


def load_members(spec: EnsembleSpec):
    from .estimator import load_checkpoint

    models = [load_checkpoint(path) for path, _ in spec.members]
    dims = {m.header.dims for m in models}
    if len(dims) != 1:
        raise CompatibilityError(f"ensemble members disagree on feature dimension: {sorted(dims)}")
    return models


def ensemble_scores(spec: EnsembleSpec, features, models=None) -> np.ndarray:
    """``sum_i w_i R_i(x)`` over the members' relevance towers."""
    from .estimator import predict_relevance

    if models is None:
        models = load_members(spec)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != models[0].header.dims:
        raise CompatibilityError(
            f"features of shape {features.shape} do not match member dimension {models[0].header.dims}")
    total = np.zeros(features.shape[0])
    for (_, w), m in zip(spec.members, models):
        total = total + w * predict_relevance(m, features)
    return total


def simplex_grid(k: int, step: float = 0.1):
    """All weight vectors on the k-simplex with the given step (including vertices)."""
    units = int(round(1.0 / step))
    for cuts in itertools.combinations(range(units + k - 1), k - 1):
        parts = []
        prev = -1
        for c in cuts + (units + k - 1,):
            parts.append(c - prev - 1)
            prev = c
        yield tuple(p / units for p in parts)


def grid_search_weights(member_scores, arrays, annotations, step: float = 0.1, n: int = 10):
    """Weights on the simplex grid maximizing mean DCG@n on the annotated queries.

    ``member_scores`` is a list of per-document score vectors aligned with
    ``arrays``.  Returns ``(weights, best_dcg)``; earlier grid points win ties.
    """
    member_scores = [np.asarray(s, dtype=np.float64) for s in member_scores]
    best = None
    for w in simplex_grid(len(member_scores), step):
        combined = np.zeros_like(member_scores[0])
        for wi, s in zip(w, member_scores):
            combined = combined + wi * s
        value = evaluate(scores_by_query(arrays, combined), annotations).mean[n]
        if best is None or value > best[1]:
            best = (w, value)
    return best
