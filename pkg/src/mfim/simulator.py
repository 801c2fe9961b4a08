"""Synthetic click logs with known relevance, observation and perception.

Each displayed document is clicked only if it is first observed (a
position-dependent probability) and then perceived as relevant.  Perception
distorts the true relevance by a multiplier that depends on the document's
presentation (media type and SERP height), so a ranker trained on raw clicks
inherits a presentation bias unless the examination model absorbs it.
Clicked documents also receive a slipoff count whose mean grows with true
relevance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .data_model import (
    AnnotationRecord,
    BiasFactors,
    CorpusHeader,
    DocumentRecord,
    SessionLog,
)
from .errors import ConfigError

NUM_GRADES = 5
FEATURE_DECIMALS = 6


@dataclass
class SimConfig:
    num_queries: int = 2000
    n: int = 10
    seed: int = 0
    dims: int = 16
    vocab_mtype: int = 8
    vocab_serph: int = 16
    vocab_slipoff: int = 11
    # observation probability per position; None means 1/k
    obs_profile: list | None = None
    # explicit (vocab_mtype x vocab_serph) multipliers, row-major; None draws them
    perception_table: list | None = None
    perception_min: float = 0.25
    perception_max: float = 2.0
    relevance_noise: float = 1.0
    style_signal: float = 1.0
    ranking_noise: float = 0.3
    slipoff_rate: float = 5.0
    heldout_fraction: float = 0.2

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.num_queries < 0:
            raise ConfigError("num_queries must be non-negative")
        if self.n < 1:
            raise ConfigError("n must be at least 1")
        for name in ("dims", "vocab_mtype", "vocab_serph", "vocab_slipoff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.obs_profile is not None:
            obs = [float(v) for v in self.obs_profile]
            if len(obs) != self.n:
                raise ConfigError(f"obs_profile has {len(obs)} entries, expected n={self.n}")
            if any(not 0.0 < v <= 1.0 for v in obs):
                raise ConfigError("obs_profile entries must lie in (0, 1]")
            if any(b > a for a, b in zip(obs, obs[1:])):
                raise ConfigError("obs_profile must be non-increasing in position")
        if self.perception_table is not None:
            table = [float(v) for v in self.perception_table]
            if len(table) != self.vocab_mtype * self.vocab_serph:
                raise ConfigError(
                    f"perception_table needs {self.vocab_mtype * self.vocab_serph} entries, got {len(table)}")
            if any(not (math.isfinite(v) and v > 0) for v in table):
                raise ConfigError("perception multipliers must be finite and positive")
        if not 0 < self.perception_min <= self.perception_max or not math.isfinite(self.perception_max):
            raise ConfigError("need 0 < perception_min <= perception_max < inf")
        if self.relevance_noise < 0 or self.style_signal < 0 or self.ranking_noise < 0:
            raise ConfigError("noise and signal scales must be non-negative")
        if self.slipoff_rate <= 0:
            raise ConfigError("slipoff_rate must be positive")
        if not 0.0 <= self.heldout_fraction <= 1.0:
            raise ConfigError("heldout_fraction must lie in [0, 1]")

    @property
    def header(self) -> CorpusHeader:
        return CorpusHeader(self.dims, self.vocab_mtype, self.vocab_serph, self.vocab_slipoff, self.n)

    def observation_probs(self) -> np.ndarray:
        if self.obs_profile is None:
            return 1.0 / np.arange(1, self.n + 1)
        return np.asarray(self.obs_profile, dtype=np.float64)

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]


@dataclass
class TruthRecord:
    query_id: str
    doc_id: str
    true_relevance: float
    true_label: int
    true_obs_prob: float
    perceived_prob: float


@dataclass
class GroundTruth:
    records: dict = field(default_factory=dict)  # (query_id, doc_id) -> TruthRecord
    perception_table: np.ndarray | None = None

    def relevance(self, query_id, doc_id) -> float:
        return self.records[(query_id, doc_id)].true_relevance

    def label(self, query_id, doc_id) -> int:
        return self.records[(query_id, doc_id)].true_label

    def query_docs(self, query_id):
        return [r for (q, _), r in self.records.items() if q == query_id]

    def lines(self):
        yield "#query_id\tdoc_id\ttrue_relevance\ttrue_label\ttrue_obs_prob\tperceived_prob\n"
        for r in self.records.values():
            yield (f"{r.query_id}\t{r.doc_id}\t{r.true_relevance:.9g}\t{r.true_label}\t"
                   f"{r.true_obs_prob:.9g}\t{r.perceived_prob:.9g}\n")


def relevance_to_label(rho):
    return np.minimum(np.floor(np.asarray(rho) * NUM_GRADES), NUM_GRADES - 1).astype(np.int64)


@dataclass
class _CorpusParams:
    """Corpus-wide random quantities shared by all queries."""

    relevance_dir: np.ndarray
    offset: np.ndarray
    mtype_style: np.ndarray
    serph_style: np.ndarray
    perception: np.ndarray  # (vocab_mtype, vocab_serph)
    obs: np.ndarray
    heldout: np.ndarray  # bool per query

    @classmethod
    def draw(cls, config: SimConfig) -> "_CorpusParams":
        rng = np.random.default_rng([config.seed, 0])
        d = config.dims
        relevance_dir = rng.normal(size=d)
        offset = rng.normal(scale=0.5, size=d)
        mtype_style = rng.normal(size=(config.vocab_mtype, d)) * config.style_signal
        serph_style = rng.normal(size=(config.vocab_serph, d)) * config.style_signal
        if config.perception_table is not None:
            perception = np.asarray(config.perception_table, dtype=np.float64).reshape(
                config.vocab_mtype, config.vocab_serph)
        else:
            # log-multiplier = media-type part + height part, each covering half the log range
            lo, hi = math.log(config.perception_min), math.log(config.perception_max)
            half_lo, half_hi = lo / 2, hi / 2
            m_part = rng.uniform(half_lo, half_hi, size=config.vocab_mtype)
            s_part = rng.uniform(half_lo, half_hi, size=config.vocab_serph)
            perception = np.exp(m_part[:, None] + s_part[None, :])
        heldout = np.zeros(config.num_queries, dtype=bool)
        k = int(round(config.heldout_fraction * config.num_queries))
        if k:
            heldout[rng.permutation(config.num_queries)[:k]] = True
        return cls(relevance_dir, offset, mtype_style, serph_style, perception,
                   config.observation_probs(), heldout)


def query_id_for(i: int) -> str:
    return f"q{i:06d}"


def _gen_query(i: int, config: SimConfig, cp: _CorpusParams):
    rng = np.random.default_rng([config.seed, 1, i])
    n = config.n
    rho = rng.uniform(0.0, 1.0, size=n)
    mtype = rng.integers(config.vocab_mtype, size=n)
    serph = rng.integers(config.vocab_serph, size=n)
    production = rho + config.ranking_noise * rng.normal(size=n)
    # display order: production score descending, original index breaks ties
    order = np.lexsort((np.arange(n), -production))
    position = np.empty(n, dtype=np.int64)
    position[order] = np.arange(1, n + 1)
    noise = rng.normal(size=(n, config.dims)) * config.relevance_noise
    feats = (rho[:, None] * cp.relevance_dir + cp.offset
             + cp.mtype_style[mtype] + cp.serph_style[serph] + noise)
    # fixed decimals keep the 9-significant-digit text format lossless
    feats = np.round(feats, FEATURE_DECIMALS)

    obs_prob = cp.obs[position - 1]
    perceived = np.clip(rho * cp.perception[mtype, serph], 0.0, 1.0)
    observed = rng.uniform(size=n) < obs_prob
    perceived_rel = rng.uniform(size=n) < perceived
    click = (observed & perceived_rel).astype(np.int64)
    counts = rng.poisson(config.slipoff_rate * rho)
    slipoff = np.where(click == 1, np.minimum(counts, config.vocab_slipoff - 1), 0)

    qid = query_id_for(i)
    docs = []
    truth = []
    labels = relevance_to_label(rho)
    for j in order:
        did = f"d{j}"
        docs.append(DocumentRecord(
            did,
            BiasFactors(int(position[j]), int(mtype[j]), int(serph[j]), int(slipoff[j])),
            tuple(float(v) for v in feats[j]),
            int(click[j]),
        ))
        truth.append(TruthRecord(qid, did, float(rho[j]), int(labels[j]),
                                 float(obs_prob[j]), float(perceived[j])))
    return SessionLog(qid, tuple(docs)), truth


def gen_corpus(config: SimConfig):
    """Generate ``(sessions, ground_truth, annotations)`` for ``config``.

    Annotations cover every document of the held-out queries, labelled with
    the true grade.
    """
    config.validate()
    cp = _CorpusParams.draw(config)
    sessions = []
    gt = GroundTruth(perception_table=cp.perception)
    annotations = []
    for i in range(config.num_queries):
        session, truth = _gen_query(i, config, cp)
        sessions.append(session)
        for r in truth:
            gt.records[(r.query_id, r.doc_id)] = r
            if cp.heldout[i]:
                annotations.append(AnnotationRecord(r.query_id, r.doc_id, r.true_label))
    return sessions, gt, annotations


def oracle_dcg(ground_truth: GroundTruth, ranking, n: int = 10):
    """DCG of ``ranking`` (a list of ``(query_id, doc_id)`` for one query) on
    true labels, together with the ceiling reached by sorting on true relevance.
    """
    from .evaluation import dcg_at_n

    labels = []
    query_ids = set()
    for key in ranking:
        if key not in ground_truth.records:
            raise KeyError(f"unknown document {key}")
        labels.append(ground_truth.records[key].true_label)
        query_ids.add(key[0])
    recs = sorted((ground_truth.records[k] for k in ranking),
                  key=lambda r: (-r.true_relevance, r.doc_id))
    ideal = dcg_at_n([r.true_label for r in recs], n)
    return dcg_at_n(labels, n), ideal


def parse_sim_config(lines, overrides: dict | None = None) -> SimConfig:
    """Read a flat ``key=value`` file into a :class:`SimConfig`."""
    raw = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        raw[k.strip()] = v.strip()
    if overrides:
        raw.update(overrides)
    return sim_config_from_dict(raw)


def sim_config_from_dict(raw: dict) -> SimConfig:
    known = {f.name: f for f in fields(SimConfig)}
    kwargs = {}
    for k, v in raw.items():
        if k not in known:
            raise ConfigError(f"unknown simulator key {k!r}")
        kwargs[k] = _coerce(k, v)
    return SimConfig(**kwargs)


_INT_KEYS = {"num_queries", "n", "seed", "dims", "vocab_mtype", "vocab_serph", "vocab_slipoff"}
_LIST_KEYS = {"obs_profile", "perception_table"}


def _coerce(key, value):
    if not isinstance(value, str):
        return value
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _LIST_KEYS:
            if value.lower() in ("", "none", "default"):
                return None
            return [float(v) for v in value.split(",")]
        return float(value)
    except ValueError:
        raise ConfigError(f"bad value {value!r} for {key}") from None
