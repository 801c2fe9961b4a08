"""Examination-bias and relevance towers, click losses, training, checkpoints.

A click is modelled as ``sigmoid(E(bias factors) * R(ranking features))``.
With only the position factor and a single hidden layer the examination
tower is the classic position-based model; enabling media type, SERP height
and slipoff factors, a deeper batch-normalized tower and the grouped softmax
loss gives the multi-factor model.  Only ``R`` is used for ranking.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import nn_core
from .data_model import CorpusArrays, CorpusHeader, SessionLog, select_group_members
from .errors import (
    CompatibilityError,
    ConfigError,
    DimensionError,
    DivergenceError,
    TrainingError,
)
from .nn_core import PROB_EPS, AdamState, BatchNorm, Embedding, Linear, ReLU, sigmoid

log = logging.getLogger(__name__)

FACTORS = ("position", "mtype", "serph", "slipoff")
LOSS_MODES = ("pointwise_eq2", "group_eq3", "listwise_ce")
EXAM_OUTPUTS = ("linear", "softplus")
CHECKPOINT_MAGIC = b"MFIMCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FeatureSet:
    use_position: bool = True
    use_mtype: bool = True
    use_serph: bool = True
    use_slipoff: bool = True

    def __post_init__(self):
        if not self.use_position:
            raise ConfigError("the position factor cannot be disabled")

    @property
    def enabled(self) -> tuple:
        flags = (self.use_position, self.use_mtype, self.use_serph, self.use_slipoff)
        return tuple(i for i, on in enumerate(flags) if on)

    @property
    def names(self) -> tuple:
        return tuple(FACTORS[i] for i in self.enabled)

    @classmethod
    def from_names(cls, names) -> "FeatureSet":
        names = set(names)
        unknown = names - set(FACTORS)
        if unknown:
            raise ConfigError(f"unknown bias factors {sorted(unknown)}")
        return cls(*(f in names for f in FACTORS))


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 10
    group: int = 6
    layers: int = 5
    hidden: int = 32
    embed_dim: int = 8
    batchnorm: bool = True
    seed: int = 0
    loss_mode: str = "group_eq3"
    reduction: str = "sum"
    exam_output: str = "softplus"
    features: FeatureSet = field(default_factory=FeatureSet)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.group < 2:
            raise ConfigError("group size g must be at least 2")
        if self.layers < 1:
            raise ConfigError("layers must be at least 1")
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ConfigError("lr must be a finite non-negative number")
        if self.batch_size < 1 or self.epochs < 0 or self.hidden < 1 or self.embed_dim < 1:
            raise ConfigError("batch_size, hidden and embed_dim must be positive, epochs non-negative")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")
        if self.exam_output not in EXAM_OUTPUTS:
            raise ConfigError(f"exam_output must be one of {EXAM_OUTPUTS}")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError("reduction must be 'sum' or 'mean'")


# Table 1 rows and the Fig 1(a)-style baseline
PRESETS = {
    "pbm": dict(features=FeatureSet(True, False, False, False), layers=1, batchnorm=False,
                loss_mode="pointwise_eq2"),
    "mfim": dict(features=FeatureSet(True, True, True, True)),
    "mfim-mtype-slipoff": dict(features=FeatureSet(True, True, False, True)),
    "mfim-serph-slipoff": dict(features=FeatureSet(True, False, True, True)),
    "mfim-slipoff": dict(features=FeatureSet(True, False, False, True)),
    "mfim-mtype-serph": dict(features=FeatureSet(True, True, True, False)),
}


def preset_config(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    return TrainConfig(**kw)


class ExamModel:
    """Embeddings of the enabled bias factors -> [fc -> bn -> relu] x L -> fc -> E."""

    def __init__(self, features: FeatureSet, vocab_sizes, layers=5, hidden=32, embed_dim=8,
                 batchnorm=True, rng=None, output="linear"):
        if output not in EXAM_OUTPUTS:
            raise ConfigError(f"exam output must be one of {EXAM_OUTPUTS}")
        self.output = output
        self._z = None
        self.features = features
        self.vocab_sizes = tuple(int(v) for v in vocab_sizes)
        self.embeddings = [Embedding(self.vocab_sizes[i], embed_dim, rng) for i in features.enabled]
        self.blocks = []
        width = embed_dim * len(self.embeddings)
        for _ in range(layers):
            block = [Linear(width, hidden, rng)]
            if batchnorm:
                block.append(BatchNorm(hidden))
            block.append(ReLU())
            self.blocks.append(block)
            width = hidden
        self.head = Linear(width, 1, rng)

    def _ids(self, bias_ids):
        bias_ids = np.asarray(bias_ids)
        if bias_ids.ndim != 2 or bias_ids.shape[1] != len(FACTORS):
            raise DimensionError(f"bias ids must have shape (N, {len(FACTORS)})")
        cols = []
        for i in self.features.enabled:
            col = bias_ids[:, i]
            # positions are 1-based in logs
            cols.append(col - 1 if i == 0 else col)
        return cols

    def forward(self, bias_ids):
        parts = [emb.forward(ids) for emb, ids in zip(self.embeddings, self._ids(bias_ids))]
        h = np.concatenate(parts, axis=1)
        for block in self.blocks:
            for layer in block:
                h = layer.forward(h)
        z = self.head.forward(h)[:, 0]
        self._z = z
        if self.output == "softplus":
            return np.logaddexp(0.0, z)
        return z

    def backward(self, grad_e):
        grad_e = np.asarray(grad_e, dtype=np.float64)
        if self.output == "softplus":
            grad_e = grad_e * sigmoid(self._z)
        g = self.head.backward(grad_e[:, None])
        for block in reversed(self.blocks):
            for layer in reversed(block):
                g = layer.backward(g)
        dim = self.embeddings[0].dim
        for k, emb in enumerate(self.embeddings):
            emb.backward(g[:, k * dim:(k + 1) * dim])

    def named_layers(self):
        out = [(f"emb.{FACTORS[i]}", e) for i, e in zip(self.features.enabled, self.embeddings)]
        for b, block in enumerate(self.blocks):
            for layer in block:
                kind = {Linear: "fc", BatchNorm: "bn", ReLU: "relu"}[type(layer)]
                out.append((f"block{b}.{kind}", layer))
        out.append(("head", self.head))
        return out

    def batchnorms(self):
        return [layer for block in self.blocks for layer in block if isinstance(layer, BatchNorm)]


class RelevanceModel:
    """``D -> H -> H -> 1`` MLP over ranking features."""

    def __init__(self, dims: int, hidden=32, rng=None):
        self.dims = dims
        self.layers = [Linear(dims, hidden, rng), ReLU(), Linear(hidden, hidden, rng), ReLU(),
                       Linear(hidden, 1, rng)]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dims:
            raise DimensionError(f"relevance model expects (N, {self.dims}) features, got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x)
        return x[:, 0]

    def backward(self, grad_r):
        g = np.asarray(grad_r, dtype=np.float64)[:, None]
        for layer in reversed(self.layers):
            g = layer.backward(g)

    def named_layers(self):
        return [(f"fc{i // 2}", layer) for i, layer in enumerate(self.layers) if isinstance(layer, Linear)]


class MfimModel:
    def __init__(self, features: FeatureSet, header: CorpusHeader, layers=5, hidden=32,
                 embed_dim=8, batchnorm=True, rng=None, exam_output="linear"):
        self.features = features
        self.header = header
        self.exam_output = exam_output
        self.layers = layers
        self.hidden = hidden
        self.embed_dim = embed_dim
        self.batchnorm = batchnorm
        vocab = (header.n_max, header.vocab_mtype, header.vocab_serph, header.vocab_slipoff)
        self.exam = ExamModel(features, vocab, layers, hidden, embed_dim, batchnorm, rng, exam_output)
        self.rel = RelevanceModel(header.dims, hidden, rng)
        self.mode = "train"
        self._e = self._r = None

    @classmethod
    def init(cls, config: TrainConfig, header: CorpusHeader) -> "MfimModel":
        rng = np.random.default_rng([config.seed, 1])
        return cls(config.features, header, config.layers, config.hidden, config.embed_dim,
                   config.batchnorm, rng, config.exam_output)

    def train(self):
        self.set_mode("train")

    def eval(self):
        self.set_mode("eval")

    def set_mode(self, mode):
        self.mode = mode
        for bn in self.exam.batchnorms():
            bn.mode = mode

    def forward(self, bias_ids, features):
        """Click logits ``E * R`` for a batch of documents."""
        self._e = self.exam.forward(bias_ids)
        self._r = self.rel.forward(features)
        return self._e * self._r

    def backward(self, grad_logits):
        self.exam.backward(grad_logits * self._r)
        self.rel.backward(grad_logits * self._e)

    def named_parameters(self):
        out = []
        for prefix, tower in (("exam", self.exam), ("rel", self.rel)):
            for name, layer in tower.named_layers():
                if isinstance(layer, ReLU):
                    continue
                for pname, p, g in layer.parameters():
                    out.append((f"{prefix}.{name}.{pname}", p, g))
        return out

    def named_buffers(self):
        out = []
        for name, layer in self.exam.named_layers():
            if isinstance(layer, BatchNorm):
                out.append((f"exam.{name}.running_mean", layer))
                out.append((f"exam.{name}.running_var", layer))
        return out

    def parameters(self):
        return [p for _, p, _ in self.named_parameters()]

    def gradients(self):
        return [g for _, _, g in self.named_parameters()]


def click_prob(e, r):
    return sigmoid(np.asarray(e, dtype=np.float64) * np.asarray(r, dtype=np.float64))


def _clamp(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def loss_pointwise(clicks, probs, reduction="sum"):
    """Binary cross-entropy of click probabilities against observed clicks."""
    c = np.asarray(clicks, dtype=np.float64)
    p = _clamp(np.asarray(probs, dtype=np.float64))
    terms = -(c * np.log(p) + (1.0 - c) * np.log1p(-p))
    return float(terms.mean() if reduction == "mean" and terms.size else terms.sum())


def pointwise_loss_grad(clicks, logits):
    """Summed binary cross-entropy of ``sigmoid(logits)`` and its logit gradient."""
    c = np.asarray(clicks, dtype=np.float64)
    p_raw = sigmoid(logits)
    q_raw = sigmoid(-np.asarray(logits))
    p, q = _clamp(p_raw), _clamp(q_raw)
    loss = float(-(c * np.log(p) + (1.0 - c) * np.log(q)).sum())
    # d/dp of each term, zero where the clamp is active
    dp = np.where(c == 1.0, np.where(p == p_raw, -1.0 / p, 0.0), np.where(q == q_raw, 1.0 / q, 0.0))
    grad = dp * p_raw * q_raw
    return loss, grad


def group_loss_grad(logits, starts, clicked, listwise=False):
    """Grouped softmax loss over contiguous groups of a flat logit vector.

    ``starts`` are group offsets and ``clicked`` flags the clicked member of
    each group.  The default treats each softmax output as a click probability
    and sums binary cross-entropy over every member; ``listwise=True`` keeps
    only the ``-log p`` term of the clicked member.
    """
    logits = np.asarray(logits, dtype=np.float64)
    starts = np.asarray(starts, dtype=np.int64)
    clicked = np.asarray(clicked, dtype=bool)
    sizes = np.diff(np.append(starts, logits.size))
    p_raw = nn_core.segment_softmax(logits, starts)
    p = _clamp(p_raw)
    free = p == p_raw
    if listwise:
        loss = float(-np.log(p[clicked]).sum())
        dp = np.where(clicked & free, -1.0 / p, 0.0)
    else:
        loss = float(-(np.log(p[clicked]).sum() + np.log1p(-p[~clicked]).sum()))
        dp = np.where(clicked, -1.0 / p, 1.0 / (1.0 - p))
        dp = np.where(free, dp, 0.0)
    weighted = np.repeat(np.add.reduceat(dp * p_raw, starts), sizes)
    grad = p_raw * (dp - weighted)
    return loss, grad


def loss_group(click_mask, logits, listwise=False):
    """Loss of a single group given its click mask (exactly one 1) and logits."""
    mask = np.asarray(click_mask)
    if mask.sum() != 1 or not np.isin(mask, (0, 1)).all():
        raise ValueError("a group must contain exactly one clicked member")
    loss, _ = group_loss_grad(logits, [0], mask == 1, listwise)
    return loss


@dataclass
class LossTrace:
    train_loss: list = field(default_factory=list)
    val_dcg10: list = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)

    def lines(self):
        yield "epoch\ttrain_loss\tval_dcg@10\n"
        for i, (l, d) in enumerate(zip(self.train_loss, self.val_dcg10), start=1):
            yield f"{i}\t{l!r}\t{d!r}\n"


def _iter_batches(units, batch_size):
    """Chunk a list, folding a trailing chunk too small for batch norm into its predecessor."""
    chunks = [units[i:i + batch_size] for i in range(0, len(units), batch_size)]
    if len(chunks) > 1 and sum(u.size for u in chunks[-1]) < 2:
        tail = chunks.pop()
        chunks[-1] = chunks[-1] + tail
    return chunks


def _group_batches(arrays: CorpusArrays, order, g, rng):
    """Flat member rows and clicked flags for every group of the sessions in ``order``."""
    groups = []
    for i in order:
        lo = int(arrays.offsets[i])
        for members in select_group_members(arrays.clicks[lo:int(arrays.offsets[i + 1])], g, rng):
            groups.append(members + lo)
    return groups


def _batch_loss(model, arrays, rows, config, starts=None, clicked=None):
    logits = model.forward(arrays.bias_ids[rows], arrays.features[rows])
    if config.loss_mode == "pointwise_eq2":
        loss, grad = pointwise_loss_grad(arrays.clicks[rows], logits)
    else:
        loss, grad = group_loss_grad(logits, starts, clicked, config.loss_mode == "listwise_ce")
    if config.reduction == "mean":
        n = rows.size if config.loss_mode == "pointwise_eq2" else len(starts)
        loss, grad = loss / n, grad / n
    return loss, grad


def train(sessions: list[SessionLog], config: TrainConfig, annotations=None,
          header: CorpusHeader | None = None, model: MfimModel | None = None):
    """Fit examination and relevance towers jointly on click logs.

    Queries that appear in ``annotations`` are held out from training and used
    to report validation DCG@10 after every epoch.  Returns ``(model, trace)``.
    """
    from .data_model import infer_header
    from .evaluation import mean_dcg_for_model

    config.validate()
    if header is None:
        header = infer_header(sessions)
    heldout = {a.query_id for a in annotations} if annotations else set()
    train_sessions = [s for s in sessions if s.query_id not in heldout]
    val_sessions = [s for s in sessions if s.query_id in heldout]
    arrays = CorpusArrays.from_sessions(train_sessions, header.dims)
    if arrays.clicks.sum() == 0:
        raise TrainingError("no clicked sessions to train on")
    val_arrays = CorpusArrays.from_sessions(val_sessions, header.dims) if val_sessions else None

    if model is None:
        model = MfimModel.init(config, header)
    params = model.parameters()
    grads = model.gradients()
    adam = AdamState(lr=config.lr)
    rng = np.random.default_rng([config.seed, 2])
    trace = LossTrace()
    pointwise = config.loss_mode == "pointwise_eq2"
    has_click = np.add.reduceat(arrays.clicks, arrays.offsets[:-1]) > 0 if arrays.num_sessions else []

    for epoch in range(1, config.epochs + 1):
        model.train()
        order = rng.permutation(arrays.num_sessions)
        if pointwise:
            units = [np.arange(arrays.offsets[i], arrays.offsets[i + 1]) for i in order]
        else:
            units = _group_batches(arrays, order[has_click[order]], config.group, rng)
        chunks = _iter_batches(units, config.batch_size)
        total = 0.0
        for b, chunk in enumerate(chunks, start=1):
            rows = np.concatenate(chunk)
            if rows.size < 2 and model.batchnorm:
                continue
            starts = clicked = None
            if not pointwise:
                sizes = np.fromiter((u.size for u in chunk), dtype=np.int64, count=len(chunk))
                starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
                clicked = np.zeros(rows.size, dtype=bool)
                clicked[starts] = True
            loss, grad = _batch_loss(model, arrays, rows, config, starts, clicked)
            if not math.isfinite(loss):
                raise DivergenceError(epoch, b, loss)
            model.backward(grad)
            adam.step(params, grads)
            total += loss if config.reduction == "sum" else loss * len(chunk)
        trace.train_loss.append(total / max(len(units), 1))
        if val_arrays is not None:
            model.eval()
            trace.val_dcg10.append(mean_dcg_for_model(model, val_arrays, annotations, 10))
        else:
            trace.val_dcg10.append(float("nan"))
        log.info("epoch %d loss %.6f val DCG@10 %.4f", epoch, trace.train_loss[-1], trace.val_dcg10[-1])
    model.eval()
    return model, trace


def predict_relevance(model: MfimModel, features):
    """Relevance scores from the relevance tower only; bias factors play no part."""
    if not isinstance(features, np.ndarray):
        features = np.array([d.features for d in features], dtype=np.float64)
    return model.rel.forward(features)


def rank_order(doc_ids, scores):
    """Indices sorting documents by descending score, ties by ascending doc_id."""
    return sorted(range(len(doc_ids)), key=lambda i: (-scores[i], doc_ids[i]))


def _header_dict(model: MfimModel) -> dict:
    return {
        "format": "mfim-checkpoint",
        "version": CHECKPOINT_VERSION,
        "features": list(model.features.names),
        "layers": model.layers,
        "hidden": model.hidden,
        "embed_dim": model.embed_dim,
        "batchnorm": model.batchnorm,
        "exam_output": model.exam_output,
        "header": asdict(model.header),
    }


def _state_arrays(model: MfimModel):
    out = [(name, p) for name, p, _ in model.named_parameters()]
    for name, bn in model.named_buffers():
        out.append((name, getattr(bn, name.rsplit(".", 1)[1])))
    return out


def save_checkpoint(model: MfimModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def checkpoint_bytes(model: MfimModel) -> bytes:
    """Binary checkpoint: magic, version, JSON header, then float64 LE arrays."""
    arrays = _state_arrays(model)
    head = _header_dict(model)
    head["arrays"] = [[name, list(a.shape)] for name, a in arrays]
    blob = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays]
    return b"".join(parts)


def read_checkpoint_header(data: bytes) -> tuple[dict, int]:
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CompatibilityError("not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    version, size = struct.unpack_from("<II", data, off)
    if version != CHECKPOINT_VERSION:
        raise CompatibilityError(f"unsupported checkpoint version {version}")
    off += 8
    head = json.loads(data[off:off + size].decode("utf-8"))
    return head, off + size


def load_checkpoint(path) -> MfimModel:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


def checkpoint_from_bytes(data: bytes) -> MfimModel:
    head, off = read_checkpoint_header(data)
    model = MfimModel(FeatureSet.from_names(head["features"]), CorpusHeader(**head["header"]),
                      head["layers"], head["hidden"], head["embed_dim"], head["batchnorm"],
                      exam_output=head["exam_output"])
    expected = _state_arrays(model)
    declared = head["arrays"]
    if [d[0] for d in declared] != [name for name, _ in expected]:
        raise CompatibilityError("checkpoint array list does not match its header")
    buffers = dict(model.named_buffers())
    for (name, shape), (_, target) in zip(declared, expected):
        if tuple(shape) != target.shape:
            raise CompatibilityError(f"{name}: shape {shape} vs expected {target.shape}")
        count = int(np.prod(shape))
        values = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        if name in buffers:
            setattr(buffers[name], name.rsplit(".", 1)[1], values.astype(np.float64))
        else:
            target[...] = values
    if off != len(data):
        raise CompatibilityError("trailing bytes after checkpoint arrays")
    model.eval()
    return model


def gradient_check_batch(sessions, header, loss_mode="group_eq3", group=6, size=8, seed=0):
    """A fixed batch for gradient checking: ``size`` groups, or ``size`` sessions
    for the pointwise loss.  Returns ``(arrays, rows, starts, clicked)``."""
    rng = np.random.default_rng([seed, 3])
    arrays = CorpusArrays.from_sessions(sessions, header.dims)
    if loss_mode == "pointwise_eq2":
        chosen = rng.permutation(arrays.num_sessions)[:size]
        rows = np.concatenate([np.arange(arrays.offsets[i], arrays.offsets[i + 1]) for i in chosen])
        return arrays, rows, None, None
    groups = []
    for i in rng.permutation(arrays.num_sessions):
        lo = int(arrays.offsets[i])
        for members in select_group_members(arrays.clicks[lo:int(arrays.offsets[i + 1])], group, rng):
            groups.append(members + lo)
        if len(groups) >= size:
            break
    groups = groups[:size]
    if not groups:
        raise TrainingError("no clicked sessions available for a gradient-check batch")
    rows = np.concatenate(groups)
    sizes = np.array([g.size for g in groups])
    starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    clicked = np.zeros(rows.size, dtype=bool)
    clicked[starts] = True
    return arrays, rows, starts, clicked


def model_gradcheck(model: MfimModel, arrays, rows, starts=None, clicked=None,
                    loss_mode="group_eq3", h=1e-5, num_coords=64, seed=0):
    """Finite-difference check of the full click-loss gradient w.r.t. every parameter.

    Batch norm runs in train mode on the fixed batch with running-statistic
    updates switched off, so the loss is a pure function of the parameters.
    """
    config = TrainConfig(loss_mode=loss_mode, features=model.features)
    bns = model.exam.batchnorms()
    saved_mode = model.mode
    saved_track = [bn.track_running_stats for bn in bns]
    model.train()
    for bn in bns:
        bn.track_running_stats = False
    try:
        loss, grad = _batch_loss(model, arrays, rows, config, starts, clicked)
        model.backward(grad)
        analytic = [g.copy() for g in model.gradients()]

        def loss_fn():
            return _batch_loss(model, arrays, rows, config, starts, clicked)[0]

        return nn_core.gradcheck(loss_fn, model.parameters(), analytic, h=h, num_coords=num_coords,
                                 rng=np.random.default_rng([seed, 4]))
    finally:
        for bn, t in zip(bns, saved_track):
            bn.track_running_stats = t
        model.set_mode(saved_mode)
