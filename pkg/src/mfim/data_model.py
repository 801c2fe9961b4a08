"""Session logs, expert annotations, their TSV formats, and group selection.

Session log layout (UTF-8, tab separated, one document per line)::

    #dims D V_m V_s V_p n_max
    query_id  doc_id  position  mtype_id  serph_bucket  slipoff_bucket  click  f1,...,fD

Documents of one session are contiguous.  Annotation files are
``query_id  doc_id  label`` with labels 0..4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError, ParseError, ValidationError

FLOAT_FMT = "{:.9g}"
MAX_LABEL = 4


@dataclass(frozen=True)
class CorpusHeader:
    """Dimensions shared by every session in a corpus file."""

    dims: int = 16
    vocab_mtype: int = 8
    vocab_serph: int = 16
    vocab_slipoff: int = 11
    n_max: int = 10

    def line(self) -> str:
        return (f"#dims {self.dims} {self.vocab_mtype} {self.vocab_serph} "
                f"{self.vocab_slipoff} {self.n_max}")

    @classmethod
    def parse(cls, line: str, lineno: int = 1) -> "CorpusHeader":
        parts = line.split()
        if len(parts) != 6 or parts[0] != "#dims":
            raise ParseError("expected header '#dims D V_m V_s V_p n_max'", lineno)
        try:
            values = [int(p) for p in parts[1:]]
        except ValueError as exc:
            raise ParseError(f"non-integer header value ({exc})", lineno) from None
        if min(values) < 1:
            raise ParseError("header values must be positive", lineno)
        return cls(*values)


@dataclass(frozen=True)
class BiasFactors:
    """Categorical presentation/behaviour ids of one displayed document."""

    position: int
    mtype: int
    serph: int
    slipoff: int


@dataclass(frozen=True)
class DocumentRecord:
    doc_id: str
    bias: BiasFactors
    features: tuple
    click: int

    @property
    def position(self) -> int:
        return self.bias.position


@dataclass(frozen=True)
class SessionLog:
    query_id: str
    docs: tuple

    @property
    def n(self) -> int:
        return len(self.docs)

    @property
    def clicks(self) -> np.ndarray:
        return np.fromiter((d.click for d in self.docs), dtype=np.int64, count=len(self.docs))


@dataclass(frozen=True)
class AnnotationRecord:
    query_id: str
    doc_id: str
    label: int


@dataclass(frozen=True)
class GroupSample:
    """One clicked document plus sampled non-clicked ones from the same session.

    ``members`` index into ``session.docs``; the clicked document comes first.
    """

    session: SessionLog = field(repr=False)
    members: tuple
    click_mask: tuple


def validate_session(session: SessionLog, header: CorpusHeader) -> None:
    docs = session.docs
    if not 1 <= len(docs) <= header.n_max:
        raise ValidationError(
            f"query {session.query_id}: {len(docs)} docs, expected 1..{header.n_max}")
    positions = sorted(d.bias.position for d in docs)
    if positions != list(range(1, len(docs) + 1)):
        raise ValidationError(
            f"query {session.query_id}: positions {positions} are not exactly 1..{len(docs)}")
    if len({d.doc_id for d in docs}) != len(docs):
        raise ValidationError(f"query {session.query_id}: duplicate doc_id")
    for d in docs:
        b = d.bias
        if d.click not in (0, 1):
            raise ValidationError(f"{session.query_id}/{d.doc_id}: click must be 0 or 1")
        if not 0 <= b.mtype < header.vocab_mtype:
            raise ValidationError(f"{session.query_id}/{d.doc_id}: mtype_id {b.mtype} outside [0, {header.vocab_mtype})")
        if not 0 <= b.serph < header.vocab_serph:
            raise ValidationError(f"{session.query_id}/{d.doc_id}: serph_bucket {b.serph} outside [0, {header.vocab_serph})")
        if not 0 <= b.slipoff < header.vocab_slipoff:
            raise ValidationError(
                f"{session.query_id}/{d.doc_id}: slipoff_bucket {b.slipoff} outside [0, {header.vocab_slipoff})")
        if d.click == 0 and b.slipoff != 0:
            raise ValidationError(f"{session.query_id}/{d.doc_id}: slipoff_bucket {b.slipoff} on a non-clicked doc")
        if len(d.features) != header.dims:
            raise ValidationError(
                f"{session.query_id}/{d.doc_id}: {len(d.features)} ranking features, expected {header.dims}")
        if not all(math.isfinite(v) for v in d.features):
            raise ValidationError(f"{session.query_id}/{d.doc_id}: non-finite ranking feature")


def _parse_int(text: str, lineno: int, fieldno: int, name: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"{name} {text!r} is not an integer", lineno, fieldno) from None


def parse_session_log(lines: Iterable[str]) -> tuple[CorpusHeader, list[SessionLog]]:
    """Parse a session log.  Returns the header and the validated sessions."""
    header = None
    sessions: list[SessionLog] = []
    current_q = None
    current_docs: list[DocumentRecord] = []
    seen = set()

    def flush():
        if current_q is None:
            return
        if current_q in seen:
            raise ValidationError(f"query {current_q} appears in more than one block")
        seen.add(current_q)
        session = SessionLog(current_q, tuple(current_docs))
        validate_session(session, header)
        sessions.append(session)

    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line:
            continue
        if header is None:
            header = CorpusHeader.parse(line, lineno)
            continue
        parts = line.split("\t")
        if len(parts) != 8:
            raise ParseError(f"expected 8 tab-separated fields, got {len(parts)}", lineno)
        qid, did = parts[0], parts[1]
        if not qid or not did:
            raise ParseError("empty query_id or doc_id", lineno, 1 if not qid else 2)
        pos = _parse_int(parts[2], lineno, 3, "position")
        mtype = _parse_int(parts[3], lineno, 4, "mtype_id")
        serph = _parse_int(parts[4], lineno, 5, "serph_bucket")
        slip = _parse_int(parts[5], lineno, 6, "slipoff_bucket")
        click = _parse_int(parts[6], lineno, 7, "click")
        try:
            feats = tuple(float(v) for v in parts[7].split(","))
        except ValueError as exc:
            raise ParseError(f"bad ranking feature ({exc})", lineno, 8) from None
        if qid != current_q:
            flush()
            current_q, current_docs = qid, []
        current_docs.append(DocumentRecord(did, BiasFactors(pos, mtype, serph, slip), feats, click))
    if header is None:
        return CorpusHeader(), []
    flush()
    return header, sessions


def write_session_log(sessions: Iterable[SessionLog], header: CorpusHeader | None = None) -> Iterator[str]:
    """Yield the lines (with trailing newline) of a session log.

    Nothing is emitted for an empty corpus without a header.
    """
    sessions = list(sessions)
    if header is None:
        if not sessions:
            return
        header = infer_header(sessions)
    yield header.line() + "\n"
    for s in sessions:
        for d in s.docs:
            b = d.bias
            feats = ",".join(FLOAT_FMT.format(v) for v in d.features)
            yield f"{s.query_id}\t{d.doc_id}\t{b.position}\t{b.mtype}\t{b.serph}\t{b.slipoff}\t{d.click}\t{feats}\n"


def infer_header(sessions: list[SessionLog]) -> CorpusHeader:
    docs = [d for s in sessions for d in s.docs]
    return CorpusHeader(
        dims=len(docs[0].features),
        vocab_mtype=max(d.bias.mtype for d in docs) + 1,
        vocab_serph=max(d.bias.serph for d in docs) + 1,
        vocab_slipoff=max(d.bias.slipoff for d in docs) + 1,
        n_max=max(s.n for s in sessions),
    )


def parse_annotations(lines: Iterable[str]) -> list[AnnotationRecord]:
    records = []
    seen = set()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(f"expected 3 tab-separated fields, got {len(parts)}", lineno)
        label = _parse_int(parts[2], lineno, 3, "label")
        if not 0 <= label <= MAX_LABEL:
            raise ValidationError(f"line {lineno}: label {label} outside 0..{MAX_LABEL}")
        key = (parts[0], parts[1])
        if key in seen:
            raise ValidationError(f"line {lineno}: duplicate annotation for {key}")
        seen.add(key)
        records.append(AnnotationRecord(parts[0], parts[1], label))
    return records


def write_annotations(records: Iterable[AnnotationRecord]) -> Iterator[str]:
    for r in records:
        yield f"{r.query_id}\t{r.doc_id}\t{r.label}\n"


def read_session_log(path) -> tuple[CorpusHeader, list[SessionLog]]:
    with open(path, encoding="utf-8") as fh:
        return parse_session_log(fh)


def read_annotations(path) -> list[AnnotationRecord]:
    with open(path, encoding="utf-8") as fh:
        return parse_annotations(fh)


def select_group_members(clicks, g: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Index arrays for the groups of one session, clicked member first.

    One group per clicked document; each adds ``min(g - 1, #non-clicked)``
    non-clicked documents drawn uniformly without replacement.
    """
    if g < 2:
        raise ConfigError(f"group size must be at least 2, got {g}")
    clicks = np.asarray(clicks)
    clicked = np.flatnonzero(clicks == 1)
    if clicked.size == 0:
        return []
    unclicked = np.flatnonzero(clicks == 0)
    k = min(g - 1, unclicked.size)
    groups = []
    for c in clicked:
        picks = rng.choice(unclicked, size=k, replace=False) if k else unclicked[:0]
        groups.append(np.concatenate(([c], picks)))
    return groups


def group_select(session: SessionLog, g: int, rng: np.random.Generator) -> list[GroupSample]:
    out = []
    for members in select_group_members(session.clicks, g, rng):
        mask = (1,) + (0,) * (members.size - 1)
        out.append(GroupSample(session, tuple(int(m) for m in members), mask))
    return out


@dataclass
class CorpusArrays:
    """Column view of a list of sessions, used by training and scoring.

    ``offsets[i]:offsets[i+1]`` are the rows of session ``i``.
    """

    query_ids: list
    doc_ids: list
    offsets: np.ndarray
    features: np.ndarray
    bias_ids: np.ndarray  # (N, 4): position, mtype, serph, slipoff
    clicks: np.ndarray

    @classmethod
    def from_sessions(cls, sessions: list[SessionLog], dims: int | None = None) -> "CorpusArrays":
        sizes = [s.n for s in sessions]
        offsets = np.zeros(len(sessions) + 1, dtype=np.int64)
        np.cumsum(sizes, out=offsets[1:])
        docs = [d for s in sessions for d in s.docs]
        if dims is None:
            dims = len(docs[0].features) if docs else 0
        features = np.array([d.features for d in docs], dtype=np.float64).reshape(len(docs), dims)
        bias_ids = np.array([(d.bias.position, d.bias.mtype, d.bias.serph, d.bias.slipoff) for d in docs],
                            dtype=np.int64).reshape(len(docs), 4)
        clicks = np.array([d.click for d in docs], dtype=np.int64)
        return cls([s.query_id for s in sessions], [d.doc_id for d in docs], offsets,
                   features, bias_ids, clicks)

    @property
    def num_sessions(self) -> int:
        return len(self.query_ids)

    def session_rows(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))
