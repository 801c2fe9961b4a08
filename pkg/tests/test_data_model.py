"""Session-log and annotation formats, validation, and group selection."""

import itertools

import numpy as np
import pytest

from mfim.data_model import (
    AnnotationRecord,
    BiasFactors,
    CorpusArrays,
    CorpusHeader,
    DocumentRecord,
    SessionLog,
    group_select,
    infer_header,
    parse_annotations,
    parse_session_log,
    select_group_members,
    write_annotations,
    write_session_log,
)
from mfim.errors import ConfigError, ParseError, ValidationError
from mfim.simulator import SimConfig, gen_corpus

HEADER = CorpusHeader(dims=3, vocab_mtype=4, vocab_serph=5, vocab_slipoff=6, n_max=10)


def doc_line(q, d, pos, mtype=0, serph=0, slip=0, click=0, feats="0.5,-1,2.25"):
    return f"{q}\t{d}\t{pos}\t{mtype}\t{serph}\t{slip}\t{click}\t{feats}\n"


def two_doc_lines():
    return [HEADER.line() + "\n", doc_line("q1", "a", 1, 1, 2, 3, 1), doc_line("q1", "b", 2)]


def make_session(clicks, qid="q"):
    docs = tuple(DocumentRecord(f"d{i}", BiasFactors(i + 1, 0, 0, 0), (0.0,), int(c))
                 for i, c in enumerate(clicks))
    return SessionLog(qid, docs)


class TestSessionLogFormat:
    def test_parse_two_docs(self):
        header, sessions = parse_session_log(two_doc_lines())
        assert header == HEADER
        assert len(sessions) == 1 and sessions[0].n == 2
        d = sessions[0].docs[0]
        assert d.bias == BiasFactors(1, 1, 2, 3)
        assert d.click == 1 and d.features == (0.5, -1.0, 2.25)

    def test_duplicate_position(self):
        lines = [HEADER.line() + "\n", doc_line("q1", "a", 1), doc_line("q1", "b", 1)]
        with pytest.raises(ValidationError):
            parse_session_log(lines)

    def test_slipoff_without_click(self):
        lines = [HEADER.line() + "\n", doc_line("q1", "a", 1, slip=3, click=0)]
        with pytest.raises(ValidationError):
            parse_session_log(lines)

    def test_positions_must_be_contiguous(self):
        lines = [HEADER.line() + "\n", doc_line("q1", "a", 1), doc_line("q1", "b", 3)]
        with pytest.raises(ValidationError):
            parse_session_log(lines)

    @pytest.mark.parametrize("field,value", [(3, 4), (4, 5), (5, 6), (6, 2)])
    def test_vocabulary_bounds(self, field, value):
        parts = ["q1", "a", "1", "0", "0", "0", "1", "0,0,0"]
        parts[field] = str(value)
        with pytest.raises(ValidationError):
            parse_session_log([HEADER.line() + "\n", "\t".join(parts) + "\n"])

    def test_parse_error_reports_line(self):
        lines = two_doc_lines() + ["q2\tx\tnotanint\t0\t0\t0\t0\t1,2,3\n"]
        with pytest.raises(ParseError) as info:
            parse_session_log(lines)
        assert info.value.line == 4
        assert info.value.field == 3

    def test_wrong_feature_count(self):
        lines = [HEADER.line() + "\n", doc_line("q1", "a", 1, feats="1,2")]
        with pytest.raises(ValidationError):
            parse_session_log(lines)

    def test_bad_header(self):
        with pytest.raises(ParseError):
            parse_session_log(["#dims 3 4\n"])

    def test_split_query_block(self):
        lines = [HEADER.line() + "\n", doc_line("q1", "a", 1), doc_line("q2", "a", 1),
                 doc_line("q1", "b", 2)]
        with pytest.raises(ValidationError):
            parse_session_log(lines)

    def test_empty_corpus(self):
        assert list(write_session_log([])) == []
        assert parse_session_log([]) == (CorpusHeader(), [])

    def test_round_trip_fixed(self):
        lines = two_doc_lines()
        header, sessions = parse_session_log(lines)
        assert list(write_session_log(sessions, header)) == lines

    def test_byte_identical_writes(self):
        _, sessions = parse_session_log(two_doc_lines())
        assert "".join(write_session_log(sessions, HEADER)) == "".join(write_session_log(sessions, HEADER))

    def test_simulator_round_trip(self):
        cfg = SimConfig(num_queries=100, seed=3)
        sessions, _, _ = gen_corpus(cfg)
        header, parsed = parse_session_log(write_session_log(sessions, cfg.header))
        assert header == cfg.header
        assert parsed == sessions

    def test_infer_header(self):
        _, sessions = parse_session_log(two_doc_lines())
        h = infer_header(sessions)
        assert (h.dims, h.vocab_mtype, h.vocab_serph, h.vocab_slipoff, h.n_max) == (3, 2, 3, 4, 2)


class TestAnnotations:
    def test_single_record(self):
        assert parse_annotations(["q1\td7\t4\n"]) == [AnnotationRecord("q1", "d7", 4)]

    def test_label_out_of_range(self):
        with pytest.raises(ValidationError):
            parse_annotations(["q1\td7\t5\n"])
        with pytest.raises(ValidationError):
            parse_annotations(["q1\td7\t-1\n"])

    def test_duplicate_pair(self):
        with pytest.raises(ValidationError):
            parse_annotations(["q1\td7\t4\n", "q1\td7\t2\n"])

    def test_non_integer_label(self):
        with pytest.raises(ParseError):
            parse_annotations(["q1\td7\tthree\n"])

    def test_round_trip(self):
        recs = [AnnotationRecord("q1", "d1", 0), AnnotationRecord("q2", "d9", 3)]
        assert parse_annotations(write_annotations(recs)) == recs


class TestGroupSelect:
    def test_one_click_n10_g6(self):
        clicks = [0] * 10
        clicks[1] = 1
        groups = group_select(make_session(clicks), 6, np.random.default_rng(0))
        assert len(groups) == 1
        g = groups[0]
        assert g.members[0] == 1 and len(g.members) == 6
        assert len(set(g.members)) == 6
        assert g.click_mask == (1, 0, 0, 0, 0, 0)

    def test_no_clicks(self):
        assert group_select(make_session([0] * 10), 6, np.random.default_rng(0)) == []

    def test_shrinks_when_few_unclicked(self):
        groups = group_select(make_session([1, 0, 0]), 6, np.random.default_rng(0))
        assert len(groups) == 1 and len(groups[0].members) == 3

    def test_g_below_two(self):
        with pytest.raises(ConfigError):
            group_select(make_session([1, 0]), 1, np.random.default_rng(0))

    def test_exhaustive_small_sessions(self):
        rng = np.random.default_rng(1)
        for n in range(1, 6):
            for clicks in itertools.product((0, 1), repeat=n):
                session = make_session(clicks)
                n_click = sum(clicks)
                for g in range(2, 8):
                    groups = group_select(session, g, rng)
                    assert len(groups) == n_click
                    clicked_docs = sorted(gs.members[0] for gs in groups)
                    assert clicked_docs == [i for i, c in enumerate(clicks) if c]
                    for gs in groups:
                        assert len(gs.members) == min(g, 1 + n - n_click)
                        assert len(set(gs.members)) == len(gs.members)
                        assert sum(clicks[m] for m in gs.members) == 1
                        assert sum(gs.click_mask) == 1

    def test_deterministic(self):
        clicks = np.random.default_rng(2).integers(0, 2, size=10)
        a = select_group_members(clicks, 4, np.random.default_rng(5))
        b = select_group_members(clicks, 4, np.random.default_rng(5))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_inclusion_frequency(self):
        clicks = np.zeros(10, dtype=int)
        clicks[4] = 1
        rng = np.random.default_rng(7)
        counts = np.zeros(10)
        draws = 100_000
        for _ in range(draws):
            (members,) = select_group_members(clicks, 6, rng)
            counts[members[1:]] += 1
        freq = np.delete(counts, 4) / draws
        np.testing.assert_allclose(freq, 5 / 9, atol=0.02)
        assert counts[4] == 0


class TestCorpusArrays:
    def test_columns(self):
        _, sessions = parse_session_log(two_doc_lines() + [doc_line("q2", "z", 1, click=1)])
        arr = CorpusArrays.from_sessions(sessions)
        assert arr.num_sessions == 2
        np.testing.assert_array_equal(arr.offsets, [0, 2, 3])
        np.testing.assert_array_equal(arr.bias_ids[0], [1, 1, 2, 3])
        np.testing.assert_array_equal(arr.clicks, [1, 0, 1])
        assert arr.features.shape == (3, 3)
        assert arr.doc_ids[arr.session_rows(1)] == ["z"]
