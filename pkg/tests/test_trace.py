import gzip
import json

import numpy as np
import pytest

from conftest import make_pool, make_trace, random_trace
from scas.errors import TraceFormatError
from scas.trace import (
    CandidatePool,
    SpanLayout,
    normalize_hidden,
    parse_pools,
    serialize_pools,
    validate_pool,
)


def header_line(hidden_dim):
    return json.dumps({"format": "scas-trace", "version": 1, "hidden_dim": hidden_dim})


def record_line(qid="q0", cid="c0", qlen=1, alen=2, d=4, nll=None, hidden=None, token_ids=None):
    n = qlen + alen
    return json.dumps(
        {
            "question_id": qid,
            "candidate_id": cid,
            "question_len": qlen,
            "answer_len": alen,
            "token_ids": token_ids if token_ids is not None else list(range(n)),
            "nll": nll if nll is not None else [0.5] * n,
            "hidden": hidden if hidden is not None else [[1.0] + [0.0] * (d - 1)] * n,
            "meta": {},
        }
    )


def file_bytes(*lines):
    return ("\n".join(lines) + "\n").encode("utf-8")


class TestParse:
    def test_empty_input_gives_empty_pool_list(self):
        assert parse_pools(b"") == []
        assert parse_pools(b"\n\n") == []

    def test_three_candidate_pool_round_trips(self):
        data = file_bytes(
            header_line(4),
            record_line(cid="c0"),
            record_line(cid="c1"),
            record_line(cid="c2"),
        )
        pools = parse_pools(data)
        assert len(pools) == 1
        assert pools[0].num_candidates == 3
        assert pools[0].hidden_dim == 4
        assert serialize_pools(pools) == data

    def test_nan_nll_names_record(self):
        data = file_bytes(header_line(4), record_line(qid="qx", cid="bad", nll=[0.5, float("nan"), 0.5]))
        with pytest.raises(TraceFormatError) as err:
            parse_pools(data)
        assert "qx" in str(err.value) and "bad" in str(err.value)

    def test_malformed_line_reports_line_number(self):
        data = file_bytes(header_line(4), record_line(), "{not json")
        with pytest.raises(TraceFormatError, match="line 3"):
            parse_pools(data)

    def test_hidden_dimension_mismatch_rejected(self):
        data = file_bytes(header_line(3), record_line(d=4))
        with pytest.raises(TraceFormatError, match="hidden_dim=3"):
            parse_pools(data)

    def test_duplicate_candidate_id_rejected(self):
        data = file_bytes(header_line(4), record_line(cid="dup"), record_line(cid="dup"))
        with pytest.raises(TraceFormatError, match="duplicate candidate_id"):
            parse_pools(data)

    def test_negative_nll_rejected(self):
        data = file_bytes(header_line(4), record_line(nll=[0.5, -0.1, 0.5]))
        with pytest.raises(TraceFormatError, match="negative"):
            parse_pools(data)

    def test_non_numeric_entries_rejected(self):
        data = file_bytes(header_line(4), record_line(nll=[0.5, "oops", 0.5]))
        with pytest.raises(TraceFormatError, match="non-numeric"):
            parse_pools(data)

    def test_extra_field_rejected(self):
        obj = json.loads(record_line())
        obj["surprise"] = 1
        data = file_bytes(header_line(4), json.dumps(obj))
        with pytest.raises(TraceFormatError, match="surprise"):
            parse_pools(data)

    def test_bad_header_rejected(self):
        with pytest.raises(TraceFormatError, match="format"):
            parse_pools(file_bytes(json.dumps({"format": "other", "version": 1, "hidden_dim": 4})))

    def test_gzip_detected_by_magic_bytes(self):
        data = file_bytes(header_line(4), record_line())
        pools = parse_pools(gzip.compress(data))
        assert pools[0].num_candidates == 1

    def test_candidate_order_preserved(self):
        data = file_bytes(
            header_line(4),
            record_line(cid="zz"),
            record_line(cid="aa"),
            record_line(qid="q1", cid="mm"),
            record_line(cid="bb"),
        )
        pools = parse_pools(data)
        assert [p.question_id for p in pools] == ["q0", "q1"]
        assert [t.candidate_id for t in pools[0].candidates] == ["zz", "aa", "bb"]


class TestRoundTripProperty:
    def test_serialize_parse_serialize_is_byte_identical(self):
        rng = np.random.default_rng(99)
        for case in range(25):
            pools = []
            for qi in range(int(rng.integers(1, 4))):
                traces = [
                    random_trace(rng, d=3, question_id=f"q{qi}", candidate_id=f"c{ci}")
                    for ci in range(int(rng.integers(1, 5)))
                ]
                pools.append(make_pool(traces))
            blob = serialize_pools(pools)
            assert serialize_pools(parse_pools(blob)) == blob, f"case {case}"


class TestNormalize:
    def test_three_four_five(self):
        tr = make_trace([[3.0, 4.0], [1.0, 0.0]], [0.1, 0.2], 1)
        out = normalize_hidden(tr)
        assert np.allclose(out.hidden[0], [0.6, 0.8])
        assert out.raw_norm[0] == 5.0

    def test_unit_norm_within_tolerance_and_idempotent(self, rng):
        tr = random_trace(rng, d=5)
        once = normalize_hidden(tr)
        norms = np.linalg.norm(once.hidden, axis=1)
        assert np.abs(norms - 1.0).max() < 1e-12
        twice = normalize_hidden(once)
        assert np.abs(twice.hidden - once.hidden).max() < 1e-12
        assert np.array_equal(twice.raw_norm, once.raw_norm)

    def test_zero_vector_maps_to_zero_with_warning(self):
        tr = make_trace([[0.0, 0.0], [1.0, 0.0]], [0.1, 0.2], 1)
        with pytest.warns(UserWarning, match="zero hidden"):
            out = normalize_hidden(tr)
        assert np.all(out.hidden[0] == 0.0)
        assert out.raw_norm[0] == 0.0


class TestValidatePool:
    def test_clean_pool_empty_report(self, rng):
        base = random_trace(rng, n_q=3, n_a=4, candidate_id="c0")
        other = make_trace(
            base.hidden + 0.0,
            base.nll,
            3,
            candidate_id="c1",
            token_ids=base.token_ids,
        )
        assert validate_pool(make_pool([base, other])) == []

    def test_shared_prefix_mismatch_reported_once(self, rng):
        base = random_trace(rng, n_q=3, n_a=4, candidate_id="c0")
        ids = np.array(base.token_ids)
        ids[1] += 1
        other = make_trace(base.hidden, base.nll, 3, candidate_id="c1", token_ids=ids)
        report = validate_pool(make_pool([base, other]))
        assert [v.kind for v in report] == ["shared_prefix"]
        assert report[0].candidate_id == "c1"

    def test_zero_answer_len_is_span_violation(self):
        tr = make_trace([[1.0, 0.0]] * 3, [0.5] * 3, 3)
        assert tr.layout.answer_len == 0
        report = validate_pool(make_pool([tr]))
        assert any(v.kind == "span" for v in report)

    def test_nan_hidden_reported_not_raised(self, rng):
        tr = random_trace(rng)
        hid = np.array(tr.hidden)
        hid[0, 0] = np.nan
        bad = make_trace(hid, tr.nll, tr.layout.question_len, token_ids=tr.token_ids)
        report = validate_pool(make_pool([bad]))
        assert any(v.kind == "non_finite" for v in report)


class TestPoolConstruction:
    def test_empty_pool_rejected(self):
        with pytest.raises(TraceFormatError, match="no candidates"):
            CandidatePool("q", 4, ())

    def test_mixed_question_id_rejected(self, rng):
        a = random_trace(rng, question_id="q1", candidate_id="c0")
        b = random_trace(rng, question_id="q2", candidate_id="c1")
        with pytest.raises(TraceFormatError, match="question_id"):
            CandidatePool("q1", 4, (a, b))

    def test_layout_slices(self):
        lay = SpanLayout(2, 3)
        assert lay.total_len == 5
        assert lay.question_slice == slice(0, 2)
        assert lay.answer_slice == slice(2, 5)

    def test_traces_are_immutable(self, rng):
        tr = random_trace(rng)
        with pytest.raises(ValueError):
            tr.hidden[0, 0] = 7.0
