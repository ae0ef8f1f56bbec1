import sys
from pathlib import Path

import numpy as np
import pytest

SRC = Path(__file__).resolve().parent.parent / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from scas.trace import CandidatePool, SequenceTrace, SpanLayout  # noqa: E402


def make_trace(hidden, nll, question_len, question_id="q", candidate_id="c", token_ids=None, meta=None):
    """Trace fixture from explicit hidden rows and NLLs; tokens default to 0,1,2,..."""
    hidden = np.asarray(hidden, dtype=np.float64)
    nll = np.asarray(nll, dtype=np.float64)
    n = len(nll)
    if token_ids is None:
        token_ids = np.arange(n, dtype=np.int64)
    return SequenceTrace(
        question_id=question_id,
        candidate_id=candidate_id,
        token_ids=token_ids,
        nll=nll,
        hidden=hidden,
        layout=SpanLayout(question_len, n - question_len),
        meta=meta or {},
    )


def random_unit_rows(rng, n, d, zero_rows=()):
    rows = rng.normal(size=(n, d))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    for i in zero_rows:
        rows[i] = 0.0
    return rows


def random_trace(rng, n_q=None, n_a=None, d=4, question_id="q", candidate_id="c", zero_rows=()):
    n_q = n_q or int(rng.integers(1, 6))
    n_a = n_a or int(rng.integers(1, 10))
    n = n_q + n_a
    return make_trace(
        random_unit_rows(rng, n, d, zero_rows),
        rng.uniform(0.0, 4.0, size=n),
        n_q,
        question_id=question_id,
        candidate_id=candidate_id,
        token_ids=rng.integers(0, 50, size=n),
    )


def make_pool(traces, hidden_dim=None):
    traces = list(traces)
    return CandidatePool(
        traces[0].question_id,
        hidden_dim if hidden_dim is not None else traces[0].hidden.shape[1],
        tuple(traces),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
