"""Forward-only learning-cost scoring.

The full score couples span-mean NLL difficulty with normalized hidden-state
aggregates:

    c_aa  = d_a^2 * ||mu_a||^2
    c_aq  = d_a * d_q * (mu_a . mu_q)
    score = (1 - lam) * c_aa + lam * c_aq

Ablation variants keep token-level NLL weights inside the vector means
(token_nll), drop the embedding factors (nll_only), or drop the NLL factors
(emb_only). Scores live on the real line; ranking is ascending and negative
values are valid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, TraceFormatError
from .trace import CandidatePool, SequenceTrace, normalize_hidden

VARIANTS = ("full", "token_nll", "nll_only", "emb_only")


@dataclass(frozen=True)
class ScoreConfig:
    lam: float = 0.5
    variant: str = "full"

    def __post_init__(self):
        if not (isinstance(self.lam, (int, float)) and 0.0 <= self.lam <= 1.0):
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")


@dataclass(frozen=True)
class ScoreBreakdown:
    """All intermediate and final proxy quantities for one candidate.

    For the token_nll variant the mu fields hold the NLL-weighted vector
    means instead of the plain aggregates.
    """

    d_a: float
    d_q: float
    mu_a: np.ndarray
    mu_q: np.ndarray
    mu_a_norm_sq: float
    mu_dot: float
    c_aa: float
    c_aq: float
    score: float
    variant: str
    lam: float


def block_aggregates(trace: SequenceTrace):
    """Span means: (mu_a, mu_q, d_a, d_q) over the answer and question spans.

    Requires a normalized trace (unit hidden rows; zero rows permitted and
    contribute nothing to the mu aggregates).
    """
    lay = trace.layout
    if lay.question_len < 1 or lay.answer_len < 1 or lay.total_len != trace.num_tokens:
        raise TraceFormatError(
            f"trace {trace.question_id}/{trace.candidate_id}: empty or inconsistent span "
            f"(question_len={lay.question_len}, answer_len={lay.answer_len}, tokens={trace.num_tokens})"
        )
    a, q = lay.answer_slice, lay.question_slice
    mu_a = trace.hidden[a].mean(axis=0)
    mu_q = trace.hidden[q].mean(axis=0)
    d_a = float(trace.nll[a].mean())
    d_q = float(trace.nll[q].mean())
    return mu_a, mu_q, d_a, d_q


def _breakdown(trace: SequenceTrace, config: ScoreConfig) -> ScoreBreakdown:
    mu_a, mu_q, d_a, d_q = block_aggregates(trace)
    lam = float(config.lam)

    if config.variant == "token_nll":
        a, q = trace.layout.answer_slice, trace.layout.question_slice
        mu_a = (trace.nll[a, None] * trace.hidden[a]).mean(axis=0)
        mu_q = (trace.nll[q, None] * trace.hidden[q]).mean(axis=0)
        c_aa = float(mu_a @ mu_a)
        c_aq = float(mu_a @ mu_q)
    elif config.variant == "nll_only":
        c_aa = d_a * d_a
        c_aq = d_a * d_q
    elif config.variant == "emb_only":
        c_aa = float(mu_a @ mu_a)
        c_aq = float(mu_a @ mu_q)
    else:
        c_aa = d_a * d_a * float(mu_a @ mu_a)
        c_aq = d_a * d_q * float(mu_a @ mu_q)

    return ScoreBreakdown(
        d_a=d_a,
        d_q=d_q,
        mu_a=mu_a,
        mu_q=mu_q,
        mu_a_norm_sq=float(mu_a @ mu_a),
        mu_dot=float(mu_a @ mu_q),
        c_aa=c_aa,
        c_aq=c_aq,
        score=(1.0 - lam) * c_aa + lam * c_aq,
        variant=config.variant,
        lam=lam,
    )


def score_full(trace: SequenceTrace, lam: float = 0.5) -> ScoreBreakdown:
    return _breakdown(trace, ScoreConfig(lam, "full"))


def score_token_nll(trace: SequenceTrace, lam: float = 0.5) -> ScoreBreakdown:
    return _breakdown(trace, ScoreConfig(lam, "token_nll"))


def score_nll_only(trace: SequenceTrace, lam: float = 0.5) -> ScoreBreakdown:
    return _breakdown(trace, ScoreConfig(lam, "nll_only"))


def score_emb_only(trace: SequenceTrace, lam: float = 0.5) -> ScoreBreakdown:
    return _breakdown(trace, ScoreConfig(lam, "emb_only"))


def score_pool(pool: CandidatePool, config: ScoreConfig) -> list[tuple[str, ScoreBreakdown]]:
    """Score every candidate; output order equals pool order.

    Hidden states are normalized here (idempotent), so pools parsed from
    exporter files and pools built in memory score identically. Errors
    propagate with the candidate id attached.
    """
    out = []
    for tr in pool.candidates:
        try:
            out.append((tr.candidate_id, _breakdown(normalize_hidden(tr), config)))
        except ConfigError:
            raise
        except Exception as e:
            raise type(e)(f"candidate {tr.candidate_id!r} of question {pool.question_id!r}: {e}") from e
    return out


def score_record(question_id: str, candidate_id: str, b: ScoreBreakdown) -> dict:
    """One score-report row (wire keys match the report schema)."""
    return {
        "question_id": question_id,
        "candidate_id": candidate_id,
        "variant": b.variant,
        "lambda": b.lam,
        "d_A": b.d_a,
        "d_Q": b.d_q,
        "mu_A_norm_sq": b.mu_a_norm_sq,
        "mu_dot": b.mu_dot,
        "c_AA": b.c_aa,
        "c_AQ": b.c_aq,
        "score": b.score,
    }
