"""Quantitative validation harness.

Rank correlations between the forward-only proxy and the exact retained
interaction energy, blockwise statistics across candidates, and executable
audits of the proven error bounds (residual-vs-NLL, mean-field reduction,
alignment decomposition, margin-based ranking preservation). The bound
audits are theorems: any violation beyond float tolerance is an
implementation bug, not an empirical finding.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateRankingError, OracleError, ScasError
from .instrument import Counters
from .oracle import (
    ForwardResult,
    TinyLM,
    TokenPool,
    forward,
    normalized_retained,
    trace_from_forward,
    unit_hidden,
)
from .score import ScoreConfig, score_pool
from .trace import CandidatePool, SequenceTrace, SpanLayout, normalize_hidden


def thread_count() -> int:
    """Parallelism cap from SCAS_THREADS; defaults to sequential execution."""
    try:
        return max(1, int(os.environ.get("SCAS_THREADS", "1")))
    except ValueError:
        return 1


def _ordered_map(fn, items):
    workers = thread_count()
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Correlation utilities
# ---------------------------------------------------------------------------


def average_ranks(values) -> np.ndarray:
    """1-based ranks with average ranks assigned to ties."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y):
        raise ScasError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise ScasError(f"need at least 2 points, got {len(x)}")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = float(dx @ dx)
    sy = float(dy @ dy)
    if sx == 0.0 or sy == 0.0:
        raise DegenerateRankingError("zero variance; correlation undefined")
    return float((dx @ dy) / np.sqrt(sx * sy))


def spearman(values_a, values_b) -> float:
    """Spearman rank correlation with average ranks for ties.

    Identical or exactly reversed rankings return +/-1.0 exactly; fully tied
    input on either side is undefined and raises rather than returning 0.
    """
    ra = average_ranks(values_a)
    rb = average_ranks(values_b)
    if len(ra) != len(rb):
        raise ScasError(f"length mismatch: {len(ra)} vs {len(rb)}")
    if len(ra) < 2:
        raise ScasError(f"need at least 2 points, got {len(ra)}")
    if np.array_equal(ra, rb):
        if np.all(ra == ra[0]):
            raise DegenerateRankingError("all ranks tied on both sides; correlation undefined")
        return 1.0
    if np.array_equal(ra + rb, np.full(len(ra), len(ra) + 1.0)):
        return -1.0
    return pearson(ra, rb)


# ---------------------------------------------------------------------------
# Proxy-vs-oracle rank correlation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuestionCorrelation:
    question_id: str
    rho: float | None
    num_candidates: int
    note: str = ""


@dataclass(frozen=True)
class RankCorrelationReport:
    per_question: tuple[QuestionCorrelation, ...]
    mean_rho: float | None
    questions_used: int
    questions_excluded: int
    lam: float
    lambda_star: float
    variant: str

    def as_dict(self) -> dict:
        return {
            "schema_version": 1,
            "lambda": self.lam,
            "lambda_star": self.lambda_star,
            "variant": self.variant,
            "mean_rho": self.mean_rho,
            "questions_used": self.questions_used,
            "questions_excluded": self.questions_excluded,
            "per_question": [
                {
                    "question_id": qc.question_id,
                    "rho": qc.rho,
                    "num_candidates": qc.num_candidates,
                    "note": qc.note,
                }
                for qc in self.per_question
            ],
        }


def proxy_vs_oracle(
    pools: list[TokenPool],
    model: TinyLM,
    lam: float = 0.5,
    lambda_star: float | None = None,
    variant: str = "full",
) -> RankCorrelationReport:
    """Per question, correlate the proxy-score ranking with the exact
    retained-energy ranking. lambda_star defaults to the proxy lambda; the
    report carries both labels and never equates them."""
    if lambda_star is None:
        lambda_star = lam
    config = ScoreConfig(lam, variant)

    def one(tp: TokenPool) -> QuestionCorrelation:
        m = len(tp.candidates)
        if m < 2:
            return QuestionCorrelation(tp.question_id, None, m, "fewer than 2 candidates")
        results = [forward(model, c.token_ids, c.layout) for c in tp.candidates]
        traces = tuple(
            trace_from_forward(res, tp.question_id, c.candidate_id)
            for res, c in zip(results, tp.candidates)
        )
        pool = CandidatePool(tp.question_id, model.hidden_dim, traces)
        scores = [b.score for _, b in score_pool(pool, config)]
        energies = [normalized_retained(res, lambda_star).energy for res in results]
        try:
            rho = spearman(scores, energies)
        except DegenerateRankingError as e:
            return QuestionCorrelation(tp.question_id, None, m, f"degenerate ranking: {e}")
        return QuestionCorrelation(tp.question_id, rho, m)

    per_question = tuple(_ordered_map(one, pools))
    used = [qc.rho for qc in per_question if qc.rho is not None]
    return RankCorrelationReport(
        per_question=per_question,
        mean_rho=float(np.mean(used)) if used else None,
        questions_used=len(used),
        questions_excluded=len(per_question) - len(used),
        lam=float(lam),
        lambda_star=float(lambda_star),
        variant=variant,
    )


# ---------------------------------------------------------------------------
# Blockwise statistics across candidates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuestionBlockStats:
    question_id: str
    num_candidates: int
    mean: dict
    std: dict


@dataclass(frozen=True)
class BlockStats:
    per_question: tuple[QuestionBlockStats, ...]
    aggregate_mean: dict
    aggregate_std: dict

    def as_dict(self) -> dict:
        return {
            "schema_version": 1,
            "aggregate_mean": self.aggregate_mean,
            "aggregate_std": self.aggregate_std,
            "per_question": [
                {
                    "question_id": q.question_id,
                    "num_candidates": q.num_candidates,
                    "mean": q.mean,
                    "std": q.std,
                }
                for q in self.per_question
            ],
        }


def _exact_std(values: list[float]) -> float:
    # Bit-identical values must report exactly 0 (the shared-prefix guarantee);
    # naive mean/variance arithmetic would leak rounding noise.
    if min(values) == max(values):
        return 0.0
    return float(np.std(values))


def normalized_blocks(result: ForwardResult) -> dict:
    """Size-normalized unit-hidden interaction blocks aa, aq, qq for one sequence."""
    lay = result.layout
    u = unit_hidden(result)
    a, q = lay.answer_slice, lay.question_slice
    ka = u[a].T @ result.residuals[a]
    kq = u[q].T @ result.residuals[q]
    return {
        "aa": float((ka * ka).sum()) / lay.answer_len**2,
        "aq": float((ka * kq).sum()) / (lay.answer_len * lay.question_len),
        "qq": float((kq * kq).sum()) / lay.question_len**2,
    }


def blockwise_stats(pools: list[TokenPool], model: TinyLM) -> BlockStats:
    """Mean/std of the normalized blocks across candidates, per question and
    aggregated over questions (mean of per-question means and stds)."""

    def one(tp: TokenPool) -> QuestionBlockStats:
        blocks = [
            normalized_blocks(forward(model, c.token_ids, c.layout)) for c in tp.candidates
        ]
        mean = {k: float(np.mean([b[k] for b in blocks])) for k in ("aa", "aq", "qq")}
        std = {k: _exact_std([b[k] for b in blocks]) for k in ("aa", "aq", "qq")}
        return QuestionBlockStats(tp.question_id, len(tp.candidates), mean, std)

    per_question = tuple(_ordered_map(one, pools))
    agg_mean = {k: float(np.mean([q.mean[k] for q in per_question])) for k in ("aa", "aq", "qq")}
    agg_std = {k: float(np.mean([q.std[k] for q in per_question])) for k in ("aa", "aq", "qq")}
    return BlockStats(per_question, agg_mean, agg_std)


def block_stats_csv(stats: BlockStats) -> str:
    header = "question_id,num_candidates,aa_mean,aa_std,aq_mean,aq_std,qq_mean,qq_std"
    rows = [header]
    for q in stats.per_question:
        rows.append(
            f"{q.question_id},{q.num_candidates},"
            f"{q.mean['aa']!r},{q.std['aa']!r},"
            f"{q.mean['aq']!r},{q.std['aq']!r},"
            f"{q.mean['qq']!r},{q.std['qq']!r}"
        )
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# Mean-field reduction audit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeanFieldAudit:
    sigma_a: float
    sigma_q: float
    t_aa: float
    t_aq: float
    c_aa: float
    c_aq: float
    bound_aa: float
    bound_aq: float
    gap_aa: float
    gap_aq: float
    pass_aa: bool
    pass_aq: bool

    @property
    def passed(self) -> bool:
        return self.pass_aa and self.pass_aq

    def as_dict(self) -> dict:
        return {
            "sigma_A": self.sigma_a,
            "sigma_Q": self.sigma_q,
            "t_AA": self.t_aa,
            "t_AQ": self.t_aq,
            "c_AA": self.c_aa,
            "c_AQ": self.c_aq,
            "bound_AA": self.bound_aa,
            "bound_AQ": self.bound_aq,
            "gap_AA": self.gap_aa,
            "gap_AQ": self.gap_aq,
            "pass_AA": self.pass_aa,
            "pass_AQ": self.pass_aq,
        }


def mean_field_from_values(sigma_a, sigma_q, t_aa, t_aq, c_aa, c_aq, d_a, d_q) -> MeanFieldAudit:
    """Assemble audit verdicts from raw quantities (exposed for mutation tests)."""
    bound_aa = 2.0 * d_a * sigma_a + sigma_a**2
    bound_aq = d_q * sigma_a + d_a * sigma_q + sigma_a * sigma_q
    gap_aa = abs(t_aa - c_aa)
    gap_aq = abs(t_aq - c_aq)
    return MeanFieldAudit(
        sigma_a=sigma_a,
        sigma_q=sigma_q,
        t_aa=t_aa,
        t_aq=t_aq,
        c_aa=c_aa,
        c_aq=c_aq,
        bound_aa=bound_aa,
        bound_aq=bound_aq,
        gap_aa=gap_aa,
        gap_aq=gap_aq,
        pass_aa=bool(gap_aa <= bound_aa + 1e-12),
        pass_aq=bool(gap_aq <= bound_aq + 1e-12),
    )


def mean_field_audit(trace: SequenceTrace) -> MeanFieldAudit:
    """Token-sensitive vs blockwise proxies with their proven error bounds:
    |t_aa - c_aa| <= 2*d_a*sigma_a + sigma_a^2 and the cross-block analogue."""
    tr = normalize_hidden(trace)
    a, q = tr.layout.answer_slice, tr.layout.question_slice
    ell_a, ell_q = tr.nll[a], tr.nll[q]
    u_a, u_q = tr.hidden[a], tr.hidden[q]

    d_a, d_q = float(ell_a.mean()), float(ell_q.mean())
    sigma_a = float(np.sqrt(np.mean((ell_a - d_a) ** 2)))
    sigma_q = float(np.sqrt(np.mean((ell_q - d_q) ** 2)))

    mu_a, mu_q = u_a.mean(axis=0), u_q.mean(axis=0)
    v_a = (ell_a[:, None] * u_a).mean(axis=0)
    v_q = (ell_q[:, None] * u_q).mean(axis=0)

    return mean_field_from_values(
        sigma_a=sigma_a,
        sigma_q=sigma_q,
        t_aa=float(v_a @ v_a),
        t_aq=float(v_a @ v_q),
        c_aa=d_a * d_a * float(mu_a @ mu_a),
        c_aq=d_a * d_q * float(mu_a @ mu_q),
        d_a=d_a,
        d_q=d_q,
    )


# ---------------------------------------------------------------------------
# Alignment audit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockAlignment:
    block: str
    rho_hat: float | None
    delta_hat: float | None
    t_hat: float
    t_hat_abs: float
    g_tilde: float
    e_align: float
    e_align_bound: float | None
    identity_gap: float
    kappa_hat: float | None
    pairs_total: int
    pairs_excluded: int
    skipped: bool = False
    note: str = ""

    def as_dict(self) -> dict:
        return {
            "block": self.block,
            "rho_hat": self.rho_hat,
            "delta_hat": self.delta_hat,
            "t_hat": self.t_hat,
            "t_hat_abs": self.t_hat_abs,
            "g_tilde": self.g_tilde,
            "e_align": self.e_align,
            "e_align_bound": self.e_align_bound,
            "identity_gap": self.identity_gap,
            "kappa_hat": self.kappa_hat,
            "pairs_total": self.pairs_total,
            "pairs_excluded": self.pairs_excluded,
            "skipped": self.skipped,
            "note": self.note,
        }


@dataclass(frozen=True)
class AlignmentAudit:
    aa: BlockAlignment
    aq: BlockAlignment

    def as_dict(self) -> dict:
        return {"aa": self.aa.as_dict(), "aq": self.aq.as_dict()}


def _block_alignment(block, u_i, r_i, u_j, r_j, norm_factor, t_sensitive) -> BlockAlignment:
    """Empirical alignment stats for a (possibly cross-span) block.

    Pairwise alignment gamma_ij is defined only for nonzero residual pairs;
    zero-residual tokens are excluded with a count. With rho_hat set to the
    empirical mean, g_tilde = rho_hat * t_hat + e_align holds exactly by
    construction; identity_gap reports the double-loop recomputation drift.
    """
    ni, nj = np.linalg.norm(r_i, axis=1), np.linalg.norm(r_j, axis=1)
    same = u_i is u_j
    w_i = (ni[:, None] * u_i).mean(axis=0)
    w_j = w_i if same else (nj[:, None] * u_j).mean(axis=0)
    t_hat = float(w_i @ w_j)
    sim = u_i @ u_j.T
    t_hat_abs = float((np.abs(sim) * np.outer(ni, nj)).sum()) * norm_factor
    g_tilde = float((sim * (r_i @ r_j.T)).sum()) * norm_factor

    nz_i, nz_j = ni > 0.0, nj > 0.0
    pairs_total = len(ni) * len(nj)
    pairs_excluded = pairs_total - int(nz_i.sum()) * int(nz_j.sum())
    if not nz_i.any() or not nz_j.any():
        return BlockAlignment(
            block, None, None, t_hat, t_hat_abs, g_tilde, 0.0, None, 0.0, None,
            pairs_total, pairs_excluded, skipped=True, note="all residuals zero in block",
        )

    ri, rj = r_i[nz_i], r_j[nz_j]
    gam = (ri @ rj.T) / np.outer(ni[nz_i], nj[nz_j])
    rho_hat = float(gam.mean())
    delta_hat = float(np.abs(gam - rho_hat).max())

    e_align = g_tilde - rho_hat * t_hat
    # Literal double-loop residue; must match e_align to float tolerance.
    loop = 0.0
    ui, uj = u_i[nz_i], u_j[nz_j]
    for a in range(len(ri)):
        for b in range(len(rj)):
            loop += float(ui[a] @ uj[b]) * float(ni[nz_i][a] * nj[nz_j][b]) * (float(gam[a, b]) - rho_hat)
    loop *= norm_factor
    identity_gap = abs(loop - e_align)

    kappa_hat = float(t_hat / t_sensitive) if t_sensitive != 0.0 else None
    return BlockAlignment(
        block, rho_hat, delta_hat, t_hat, t_hat_abs, g_tilde, e_align,
        delta_hat * t_hat_abs, identity_gap, kappa_hat, pairs_total, pairs_excluded,
    )


def alignment_audit(result: ForwardResult) -> AlignmentAudit:
    """Empirical residual-alignment concentration per retained block."""
    lay = result.layout
    u = unit_hidden(result)
    a, q = lay.answer_slice, lay.question_slice
    ell = result.nll
    v_a = (ell[a, None] * u[a]).mean(axis=0)
    v_q = (ell[q, None] * u[q]).mean(axis=0)

    aa = _block_alignment(
        "aa", u[a], result.residuals[a], u[a], result.residuals[a],
        1.0 / lay.answer_len**2, float(v_a @ v_a),
    )
    aq = _block_alignment(
        "aq", u[a], result.residuals[a], u[q], result.residuals[q],
        1.0 / (lay.answer_len * lay.question_len), float(v_a @ v_q),
    )
    return AlignmentAudit(aa=aa, aq=aq)


# ---------------------------------------------------------------------------
# Margin-based ranking preservation on zero-dispersion constructions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorollaryOutcome:
    passed: bool
    rho: float | None
    proxy_scores: tuple[float, ...]
    energies: tuple[float, ...]
    skipped: bool = False
    note: str = ""


def zero_dispersion_pool(
    model: TinyLM,
    seed: int,
    num_candidates: int = 5,
    question_len: int = 4,
    answer_len: int = 6,
    kappa: float = 0.7,
) -> list[tuple[str, ForwardResult]]:
    """Construct candidates with constant per-span NLL and fully parallel
    residuals by injecting synthetic residuals into real forward results.

    Under this construction the retained energy equals kappa^2 times the
    full proxy score exactly, so ranking must be preserved.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    question = [int(t) for t in rng.integers(model.vocab_size, size=question_len)]
    direction = rng.normal(size=model.vocab_size)
    direction /= np.linalg.norm(direction)

    out = []
    for k in range(num_candidates):
        answer = [int(t) for t in rng.integers(model.vocab_size, size=answer_len)]
        res = forward(model, question + answer, SpanLayout(question_len, answer_len))
        c_a = 0.5 + 0.25 * k
        c_q = 0.8
        nll = np.empty(res.num_tokens)
        nll[res.layout.question_slice] = c_q
        nll[res.layout.answer_slice] = c_a
        residuals = (kappa * nll)[:, None] * direction[None, :]
        out.append((f"c{k:02d}", replace(res, nll=nll, residuals=residuals)))
    return out


def corollary_ranking_test(
    constructed: list[tuple[str, ForwardResult]], lam: float
) -> CorollaryOutcome:
    """Verify exact proxy/retained-energy rank agreement on a zero-dispersion pool."""
    energies = []
    scores = []
    for cid, res in constructed:
        lay = res.layout
        for span, name in ((lay.answer_slice, "answer"), (lay.question_slice, "question")):
            if float(np.std(res.nll[span])) != 0.0:
                raise OracleError(f"candidate {cid}: nonzero NLL dispersion in {name} span")
        norms = np.linalg.norm(res.residuals, axis=1)
        nz = norms > 0
        if nz.sum() >= 2:
            r = res.residuals[nz]
            gam = (r @ r.T) / np.outer(norms[nz], norms[nz])
            if np.abs(gam - 1.0).max() > 1e-12:
                raise OracleError(f"candidate {cid}: residuals are not parallel")
        energies.append(normalized_retained(res, lam).energy)
        tr = trace_from_forward(res, "corollary", cid)
        scored = score_pool(CandidatePool("corollary", tr.hidden_dim, (tr,)), ScoreConfig(lam, "full"))
        scores.append(scored[0][1].score)

    if max(energies) == min(energies):
        return CorollaryOutcome(
            passed=False, rho=None, proxy_scores=tuple(scores), energies=tuple(energies),
            skipped=True, note="identical candidates: fully tied energies",
        )
    rho = spearman(scores, energies)
    return CorollaryOutcome(
        passed=bool(rho == 1.0), rho=rho, proxy_scores=tuple(scores), energies=tuple(energies)
    )


def cost_instrumentation(counters: Counters) -> dict:
    """Counter snapshot as a report: the proxy path must show zero full backwards."""
    return counters.as_dict()
