import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import make_trace, random_trace
from scas import instrument
from scas.analysis import (
    alignment_audit,
    average_ranks,
    blockwise_stats,
    block_stats_csv,
    corollary_ranking_test,
    cost_instrumentation,
    mean_field_audit,
    mean_field_from_values,
    pearson,
    proxy_vs_oracle,
    spearman,
    zero_dispersion_pool,
)
from scas.errors import DegenerateRankingError, OracleError, ScasError
from scas.oracle import (
    ForwardResult,
    SynthParams,
    TinyLM,
    TokenCandidate,
    TokenPool,
    forward,
    head_gradient,
    normalized_retained,
    synth_pools,
    trace_from_forward,
)
from scas.score import score_full
from scas.trace import SpanLayout


def naive_spearman(a, b):
    """Independent oracle: sorted-position average ranks plus textbook Pearson."""

    def ranks(v):
        idx = sorted(range(len(v)), key=lambda i: v[i])
        r = [0.0] * len(v)
        i = 0
        while i < len(v):
            j = i
            while j + 1 < len(v) and v[idx[j + 1]] == v[idx[i]]:
                j += 1
            for k in range(i, j + 1):
                r[idx[k]] = (i + j) / 2 + 1
            i = j + 1
        return r

    return naive_pearson(ranks(list(a)), ranks(list(b)))


def naive_pearson(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    num = sum((x[i] - mx) * (y[i] - my) for i in range(n))
    den = math.sqrt(sum((v - mx) ** 2 for v in x)) * math.sqrt(sum((v - my) ** 2 for v in y))
    return num / den


class TestSpearman:
    def test_identical_orderings(self):
        assert spearman([1, 2, 3], [10, 20, 30]) == 1.0

    def test_exactly_reversed(self):
        assert spearman([1, 2, 3], [30, 20, 10]) == -1.0

    def test_worked_example(self):
        assert np.isclose(spearman([1, 2, 3, 4], [1, 3, 2, 4]), 0.8)

    def test_too_short(self):
        with pytest.raises(ScasError):
            spearman([1], [2])

    def test_fully_tied_is_undefined(self):
        with pytest.raises(DegenerateRankingError):
            spearman([1, 1, 1], [1, 2, 3])

    def test_matches_naive_on_random_vectors(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 30))
            a = rng.normal(size=n)
            b = rng.normal(size=n)
            assert abs(spearman(a, b) - naive_spearman(a, b)) < 1e-12

    def test_tie_handling_matches_naive(self, rng):
        for _ in range(50):
            n = int(rng.integers(3, 20))
            a = rng.integers(0, 4, size=n).astype(float)
            b = rng.integers(0, 4, size=n).astype(float)
            if len(set(a)) < 2 or len(set(b)) < 2:
                continue
            assert abs(spearman(a, b) - naive_spearman(a, b)) < 1e-12

    def test_average_ranks(self):
        assert np.array_equal(average_ranks([10, 20, 20, 5]), [2.0, 3.5, 3.5, 1.0])


class TestPearson:
    def test_perfect_linear(self):
        x = np.arange(9.0)
        assert np.isclose(pearson(x, 2 * x + 1), 1.0)

    def test_perfect_negative(self):
        x = np.arange(5.0)
        assert np.isclose(pearson(x, -x), -1.0)

    def test_symmetric_cancellation(self):
        assert pearson([0, 1, 2], [0, 1, 0]) == 0.0

    def test_zero_variance_undefined(self):
        with pytest.raises(DegenerateRankingError):
            pearson([1, 1, 1], [1, 2, 3])

    def test_matches_naive(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 30))
            x = rng.normal(size=n)
            y = rng.normal(size=n)
            assert abs(pearson(x, y) - naive_pearson(list(x), list(y))) < 1e-12


def small_synth(seed=3, questions=4, candidates=5, spread=0.5):
    params = SynthParams(
        num_questions=questions,
        candidates_per_question=candidates,
        question_len_range=(3, 5),
        answer_len_range=(4, 8),
        vocab_size=12,
        hidden_dim=6,
        teacher_skill_spread=spread,
    )
    return synth_pools(seed, params), TinyLM.init(12, 6, seed=seed + 100)


class TestProxyVsOracle:
    def test_token_identical_candidates_excluded(self):
        ids = np.array([1, 2, 3, 4, 5], dtype=np.int64)
        layout = SpanLayout(2, 3)
        pool = TokenPool(
            "q0",
            (TokenCandidate("a", ids, layout), TokenCandidate("b", ids.copy(), layout)),
        )
        model = TinyLM.init(8, 4, seed=0)
        report = proxy_vs_oracle([pool], model)
        assert report.questions_used == 0
        assert report.questions_excluded == 1
        assert "degenerate" in report.per_question[0].note

    def test_zero_dispersion_pool_gives_perfect_correlation(self):
        model = TinyLM.init(10, 5, seed=4)
        constructed = zero_dispersion_pool(model, seed=8)
        scores = [score_full(trace_from_forward(res, "q", cid), 0.5).score for cid, res in constructed]
        energies = [normalized_retained(res, 0.5).energy for _, res in constructed]
        assert spearman(scores, energies) == 1.0

    def test_report_emitted_with_no_fixed_target(self):
        pools, model = small_synth()
        report = proxy_vs_oracle(pools, model, lam=0.5)
        assert report.questions_used + report.questions_excluded == len(pools)
        if report.mean_rho is not None:
            assert -1.0 <= report.mean_rho <= 1.0
        doc = report.as_dict()
        assert doc["lambda"] == 0.5 and doc["lambda_star"] == 0.5

    def test_single_candidate_questions_skipped(self):
        pools, model = small_synth(candidates=1, questions=2)
        report = proxy_vs_oracle(pools, model)
        assert report.questions_used == 0
        assert report.mean_rho is None


class TestBlockwiseStats:
    def test_single_candidate_stds_are_zero(self):
        pools, model = small_synth(candidates=1, questions=3)
        stats = blockwise_stats(pools, model)
        for q in stats.per_question:
            assert q.std == {"aa": 0.0, "aq": 0.0, "qq": 0.0}

    def test_qq_std_exactly_zero_for_shared_prefix_pools(self):
        pools, model = small_synth(questions=5, candidates=6)
        stats = blockwise_stats(pools, model)
        for q in stats.per_question:
            assert q.std["qq"] == 0.0

    def test_answer_blocks_vary_when_spread_positive(self):
        pools, model = small_synth(questions=5, candidates=6, spread=0.8)
        stats = blockwise_stats(pools, model)
        for q in stats.per_question:
            assert q.std["aa"] > q.std["qq"] == 0.0

    def test_csv_shape(self):
        pools, model = small_synth(questions=2, candidates=2)
        text = block_stats_csv(blockwise_stats(pools, model))
        lines = text.strip().split("\n")
        assert lines[0] == "question_id,num_candidates,aa_mean,aa_std,aq_mean,aq_std,qq_mean,qq_std"
        assert len(lines) == 3


class TestMeanFieldAudit:
    def test_zero_variance_collapse(self, rng):
        tr = random_trace(rng, n_q=4, n_a=6)
        nll = np.concatenate([np.full(4, 0.9), np.full(6, 1.7)])
        audit = mean_field_audit(make_trace(tr.hidden, nll, 4))
        assert audit.sigma_a == 0.0 and audit.sigma_q == 0.0
        assert audit.bound_aa == 0.0 and audit.bound_aq == 0.0
        assert audit.gap_aa <= 1e-12 and audit.gap_aq <= 1e-12
        assert audit.passed

    def test_bounds_hold_on_random_traces(self, rng):
        for _ in range(300):
            audit = mean_field_audit(random_trace(rng))
            assert audit.gap_aa <= audit.bound_aa + 1e-12
            assert audit.gap_aq <= audit.bound_aq + 1e-12

    def test_bounds_hold_with_zero_hidden_rows(self, rng):
        with pytest.warns(UserWarning):
            for _ in range(50):
                audit = mean_field_audit(random_trace(rng, n_q=3, n_a=5, zero_rows=(1, 4)))
                assert audit.passed

    def test_single_token_answer_has_zero_sigma(self, rng):
        audit = mean_field_audit(random_trace(rng, n_q=3, n_a=1))
        assert audit.sigma_a == 0.0
        assert audit.bound_aa == 0.0

    def test_mutated_quantities_fail_loudly(self, rng):
        tr = random_trace(rng)
        good = mean_field_audit(tr)
        assert good.passed
        bad = mean_field_from_values(
            sigma_a=good.sigma_a,
            sigma_q=good.sigma_q,
            t_aa=good.t_aa,
            t_aq=good.t_aq,
            c_aa=good.c_aa + good.bound_aa + 1.0,  # push outside the theorem bound
            c_aq=good.c_aq,
            d_a=math.sqrt(good.c_aa) if good.c_aa > 0 else 1.0,
            d_q=1.0,
        )
        assert not bad.pass_aa


class TestAlignmentAudit:
    def forward_result(self, rng, n_q=3, n_a=5):
        model = TinyLM.init(9, 5, seed=rng)
        ids = rng.integers(0, 9, size=n_q + n_a)
        return forward(model, ids, SpanLayout(n_q, n_a))

    def test_parallel_residuals(self, rng):
        res = self.forward_result(rng)
        v = rng.normal(size=9)
        v /= np.linalg.norm(v)
        scales = rng.uniform(0.2, 1.5, size=res.num_tokens)
        injected = replace(res, residuals=scales[:, None] * v[None, :])
        audit = alignment_audit(injected)
        assert np.isclose(audit.aa.rho_hat, 1.0)
        assert audit.aa.delta_hat < 1e-12
        assert abs(audit.aa.e_align) < 1e-12
        assert np.isclose(audit.aq.rho_hat, 1.0)

    def test_orthogonal_pair_has_zero_alignment(self, rng):
        res = self.forward_result(rng, n_q=1, n_a=2)
        residuals = np.zeros((3, 9))
        residuals[1, 0] = 1.0
        residuals[2, 1] = 1.0
        residuals[0, 2] = 0.5
        audit = alignment_audit(replace(res, residuals=residuals))
        # answer block: two orthogonal residuals -> gammas {1, 0, 0, 1}
        assert np.isclose(audit.aa.rho_hat, 0.5)
        assert np.isclose(audit.aa.delta_hat, 0.5)

    def test_identity_residue_on_random_instances(self, rng):
        for _ in range(20):
            audit = alignment_audit(self.forward_result(rng))
            for block in (audit.aa, audit.aq):
                assert block.identity_gap < 1e-10
                assert abs(block.e_align) <= block.e_align_bound + 1e-12
                assert block.rho_hat is not None and -1.0 - 1e-12 <= block.rho_hat <= 1.0 + 1e-12

    def test_decomposition_reconstructs_retained_energy(self, rng):
        res = self.forward_result(rng)
        audit = alignment_audit(res)
        ret = normalized_retained(res, 0.0)
        assert np.isclose(audit.aa.g_tilde, ret.g_aa_tilde, rtol=1e-12)
        assert np.isclose(audit.aa.rho_hat * audit.aa.t_hat + audit.aa.e_align, audit.aa.g_tilde, rtol=1e-10)

    def test_all_zero_residuals_skip_block(self, rng):
        res = self.forward_result(rng)
        r = np.array(res.residuals)
        r[res.layout.answer_slice] = 0.0
        audit = alignment_audit(replace(res, residuals=r))
        assert audit.aa.skipped
        assert audit.aq.skipped
        assert "zero" in audit.aa.note


class TestCorollary:
    def test_two_candidate_construction(self):
        model = TinyLM.init(8, 4, seed=2)
        constructed = zero_dispersion_pool(model, seed=1, num_candidates=2)
        outcome = corollary_ranking_test(constructed, 0.5)
        assert outcome.passed and outcome.rho == 1.0

    def test_five_candidate_construction(self):
        model = TinyLM.init(8, 4, seed=2)
        constructed = zero_dispersion_pool(model, seed=5, num_candidates=5)
        outcome = corollary_ranking_test(constructed, 0.3)
        assert outcome.passed and outcome.rho == 1.0

    def test_identical_candidates_skipped(self):
        model = TinyLM.init(8, 4, seed=2)
        constructed = zero_dispersion_pool(model, seed=5, num_candidates=2)
        twin = [(cid, res) for cid, res in constructed[:1]] * 2
        outcome = corollary_ranking_test(twin, 0.5)
        assert outcome.skipped and not outcome.passed

    def test_invalid_construction_rejected(self, rng):
        model = TinyLM.init(8, 4, seed=2)
        (cid, res), *_ = zero_dispersion_pool(model, seed=5)
        noisy_nll = np.array(res.nll)
        noisy_nll[-1] += 0.1
        with pytest.raises(OracleError, match="dispersion"):
            corollary_ranking_test([(cid, replace(res, nll=noisy_nll))], 0.5)

    def test_nonparallel_residuals_rejected(self):
        model = TinyLM.init(8, 4, seed=2)
        (cid, res), *_ = zero_dispersion_pool(model, seed=5)
        r = np.array(res.residuals)
        r[-1] = np.roll(r[-1], 1)
        with pytest.raises(OracleError, match="parallel"):
            corollary_ranking_test([(cid, replace(res, residuals=r))], 0.5)


class TestInstrumentation:
    def test_empty_run_all_zeros(self):
        instrument.reset_counters()
        assert cost_instrumentation(instrument.snapshot()) == {
            "forwards": 0,
            "full_backwards": 0,
            "head_gradients": 0,
            "pairwise_enumerations": 0,
        }

    def test_audit_path_counts_head_gradients_not_backprops(self):
        pools, model = small_synth(questions=2, candidates=3)
        instrument.reset_counters()
        n = 0
        for tp in pools:
            for cand in tp.candidates:
                res = forward(model, cand.token_ids, cand.layout)
                head_gradient(res)
                normalized_retained(res, 0.5)
                n += 1
        snap = instrument.snapshot()
        assert snap.forwards == n
        assert snap.head_gradients == n
        assert snap.full_backwards == 0
