"""Operator surface: validate, score, select, rounds, audit, stats.

Exit codes are a stable contract for pipeline embedding: 0 success,
1 data/validation failure, 2 usage error, 3 internal invariant breach.
All randomness enters via --seed (sampling commands require it); outputs
are written to temp names and renamed so partial files never masquerade
as reports.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import analysis, instrument, oracle, sampler, score, trace
from .errors import ConfigError, OracleError, ScasError, TraceFormatError

EXIT_OK = 0
EXIT_DATA = 1
EXIT_USAGE = 2
EXIT_INTERNAL = 3


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path: Path, doc) -> None:
    _atomic_write(path, (json.dumps(doc, indent=2) + "\n").encode("utf-8"))


def _write_jsonl(path: Path, rows) -> None:
    _atomic_write(path, ("".join(json.dumps(r) + "\n" for r in rows)).encode("utf-8"))


def _lambda_arg(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"lambda must lie in [0, 1], got {value}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _add_score_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda", dest="lam", type=_lambda_arg, default=0.5,
                   help="trade-off between the aa and cross-span terms (default 0.5)")
    p.add_argument("--variant", choices=score.VARIANTS, default="full")


def _add_synth_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--questions", type=_positive_int, default=20)
    p.add_argument("--candidates", type=_positive_int, default=8)
    p.add_argument("--qlen", type=_positive_int, nargs=2, default=[4, 10], metavar=("LO", "HI"))
    p.add_argument("--alen", type=_positive_int, nargs=2, default=[4, 16], metavar=("LO", "HI"))
    p.add_argument("--vocab", type=_positive_int, default=16)
    p.add_argument("--dim", type=_positive_int, default=8)
    p.add_argument("--spread", type=float, default=0.5)


def _synth_params(args) -> oracle.SynthParams:
    return oracle.SynthParams(
        num_questions=args.questions,
        candidates_per_question=args.candidates,
        question_len_range=tuple(args.qlen),
        answer_len_range=tuple(args.alen),
        vocab_size=args.vocab,
        hidden_dim=args.dim,
        teacher_skill_spread=args.spread,
    )


def _config_echo(args, extra=None) -> dict:
    skip = {"func", "out", "trace_path"}
    echo = {k: v for k, v in sorted(vars(args).items()) if k not in skip and not callable(v)}
    if extra:
        echo.update(extra)
    return echo


def _load_pools(path: str):
    pools = trace.parse_pools(path)
    violations = []
    for pool in pools:
        violations.extend(trace.validate_pool(pool))
    return pools, violations


def cmd_validate(args) -> int:
    pools, violations = _load_pools(args.trace_path)
    report = {
        "trace_path": str(args.trace_path),
        "pools": len(pools),
        "candidates": sum(p.num_candidates for p in pools),
        "violations": [vars(v) for v in violations],
        "clean": not violations,
    }
    print(json.dumps(report, indent=2))
    if args.out:
        _write_json(Path(args.out), report)
    return EXIT_OK if not violations else EXIT_DATA


def cmd_score(args) -> int:
    pools, violations = _load_pools(args.trace_path)
    if violations:
        for v in violations:
            print(f"violation: {v.kind} {v.question_id}/{v.candidate_id}: {v.detail}", file=sys.stderr)
        return EXIT_DATA
    config = score.ScoreConfig(args.lam, args.variant)
    rows = []
    for pool in pools:
        for cid, b in score.score_pool(pool, config):
            rows.append(score.score_record(pool.question_id, cid, b))
    _write_jsonl(Path(args.out), rows)
    print(f"scored {len(rows)} candidates across {len(pools)} questions -> {args.out}")
    return EXIT_OK


def cmd_select(args) -> int:
    pools, violations = _load_pools(args.trace_path)
    if violations:
        for v in violations:
            print(f"violation: {v.kind} {v.question_id}/{v.candidate_id}: {v.detail}", file=sys.stderr)
        return EXIT_DATA
    config = sampler.SelectionConfig(
        num_groups=args.groups,
        rounds=1,
        seed=args.seed,
        score_config=score.ScoreConfig(args.lam, args.variant),
    )
    selected = sampler.select_round(pools, config, round_index=0, min_score=args.min_score)
    rows = [sampler.selection_record_dict(0, rec) for rec in selected.records]
    _write_jsonl(Path(args.out), rows)
    print(f"selected {len(rows)} answers -> {args.out}")
    return EXIT_OK


def cmd_rounds(args) -> int:
    if args.instrument:
        instrument.reset_counters()
    params = _synth_params(args)
    pools = oracle.synth_pools(args.seed, params)
    if args.model:
        model = oracle.load_model(args.model)
    else:
        model = oracle.TinyLM.init(params.vocab_size, params.hidden_dim, args.seed)
    config = sampler.SelectionConfig(
        num_groups=args.groups,
        rounds=args.rounds,
        seed=args.seed,
        score_config=score.ScoreConfig(args.lam, args.variant),
    )
    model, logs = sampler.run_rounds(model, pools, config, learning_rate=args.lr, epochs=args.epochs)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    docs = []
    for log in logs:
        doc = log.as_dict()
        doc["config"] = _config_echo(args)
        docs.append(doc)
    _write_jsonl(out / "rounds.jsonl", docs)
    selection_rows = [
        sampler.selection_record_dict(log.round, rec) for log in logs for rec in log.selections.records
    ]
    _write_jsonl(out / "selections.jsonl", selection_rows)
    oracle.save_model(model, out / "model.json")
    if args.instrument:
        _write_json(out / "instrumentation.json", analysis.cost_instrumentation(instrument.snapshot()))
    for log in logs:
        losses = ", ".join(f"{v:.6f}" for v in log.epoch_losses)
        print(f"round {log.round}: epoch losses [{losses}]")
    print(f"wrote round logs, selections, and final checkpoint -> {out}")
    return EXIT_OK


def _audit_document(seed: int, params: oracle.SynthParams, lam: float, lambda_star: float) -> dict:
    """Run every theorem-backed audit over seeded synthetic pools."""
    pools = oracle.synth_pools(seed, params)
    model = oracle.TinyLM.init(params.vocab_size, params.hidden_dim, seed + 1)

    decomposition_ok = True
    equivalence_ok = True
    residual_bounds_ok = True
    mean_field_ok = True
    alignment_ok = True
    worst = {"decomposition": 0.0, "equivalence": 0.0, "residual_margin": np.inf,
             "mean_field_slack": np.inf, "alignment_identity": 0.0}

    for tp in pools:
        for cand in tp.candidates:
            res = oracle.forward(model, cand.token_ids, cand.layout)
            grad = oracle.head_gradient(res)
            frob = float((grad * grad).sum())
            blocks = oracle.grad_norm_matrix(res.hidden, res.residuals, res.layout)
            rel = abs(blocks.total - frob) / max(frob, 1e-30)
            worst["decomposition"] = max(worst["decomposition"], rel)
            decomposition_ok &= rel <= 1e-10

            pair = oracle.grad_norm_pairwise(res.hidden, res.residuals)
            rel2 = abs(pair - blocks.total) / max(abs(pair), 1e-30)
            worst["equivalence"] = max(worst["equivalence"], rel2)
            equivalence_ok &= rel2 <= 1e-10

            audit = oracle.residual_nll_audit(res)
            worst["residual_margin"] = min(worst["residual_margin"], audit.worst_margin)
            residual_bounds_ok &= audit.passed

            tr = oracle.trace_from_forward(res, tp.question_id, cand.candidate_id)
            mf = analysis.mean_field_audit(tr)
            slack = min(mf.bound_aa + 1e-12 - mf.gap_aa, mf.bound_aq + 1e-12 - mf.gap_aq)
            worst["mean_field_slack"] = min(worst["mean_field_slack"], slack)
            mean_field_ok &= mf.passed

            al = analysis.alignment_audit(res)
            for block in (al.aa, al.aq):
                if block.skipped:
                    continue
                worst["alignment_identity"] = max(worst["alignment_identity"], block.identity_gap)
                alignment_ok &= block.identity_gap <= 1e-10
                alignment_ok &= abs(block.e_align) <= block.e_align_bound + 1e-12

    corollary_ok = True
    for k in range(10):
        constructed = analysis.zero_dispersion_pool(model, seed=seed * 1000 + k)
        outcome = analysis.corollary_ranking_test(constructed, lam)
        corollary_ok &= outcome.passed

    report = analysis.proxy_vs_oracle(pools, model, lam=lam, lambda_star=lambda_star)

    return {
        "schema_version": 1,
        "seed": seed,
        "lambda": lam,
        "lambda_star": lambda_star,
        "checks": {
            "decomposition_identity": {"passed": decomposition_ok, "worst_rel_error": worst["decomposition"]},
            "route_equivalence": {"passed": equivalence_ok, "worst_rel_error": worst["equivalence"]},
            "residual_nll_bounds": {"passed": residual_bounds_ok, "worst_margin": worst["residual_margin"]},
            "mean_field_bounds": {"passed": mean_field_ok, "worst_slack": worst["mean_field_slack"]},
            "alignment_identity": {"passed": alignment_ok, "worst_gap": worst["alignment_identity"]},
            "corollary_ranking": {"passed": corollary_ok},
        },
        "rank_correlation": report.as_dict(),
        "all_passed": bool(
            decomposition_ok and equivalence_ok and residual_bounds_ok and mean_field_ok
            and alignment_ok and corollary_ok
        ),
    }


def cmd_audit(args) -> int:
    if args.instrument:
        instrument.reset_counters()
    lambda_star = args.lam if args.lambda_star is None else args.lambda_star
    doc = _audit_document(args.seed, _synth_params(args), args.lam, lambda_star)
    doc["config"] = _config_echo(args)
    if args.instrument:
        doc["instrumentation"] = analysis.cost_instrumentation(instrument.snapshot())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "audits.json", doc)
    _write_json(out / "rank_correlation.json", doc["rank_correlation"])
    for name, check in doc["checks"].items():
        print(f"{name}: {'PASS' if check['passed'] else 'FAIL'}")
    if not doc["all_passed"]:
        print("audit failure: a theorem-backed bound was violated", file=sys.stderr)
        return EXIT_INTERNAL
    print(f"audits.json -> {out}")
    return EXIT_OK


def cmd_stats(args) -> int:
    params = _synth_params(args)
    pools = oracle.synth_pools(args.seed, params)
    model = oracle.TinyLM.init(params.vocab_size, params.hidden_dim, args.seed + 1)
    stats = analysis.blockwise_stats(pools, model)
    doc = stats.as_dict()
    doc["config"] = _config_echo(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "block_stats.json", doc)
    _atomic_write(out / "block_stats.csv", analysis.block_stats_csv(stats).encode("utf-8"))
    print(f"block stats over {len(pools)} questions -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scas", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="validate a trace file")
    p.add_argument("trace_path")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("score", help="score every candidate in a trace file")
    p.add_argument("trace_path")
    _add_score_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("select", help="one selection round over a trace file (export-only)")
    p.add_argument("trace_path")
    _add_score_flags(p)
    p.add_argument("--groups", type=_positive_int, default=5)
    p.add_argument("--seed", type=_nonneg_int, required=True)
    p.add_argument("--min-score", action="store_true", help="pick the single lowest score, no grouping")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("rounds", help="multi-round select/train loop on synthetic pools")
    _add_score_flags(p)
    _add_synth_flags(p)
    p.add_argument("--groups", type=_positive_int, default=5)
    p.add_argument("--rounds", type=_positive_int, default=3)
    p.add_argument("--seed", type=_nonneg_int, required=True)
    p.add_argument("--model", default=None, help="starting checkpoint (default: fresh seeded init)")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=_positive_int, default=3)
    p.add_argument("--instrument", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rounds)

    p = sub.add_parser("audit", help="run all theorem-backed audits on synthetic pools")
    _add_score_flags(p)
    _add_synth_flags(p)
    p.add_argument("--lambda-star", dest="lambda_star", type=_lambda_arg, default=None)
    p.add_argument("--seed", type=_nonneg_int, required=True)
    p.add_argument("--instrument", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("stats", help="blockwise mean/std across candidates")
    _add_synth_flags(p)
    p.add_argument("--seed", type=_nonneg_int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (TraceFormatError, OracleError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ScasError as e:
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
