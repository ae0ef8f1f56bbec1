"""Per-question candidate selection and the multi-round selection-training loop.

Candidates are sorted ascending by score (ties broken by candidate id),
partitioned into consecutive groups with floor boundaries b_g = floor(g*M/G),
and one candidate is drawn uniformly from the lowest-score group. When M < G
makes the lowest group empty, sampling falls back to the first nonempty
group. Per-question RNG streams are keyed by (seed, round, question_id) so
dataset ordering cannot perturb any question's draw.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, OracleError
from .oracle import TinyLM, TokenPool, forward, trace_from_forward, train_step
from .score import ScoreBreakdown, ScoreConfig, score_pool
from .trace import CandidatePool


@dataclass(frozen=True)
class GroupPartition:
    """Score-sorted candidate ids plus floor group boundaries b_0..b_G."""

    sorted_ids: tuple[str, ...]
    boundaries: tuple[int, ...]

    @property
    def num_groups(self) -> int:
        return len(self.boundaries) - 1

    def group(self, g: int) -> tuple[str, ...]:
        """Members of group g (1-based), i.e. sorted positions (b_{g-1}, b_g]."""
        return self.sorted_ids[self.boundaries[g - 1] : self.boundaries[g]]

    def group_sizes(self) -> list[int]:
        return [self.boundaries[g] - self.boundaries[g - 1] for g in range(1, len(self.boundaries))]

    def first_nonempty_group(self) -> tuple[str, ...]:
        for g in range(1, self.num_groups + 1):
            members = self.group(g)
            if members:
                return members
        raise OracleError("partition has no members")


@dataclass(frozen=True)
class SelectionConfig:
    num_groups: int = 5
    rounds: int = 1
    seed: int = 0
    score_config: ScoreConfig = field(default_factory=ScoreConfig)

    def __post_init__(self):
        if self.num_groups < 1:
            raise ConfigError(f"num_groups must be >= 1, got {self.num_groups}")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")


@dataclass(frozen=True)
class SelectionRecord:
    question_id: str
    candidate_id: str
    score: float
    group_sizes: tuple[int, ...]


@dataclass(frozen=True)
class SelectedSet:
    """One training set: exactly one (question, candidate) pair per input pool."""

    round: int
    pairs: tuple[tuple[str, str], ...]
    records: tuple[SelectionRecord, ...] = ()


def partition_boundaries(num_candidates: int, num_groups: int) -> list[int]:
    """Floor boundaries [b_0..b_G] with b_g = floor(g * M / G); exact integer math."""
    if num_candidates < 1 or num_groups < 1:
        raise ConfigError(f"need num_candidates >= 1 and num_groups >= 1, got {num_candidates}, {num_groups}")
    return [(g * num_candidates) // num_groups for g in range(num_groups + 1)]


def sort_candidates(scored: list[tuple[str, float]]) -> list[str]:
    """Candidate ids ascending by score, ties broken by lexicographic id."""
    return [cid for cid, _ in sorted(scored, key=lambda item: (item[1], item[0]))]


def partition_groups(scored: list[tuple[str, float]], num_groups: int) -> GroupPartition:
    order = sort_candidates(scored)
    return GroupPartition(tuple(order), tuple(partition_boundaries(len(order), num_groups)))


def min_score_select(scored: list[tuple[str, float]]) -> str:
    """Grouping-free ablation: always the single lowest-score candidate."""
    if not scored:
        raise OracleError("cannot select from an empty scored pool")
    return sort_candidates(scored)[0]


def question_rng(seed: int, round_index: int, question_id: str) -> np.random.Generator:
    """Independent, platform-stable stream per (seed, round, question)."""
    digest = hashlib.sha256(question_id.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "big") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([seed, round_index, *words]))


def sample_lowest(partition: GroupPartition, rng: np.random.Generator) -> str:
    """Uniform draw from the lowest-score group (first nonempty under fallback)."""
    members = partition.first_nonempty_group()
    return members[int(rng.integers(len(members)))]


def _scores_only(scored: list[tuple[str, ScoreBreakdown]]) -> list[tuple[str, float]]:
    return [(cid, b.score) for cid, b in scored]


def select_round(
    pools: list[CandidatePool],
    config: SelectionConfig,
    round_index: int = 0,
    min_score: bool = False,
) -> SelectedSet:
    """Score, sort, partition, and sample one candidate per question."""
    pairs = []
    records = []
    for pool in pools:
        scored = _scores_only(score_pool(pool, config.score_config))
        partition = partition_groups(scored, config.num_groups)
        if min_score:
            chosen = min_score_select(scored)
        else:
            rng = question_rng(config.seed, round_index, pool.question_id)
            chosen = sample_lowest(partition, rng)
        score = dict(scored)[chosen]
        pairs.append((pool.question_id, chosen))
        records.append(
            SelectionRecord(pool.question_id, chosen, score, tuple(partition.group_sizes()))
        )
    return SelectedSet(round=round_index, pairs=tuple(pairs), records=tuple(records))


@dataclass(frozen=True)
class RoundLog:
    round: int
    selections: SelectedSet
    epoch_losses: tuple[float, ...]
    score_summary: dict
    note: str = ""

    def as_dict(self) -> dict:
        return {
            "round": self.round,
            "selections": [
                {
                    "question_id": r.question_id,
                    "candidate_id": r.candidate_id,
                    "score": r.score,
                    "group_sizes": list(r.group_sizes),
                }
                for r in self.selections.records
            ],
            "epoch_losses": list(self.epoch_losses),
            "score_summary": self.score_summary,
            "note": self.note,
        }


def trace_pools_under(model: TinyLM, pools: list[TokenPool]) -> list[CandidatePool]:
    """Regenerate candidate traces by forward passes under the given student."""
    out = []
    for tp in pools:
        if not tp.candidates:
            warnings.warn(f"question {tp.question_id!r} has no candidates; skipped", stacklevel=2)
            continue
        traces = tuple(
            trace_from_forward(forward(model, c.token_ids, c.layout), tp.question_id, c.candidate_id)
            for c in tp.candidates
        )
        out.append(CandidatePool(tp.question_id, model.hidden_dim, traces))
    return out


def _score_summary(pools: list[CandidatePool], config: ScoreConfig) -> dict:
    per_question = {}
    for pool in pools:
        vals = [b.score for _, b in score_pool(pool, config)]
        per_question[pool.question_id] = {
            "min": min(vals),
            "max": max(vals),
            "mean": float(np.mean(vals)),
        }
    return per_question


def run_rounds(
    model: TinyLM,
    pools,
    config: SelectionConfig,
    learning_rate: float = 0.01,
    epochs: int = 3,
) -> tuple[TinyLM, list[RoundLog]]:
    """Full selection-training loop; scores are recomputed under the updated
    student each round.

    Token-sequence pools run the oracle-backed loop (re-trace, select, train).
    Static trace pools run in export-only mode: round-0 selections are
    emitted and the loop halts, since re-scoring needs fresh traces from the
    caller.
    """
    if not pools:
        raise OracleError("no candidate pools to run on")
    if isinstance(pools[0], CandidatePool):
        selected = select_round(pools, config, round_index=0)
        log = RoundLog(
            round=0,
            selections=selected,
            epoch_losses=(),
            score_summary=_score_summary(pools, config.score_config),
            note="export-only mode: static traces, training delegated to caller",
        )
        return model, [log]

    seq_lookup = {
        (tp.question_id, c.candidate_id): (c.token_ids, c.layout)
        for tp in pools
        for c in tp.candidates
    }
    logs = []
    for r in range(config.rounds):
        trace_pools = trace_pools_under(model, pools)
        selected = select_round(trace_pools, config, round_index=r)
        batch = [seq_lookup[pair] for pair in selected.pairs]
        losses = []
        for _ in range(epochs):
            try:
                model, loss = train_step(model, batch, learning_rate)
            except OracleError as e:
                raise OracleError(f"round {r}: {e}") from e
            losses.append(loss)
        logs.append(
            RoundLog(
                round=r,
                selections=selected,
                epoch_losses=tuple(losses),
                score_summary=_score_summary(trace_pools, config.score_config),
            )
        )
    return model, logs


def selection_record_dict(round_index: int, rec: SelectionRecord) -> dict:
    """One selection-file row (wire keys match the selection schema)."""
    return {
        "round": round_index,
        "question_id": rec.question_id,
        "candidate_id": rec.candidate_id,
        "score": rec.score,
        "group_sizes": list(rec.group_sizes),
    }
