"""Candidate-trace data model and the newline-delimited trace file format.

A trace file is UTF-8 JSONL: one header line followed by one record per
candidate sequence. Files may arrive gzip-compressed (detected by magic
bytes). Parsing is strict and order-preserving; pool-level soundness checks
(shared question prefixes, span sanity) live in ``validate_pool`` and are
reported as data, not raised.
"""

from __future__ import annotations

import gzip
import io
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import TraceFormatError

TRACE_FORMAT = "scas-trace"
TRACE_VERSION = 1
_GZIP_MAGIC = b"\x1f\x8b"

# Exact record field set and canonical serialization order.
RECORD_FIELDS = (
    "question_id",
    "candidate_id",
    "question_len",
    "answer_len",
    "token_ids",
    "nll",
    "hidden",
    "meta",
)


@dataclass(frozen=True)
class SpanLayout:
    """Contiguous question/answer span boundaries of one templated sequence.

    Question positions are 1..question_len, answer positions follow through
    the end of the sequence. Enforcement of positivity happens in parsing
    and validation, not here, so that validators can inspect bad layouts.
    """

    question_len: int
    answer_len: int

    @property
    def total_len(self) -> int:
        return self.question_len + self.answer_len

    @property
    def question_slice(self) -> slice:
        return slice(0, self.question_len)

    @property
    def answer_slice(self) -> slice:
        return slice(self.question_len, self.total_len)


@dataclass(frozen=True)
class TokenRecord:
    """One token position: vocabulary id, NLL in nats, final-layer hidden state."""

    token_id: int
    nll: float
    hidden: np.ndarray
    raw_norm: float | None = None


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class SequenceTrace:
    """One templated question-answer sequence with per-token NLLs and hidden states.

    Immutable after construction; hidden is an (n, d_h) array. ``raw_norm``
    holds pre-normalization hidden norms once ``normalize_hidden`` has run.
    """

    question_id: str
    candidate_id: str
    token_ids: np.ndarray
    nll: np.ndarray
    hidden: np.ndarray
    layout: SpanLayout
    meta: dict = field(default_factory=dict)
    raw_norm: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "token_ids", _frozen_array(self.token_ids, np.int64))
        object.__setattr__(self, "nll", _frozen_array(self.nll, np.float64))
        object.__setattr__(self, "hidden", _frozen_array(self.hidden, np.float64))
        if self.raw_norm is not None:
            object.__setattr__(self, "raw_norm", _frozen_array(self.raw_norm, np.float64))

    @property
    def num_tokens(self) -> int:
        return len(self.token_ids)

    @property
    def hidden_dim(self) -> int:
        return self.hidden.shape[1]

    def token(self, t: int) -> TokenRecord:
        raw = None if self.raw_norm is None else float(self.raw_norm[t])
        return TokenRecord(int(self.token_ids[t]), float(self.nll[t]), self.hidden[t], raw)

    def records(self):
        return [self.token(t) for t in range(self.num_tokens)]


@dataclass(frozen=True)
class CandidatePool:
    """All candidate traces for one question. Nonempty, consistent ids."""

    question_id: str
    hidden_dim: int
    candidates: tuple[SequenceTrace, ...]

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if not self.candidates:
            raise TraceFormatError(f"pool for question {self.question_id!r} has no candidates")
        seen = set()
        for tr in self.candidates:
            if tr.question_id != self.question_id:
                raise TraceFormatError(
                    f"candidate {tr.candidate_id!r} carries question_id {tr.question_id!r}, "
                    f"expected {self.question_id!r}"
                )
            if tr.candidate_id in seen:
                raise TraceFormatError(
                    f"duplicate candidate_id {tr.candidate_id!r} in question {self.question_id!r}"
                )
            seen.add(tr.candidate_id)

    @property
    def num_candidates(self) -> int:
        return len(self.candidates)


@dataclass(frozen=True)
class Violation:
    """One pool-soundness violation. Violations are data, not exceptions."""

    kind: str
    question_id: str
    candidate_id: str
    detail: str


def normalize_hidden(trace: SequenceTrace) -> SequenceTrace:
    """Return a trace whose hidden rows are unit-norm, recording original norms.

    Zero rows are kept as zero vectors with raw_norm 0 and a warning: real
    exports can contain masked positions and must not poison whole pools.
    Idempotent; a second application preserves the recorded raw_norm.
    """
    norms = np.linalg.norm(trace.hidden, axis=1)
    zero = norms == 0.0
    if zero.any():
        warnings.warn(
            f"trace {trace.question_id}/{trace.candidate_id}: "
            f"{int(zero.sum())} zero hidden vector(s) left unnormalized",
            stacklevel=2,
        )
    unit = trace.hidden / np.where(zero, 1.0, norms)[:, None]
    raw = trace.raw_norm if trace.raw_norm is not None else norms
    return replace(trace, hidden=unit, raw_norm=raw)


def validate_pool(pool: CandidatePool) -> list[Violation]:
    """Check pool soundness; return violations in stable order (empty if clean)."""
    out: list[Violation] = []

    def add(kind, cid, detail):
        out.append(Violation(kind, pool.question_id, cid, detail))

    for tr in pool.candidates:
        cid = tr.candidate_id
        if tr.layout.question_len < 1 or tr.layout.answer_len < 1:
            add(
                "span",
                cid,
                f"question_len={tr.layout.question_len} answer_len={tr.layout.answer_len}; both must be >= 1",
            )
        if tr.layout.total_len != tr.num_tokens:
            add(
                "span",
                cid,
                f"layout covers {tr.layout.total_len} positions but trace has {tr.num_tokens} tokens",
            )
        if tr.hidden.shape[1] != pool.hidden_dim:
            add("dimension", cid, f"hidden_dim {tr.hidden.shape[1]} != pool hidden_dim {pool.hidden_dim}")
        if not np.isfinite(tr.nll).all():
            add("non_finite", cid, "nll contains non-finite entries")
        elif (tr.nll < 0).any():
            add("negative_nll", cid, "nll contains negative entries")
        if not np.isfinite(tr.hidden).all():
            add("non_finite", cid, "hidden contains non-finite entries")

    ref = pool.candidates[0]
    qlen = ref.layout.question_len
    for tr in pool.candidates[1:]:
        other = min(tr.layout.question_len, tr.num_tokens)
        shared = min(qlen, other)
        if tr.layout.question_len != qlen or not np.array_equal(
            tr.token_ids[:shared], ref.token_ids[:shared]
        ):
            add(
                "shared_prefix",
                tr.candidate_id,
                f"question-span token ids differ from candidate {ref.candidate_id!r}",
            )
    return out


def _read_all_bytes(source) -> bytes:
    if isinstance(source, (str, Path)):
        data = Path(source).read_bytes()
    elif isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    else:
        data = source.read()
        if isinstance(data, str):
            data = data.encode("utf-8")
    if data[:2] == _GZIP_MAGIC:
        data = gzip.decompress(data)
    return data


def _require(cond: bool, lineno: int, msg: str) -> None:
    if not cond:
        raise TraceFormatError(f"line {lineno}: {msg}")


def _parse_record(obj: dict, lineno: int, hidden_dim: int) -> SequenceTrace:
    _require(isinstance(obj, dict), lineno, "record is not a JSON object")
    extra = set(obj) - set(RECORD_FIELDS)
    missing = set(RECORD_FIELDS) - set(obj)
    _require(not extra and not missing, lineno, f"record fields mismatch (extra={sorted(extra)}, missing={sorted(missing)})")

    qid, cid = obj["question_id"], obj["candidate_id"]
    _require(isinstance(qid, str) and isinstance(cid, str), lineno, "question_id/candidate_id must be strings")
    where = f"record {qid!r}/{cid!r}"

    qlen, alen = obj["question_len"], obj["answer_len"]
    for name, v in (("question_len", qlen), ("answer_len", alen)):
        _require(isinstance(v, int) and not isinstance(v, bool) and v >= 1, lineno, f"{where}: {name} must be a positive integer, got {v!r}")
    n = qlen + alen

    token_ids = obj["token_ids"]
    _require(
        isinstance(token_ids, list)
        and len(token_ids) == n
        and all(isinstance(t, int) and not isinstance(t, bool) and t >= 0 for t in token_ids),
        lineno,
        f"{where}: token_ids must be {n} nonnegative integers",
    )

    nll = obj["nll"]
    _require(isinstance(nll, list) and len(nll) == n, lineno, f"{where}: nll must have length {n}")
    try:
        nll_arr = np.asarray(nll, dtype=np.float64)
    except (TypeError, ValueError):
        raise TraceFormatError(f"line {lineno}: {where}: nll contains non-numeric entries") from None
    _require(bool(np.isfinite(nll_arr).all()), lineno, f"{where}: nll contains non-finite values")
    _require(bool((nll_arr >= 0).all()), lineno, f"{where}: nll contains negative values")

    hidden = obj["hidden"]
    _require(isinstance(hidden, list) and len(hidden) == n, lineno, f"{where}: hidden must have length {n}")
    for t, row in enumerate(hidden):
        _require(
            isinstance(row, list) and len(row) == hidden_dim,
            lineno,
            f"{where}: hidden[{t}] must have length hidden_dim={hidden_dim}",
        )
    try:
        hidden_arr = np.asarray(hidden, dtype=np.float64)
    except (TypeError, ValueError):
        raise TraceFormatError(f"line {lineno}: {where}: hidden contains non-numeric entries") from None
    _require(bool(np.isfinite(hidden_arr).all()), lineno, f"{where}: hidden contains non-finite values")

    meta = obj["meta"]
    _require(
        isinstance(meta, dict) and all(isinstance(k, str) and isinstance(v, str) for k, v in meta.items()),
        lineno,
        f"{where}: meta must map strings to strings",
    )

    return SequenceTrace(
        question_id=qid,
        candidate_id=cid,
        token_ids=token_ids,
        nll=nll_arr,
        hidden=hidden_arr,
        layout=SpanLayout(qlen, alen),
        meta=dict(meta),
    )


def parse_pools(source) -> list[CandidatePool]:
    """Parse a trace file (path, bytes, or binary stream) into candidate pools.

    Pools appear in first-occurrence order of question_id; candidates keep
    file order. Any malformed record aborts with a diagnostic naming it.
    """
    text = _read_all_bytes(source).decode("utf-8")
    lines = text.split("\n")
    entries = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip()]
    if not entries:
        return []

    lineno, header_line = entries[0]
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as e:
        raise TraceFormatError(f"line {lineno}: malformed header JSON ({e.msg})") from e
    _require(isinstance(header, dict), lineno, "header is not a JSON object")
    _require(header.get("format") == TRACE_FORMAT, lineno, f"unexpected format {header.get('format')!r}")
    _require(header.get("version") == TRACE_VERSION, lineno, f"unsupported version {header.get('version')!r}")
    hidden_dim = header.get("hidden_dim")
    _require(
        isinstance(hidden_dim, int) and not isinstance(hidden_dim, bool) and hidden_dim >= 1,
        lineno,
        f"header hidden_dim must be a positive integer, got {hidden_dim!r}",
    )

    order: list[str] = []
    grouped: dict[str, list[SequenceTrace]] = {}
    for lineno, line in entries[1:]:
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise TraceFormatError(f"line {lineno}: malformed record JSON ({e.msg})") from e
        tr = _parse_record(obj, lineno, hidden_dim)
        if tr.question_id not in grouped:
            order.append(tr.question_id)
            grouped[tr.question_id] = []
        if any(prev.candidate_id == tr.candidate_id for prev in grouped[tr.question_id]):
            raise TraceFormatError(
                f"line {lineno}: duplicate candidate_id {tr.candidate_id!r} for question {tr.question_id!r}"
            )
        grouped[tr.question_id].append(tr)

    return [CandidatePool(qid, hidden_dim, tuple(grouped[qid])) for qid in order]


def _record_dict(tr: SequenceTrace) -> dict:
    return {
        "question_id": tr.question_id,
        "candidate_id": tr.candidate_id,
        "question_len": tr.layout.question_len,
        "answer_len": tr.layout.answer_len,
        "token_ids": [int(t) for t in tr.token_ids],
        "nll": [float(v) for v in tr.nll],
        "hidden": [[float(v) for v in row] for row in tr.hidden],
        "meta": tr.meta,
    }


def serialize_pools(pools: list[CandidatePool]) -> bytes:
    """Canonical byte form: header then records, full round-trip float precision."""
    if not pools:
        return b""
    dims = {p.hidden_dim for p in pools}
    if len(dims) != 1:
        raise TraceFormatError(f"pools disagree on hidden_dim: {sorted(dims)}")
    out = io.StringIO()
    out.write(json.dumps({"format": TRACE_FORMAT, "version": TRACE_VERSION, "hidden_dim": pools[0].hidden_dim}))
    out.write("\n")
    for pool in pools:
        for tr in pool.candidates:
            out.write(json.dumps(_record_dict(tr)))
            out.write("\n")
    return out.getvalue().encode("utf-8")
