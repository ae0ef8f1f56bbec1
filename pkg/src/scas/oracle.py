"""Tiny autoregressive softmax model with exact head gradients.

The model is an embedding table, a single tanh state mixer, and a linear
output head. The head never feeds back into the state recurrence, so the
gradient of the sequence loss with respect to the head is available in
closed form as a sum of hidden/residual outer products; this is the ground
truth the forward-only proxy is validated against.

Indexing convention: position t (0-based) of a ForwardResult holds the
prediction of token t from its strict prefix, i.e. hidden[t] is the mixer
state after consuming tokens 0..t-1 (state 0 derives from the bias alone),
probs[t] the softmax over the next token, nll[t] = -log probs[t][x_t], and
residuals[t] = probs[t] - onehot(x_t). Under this convention the closed
form Sum_t hidden[t] residuals[t]^T is the exact head gradient, and all
prefix-shared positions are bit-identical across candidates of one question.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import instrument
from .errors import OracleError, TraceFormatError
from .trace import SequenceTrace, SpanLayout

MODEL_FORMAT = "scas-tinylm"
MODEL_VERSION = 1


@dataclass(frozen=True)
class TinyLM:
    embedding: np.ndarray   # (V, d)
    recurrence: np.ndarray  # (d, d)
    bias: np.ndarray        # (d,)
    head: np.ndarray        # (d, V)

    def __post_init__(self):
        for name in ("embedding", "recurrence", "bias", "head"):
            arr = np.array(getattr(self, name), dtype=np.float64)  # own copy, then freeze
            if not np.isfinite(arr).all():
                raise OracleError(f"model parameter {name} contains non-finite values")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        v, d = self.embedding.shape
        if self.recurrence.shape != (d, d) or self.bias.shape != (d,) or self.head.shape != (d, v):
            raise OracleError(
                f"inconsistent parameter shapes: embedding {self.embedding.shape}, "
                f"recurrence {self.recurrence.shape}, bias {self.bias.shape}, head {self.head.shape}"
            )

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.embedding.shape[1]

    @classmethod
    def init(cls, vocab_size: int, hidden_dim: int, seed=0) -> "TinyLM":
        """Seeded uniform init in [-0.5, 0.5]/sqrt(d); keeps softmax unsaturated."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(hidden_dim)
        u = lambda *shape: (rng.uniform(-0.5, 0.5, size=shape) * scale)
        return cls(
            embedding=u(vocab_size, hidden_dim),
            recurrence=u(hidden_dim, hidden_dim),
            bias=u(hidden_dim),
            head=u(hidden_dim, vocab_size),
        )

    def initial_state(self) -> np.ndarray:
        # Nonzero pre-token state so position 0 has a usable hidden vector.
        return np.tanh(self.bias)


@dataclass(frozen=True)
class ForwardResult:
    """Teacher-forced forward pass: per-position prediction quantities."""

    token_ids: np.ndarray   # (n,)
    hidden: np.ndarray      # (n, d) unnormalized pre-token states
    probs: np.ndarray       # (n, V)
    nll: np.ndarray         # (n,)
    residuals: np.ndarray   # (n, V)
    layout: SpanLayout

    @property
    def num_tokens(self) -> int:
        return len(self.token_ids)


@dataclass(frozen=True)
class BlockEnergies:
    """Pairwise gradient-energy blocks; total = aa + 2*aq + qq by construction."""

    aa: float
    aq: float
    qq: float
    total: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.total is None:
            object.__setattr__(self, "total", self.aa + 2.0 * self.aq + self.qq)


@dataclass(frozen=True)
class RetainedEnergy:
    g_aa_tilde: float
    g_aq_tilde: float
    lambda_star: float
    energy: float


@dataclass(frozen=True)
class BoundAudit:
    """Per-token residual-vs-NLL bound margins; pass iff all margins >= -1e-12."""

    tau: float
    lower_margins: np.ndarray   # ||r_t|| - tau * nll_t
    upper_margins: np.ndarray   # sqrt(2) * nll_t - ||r_t||
    passed: bool
    worst_margin: float


def _run_states(model: TinyLM, ids: np.ndarray) -> np.ndarray:
    n = len(ids)
    states = np.empty((n, model.hidden_dim))
    s = model.initial_state()
    states[0] = s
    for k in range(1, n):
        s = np.tanh(model.recurrence @ s + model.embedding[ids[k - 1]] + model.bias)
        states[k] = s
    return states


def forward(model: TinyLM, token_ids, layout: SpanLayout) -> ForwardResult:
    """One teacher-forced pass over a token sequence (counted as one forward)."""
    ids = np.asarray(token_ids, dtype=np.int64)
    n = len(ids)
    if n < 2:
        raise OracleError(f"sequence too short: need at least 2 tokens, got {n}")
    if layout.total_len != n:
        raise OracleError(f"layout covers {layout.total_len} positions but sequence has {n} tokens")
    if ids.min() < 0 or ids.max() >= model.vocab_size:
        raise OracleError(
            f"token id out of range [0, {model.vocab_size}): min={ids.min()} max={ids.max()}"
        )
    instrument.bump("forwards")

    states = _run_states(model, ids)
    logits = states @ model.head
    logits = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits).sum(axis=1))
    probs = np.exp(logits - lse[:, None])
    rows = np.arange(n)
    nll = lse - logits[rows, ids]
    residuals = probs.copy()
    residuals[rows, ids] -= 1.0
    return ForwardResult(ids, states, probs, nll, residuals, layout)


def head_gradient(result: ForwardResult) -> np.ndarray:
    """Closed-form gradient of the full-sequence loss w.r.t. the head: Sum_t h_t r_t^T."""
    instrument.bump("head_gradients")
    return result.hidden.T @ result.residuals


def grad_norm_pairwise(x_rows, g_rows) -> float:
    """Squared gradient Frobenius norm as Sum_ij (z_i.z_j)(g_i.g_j) over all token pairs."""
    x = np.asarray(x_rows, dtype=np.float64)
    g = np.asarray(g_rows, dtype=np.float64)
    if len(x) != len(g):
        raise OracleError(f"row-count mismatch: {len(x)} representation rows vs {len(g)} gradient rows")
    instrument.bump("pairwise_enumerations")
    return float(((x @ x.T) * (g @ g.T)).sum())


def grad_norm_blocks(x_rows, g_rows, layout: SpanLayout) -> BlockEnergies:
    """Blockwise split of the pairwise sum by spans, via literal pair enumeration."""
    x = np.asarray(x_rows, dtype=np.float64)
    g = np.asarray(g_rows, dtype=np.float64)
    if len(x) != len(g):
        raise OracleError(f"row-count mismatch: {len(x)} representation rows vs {len(g)} gradient rows")
    if layout.total_len != len(x):
        raise OracleError(f"layout covers {layout.total_len} positions but rows have {len(x)}")
    instrument.bump("pairwise_enumerations")
    a_idx = range(layout.question_len, layout.total_len)
    q_idx = range(0, layout.question_len)
    aa = sum(float((x[i] @ x[j]) * (g[i] @ g[j])) for i in a_idx for j in a_idx)
    aq = sum(float((x[i] @ x[j]) * (g[i] @ g[j])) for i in a_idx for j in q_idx)
    qq = sum(float((x[i] @ x[j]) * (g[i] @ g[j])) for i in q_idx for j in q_idx)
    return BlockEnergies(aa=aa, aq=aq, qq=qq)


def grad_norm_matrix(x_rows, g_rows, layout: SpanLayout) -> BlockEnergies:
    """Same block energies at O(n d m) via per-span matrix products."""
    x = np.asarray(x_rows, dtype=np.float64)
    g = np.asarray(g_rows, dtype=np.float64)
    if len(x) != len(g):
        raise OracleError(f"row-count mismatch: {len(x)} representation rows vs {len(g)} gradient rows")
    if layout.total_len != len(x):
        raise OracleError(f"layout covers {layout.total_len} positions but rows have {len(x)}")
    a, q = layout.answer_slice, layout.question_slice
    ka = x[a].T @ g[a]
    kq = x[q].T @ g[q]
    return BlockEnergies(
        aa=float((ka * ka).sum()),
        aq=float((ka * kq).sum()),
        qq=float((kq * kq).sum()),
    )


def unit_hidden(result: ForwardResult) -> np.ndarray:
    """Row-normalized hidden states; oracle states must be nonzero."""
    norms = np.linalg.norm(result.hidden, axis=1)
    if (norms == 0.0).any():
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise OracleError(f"zero hidden state at position {bad}; oracle states must be nonzero")
    return result.hidden / norms[:, None]


def normalized_retained(result: ForwardResult, lambda_star: float) -> RetainedEnergy:
    """Size-normalized answer-involving interaction energy with unit hidden states.

    aa block scales by 1/|I_A|^2, the cross block by 1/(|I_A| |I_Q|); the two
    are combined by lambda_star. Uses residuals from the forward pass only.
    """
    if not 0.0 <= lambda_star <= 1.0:
        raise OracleError(f"lambda_star must lie in [0, 1], got {lambda_star!r}")
    lay = result.layout
    u = unit_hidden(result)
    a, q = lay.answer_slice, lay.question_slice
    ka = u[a].T @ result.residuals[a]
    kq = u[q].T @ result.residuals[q]
    g_aa = float((ka * ka).sum()) / lay.answer_len**2
    g_aq = float((ka * kq).sum()) / (lay.answer_len * lay.question_len)
    energy = (1.0 - lambda_star) * g_aa + lambda_star * g_aq
    return RetainedEnergy(g_aa, g_aq, float(lambda_star), energy)


def residual_nll_audit(result: ForwardResult, tau: float | None = None) -> BoundAudit:
    """Check tau * nll_t <= ||r_t||_2 <= sqrt(2) * nll_t at every position.

    tau defaults to the instance minimum target probability (the tightest
    admissible value); a larger tau violates the audit precondition.
    """
    rows = np.arange(result.num_tokens)
    p_target = result.probs[rows, result.token_ids]
    if tau is None:
        tau = float(p_target.min())
    if tau <= 0:
        raise OracleError(f"tau must be positive, got {tau!r}")
    if (p_target < tau).any():
        bad = int(np.flatnonzero(p_target < tau)[0])
        raise OracleError(
            f"tau={tau} exceeds target probability {p_target[bad]:.6g} at position {bad}"
        )
    r_norms = np.linalg.norm(result.residuals, axis=1)
    lower = r_norms - tau * result.nll
    upper = np.sqrt(2.0) * result.nll - r_norms
    worst = float(min(lower.min(), upper.min()))
    return BoundAudit(
        tau=float(tau),
        lower_margins=lower,
        upper_margins=upper,
        passed=bool(worst >= -1e-12),
        worst_margin=worst,
    )


def trace_from_forward(result: ForwardResult, question_id: str, candidate_id: str) -> SequenceTrace:
    """Bridge to the proxy pipeline: normalized hidden states, NLLs copied."""
    norms = np.linalg.norm(result.hidden, axis=1)
    if (norms == 0.0).any():
        raise OracleError("zero hidden state; cannot normalize oracle trace")
    return SequenceTrace(
        question_id=question_id,
        candidate_id=candidate_id,
        token_ids=result.token_ids,
        nll=result.nll,
        hidden=result.hidden / norms[:, None],
        layout=result.layout,
        meta={"source": "oracle"},
        raw_norm=norms,
    )


def train_step(model: TinyLM, batch, learning_rate: float) -> tuple[TinyLM, float]:
    """One full-batch gradient-descent step on answer-span cross-entropy.

    batch: iterable of (token_ids, layout). Question tokens condition the
    states but contribute no loss. Returns (updated model, mean loss per
    answer token); the incoming model is never mutated.
    """
    if learning_rate < 0:
        raise OracleError(f"learning_rate must be nonnegative, got {learning_rate!r}")
    batch = list(batch)
    if not batch:
        raise OracleError("empty training batch")
    total_ans = sum(layout.answer_len for _, layout in batch)

    d_emb = np.zeros_like(model.embedding)
    d_rec = np.zeros_like(model.recurrence)
    d_bias = np.zeros_like(model.bias)
    d_head = np.zeros_like(model.head)
    loss_sum = 0.0

    for token_ids, layout in batch:
        res = forward(model, token_ids, layout)
        instrument.bump("full_backwards")
        n = res.num_tokens
        ans = layout.answer_slice
        loss_sum += float(res.nll[ans].sum())

        g = np.zeros_like(res.residuals)
        g[ans] = res.residuals[ans] / total_ans
        d_head += res.hidden.T @ g
        d_states = g @ model.head.T
        states = res.hidden
        for k in range(n - 1, 0, -1):
            dz = d_states[k] * (1.0 - states[k] ** 2)
            d_rec += np.outer(dz, states[k - 1])
            d_bias += dz
            d_emb[res.token_ids[k - 1]] += dz
            d_states[k - 1] += model.recurrence.T @ dz
        dz0 = d_states[0] * (1.0 - states[0] ** 2)
        d_bias += dz0  # state 0 is tanh(bias)

    mean_loss = loss_sum / total_ans
    if not np.isfinite(mean_loss):
        raise OracleError(f"non-finite training loss {mean_loss!r}; model left unchanged")
    lr = float(learning_rate)
    updated = TinyLM(
        embedding=model.embedding - lr * d_emb,
        recurrence=model.recurrence - lr * d_rec,
        bias=model.bias - lr * d_bias,
        head=model.head - lr * d_head,
    )
    return updated, float(mean_loss)


def save_model(model: TinyLM, path) -> None:
    """Deterministic JSON checkpoint with exact float round-trip."""
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "vocab_size": model.vocab_size,
        "hidden_dim": model.hidden_dim,
        "embedding": model.embedding.tolist(),
        "recurrence": model.recurrence.tolist(),
        "bias": model.bias.tolist(),
        "head": model.head.tolist(),
    }
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(json.dumps(doc), encoding="utf-8")
    tmp.replace(path)


def load_model(path) -> TinyLM:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
        raise OracleError(
            f"unsupported checkpoint: format={doc.get('format')!r} version={doc.get('version')!r}"
        )
    model = TinyLM(
        embedding=np.array(doc["embedding"], dtype=np.float64),
        recurrence=np.array(doc["recurrence"], dtype=np.float64),
        bias=np.array(doc["bias"], dtype=np.float64),
        head=np.array(doc["head"], dtype=np.float64),
    )
    if model.vocab_size != doc["vocab_size"] or model.hidden_dim != doc["hidden_dim"]:
        raise OracleError("checkpoint shape header disagrees with parameter arrays")
    return model


# ---------------------------------------------------------------------------
# Synthetic candidate pools: a desk-scale stand-in for a multi-teacher pool.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthParams:
    num_questions: int = 20
    candidates_per_question: int = 8
    question_len_range: tuple[int, int] = (4, 10)
    answer_len_range: tuple[int, int] = (4, 16)
    vocab_size: int = 16
    hidden_dim: int = 8
    teacher_skill_spread: float = 0.5

    def __post_init__(self):
        ok = (
            self.num_questions >= 1
            and self.candidates_per_question >= 1
            and 1 <= self.question_len_range[0] <= self.question_len_range[1]
            and 1 <= self.answer_len_range[0] <= self.answer_len_range[1]
            and 3 <= self.vocab_size
            and 2 <= self.hidden_dim
            and self.teacher_skill_spread >= 0.0
        )
        if not ok:
            raise OracleError(f"invalid synthetic pool parameters: {self}")


@dataclass(frozen=True)
class TokenCandidate:
    candidate_id: str
    token_ids: np.ndarray
    layout: SpanLayout


@dataclass(frozen=True)
class TokenPool:
    question_id: str
    candidates: tuple[TokenCandidate, ...]


def sample_continuation(model: TinyLM, prefix, length: int, rng: np.random.Generator) -> list[int]:
    """Sample `length` tokens autoregressively after consuming `prefix`."""
    s = model.initial_state()
    for tok in prefix:
        s = np.tanh(model.recurrence @ s + model.embedding[tok] + model.bias)
    out = []
    for _ in range(length):
        logits = s @ model.head
        logits = logits - logits.max()
        p = np.exp(logits)
        p /= p.sum()
        tok = int(rng.choice(model.vocab_size, p=p))
        out.append(tok)
        s = np.tanh(model.recurrence @ s + model.embedding[tok] + model.bias)
    return out


def _perturbed(model: TinyLM, spread: float, rng: np.random.Generator) -> TinyLM:
    if spread == 0.0:
        return model
    scale = spread / np.sqrt(model.hidden_dim)
    return TinyLM(
        embedding=model.embedding + scale * rng.normal(size=model.embedding.shape),
        recurrence=model.recurrence + scale * rng.normal(size=model.recurrence.shape),
        bias=model.bias + scale * rng.normal(size=model.bias.shape),
        head=model.head + scale * rng.normal(size=model.head.shape),
    )


def synth_pools(seed: int, params: SynthParams = SynthParams()) -> list[TokenPool]:
    """Deterministic candidate pools: shared question prefix per question,
    answers sampled from perturbed copies of one generator model ("teachers"),
    so candidates vary in NLL under any student."""
    root = np.random.SeedSequence(seed)
    gen_ss, teacher_ss, question_ss = root.spawn(3)

    generator = TinyLM.init(params.vocab_size, params.hidden_dim, np.random.default_rng(gen_ss))
    teachers = [
        _perturbed(generator, params.teacher_skill_spread, np.random.default_rng(child))
        for child in teacher_ss.spawn(params.candidates_per_question)
    ]

    pools = []
    for qi, q_child in enumerate(question_ss.spawn(params.num_questions)):
        q_rng = np.random.default_rng(q_child)
        qlen = int(q_rng.integers(params.question_len_range[0], params.question_len_range[1] + 1))
        question = sample_continuation(generator, [], qlen, q_rng)
        candidates = []
        for mi, teacher in enumerate(teachers):
            alen = int(q_rng.integers(params.answer_len_range[0], params.answer_len_range[1] + 1))
            answer = sample_continuation(teacher, question, alen, q_rng)
            candidates.append(
                TokenCandidate(
                    candidate_id=f"t{mi:02d}",
                    token_ids=np.array(question + answer, dtype=np.int64),
                    layout=SpanLayout(qlen, alen),
                )
            )
        pools.append(TokenPool(question_id=f"q{qi:04d}", candidates=tuple(candidates)))
    return pools
