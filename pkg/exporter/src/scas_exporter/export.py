"""Trace extraction from causal-LM checkpoints.

For each candidate the templated question is tokenized separately from the
answer and the two id lists are concatenated, so all candidates of one
question share the question-span token ids exactly and the span boundary is
unambiguous (every template token belongs to the question span; the policy
is recorded in record meta). Per-token NLLs are teacher-forced in nats; the
first token has no prefix and is stored with NLL 0. Hidden states are the
final layer's, exported unnormalized: the consuming engine owns the
normalization convention.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from transformers import AutoModelForCausalLM, AutoTokenizer

TRACE_FORMAT = "scas-trace"
TRACE_VERSION = 1

TEMPLATES = {
    "plain": "{question}\n",
    "qa": "Question: {question}\nAnswer: ",
}


class ExportError(Exception):
    pass


class UsageError(ExportError):
    pass


@dataclass(frozen=True)
class ExportJob:
    model_id: str
    input_path: str
    template: str = "qa"
    batch_size: int = 8
    out_path: str = "traces.jsonl"

    def __post_init__(self):
        if not self.model_id:
            raise UsageError("model id is required")
        if self.template not in TEMPLATES:
            raise UsageError(f"unknown template {self.template!r}; expected one of {sorted(TEMPLATES)}")
        if self.batch_size < 1:
            raise UsageError(f"batch size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class Candidate:
    question_id: str
    candidate_id: str
    question: str
    answer: str


def read_candidates(path) -> list[Candidate]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ExportError(f"line {lineno}: malformed candidate JSON ({e.msg})") from e
        missing = {"question_id", "candidate_id", "question", "answer"} - set(obj)
        if missing:
            raise ExportError(f"line {lineno}: missing fields {sorted(missing)}")
        out.append(Candidate(obj["question_id"], obj["candidate_id"], obj["question"], obj["answer"]))
    return out


def load_runtime(model_id: str):
    tokenizer = AutoTokenizer.from_pretrained(model_id)
    model = AutoModelForCausalLM.from_pretrained(model_id)
    model.eval()
    return tokenizer, model


@dataclass
class _Tokenized:
    candidate: Candidate
    ids: list[int]
    question_len: int
    answer_len: int


def _tokenize(tokenizer, template: str, cand: Candidate) -> _Tokenized | None:
    prompt = TEMPLATES[template].format(question=cand.question)
    prompt_ids = tokenizer(prompt, add_special_tokens=True)["input_ids"]
    answer_ids = tokenizer(cand.answer, add_special_tokens=False)["input_ids"]
    if not answer_ids or not prompt_ids:
        return None
    return _Tokenized(cand, list(prompt_ids) + list(answer_ids), len(prompt_ids), len(answer_ids))


@torch.no_grad()
def _forward_batch(model, batch: list[_Tokenized], pad_id: int):
    max_len = max(len(t.ids) for t in batch)
    input_ids = torch.full((len(batch), max_len), pad_id, dtype=torch.long)
    mask = torch.zeros((len(batch), max_len), dtype=torch.long)
    for row, t in enumerate(batch):
        input_ids[row, : len(t.ids)] = torch.tensor(t.ids, dtype=torch.long)
        mask[row, : len(t.ids)] = 1
    out = model(input_ids=input_ids, attention_mask=mask, output_hidden_states=True)
    log_probs = torch.log_softmax(out.logits.float(), dim=-1)
    hidden = out.hidden_states[-1].float()
    records = []
    for row, t in enumerate(batch):
        n = len(t.ids)
        nll = np.zeros(n, dtype=np.float32)  # first token has no prefix: stored as 0
        picked = log_probs[row, : n - 1].gather(1, input_ids[row, 1:n, None]).squeeze(1)
        nll[1:] = np.maximum(-picked.numpy().astype(np.float32), 0.0)
        records.append((t, nll, hidden[row, :n].numpy().astype(np.float32)))
    return records


def _record_json(t: _Tokenized, nll: np.ndarray, hidden: np.ndarray, job: ExportJob) -> str:
    return json.dumps(
        {
            "question_id": t.candidate.question_id,
            "candidate_id": t.candidate.candidate_id,
            "question_len": t.question_len,
            "answer_len": t.answer_len,
            "token_ids": [int(i) for i in t.ids],
            "nll": [float(v) for v in nll],
            "hidden": [[float(v) for v in row] for row in hidden],
            "meta": {
                "model": job.model_id,
                "template": job.template,
                "span_policy": "template_prefix_in_question",
                "nll_convention": "first_token_zero",
            },
        }
    )


def export_traces(job: ExportJob) -> dict:
    """Run the export; returns a small summary (records written, skipped, dim)."""
    tokenizer, model = load_runtime(job.model_id)
    candidates = read_candidates(job.input_path)

    tokenized: list[_Tokenized] = []
    skipped: list[dict] = []
    for cand in candidates:
        t = _tokenize(tokenizer, job.template, cand)
        if t is None:
            skipped.append(
                {
                    "question_id": cand.question_id,
                    "candidate_id": cand.candidate_id,
                    "reason": "empty question or answer span after tokenization",
                }
            )
            continue
        tokenized.append(t)

    hidden_dim = int(model.config.hidden_size)
    pad_id = tokenizer.pad_token_id if tokenizer.pad_token_id is not None else 0

    out_path = Path(job.out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = out_path.with_name(f".{out_path.name}.tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": TRACE_FORMAT, "version": TRACE_VERSION, "hidden_dim": hidden_dim}))
        fh.write("\n")
        for start in range(0, len(tokenized), job.batch_size):
            batch = tokenized[start : start + job.batch_size]
            for t, nll, hidden in _forward_batch(model, batch, pad_id):
                fh.write(_record_json(t, nll, hidden, job))
                fh.write("\n")
    tmp.replace(out_path)

    return {
        "records": len(tokenized),
        "skipped": skipped,
        "hidden_dim": hidden_dim,
        "out_path": str(out_path),
    }


def tokenizer_fingerprint(tokenizer) -> str:
    vocab = json.dumps(sorted(tokenizer.get_vocab().items()), ensure_ascii=True)
    return hashlib.sha256(vocab.encode("utf-8")).hexdigest()


def export_manifest(job: ExportJob) -> dict:
    """Provenance document for one export job."""
    tokenizer, model = load_runtime(job.model_id)
    return {
        "schema_version": 1,
        "model": job.model_id,
        "template": job.template,
        "template_text": TEMPLATES[job.template],
        "batch_size": job.batch_size,
        "input_path": str(job.input_path),
        "out_path": str(job.out_path),
        "tokenizer_hash": tokenizer_fingerprint(tokenizer),
        "hidden_dim": int(model.config.hidden_size),
        "vocab_size": int(model.config.vocab_size),
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
