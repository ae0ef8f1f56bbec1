import json
import sys
from pathlib import Path

import pytest
import torch
from tokenizers import ByteLevelBPETokenizer
from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

SRC = Path(__file__).resolve().parent.parent / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

# Primary engine sources, for driving its CLI as a subprocess.
PRIMARY_SRC = Path(__file__).resolve().parents[2] / "src"

CORPUS = [
    "Question: What is two plus two?\nAnswer: The sum is four.",
    "Question: Compute three times five.\nAnswer: The result is fifteen.",
    "Numbers zero one two three four five six seven eight nine ten.",
    "First add the numbers, then simplify and report the result.",
    "abcdefghijklmnopqrstuvwxyz ABCDEFGHIJKLMNOPQRSTUVWXYZ 0123456789 .,?!",
]


@pytest.fixture(scope="session")
def checkpoint_dir(tmp_path_factory):
    """Locally constructed tiny causal-LM checkpoint (no network in CI)."""
    out = tmp_path_factory.mktemp("tiny-ckpt")
    bpe = ByteLevelBPETokenizer()
    bpe.train_from_iterator(CORPUS, vocab_size=384, min_frequency=1, special_tokens=["<pad>"])
    tokenizer = PreTrainedTokenizerFast(tokenizer_object=bpe._tokenizer, pad_token="<pad>")
    tokenizer.save_pretrained(out)

    torch.manual_seed(1234)
    config = GPT2Config(
        vocab_size=len(tokenizer),
        n_positions=256,
        n_embd=32,
        n_layer=2,
        n_head=2,
        bos_token_id=None,
        eos_token_id=None,
    )
    model = GPT2LMHeadModel(config)
    model.eval()
    model.save_pretrained(out)
    return out


CANDIDATES = [
    {"question_id": "q0", "candidate_id": "c0", "question": "What is two plus two?",
     "answer": "The sum is four."},
    {"question_id": "q0", "candidate_id": "c1", "question": "What is two plus two?",
     "answer": "Two plus two is four, so the answer is four."},
    {"question_id": "q0", "candidate_id": "c2", "question": "What is two plus two?",
     "answer": "four"},
    {"question_id": "q1", "candidate_id": "c0", "question": "Compute three times five.",
     "answer": "Three times five is fifteen."},
    {"question_id": "q1", "candidate_id": "c1", "question": "Compute three times five.",
     "answer": "The result is fifteen."},
]


@pytest.fixture(scope="session")
def candidates_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("input") / "candidates.jsonl"
    path.write_text("\n".join(json.dumps(c) for c in CANDIDATES) + "\n", encoding="utf-8")
    return path
