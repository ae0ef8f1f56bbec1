"""Operation counters backing the forward-only cost contract.

Counters are process-global so the CLI and tests can assert, e.g., that
scoring N candidates performs exactly N forward passes and zero full
backward passes.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass


@dataclass
class Counters:
    forwards: int = 0
    full_backwards: int = 0
    head_gradients: int = 0
    pairwise_enumerations: int = 0

    def as_dict(self) -> dict:
        return {
            "forwards": self.forwards,
            "full_backwards": self.full_backwards,
            "head_gradients": self.head_gradients,
            "pairwise_enumerations": self.pairwise_enumerations,
        }


_LOCK = threading.Lock()
COUNTERS = Counters()


def bump(field: str, amount: int = 1) -> None:
    with _LOCK:
        setattr(COUNTERS, field, getattr(COUNTERS, field) + amount)


def reset_counters() -> None:
    with _LOCK:
        COUNTERS.forwards = 0
        COUNTERS.full_backwards = 0
        COUNTERS.head_gradients = 0
        COUNTERS.pairwise_enumerations = 0


def snapshot() -> Counters:
    with _LOCK:
        return Counters(**COUNTERS.as_dict())
