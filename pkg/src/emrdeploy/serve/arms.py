"""Per-inference randomization into Display / Suppress arms.

Draw ``i`` of a generator named ``name`` with seed ``seed`` is a uniform value
derived from a keyed BLAKE2b hash of ``(name, seed, i)``. The arm sequence is
therefore a pure function of the draw index and replays exactly from the
``(name, seed, index)`` recorded in each packet.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass

DISPLAY = "Display"
SUPPRESS = "Suppress"
ARMS = (DISPLAY, SUPPRESS)


def uniform_draw(name: str, seed: int, index: int) -> float:
    """Uniform on [0, 1) with 53-bit resolution."""
    h = hashlib.blake2b(f"{name}\x1f{seed}\x1f{index}".encode(), digest_size=8).digest()
    return (int.from_bytes(h, "big") >> 11) / float(1 << 53)


def assign_arm(name: str, seed: int, index: int, p: float) -> str:
    """Suppress with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"randomization probability must be in [0, 1], got {p}")
    return SUPPRESS if uniform_draw(name, seed, index) < p else DISPLAY


@dataclass
class ArmDraw:
    arm: str
    index: int
    generator: str
    seed: int


class ArmAssigner:
    """Sequential, thread-safe arm generator."""

    def __init__(self, name: str, seed: int, p: float, next_index: int = 0):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"randomization probability must be in [0, 1], got {p}")
        self.name = name
        self.seed = seed
        self.p = p
        self._next = next_index
        self._lock = threading.Lock()

    @property
    def next_index(self) -> int:
        return self._next

    def draw(self) -> ArmDraw:
        with self._lock:
            i = self._next
            self._next += 1
        return ArmDraw(assign_arm(self.name, self.seed, i, self.p), i, self.name, self.seed)


def replay_arms(name: str, seed: int, p: float, n: int, start: int = 0) -> list[str]:
    return [assign_arm(name, seed, i, p) for i in range(start, start + n)]
