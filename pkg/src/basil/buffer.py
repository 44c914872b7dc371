"""Fixed-capacity episodic memory over embeddings with cached metadata.

Each slot stores an embedding, its label, and cached logits / loss /
uncertainty so that loss- and uncertainty-aware sampling never has to
re-run the network over the whole buffer. Replacement and replay-sampling
policies operate purely on the cached scalars.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

# Added to losses in every inverse-loss weight so perfectly-fit slots
# keep a nonzero replacement probability.
LOSS_EPS = 1e-8


class ReplacementPolicy(str, Enum):
    LAWCBR = "lawcbr"
    LAWRRR = "lawrrr"
    RESERVOIR = "reservoir"


class ReplayStrategy(str, Enum):
    UNI = "uni"
    UAPN = "uapn"
    LAPN = "lapn"


@dataclass(slots=True)
class MemorySlot:
    """One stored rehearsal example with its cached per-slot metadata."""

    z: np.ndarray
    y: int
    h: np.ndarray
    l: float
    u: float

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.h = np.asarray(self.h, dtype=np.float64)
        self.y = int(self.y)
        self.l = float(self.l)
        self.u = float(self.u)
        if not (np.isfinite(self.l) and self.l >= 0.0):
            raise ValueError(f"cached loss must be finite and >= 0, got {self.l}")
        if not (np.isfinite(self.u) and self.u >= 0.0):
            raise ValueError(f"cached uncertainty must be finite and >= 0, got {self.u}")


@dataclass
class InsertReport:
    inserted: bool
    evicted_index: int | None


class ReplayBuffer:
    """Slot store with a stream counter and per-class label counts."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self.slots: list[MemorySlot] = []
        self.seen_count = 0
        self.class_counts: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def full(self) -> bool:
        return len(self.slots) >= self.capacity

    def _check_slot(self, slot: MemorySlot):
        if self.slots:
            ref = self.slots[0]
            if slot.z.shape != ref.z.shape:
                raise ValueError(
                    f"embedding shape {slot.z.shape} != buffer's {ref.z.shape}"
                )
            if slot.h.shape != ref.h.shape:
                raise ValueError(
                    f"logit shape {slot.h.shape} != buffer's {ref.h.shape}"
                )

    def maybe_insert(self, slot: MemorySlot, policy: ReplacementPolicy, rng) -> InsertReport:
        """Offer an arriving sample; evict per policy if the buffer is full.

        Below capacity every policy appends unconditionally. When full,
        LAWCBR evicts within the majority class with probability
        proportional to 1/(loss + eps); LAWRRR evicts over all slots with
        probability proportional to class_count(y_i)/(loss_i + eps); plain
        reservoir accepts with probability capacity/seen_count and evicts
        uniformly.
        """
        self._check_slot(slot)
        policy = ReplacementPolicy(policy)
        self.seen_count += 1

        if not self.full:
            self.slots.append(slot)
            self.class_counts[slot.y] = self.class_counts.get(slot.y, 0) + 1
            return InsertReport(True, None)

        if policy is ReplacementPolicy.RESERVOIR:
            if rng.random() >= self.capacity / self.seen_count:
                return InsertReport(False, None)
            victim = int(rng.integers(len(self.slots)))
        elif policy is ReplacementPolicy.LAWCBR:
            majority = min(c for c, n in self.class_counts.items()
                           if n == max(self.class_counts.values()))
            candidates = [i for i, s in enumerate(self.slots) if s.y == majority]
            weights = np.array([1.0 / (self.slots[i].l + LOSS_EPS) for i in candidates])
            victim = candidates[int(rng.choice(len(candidates), p=weights / weights.sum()))]
        else:  # LAWRRR
            weights = np.array([
                self.class_counts[s.y] / (s.l + LOSS_EPS) for s in self.slots
            ])
            victim = int(rng.choice(len(self.slots), p=weights / weights.sum()))

        old = self.slots[victim]
        self.class_counts[old.y] -= 1
        if self.class_counts[old.y] == 0:
            del self.class_counts[old.y]
        self.slots[victim] = slot
        self.class_counts[slot.y] = self.class_counts.get(slot.y, 0) + 1
        return InsertReport(True, victim)

    def sample_replay(self, strategy: ReplayStrategy, n: int, rng) -> list[int]:
        """Slot indices for rehearsal; length min(n, |slots|).

        Uni draws uniformly without replacement. UAPN takes the ceil(n/2)
        highest-uncertainty slots plus the floor(n/2) lowest; LAPN does the
        same on cached loss. Ties break toward the lower slot index.
        """
        strategy = ReplayStrategy(strategy)
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        m = len(self.slots)
        if m == 0:
            return []
        if n >= m:
            return list(range(m))
        if strategy is ReplayStrategy.UNI:
            return [int(i) for i in rng.choice(m, size=n, replace=False)]
        scores = np.array([s.u if strategy is ReplayStrategy.UAPN else s.l
                           for s in self.slots])
        by_desc = sorted(range(m), key=lambda i: (-scores[i], i))
        n_hi = (n + 1) // 2
        chosen = by_desc[:n_hi]
        taken = set(chosen)
        by_asc = sorted((i for i in range(m) if i not in taken),
                        key=lambda i: (scores[i], i))
        return chosen + by_asc[: n - n_hi]

    def sample_kd(self, n: int, rng) -> list[int]:
        """Uniform without-replacement indices for the distillation batch."""
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        m = len(self.slots)
        if m == 0:
            return []
        if n >= m:
            return list(range(m))
        return [int(i) for i in rng.choice(m, size=n, replace=False)]

    def refresh_slot(self, index: int, new_h: np.ndarray, new_l: float, new_u: float):
        """Overwrite a slot's cached logits/loss/uncertainty in place, O(1)."""
        try:
            slot = self.slots[index]
        except IndexError:
            raise ValueError(
                f"slot index {index} out of range [0, {len(self.slots)})")
        if index < 0:
            raise ValueError(f"slot index {index} out of range")
        if type(new_h) is not np.ndarray:
            new_h = np.asarray(new_h, dtype=np.float64)
        if len(new_h) != len(slot.h):
            raise ValueError(f"logit shape {new_h.shape} != slot's {slot.h.shape}")
        if type(new_l) is not float:
            new_l = float(new_l)
        if type(new_u) is not float:
            new_u = float(new_u)
        # x - x is 0.0 iff x is finite; avoids numpy/math call overhead on
        # this hot path (one refresh per rehearsed slot per step)
        if new_l - new_l != 0.0 or new_u - new_u != 0.0:
            raise ValueError("refreshed loss/uncertainty must be finite")
        slot.h = new_h
        slot.l = new_l if new_l > 0.0 else 0.0
        slot.u = new_u if new_u > 0.0 else 0.0
