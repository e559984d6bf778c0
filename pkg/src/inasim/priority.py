"""Gradient priority: raw formula, 8-bit quantisation and downgrading."""
from __future__ import annotations

import math
from dataclasses import dataclass

EPSILON_S = 1e-3


@dataclass(frozen=True)
class JobProfile:
    """Scheduling inputs of one job.

    remaining_time is in seconds; comm/comp overheads only enter as a ratio.
    """

    job: int
    remaining_time: float
    layer_count: int
    comm_overhead: float
    comp_overhead: float

    def __post_init__(self):
        if not self.remaining_time > 0:
            raise ValueError(f"remaining_time must be > 0, got {self.remaining_time}")
        if self.layer_count < 1:
            raise ValueError(f"layer_count must be >= 1, got {self.layer_count}")
        if not (self.comm_overhead > 0 and self.comp_overhead > 0):
            raise ValueError("comm_overhead and comp_overhead must be > 0")

    @property
    def comm_comp_ratio(self) -> float:
        return self.comm_overhead / self.comp_overhead


@dataclass(frozen=True)
class QuantScale:
    """Log-scale map: one octave of raw priority is ``k`` quantisation steps,
    and ``p_ref`` lands on the midpoint 128."""

    k: float = 16.0
    p_ref: float = 1.0

    def __post_init__(self):
        if not (self.k > 0 and self.p_ref > 0):
            raise ValueError(f"QuantScale needs k > 0 and p_ref > 0, got {self}")


def compute_priority(profile: JobProfile, layer: int) -> float:
    """(1/T) * (L/l) * (Comm/Comp) for layer ``layer`` (1-based, front first)."""
    if not 1 <= layer <= profile.layer_count:
        raise ValueError(f"layer must be in [1, {profile.layer_count}], got {layer}")
    return (1.0 / profile.remaining_time) * (profile.layer_count / layer) * profile.comm_comp_ratio


def quantize_priority(raw: float, scale: QuantScale = QuantScale()) -> int:
    if not raw > 0:
        raise ValueError(f"raw priority must be > 0, got {raw}")
    q = round(scale.k * math.log2(raw / scale.p_ref)) + 128
    return 0 if q < 0 else 255 if q > 255 else q


def downgrade(stored: int) -> int:
    return stored >> 1


def estimate_remaining_time(remaining: float | None, attained_service: float) -> float:
    """Remaining time if known, otherwise the attained service floored at 1 ms."""
    if remaining is not None and remaining > 0:
        return remaining
    return max(attained_service, EPSILON_S)
