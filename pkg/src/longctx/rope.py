"""Rotary position embeddings with a per-stage base-frequency schedule.

The base frequency (theta) is looked up from a (context length -> theta)
table; lengths missing from the table fall back to scaling theta in
proportion to context length from the nearest tabulated anchor below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


class RopeConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RopeConfig:
    theta: float
    head_dim: int

    def __post_init__(self):
        if self.head_dim % 2 != 0 or self.head_dim <= 0:
            raise RopeConfigError(f"head_dim must be a positive even number, got {self.head_dim}")
        if self.theta < 1.0:
            raise RopeConfigError(f"theta must be >= 1, got {self.theta}")

    def pair_freqs(self) -> np.ndarray:
        """Angular frequency of each (2i, 2i+1) pair: theta^(-2i/head_dim)."""
        i = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.theta ** (-2.0 * i / self.head_dim)


def _angles(positions: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    # Reduce position * freq mod 2*pi in extended precision before trig so
    # million-scale positions do not lose phase accuracy.
    p = np.asarray(positions, dtype=np.longdouble).reshape(-1, 1)
    f = freqs.astype(np.longdouble).reshape(1, -1)
    return np.mod(p * f, np.longdouble(TWO_PI)).astype(np.float64)


def rotate_rows(x: np.ndarray, positions: np.ndarray, cfg: RopeConfig,
                inverse: bool = False) -> np.ndarray:
    """Rotate each row of x by its position's angles. x is (T, head_dim).

    inverse=True applies the opposite rotation; since rotations are
    orthogonal this is also the adjoint, which backpropagation needs.
    """
    if x.shape[-1] != cfg.head_dim:
        raise RopeConfigError(f"row width {x.shape[-1]} != head_dim {cfg.head_dim}")
    ang = _angles(positions, cfg.pair_freqs())
    cos, sin = np.cos(ang), np.sin(ang)
    if inverse:
        sin = -sin
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rotate(x: np.ndarray, position: int, cfg: RopeConfig) -> np.ndarray:
    """Rotate a single head vector by its position's angles."""
    v = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return rotate_rows(v, np.array([position]), cfg)[0]


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class ThetaSchedule:
    """Ordered (context_length, theta) anchors; lengths strictly increasing."""

    entries: tuple

    def __post_init__(self):
        ent = tuple((int(c), float(t)) for c, t in self.entries)
        object.__setattr__(self, "entries", ent)
        if not ent:
            raise ScheduleError("schedule needs at least one entry")
        for (c0, t0), (c1, t1) in zip(ent, ent[1:]):
            if c1 <= c0:
                raise ScheduleError(f"context lengths must strictly increase ({c0} -> {c1})")
            if t1 < t0:
                raise ScheduleError(f"thetas must be non-decreasing ({t0} -> {t1})")
        for c, t in ent:
            if c <= 0 or t < 1.0:
                raise ScheduleError(f"bad entry ({c}, {t})")


def theta_for_context(context_len: int, schedule: ThetaSchedule) -> float:
    """Theta for a context length: exact table hit, else proportional scaling.

    Off-table lengths scale theta linearly from the largest anchor at or below
    them, capped by the next anchor's theta so the lookup stays monotone even
    where adjacent anchors share a value.
    """
    if context_len <= 0:
        raise ScheduleError(f"context_len must be > 0, got {context_len}")
    entries = schedule.entries
    below = [(c, t) for c, t in entries if c <= context_len]
    if not below:
        c0, t0 = entries[0]
        return t0 * (context_len / c0)
    c_base, t_base = below[-1]
    if c_base == context_len:
        return t_base
    theta = t_base * (context_len / c_base)
    above = [(c, t) for c, t in entries if c > context_len]
    if above:
        theta = min(theta, above[0][1])
    return theta


# Theta table used by the full-scale training recipe this stack mirrors
# (32K through 1M context), and the desk-scale anchor used by the toy runs.
REFERENCE_SCHEDULE = ThetaSchedule(
    (
        (1 << 15, 1_000_000.0),
        (1 << 17, 10_000_000.0),
        (1 << 18, 10_000_000.0),
        (1 << 19, 25_000_000.0),
        (1 << 20, 50_000_000.0),
    )
)

TOY_SCHEDULE = ThetaSchedule(((256, 10_000.0),))
