"""Exact attention computed block-by-block with online-softmax accumulation.

The full score matrix is never materialized: key/value blocks are folded into
a running (max, denominator, accumulator) state per query row. Masking uses a
real -inf sentinel (exp(-inf) = 0), so causal and cross-segment entries are
excluded exactly rather than approximately. The ring executor distributes
this same kernel across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numeric import Matrix, ShapeError

NEG_INF = -np.inf


@dataclass(frozen=True)
class MaskSpec:
    """Visibility rule for (query, key) pairs.

    A pair is visible iff (not causal or key_position <= query_position) and
    query_segment == key_segment. Negative segment ids are masked-out filler:
    they are visible to nothing and attend to nothing, not even themselves.
    """

    causal: bool
    query_positions: np.ndarray
    key_positions: np.ndarray
    query_segments: np.ndarray
    key_segments: np.ndarray

    def __post_init__(self):
        for name in ("query_positions", "key_positions", "query_segments", "key_segments"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))

    @property
    def n_queries(self) -> int:
        return self.query_positions.shape[0]

    @property
    def n_keys(self) -> int:
        return self.key_positions.shape[0]

    def visible(self) -> np.ndarray:
        """Dense boolean (n_queries, n_keys) visibility grid."""
        seg_ok = self.query_segments[:, None] == self.key_segments[None, :]
        seg_ok &= self.query_segments[:, None] >= 0
        if not self.causal:
            return seg_ok
        pos_ok = self.key_positions[None, :] <= self.query_positions[:, None]
        return seg_ok & pos_ok

    def slice_queries(self, start: int, stop: int) -> "MaskSpec":
        return MaskSpec(
            self.causal,
            self.query_positions[start:stop],
            self.key_positions,
            self.query_segments[start:stop],
            self.key_segments,
        )

    def slice_keys(self, start: int, stop: int) -> "MaskSpec":
        return MaskSpec(
            self.causal,
            self.query_positions,
            self.key_positions[start:stop],
            self.query_segments,
            self.key_segments[start:stop],
        )


def causal_mask(n: int) -> MaskSpec:
    """Plain single-segment causal mask over n positions."""
    pos = np.arange(n, dtype=np.int64)
    seg = np.zeros(n, dtype=np.int64)
    return MaskSpec(True, pos, pos, seg, seg)


@dataclass
class AttentionState:
    """Online-softmax accumulator: running max m, denominator l, value acc.

    Rows that have seen no visible key keep m = -inf, l = 0, acc = 0, and a
    fully-masked block update leaves the state unchanged.
    """

    m: np.ndarray
    l: np.ndarray
    acc: Matrix

    @classmethod
    def fresh(cls, n_queries: int, head_dim: int, dtype=np.float64) -> "AttentionState":
        return cls(
            m=np.full(n_queries, NEG_INF, dtype=np.float64),
            l=np.zeros(n_queries, dtype=dtype),
            acc=np.zeros((n_queries, head_dim), dtype=dtype),
        )


def attend_block(
    state: AttentionState,
    q: Matrix,
    k_blk: Matrix,
    v_blk: Matrix,
    mask: MaskSpec,
    scale: float,
) -> AttentionState:
    """Fold one key/value block into the online-softmax state.

    s = q k_blk^T * scale with masked entries at -inf, then
      m' = max(m, rowmax(s))
      l' = l * e^(m - m') + rowsum(e^(s - m'))
      acc' = acc * e^(m - m') + e^(s - m') v_blk
    """
    if q.shape[1] != k_blk.shape[1]:
        raise ShapeError(f"q width {q.shape[1]} != k width {k_blk.shape[1]}")
    if k_blk.shape[0] != v_blk.shape[0]:
        raise ShapeError(f"k rows {k_blk.shape[0]} != v rows {v_blk.shape[0]}")
    if mask.n_queries != q.shape[0] or mask.n_keys != k_blk.shape[0]:
        raise ShapeError("mask not sized to the q/k blocks")

    vis = mask.visible()
    s = (q @ k_blk.T) * scale
    blk_max = np.where(np.any(vis, axis=1), np.max(np.where(vis, s, NEG_INF), axis=1), NEG_INF)
    m_new = np.maximum(state.m, blk_max)

    live = m_new > NEG_INF
    alpha = np.ones_like(state.l)
    # exp(m - m') for rows that have a finite running max; exp(-inf) = 0
    # handles rows whose first visible key arrives in this block.
    alpha[live] = np.exp((state.m[live] - m_new[live]).astype(state.l.dtype))

    p = np.zeros_like(s)
    if np.any(vis):
        shifted = np.where(vis, s - np.where(live, m_new, 0.0)[:, None], NEG_INF)
        p[vis] = np.exp(shifted[vis])

    l_new = alpha * state.l + np.sum(p, axis=1)
    acc_new = alpha[:, None] * state.acc + p @ v_blk
    return AttentionState(m=m_new, l=l_new, acc=acc_new)


def finalize(state: AttentionState) -> Matrix:
    """acc / l per row; rows with no visible keys output zero."""
    out = np.zeros_like(state.acc)
    live = state.l > 0
    out[live] = state.acc[live] / state.l[live, None]
    return out


@dataclass
class AttentionSaved:
    """Forward-pass residue needed by the recomputation backward."""

    q: Matrix
    k: Matrix
    v: Matrix
    out: Matrix
    m: np.ndarray
    l: np.ndarray
    mask: MaskSpec
    scale: float
    block_size: int


def full_attention_with_stats(
    q: Matrix,
    k: Matrix,
    v: Matrix,
    mask: MaskSpec,
    block_size: int,
    scale: float | None = None,
):
    """Blockwise attention over all key blocks; returns (out, saved)."""
    if block_size < 1:
        raise ValueError(f"block_size must be >= 1, got {block_size}")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[1])
    n_keys = k.shape[0]
    state = AttentionState.fresh(q.shape[0], v.shape[1], dtype=q.dtype)
    for start in range(0, n_keys, block_size):
        stop = min(start + block_size, n_keys)
        state = attend_block(
            state, q, k[start:stop], v[start:stop], mask.slice_keys(start, stop), scale
        )
    out = finalize(state)
    saved = AttentionSaved(q, k, v, out, state.m, state.l, mask, scale, block_size)
    return out, saved


def full_attention(q: Matrix, k: Matrix, v: Matrix, mask: MaskSpec, block_size: int) -> Matrix:
    """Exact attention; equals dense softmax(q k^T * scale) v under the mask."""
    out, _ = full_attention_with_stats(q, k, v, mask, block_size)
    return out


def attention_backward(saved: AttentionSaved, d_out: Matrix):
    """Exact gradients of full_attention via per-block recomputation.

    Uses D = rowsum(dO * O) and rebuilds each block's probabilities from the
    saved (m, l) statistics instead of storing the full probability matrix.
    """
    q, k, v, mask, scale = saved.q, saved.k, saved.v, saved.mask, saved.scale
    live = saved.l > 0
    inv_l = np.zeros_like(saved.l)
    inv_l[live] = 1.0 / saved.l[live]
    d_row = np.sum(d_out * saved.out, axis=1)

    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    n_keys = k.shape[0]
    for start in range(0, n_keys, saved.block_size):
        stop = min(start + saved.block_size, n_keys)
        k_blk = k[start:stop]
        v_blk = v[start:stop]
        vis = mask.slice_keys(start, stop).visible()
        s = (q @ k_blk.T) * scale
        p = np.zeros_like(s)
        sel = vis & live[:, None]
        if np.any(sel):
            p[sel] = np.exp((s - np.where(live, saved.m, 0.0)[:, None])[sel]) * np.broadcast_to(
                inv_l[:, None], s.shape
            )[sel]
        dv[start:stop] += p.T @ d_out
        dp = d_out @ v_blk.T
        ds = p * (dp - d_row[:, None])
        dq += (ds @ k_blk) * scale
        dk[start:stop] += (ds.T @ q) * scale
    return dq, dk, dv
