"""Masked sequence packing and the multimodal delimiter stream grammar.

Packing concatenates examples into one training sequence with per-segment
attention isolation and loss weights chosen so the packed batch computes
exactly the padded per-example regime: each example with loss tokens gets
total weight 1/E spread uniformly over its loss tokens, so the weighted sum
equals the mean over examples of the per-example mean token loss.

A vision block in a token stream is
    <vision> f1 <eof> f2 <eof> ... fn <eov> </vision>
with every frame exactly 256 tokens, <eof> after each non-final frame and
<eov> after the final one. A single image block is therefore 259 tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import MaskSpec
from . import vocab as V


class PackingError(ValueError):
    pass


class OversizeError(PackingError):
    """An example is longer than the packing target."""


class StreamError(PackingError):
    """A token stream violates the delimiter grammar."""


@dataclass(frozen=True)
class SpecialTokens:
    bos: int
    eos: int
    vision_open: int
    vision_close: int
    eof: int
    eov: int
    pad: int

    def __post_init__(self):
        ids = [self.bos, self.eos, self.vision_open, self.vision_close, self.eof, self.eov, self.pad]
        if len(set(ids)) != len(ids):
            raise PackingError(f"special token ids must be distinct: {ids}")
        for name in ("vision_open", "vision_close"):
            if getattr(self, name) >= V.VISION_CODE_START:
                raise PackingError(f"{name} must be a text-range id")
        for name in ("eof", "eov"):
            if getattr(self, name) < V.VISION_CODE_START:
                raise PackingError(f"{name} must be a vision-range id")


def default_special_tokens() -> SpecialTokens:
    return SpecialTokens(
        bos=V.BOS_ID, eos=V.EOS_ID,
        vision_open=V.VISION_OPEN_ID, vision_close=V.VISION_CLOSE_ID,
        eof=V.EOF_ID, eov=V.EOV_ID, pad=V.PAD_ID,
    )


@dataclass(frozen=True)
class Example:
    """One training example as loss-free context plus loss-bearing answer.

    extra_spans holds (tokens, bears_loss) pairs appended after the answer,
    for multi-turn items where later questions interleave with answers.
    """

    context_tokens: tuple
    answer_tokens: tuple
    modality: str = "text"
    extra_spans: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "context_tokens", tuple(int(t) for t in self.context_tokens))
        object.__setattr__(self, "answer_tokens", tuple(int(t) for t in self.answer_tokens))
        object.__setattr__(
            self, "extra_spans",
            tuple((tuple(int(t) for t in toks), bool(flag)) for toks, flag in self.extra_spans),
        )
        if self.modality not in ("text", "image", "video", "interleaved"):
            raise PackingError(f"unknown modality: {self.modality}")
        if len(self) < 1:
            raise PackingError("example must contain at least one token")

    def __len__(self):
        return len(self.context_tokens) + len(self.answer_tokens) + sum(
            len(toks) for toks, _ in self.extra_spans
        )

    @property
    def tokens(self) -> tuple:
        out = list(self.context_tokens) + list(self.answer_tokens)
        for toks, _ in self.extra_spans:
            out.extend(toks)
        return tuple(out)

    @property
    def loss_mask(self) -> tuple:
        out = [0] * len(self.context_tokens) + [1] * len(self.answer_tokens)
        for toks, flag in self.extra_spans:
            out.extend([1 if flag else 0] * len(toks))
        return tuple(out)

    @property
    def loss_token_count(self) -> int:
        return sum(self.loss_mask)


@dataclass
class PackedSequence:
    tokens: np.ndarray
    segment_ids: np.ndarray
    position_ids: np.ndarray
    loss_mask: np.ndarray
    loss_weights: np.ndarray
    example_count: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.segment_ids = np.asarray(self.segment_ids, dtype=np.int64)
        self.position_ids = np.asarray(self.position_ids, dtype=np.int64)
        self.loss_mask = np.asarray(self.loss_mask, dtype=np.int64)
        self.loss_weights = np.asarray(self.loss_weights, dtype=np.float64)
        n = len(self.tokens)
        for name in ("segment_ids", "position_ids", "loss_mask", "loss_weights"):
            if len(getattr(self, name)) != n:
                raise PackingError(f"{name} length != token length")
        if np.any((self.loss_weights > 0) & (self.loss_mask == 0)):
            raise PackingError("positive loss weight on a masked-out token")
        if np.any(np.diff(self.segment_ids) < 0):
            raise PackingError("segment_ids must be non-decreasing")

    def __len__(self):
        return len(self.tokens)

    def segment_slices(self) -> list:
        """(segment_id, slice) for each contiguous segment, pad included."""
        out = []
        n = len(self.tokens)
        start = 0
        for i in range(1, n + 1):
            if i == n or self.segment_ids[i] != self.segment_ids[i - 1]:
                out.append((int(self.segment_ids[start]), slice(start, i)))
                start = i
        return out


def pack_examples(examples, target_len: int, sp: SpecialTokens) -> PackedSequence:
    """Concatenate the given examples into one sequence of target_len tokens.

    Positions restart at 0 inside every segment; the remainder is a pad
    segment (id = example_count) carrying no loss and, through
    mask_from_segments, attending to and seen by nothing.
    """
    tokens, seg, pos, mask = [], [], [], []
    for e_idx, ex in enumerate(examples):
        if len(ex) > target_len:
            raise OversizeError(f"example {e_idx} has {len(ex)} tokens > target {target_len}")
        if len(tokens) + len(ex) > target_len:
            raise PackingError(
                f"examples overflow target {target_len} at example {e_idx}; "
                "use pack_stream for first-fit binning"
            )
        ex_tokens = ex.tokens
        ex_mask = ex.loss_mask
        tokens.extend(ex_tokens)
        seg.extend([e_idx] * len(ex_tokens))
        pos.extend(range(len(ex_tokens)))
        mask.extend(ex_mask)
    n_examples = len(examples)
    pad_len = target_len - len(tokens)
    tokens.extend([sp.pad] * pad_len)
    seg.extend([n_examples] * pad_len)
    pos.extend(range(pad_len))
    mask.extend([0] * pad_len)
    packed = PackedSequence(
        tokens=tokens, segment_ids=seg, position_ids=pos,
        loss_mask=mask, loss_weights=[0.0] * target_len, example_count=n_examples,
    )
    return assign_loss_weights(packed)


def pack_stream(examples, target_len: int, sp: SpecialTokens) -> list:
    """First-fit packing in arrival order into as many sequences as needed."""
    bins: list[list] = []
    fill: list[int] = []
    for e_idx, ex in enumerate(examples):
        if len(ex) > target_len:
            raise OversizeError(f"example {e_idx} has {len(ex)} tokens > target {target_len}")
        for b, used in enumerate(fill):
            if used + len(ex) <= target_len:
                bins[b].append(ex)
                fill[b] += len(ex)
                break
        else:
            bins.append([ex])
            fill.append(len(ex))
    return [pack_examples(bin_examples, target_len, sp) for bin_examples in bins]


def assign_loss_weights(packed: PackedSequence) -> PackedSequence:
    """Weight each loss token 1/(E * loss tokens in its segment).

    E counts non-pad segments owning at least one loss token, so the weighted
    packed loss equals the mean over examples of the per-example mean token
    loss and the weights sum to 1 whenever any loss token exists.
    """
    weights = np.zeros(len(packed), dtype=np.float64)
    counts = {}
    for seg_id, sl in packed.segment_slices():
        if seg_id >= packed.example_count:
            continue
        c = int(packed.loss_mask[sl].sum())
        counts[seg_id] = counts.get(seg_id, 0) + c
    contributing = sum(1 for c in counts.values() if c > 0)
    if contributing > 0:
        for seg_id, sl in packed.segment_slices():
            c = counts.get(seg_id, 0)
            if c > 0:
                w = 1.0 / (contributing * c)
                rows = np.arange(sl.start, sl.stop)[packed.loss_mask[sl] == 1]
                weights[rows] = w
    packed.loss_weights = weights
    return packed


def mask_from_segments(packed: PackedSequence) -> MaskSpec:
    """Causal MaskSpec isolating segments; pad tokens see and feed nothing."""
    seg = packed.segment_ids.copy()
    seg[seg >= packed.example_count] = -1
    return MaskSpec(
        causal=True,
        query_positions=packed.position_ids.copy(),
        key_positions=packed.position_ids.copy(),
        query_segments=seg,
        key_segments=seg.copy(),
    )


def pad_to_multiple(packed: PackedSequence, multiple: int, sp: SpecialTokens) -> PackedSequence:
    """Extend the pad segment so the length divides evenly (for sharding)."""
    if multiple < 1:
        raise PackingError(f"multiple must be >= 1, got {multiple}")
    extra = (-len(packed)) % multiple
    if extra == 0:
        return packed
    pad_seg = packed.example_count
    prior_pad = int(np.sum(packed.segment_ids == pad_seg))
    return PackedSequence(
        tokens=np.concatenate([packed.tokens, np.full(extra, sp.pad, dtype=np.int64)]),
        segment_ids=np.concatenate([packed.segment_ids, np.full(extra, pad_seg, dtype=np.int64)]),
        position_ids=np.concatenate([packed.position_ids,
                                     np.arange(prior_pad, prior_pad + extra, dtype=np.int64)]),
        loss_mask=np.concatenate([packed.loss_mask, np.zeros(extra, dtype=np.int64)]),
        loss_weights=np.concatenate([packed.loss_weights, np.zeros(extra)]),
        example_count=packed.example_count,
    )


def unpack(packed: PackedSequence) -> list:
    """Token tuples of the non-pad segments, in order."""
    out = []
    for seg_id, sl in packed.segment_slices():
        if seg_id < packed.example_count:
            out.append(tuple(int(t) for t in packed.tokens[sl]))
    return out


# --- multimodal delimiter streams ---------------------------------------


def build_multimodal_stream(text, frames, order_swapped: bool, sp: SpecialTokens) -> list:
    """text tokens and frames joined into one stream around a vision block.

    order_swapped=False gives text then vision; True gives vision then text.
    """
    if not frames:
        raise StreamError("a multimodal stream needs at least one frame")
    for i, f in enumerate(frames):
        if len(f) != V.FRAME_TOKENS:
            raise StreamError(f"frame {i} has {len(f)} tokens, expected {V.FRAME_TOKENS}")
    block = [sp.vision_open]
    for i, f in enumerate(frames):
        block.extend(int(t) for t in f)
        block.append(sp.eof if i < len(frames) - 1 else sp.eov)
    block.append(sp.vision_close)
    text = [int(t) for t in text]
    return block + text if order_swapped else text + block


def parse_multimodal_stream(stream, sp: SpecialTokens):
    """Inverse of build_multimodal_stream.

    Returns (text_tokens, frames, order_swapped); raises StreamError on any
    grammar violation (missing delimiters, short or long frames, trailing
    garbage inside the block).
    """
    stream = [int(t) for t in stream]
    try:
        open_at = stream.index(sp.vision_open)
    except ValueError:
        raise StreamError("no vision_open in stream")
    try:
        close_at = stream.index(sp.vision_close)
    except ValueError:
        raise StreamError("no vision_close in stream")
    if close_at < open_at:
        raise StreamError("vision_close before vision_open")
    body = stream[open_at + 1 : close_at]
    frames = []
    cur = []
    closed = False
    for t in body:
        if closed:
            raise StreamError("tokens after eov inside vision block")
        if t == sp.eof or t == sp.eov:
            if len(cur) != V.FRAME_TOKENS:
                raise StreamError(f"frame {len(frames)} has {len(cur)} tokens, expected {V.FRAME_TOKENS}")
            frames.append(tuple(cur))
            cur = []
            if t == sp.eov:
                closed = True
        else:
            if not (V.VISION_CODE_START <= t < V.VISION_CODE_START + V.VISION_CODE_COUNT):
                raise StreamError(f"non-vision token {t} inside vision block")
            cur.append(t)
    if not closed:
        raise StreamError("vision block not terminated by eov")
    if cur:
        raise StreamError("dangling frame tokens after eov")
    before = stream[:open_at]
    after = stream[close_at + 1 :]
    if before and after:
        raise StreamError("text on both sides of the vision block")
    order_swapped = bool(after) or not before
    text = after if order_swapped else before
    return list(text), frames, order_swapped
