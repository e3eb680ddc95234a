"""Binary token shard files and their JSONL manifests.

Layout (all little-endian):
    magic "LCSH" | u32 version | u32 token_width | u64 n_examples
    u64 index_offset | u64 spans_offset | u64 payload_offset
    index:  n_examples x (u64 token_offset, u64 n_tokens, u64 span_start,
                          u64 n_spans, u64 modality_code)
    spans:  total x (u64 length, u64 loss_flag)
    payload: int32 token ids

Spans reproduce each example's context/answer/extra structure exactly, so a
shard round-trips examples byte-for-byte deterministically.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .packing import Example

SHARD_MAGIC = b"LCSH"
SHARD_VERSION = 1
TOKEN_WIDTH = 4

_MODALITY_CODE = {"text": 0, "image": 1, "video": 2, "interleaved": 3}
_CODE_MODALITY = {v: k for k, v in _MODALITY_CODE.items()}


class ShardError(ValueError):
    pass


def _example_spans(ex: Example) -> list:
    spans = [(len(ex.context_tokens), 0), (len(ex.answer_tokens), 1)]
    for toks, flag in ex.extra_spans:
        spans.append((len(toks), 1 if flag else 0))
    return spans


def write_shard(path, examples) -> None:
    examples = list(examples)
    index_rows = []
    all_spans = []
    payload = []
    tok_cursor = 0
    for ex in examples:
        spans = _example_spans(ex)
        index_rows.append((tok_cursor, len(ex), len(all_spans), len(spans),
                           _MODALITY_CODE[ex.modality]))
        all_spans.extend(spans)
        payload.extend(ex.tokens)
        tok_cursor += len(ex)

    header_len = 4 + 4 + 4 + 8 + 8 + 8 + 8
    index_offset = header_len
    spans_offset = index_offset + len(index_rows) * 5 * 8
    payload_offset = spans_offset + len(all_spans) * 2 * 8
    with open(path, "wb") as f:
        f.write(SHARD_MAGIC)
        f.write(struct.pack("<II", SHARD_VERSION, TOKEN_WIDTH))
        f.write(struct.pack("<QQQQ", len(examples), index_offset, spans_offset,
                            payload_offset))
        for row in index_rows:
            f.write(struct.pack("<QQQQQ", *row))
        for length, flag in all_spans:
            f.write(struct.pack("<QQ", length, flag))
        f.write(np.asarray(payload, dtype="<i4").tobytes())


def read_shard(path) -> list:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != SHARD_MAGIC:
        raise ShardError(f"not a shard file: bad magic {blob[:4]!r}")
    version, token_width = struct.unpack_from("<II", blob, 4)
    if version != SHARD_VERSION:
        raise ShardError(f"unsupported shard version {version}")
    if token_width != TOKEN_WIDTH:
        raise ShardError(f"unsupported token width {token_width}")
    n_examples, index_offset, spans_offset, payload_offset = struct.unpack_from(
        "<QQQQ", blob, 12
    )
    if payload_offset > len(blob) or (len(blob) - payload_offset) % 4 != 0:
        raise ShardError(f"truncated shard: {len(blob)} bytes, payload at {payload_offset}")
    if spans_offset > payload_offset or index_offset + n_examples * 40 > spans_offset:
        raise ShardError("shard section offsets overlap or run past the file")
    tokens = np.frombuffer(blob, dtype="<i4", offset=payload_offset)
    out = []
    for e in range(n_examples):
        tok_off, n_tok, span_start, n_spans, mod_code = struct.unpack_from(
            "<QQQQQ", blob, index_offset + e * 40
        )
        if tok_off + n_tok > len(tokens):
            raise ShardError(f"example {e}: tokens run past the payload")
        spans = [
            struct.unpack_from("<QQ", blob, spans_offset + (span_start + s) * 16)
            for s in range(n_spans)
        ]
        if sum(length for length, _ in spans) != n_tok:
            raise ShardError(f"example {e}: span lengths disagree with token count")
        toks = [int(t) for t in tokens[tok_off : tok_off + n_tok]]
        cursor = spans[0][0]
        context = toks[:cursor]
        answer = toks[cursor : cursor + spans[1][0]]
        cursor += spans[1][0]
        extra = []
        for length, flag in spans[2:]:
            extra.append((tuple(toks[cursor : cursor + length]), bool(flag)))
            cursor += length
        out.append(Example(
            context_tokens=tuple(context), answer_tokens=tuple(answer),
            modality=_CODE_MODALITY[int(mod_code)], extra_spans=tuple(extra),
        ))
    return out


def write_manifest(path, examples) -> None:
    """One JSONL record per example: offsets, span count, loss-token count."""
    with open(path, "w") as f:
        offset = 0
        for i, ex in enumerate(examples):
            rec = {
                "index": i,
                "token_offset": offset,
                "length": len(ex),
                "spans": len(_example_spans(ex)),
                "loss_tokens": ex.loss_token_count,
                "loss_fraction": round(ex.loss_token_count / len(ex), 8),
                "modality": ex.modality,
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")
            offset += len(ex)


def read_manifest(path) -> list:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


PACKED_MAGIC = b"LCPK"
PACKED_VERSION = 1


def write_packed(path, sequences) -> None:
    """Packed-sequence file: magic | u32 version | u64 count, then per
    sequence u64 length, u64 example_count, followed by tokens/segment_ids/
    position_ids (int32), loss_mask (uint8), loss_weights (float64), all
    little-endian."""
    sequences = list(sequences)
    with open(path, "wb") as f:
        f.write(PACKED_MAGIC)
        f.write(struct.pack("<IQ", PACKED_VERSION, len(sequences)))
        for seq in sequences:
            n = len(seq)
            f.write(struct.pack("<QQ", n, seq.example_count))
            f.write(np.asarray(seq.tokens, dtype="<i4").tobytes())
            f.write(np.asarray(seq.segment_ids, dtype="<i4").tobytes())
            f.write(np.asarray(seq.position_ids, dtype="<i4").tobytes())
            f.write(np.asarray(seq.loss_mask, dtype="u1").tobytes())
            f.write(np.asarray(seq.loss_weights, dtype="<f8").tobytes())


def read_packed(path) -> list:
    from .packing import PackedSequence

    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != PACKED_MAGIC:
        raise ShardError(f"not a packed-sequence file: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<IQ", blob, 4)
    if version != PACKED_VERSION:
        raise ShardError(f"unsupported packed-sequence version {version}")
    out = []
    off = 16
    for _ in range(count):
        n, examples = struct.unpack_from("<QQ", blob, off)
        off += 16
        tokens = np.frombuffer(blob, dtype="<i4", count=n, offset=off).astype(np.int64)
        off += 4 * n
        segs = np.frombuffer(blob, dtype="<i4", count=n, offset=off).astype(np.int64)
        off += 4 * n
        pos = np.frombuffer(blob, dtype="<i4", count=n, offset=off).astype(np.int64)
        off += 4 * n
        mask = np.frombuffer(blob, dtype="u1", count=n, offset=off).astype(np.int64)
        off += n
        weights = np.frombuffer(blob, dtype="<f8", count=n, offset=off).copy()
        off += 8 * n
        out.append(PackedSequence(tokens=tokens, segment_ids=segs, position_ids=pos,
                                  loss_mask=mask, loss_weights=weights,
                                  example_count=int(examples)))
    return out
