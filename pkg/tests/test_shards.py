"""Binary shard and packed-sequence file formats."""

import json

import numpy as np
import pytest

from longctx import vocab as V
from longctx.packing import Example, default_special_tokens, pack_examples
from longctx.shards import (
    ShardError,
    read_manifest,
    read_packed,
    read_shard,
    write_manifest,
    write_packed,
    write_shard,
)

SP = default_special_tokens()


def sample_examples(rng, n=10):
    out = []
    for i in range(n):
        c = int(rng.integers(1, 20))
        a = int(rng.integers(0, 10))
        modality = ["text", "image", "video", "interleaved"][i % 4]
        extra = ()
        if i % 3 == 0:
            extra = ((tuple(int(t) for t in rng.integers(5, 400, size=3)), True),)
        out.append(Example(
            context_tokens=tuple(int(t) for t in rng.integers(5, 400, size=c)),
            answer_tokens=tuple(int(t) for t in rng.integers(5, 400, size=a)),
            modality=modality, extra_spans=extra,
        ))
    return out


def test_shard_round_trip_preserves_everything(tmp_path):
    rng = np.random.default_rng(0)
    examples = sample_examples(rng, 12)
    path = tmp_path / "data.shard"
    write_shard(path, examples)
    loaded = read_shard(path)
    assert len(loaded) == 12
    for orig, back in zip(examples, loaded):
        assert back.context_tokens == orig.context_tokens
        assert back.answer_tokens == orig.answer_tokens
        assert back.modality == orig.modality
        assert back.extra_spans == orig.extra_spans


def test_shard_bytes_are_deterministic(tmp_path):
    rng = np.random.default_rng(1)
    examples = sample_examples(rng, 5)
    p1 = tmp_path / "a.shard"
    p2 = tmp_path / "b.shard"
    write_shard(p1, examples)
    write_shard(p2, examples)
    assert p1.read_bytes() == p2.read_bytes()


def test_shard_rejects_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "bad.shard"
    path.write_bytes(b"XXXX" + b"\x00" * 32)
    with pytest.raises(ShardError):
        read_shard(path)

    good = tmp_path / "good.shard"
    write_shard(good, sample_examples(np.random.default_rng(2), 3))
    blob = good.read_bytes()
    trunc = tmp_path / "trunc.shard"
    trunc.write_bytes(blob[: len(blob) - 5])
    with pytest.raises(ShardError):
        read_shard(trunc)


def test_manifest_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    examples = sample_examples(rng, 6)
    path = tmp_path / "manifest.jsonl"
    write_manifest(path, examples)
    rows = read_manifest(path)
    assert len(rows) == 6
    for ex, row in zip(examples, rows):
        assert row["length"] == len(ex)
        assert row["modality"] == ex.modality
        assert row["loss_tokens"] == ex.loss_token_count
    with open(path) as f:
        for line in f:
            json.loads(line)  # every row is valid json


def test_packed_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(4)
    seqs = []
    for i in range(4):
        exs = sample_examples(rng, int(rng.integers(1, 4)))
        target = sum(len(e) for e in exs) + int(rng.integers(0, 6))
        seqs.append(pack_examples(exs, target, SP))
    path = tmp_path / "packed.bin"
    write_packed(path, seqs)
    loaded = read_packed(path)
    assert len(loaded) == 4
    for orig, back in zip(seqs, loaded):
        assert np.array_equal(back.tokens, orig.tokens)
        assert np.array_equal(back.segment_ids, orig.segment_ids)
        assert np.array_equal(back.position_ids, orig.position_ids)
        assert np.array_equal(back.loss_mask, orig.loss_mask)
        # weights survive bit for bit through the float64 encoding
        assert back.loss_weights.tobytes() == orig.loss_weights.tobytes()
        assert back.example_count == orig.example_count


def test_packed_rejects_foreign_files(tmp_path):
    path = tmp_path / "nope.bin"
    path.write_bytes(b"LCSH" + b"\x00" * 16)
    with pytest.raises(ShardError):
        read_packed(path)


def test_packed_bytes_are_deterministic(tmp_path):
    rng = np.random.default_rng(5)
    exs = sample_examples(rng, 3)
    seqs = [pack_examples(exs, sum(len(e) for e in exs) + 2, SP)]
    p1 = tmp_path / "a.bin"
    p2 = tmp_path / "b.bin"
    write_packed(p1, seqs)
    write_packed(p2, seqs)
    assert p1.read_bytes() == p2.read_bytes()


def test_empty_collections_round_trip(tmp_path):
    spath = tmp_path / "empty.shard"
    write_shard(spath, [])
    assert read_shard(spath) == []
    ppath = tmp_path / "empty.bin"
    write_packed(ppath, [])
    assert read_packed(ppath) == []
