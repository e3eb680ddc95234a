"""Sequence parallelism over a ring of workers.

The sequence is sharded contiguously across P workers. Each worker keeps its
query shard and folds every key/value block into its online-softmax state as
the blocks rotate around the ring: at step s, worker i attends to the block
that originated at worker (i - s) mod P, then forwards it to worker
(i + 1) mod P. After P steps every block has visited every worker and the
finalized outputs match single-device blockwise attention.

Workers are in-process threads talking through a pluggable transport; the
default uses bounded queues, and a loopback-socket transport exercises the
same protocol over TCP.
"""

from __future__ import annotations

import pickle
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionState, MaskSpec, attend_block, finalize
from .numeric import Matrix


class RingError(ValueError):
    """Topology or shard validation failure."""


class ProtocolError(RuntimeError):
    """A message was lost, duplicated, or a worker died mid-run."""


@dataclass(frozen=True)
class RingTopology:
    num_workers: int
    shard_len: int
    global_len: int

    def __post_init__(self):
        if self.num_workers < 1:
            raise RingError(f"need at least one worker, got {self.num_workers}")
        if self.shard_len * self.num_workers != self.global_len:
            raise RingError(
                f"shard_len {self.shard_len} x {self.num_workers} workers != global_len {self.global_len}"
            )

    def span(self, worker: int) -> tuple[int, int]:
        """Global [start, stop) token range held by a worker."""
        return worker * self.shard_len, (worker + 1) * self.shard_len


@dataclass(frozen=True)
class ShardMsg:
    """Wire unit of the rotation: a KV block plus its position/segment ids."""

    k_blk: Matrix
    v_blk: Matrix
    origin: int
    key_positions: np.ndarray
    key_segments: np.ndarray

    def freeze(self) -> "ShardMsg":
        for a in (self.k_blk, self.v_blk, self.key_positions, self.key_segments):
            a.setflags(write=False)
        return self


def rotation_schedule(num_workers: int) -> list[tuple[int, int, int, int]]:
    """(step, sender, receiver, block_origin) tuples for a full rotation.

    P steps; at step s worker i holds the block originating at (i - s) mod P
    and forwards it to (i + 1) mod P, so every worker sees every origin
    exactly once and the send edges form a single directed cycle.
    """
    if num_workers < 1:
        raise RingError(f"need at least one worker, got {num_workers}")
    p = num_workers
    return [(s, i, (i + 1) % p, (i - s) % p) for s in range(p) for i in range(p)]


class InProcessTransport:
    """Bounded queues, one per directed ring edge. Counts deliveries."""

    def __init__(self, num_workers: int, timeout: float = 10.0):
        self.num_workers = num_workers
        self.timeout = timeout
        self._edges = {i: queue.Queue(maxsize=2) for i in range(num_workers)}
        self._lock = threading.Lock()
        self.deliveries: list[tuple[int, int, int]] = []  # (step, receiver, origin)

    def send(self, msg: ShardMsg, to: int) -> None:
        self._edges[to].put(msg)

    def recv(self, worker: int, step: int) -> ShardMsg:
        try:
            msg = self._edges[worker].get(timeout=self.timeout)
        except queue.Empty:
            raise ProtocolError(f"worker {worker} timed out waiting for a block at step {step}")
        with self._lock:
            self.deliveries.append((step, worker, msg.origin))
        return msg

    def close(self) -> None:
        pass

    def audit(self) -> dict:
        pairs = [(w, o) for _, w, o in self.deliveries]
        return {
            "deliveries": len(self.deliveries),
            "unique_worker_origin_pairs": len(set(pairs)),
            "duplicates": len(pairs) - len(set(pairs)),
        }


class SocketTransport:
    """Same protocol over loopback TCP sockets, one connection per ring edge."""

    def __init__(self, num_workers: int, timeout: float = 10.0):
        self.num_workers = num_workers
        self.timeout = timeout
        self._recv_socks: dict[int, socket.socket] = {}
        self._send_socks: dict[int, socket.socket] = {}
        self._lock = threading.Lock()
        self.deliveries: list[tuple[int, int, int]] = []
        listeners = []
        ports = []
        for _ in range(num_workers):
            srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            srv.bind(("127.0.0.1", 0))
            srv.listen(1)
            listeners.append(srv)
            ports.append(srv.getsockname()[1])
        # edge (i -> i+1 mod P): sender i connects to receiver's listener
        for i in range(num_workers):
            to = (i + 1) % num_workers
            cli = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            cli.connect(("127.0.0.1", ports[to]))
            self._send_socks[i] = cli
            conn, _ = listeners[to].accept()
            conn.settimeout(timeout)
            self._recv_socks[to] = conn
        for srv in listeners:
            srv.close()

    def send(self, msg: ShardMsg, to: int) -> None:
        payload = pickle.dumps(msg)
        sock = self._send_socks[(to - 1) % self.num_workers]
        sock.sendall(struct.pack("<Q", len(payload)) + payload)

    def recv(self, worker: int, step: int) -> ShardMsg:
        sock = self._recv_socks[worker]
        try:
            header = self._read_exact(sock, 8)
            (n,) = struct.unpack("<Q", header)
            payload = self._read_exact(sock, n)
        except (socket.timeout, ConnectionError, OSError):
            raise ProtocolError(f"worker {worker} timed out waiting for a block at step {step}")
        msg = pickle.loads(payload)
        with self._lock:
            self.deliveries.append((step, worker, msg.origin))
        return msg

    @staticmethod
    def _read_exact(sock: socket.socket, n: int) -> bytes:
        buf = b""
        while len(buf) < n:
            chunk = sock.recv(n - len(buf))
            if not chunk:
                raise ConnectionError("peer closed")
            buf += chunk
        return buf

    def close(self) -> None:
        for s in list(self._send_socks.values()) + list(self._recv_socks.values()):
            try:
                s.close()
            except OSError:
                pass

    def audit(self) -> dict:
        pairs = [(w, o) for _, w, o in self.deliveries]
        return {
            "deliveries": len(self.deliveries),
            "unique_worker_origin_pairs": len(set(pairs)),
            "duplicates": len(pairs) - len(set(pairs)),
        }


@dataclass
class RingResult:
    out_shards: list
    m_shards: list
    l_shards: list
    audit: dict


def _worker_body(
    worker: int,
    q_shard: Matrix,
    msg0: ShardMsg,
    mask: MaskSpec,
    topology: RingTopology,
    transport,
    scale: float,
    overlap: bool,
    causal_skip: bool,
    q_span: tuple[int, int],
    results: dict,
):
    p = topology.num_workers
    right = (worker + 1) % p
    state = AttentionState.fresh(q_shard.shape[0], msg0.v_blk.shape[1], dtype=q_shard.dtype)
    q_mask_pos = mask.query_positions
    q_mask_seg = mask.query_segments
    msg = msg0
    for step in range(p):
        if overlap:
            transport.send(msg, to=right)
        origin_start, _ = topology.span(msg.origin)
        # Shards are contiguous global slices, so a causal mask can skip any
        # block that starts after the last local query: no pair is visible.
        skip = causal_skip and mask.causal and origin_start > q_span[1] - 1
        if not skip:
            blk_mask = MaskSpec(
                mask.causal, q_mask_pos, msg.key_positions, q_mask_seg, msg.key_segments
            )
            state = attend_block(state, q_shard, msg.k_blk, msg.v_blk, blk_mask, scale)
        if not overlap:
            transport.send(msg, to=right)
        msg = transport.recv(worker, step)
    results[worker] = (finalize(state), state.m, state.l)


def ring_attention(
    q_shards: list,
    k_shards: list,
    v_shards: list,
    topology: RingTopology,
    masks: list,
    transport=None,
    scale: float | None = None,
    overlap: bool = False,
    causal_skip: bool = False,
) -> RingResult:
    """Distributed exact attention: P rotation steps over the worker ring.

    masks[i] is the MaskSpec for worker i's queries against ITS OWN keys; key
    positions/segments for other blocks travel with the messages. Outputs
    match single-device full_attention on the unsharded sequence.
    """
    p = topology.num_workers
    if not (len(q_shards) == len(k_shards) == len(v_shards) == len(masks) == p):
        raise RingError(f"expected {p} shards per tensor")
    if scale is None:
        scale = 1.0 / np.sqrt(q_shards[0].shape[1])
    own_transport = transport is None
    if transport is None:
        transport = InProcessTransport(p)

    msgs = [
        ShardMsg(
            k_blk=np.ascontiguousarray(k_shards[i]),
            v_blk=np.ascontiguousarray(v_shards[i]),
            origin=i,
            key_positions=masks[i].key_positions,
            key_segments=masks[i].key_segments,
        ).freeze()
        for i in range(p)
    ]

    results: dict = {}
    errors: list = []

    def run(i):
        try:
            _worker_body(
                i, q_shards[i], msgs[i], masks[i], topology, transport, scale,
                overlap, causal_skip, topology.span(i), results,
            )
        except BaseException as exc:  # surfaced by the orchestrator
            errors.append((i, exc))

    threads = [threading.Thread(target=run, args=(i,), name=f"ring-worker-{i}") for i in range(p)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    try:
        if errors:
            worker, exc = errors[0]
            if isinstance(exc, ProtocolError):
                raise exc
            raise ProtocolError(f"worker {worker} failed: {exc!r}") from exc
        audit = transport.audit()
        expected = p * p
        if audit["deliveries"] != expected or audit["duplicates"] != 0:
            raise ProtocolError(
                f"message audit failed: {audit['deliveries']} deliveries "
                f"({audit['duplicates']} duplicates), expected {expected}"
            )
        return RingResult(
            out_shards=[results[i][0] for i in range(p)],
            m_shards=[results[i][1] for i in range(p)],
            l_shards=[results[i][2] for i in range(p)],
            audit=audit,
        )
    finally:
        if own_transport:
            transport.close()


@dataclass(frozen=True)
class SeqShard:
    """One worker's contiguous slice of a packed sequence."""

    tokens: np.ndarray
    positions: np.ndarray
    segments: np.ndarray
    start: int
    stop: int


def shard_sequence(packed, p: int) -> list:
    """Contiguous equal shards of a packed sequence with their metadata.

    Raises when the length does not divide; pad the sequence with a masked
    padding segment first (packing.pad_to_multiple).
    """
    n = len(packed.tokens)
    if n % p != 0:
        raise RingError(f"length {n} not divisible by {p} workers (pad first)")
    step = n // p
    out = []
    for i in range(p):
        sl = slice(i * step, (i + 1) * step)
        out.append(SeqShard(
            tokens=np.asarray(packed.tokens[sl]),
            positions=np.asarray(packed.position_ids[sl]),
            segments=np.asarray(packed.segment_ids[sl]),
            start=sl.start, stop=sl.stop,
        ))
    return out


def split_rows(x: np.ndarray, p: int) -> list:
    """Split rows into P contiguous equal shards."""
    n = x.shape[0]
    if n % p != 0:
        raise RingError(f"length {n} not divisible by {p} workers (pad first)")
    step = n // p
    return [x[i * step : (i + 1) * step] for i in range(p)]


def shard_mask(mask: MaskSpec, p: int) -> list:
    """Per-worker MaskSpecs: local query rows against local key rows."""
    qp = split_rows(mask.query_positions, p)
    qs = split_rows(mask.query_segments, p)
    kp = split_rows(mask.key_positions, p)
    ks = split_rows(mask.key_segments, p)
    return [MaskSpec(mask.causal, qp[i], kp[i], qs[i], ks[i]) for i in range(p)]


def ring_attention_full(
    q: Matrix,
    k: Matrix,
    v: Matrix,
    mask: MaskSpec,
    p: int,
    transport=None,
    overlap: bool = False,
    causal_skip: bool = False,
):
    """Convenience wrapper: shard, run the ring, reassemble (out, m, l)."""
    n = q.shape[0]
    topology = RingTopology(num_workers=p, shard_len=n // p, global_len=n)
    result = ring_attention(
        split_rows(q, p), split_rows(k, p), split_rows(v, p),
        topology, shard_mask(mask, p),
        transport=transport, overlap=overlap, causal_skip=causal_skip,
    )
    out = np.concatenate(result.out_shards, axis=0)
    m = np.concatenate(result.m_shards, axis=0)
    l = np.concatenate(result.l_shards, axis=0)
    return out, m, l, result.audit
