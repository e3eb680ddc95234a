"""Toy autoregressive transformer over multimodal token streams.

Llama-shaped blocks: RMS-norm, rotary positions, multi-head blockwise
attention, SwiGLU MLP, untied unembedding. Forward and backward are written
by hand on top of the numeric primitives, so gradients are checkable against
finite differences, and attention can run single-device or across a ring of
workers with identical results up to summation order.

Sequences are processed one at a time (no batch axis); callers accumulate
gradients over a batch by summing scaled per-sequence contributions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import AttentionSaved, MaskSpec, attention_backward, full_attention_with_stats
from .numeric import ParamTensor, cross_entropy, rms_norm, rms_norm_backward
from .ring import ring_attention_full
from .rope import RopeConfig, rotate_rows
from . import vocab as V

MLP_MULT = 2  # SwiGLU hidden width as a multiple of model_dim
DEFAULT_BLOCK = 256


class ModelError(ValueError):
    pass


class ContextOverflowError(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    model_dim: int
    heads: int
    head_dim: int
    vocab: int
    max_context: int

    def __post_init__(self):
        if self.model_dim != self.heads * self.head_dim:
            raise ModelError(
                f"model_dim {self.model_dim} != heads {self.heads} x head_dim {self.head_dim}"
            )
        if self.layers < 1 or self.max_context < 1:
            raise ModelError("need at least one layer and a positive context")
        if self.vocab < V.VOCAB_SIZE:
            raise ModelError(f"vocab {self.vocab} must cover all special ids (>= {V.VOCAB_SIZE})")

    @property
    def hidden_dim(self) -> int:
        return MLP_MULT * self.model_dim

    def to_dict(self) -> dict:
        return {
            "layers": self.layers, "model_dim": self.model_dim, "heads": self.heads,
            "head_dim": self.head_dim, "vocab": self.vocab, "max_context": self.max_context,
        }


def _sigmoid(x):
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _silu(x):
    return x * _sigmoid(x)


def _silu_backward(dy, x):
    s = _sigmoid(x)
    return dy * s * (1.0 + x * (1.0 - s))


class Transformer:
    """Parameters plus hand-rolled forward/backward and decode cache."""

    def __init__(self, config: ModelConfig, dtype=np.float64, seed: int = 0):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng([seed])
        d, h, v = config.model_dim, config.hidden_dim, config.vocab
        scale = 0.02
        out_scale = scale / math.sqrt(2 * config.layers)

        def mk(name, shape, s):
            arr = (rng.normal(0.0, s, size=shape) if s else np.ones(shape)).astype(self.dtype)
            return ParamTensor(name=name, value=arr)

        self.params: list = [mk("embed", (v, d), scale)]
        for i in range(config.layers):
            p = f"l{i}."
            self.params += [
                mk(p + "ln1", (d,), 0.0),
                mk(p + "wq", (d, d), scale), mk(p + "wk", (d, d), scale),
                mk(p + "wv", (d, d), scale), mk(p + "wo", (d, d), out_scale),
                mk(p + "ln2", (d,), 0.0),
                mk(p + "wg", (d, h), scale), mk(p + "wu", (d, h), scale),
                mk(p + "wd", (h, d), out_scale),
            ]
        self.params += [mk("lnf", (d,), 0.0), mk("unembed", (d, v), scale)]
        self.by_name = {p.name: p for p in self.params}

    # --- bookkeeping -----------------------------------------------------

    def param_count(self) -> int:
        return sum(p.size for p in self.params)

    def zero_grads(self) -> None:
        for p in self.params:
            p.zero_grad()

    def set_dtype(self, dtype) -> None:
        """Cast parameters in place (e.g. float32 for the fast path)."""
        self.dtype = np.dtype(dtype)
        for p in self.params:
            p.value = p.value.astype(self.dtype)
            p.grad = p.grad.astype(self.dtype)

    def state_arrays(self) -> dict:
        return {p.name: p.value for p in self.params}

    def load_state(self, arrays: dict) -> None:
        for p in self.params:
            if p.name not in arrays:
                raise ModelError(f"missing parameter {p.name} in state")
            if arrays[p.name].shape != p.value.shape:
                raise ModelError(f"shape mismatch for {p.name}")
            p.value = arrays[p.name].astype(self.dtype, copy=True)

    # --- forward ---------------------------------------------------------

    def forward(self, tokens, mask: MaskSpec, theta: float, parallelism="single",
                block_size: int = DEFAULT_BLOCK, want_cache: bool = False):
        """Per-position next-token logits for one sequence.

        parallelism is "single" or an integer worker count P for ring
        attention; both produce the same logits up to summation order.
        Returns (logits, cache); the cache feeds backward().
        """
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        n = tokens.shape[0]
        if n > cfg.max_context:
            raise ContextOverflowError(f"sequence length {n} > max_context {cfg.max_context}")
        if np.any(tokens < 0) or np.any(tokens >= cfg.vocab):
            raise ModelError("token id out of vocabulary range")
        rope_cfg = RopeConfig(theta=theta, head_dim=cfg.head_dim)
        positions = mask.query_positions

        x = self.by_name["embed"].value[tokens]
        cache = {"tokens": tokens, "mask": mask, "rope": rope_cfg, "layers": [],
                 "audits": []}
        for i in range(cfg.layers):
            x = self._layer_forward(i, x, mask, positions, rope_cfg, parallelism,
                                    block_size, cache)
        lnf = self.by_name["lnf"].value
        xf = rms_norm(x, lnf)
        logits = xf @ self.by_name["unembed"].value
        cache["x_final"] = x
        cache["xf"] = xf
        return (logits, cache) if want_cache else (logits, None)

    def _layer_forward(self, i, x_in, mask, positions, rope_cfg, parallelism,
                       block_size, cache):
        cfg = self.config
        p = f"l{i}."
        g = lambda s: self.by_name[p + s].value
        a_in = rms_norm(x_in, g("ln1"))
        q = a_in @ g("wq")
        k = a_in @ g("wk")
        v = a_in @ g("wv")
        hd = cfg.head_dim
        heads_out = np.empty_like(q)
        saved_heads = []
        for h in range(cfg.heads):
            sl = slice(h * hd, (h + 1) * hd)
            qh = rotate_rows(q[:, sl], positions, rope_cfg)
            kh = rotate_rows(k[:, sl], positions, rope_cfg)
            vh = np.ascontiguousarray(v[:, sl])
            if parallelism == "single":
                out_h, saved = full_attention_with_stats(qh, kh, vh, mask, block_size)
            else:
                out_h, m, l, audit = ring_attention_full(qh, kh, vh, mask, int(parallelism))
                cache["audits"].append(audit)
                saved = AttentionSaved(qh, kh, vh, out_h, m, l, mask,
                                       1.0 / math.sqrt(hd), block_size)
            heads_out[:, sl] = out_h
            saved_heads.append(saved)
        proj = heads_out @ g("wo")
        x_mid = x_in + proj
        m_in = rms_norm(x_mid, g("ln2"))
        gate = m_in @ g("wg")
        up = m_in @ g("wu")
        act = _silu(gate) * up
        x_out = x_mid + act @ g("wd")
        cache["layers"].append({
            "x_in": x_in, "a_in": a_in, "q": q, "k": k, "v": v,
            "saved_heads": saved_heads, "heads_out": heads_out,
            "x_mid": x_mid, "m_in": m_in, "gate": gate, "up": up, "act": act,
        })
        return x_out

    # --- backward --------------------------------------------------------

    def backward(self, dlogits, cache) -> None:
        """Accumulate parameter gradients for one forward pass."""
        cfg = self.config
        tokens, mask, rope_cfg = cache["tokens"], cache["mask"], cache["rope"]
        positions = mask.query_positions

        unembed = self.by_name["unembed"]
        unembed.grad += cache["xf"].T @ dlogits
        dxf = dlogits @ unembed.value.T
        dx, dlnf = rms_norm_backward(dxf, cache["x_final"], self.by_name["lnf"].value)
        self.by_name["lnf"].grad += dlnf

        for i in reversed(range(cfg.layers)):
            dx = self._layer_backward(i, dx, cache["layers"][i], positions, rope_cfg)

        dembed = np.zeros_like(self.by_name["embed"].value)
        np.add.at(dembed, tokens, dx)
        self.by_name["embed"].grad += dembed

    def _layer_backward(self, i, dx_out, lc, positions, rope_cfg):
        cfg = self.config
        p = f"l{i}."
        par = {s: self.by_name[p + s] for s in
               ("ln1", "wq", "wk", "wv", "wo", "ln2", "wg", "wu", "wd")}
        # mlp branch
        par["wd"].grad += lc["act"].T @ dx_out
        dact = dx_out @ par["wd"].value.T
        dsg = dact * lc["up"]
        dup = dact * _silu(lc["gate"])
        dgate = _silu_backward(dsg, lc["gate"])
        par["wg"].grad += lc["m_in"].T @ dgate
        par["wu"].grad += lc["m_in"].T @ dup
        dm_in = dgate @ par["wg"].value.T + dup @ par["wu"].value.T
        dnorm, dln2 = rms_norm_backward(dm_in, lc["x_mid"], par["ln2"].value)
        par["ln2"].grad += dln2
        dx_mid = dx_out + dnorm
        # attention branch
        par["wo"].grad += lc["heads_out"].T @ dx_mid
        dheads = dx_mid @ par["wo"].value.T
        hd = cfg.head_dim
        dq = np.empty_like(lc["q"])
        dk = np.empty_like(lc["k"])
        dv = np.empty_like(lc["v"])
        for h in range(cfg.heads):
            sl = slice(h * hd, (h + 1) * hd)
            dqh, dkh, dvh = attention_backward(lc["saved_heads"][h], dheads[:, sl])
            dq[:, sl] = rotate_rows(dqh, positions, rope_cfg, inverse=True)
            dk[:, sl] = rotate_rows(dkh, positions, rope_cfg, inverse=True)
            dv[:, sl] = dvh
        par["wq"].grad += lc["a_in"].T @ dq
        par["wk"].grad += lc["a_in"].T @ dk
        par["wv"].grad += lc["a_in"].T @ dv
        da_in = dq @ par["wq"].value.T + dk @ par["wk"].value.T + dv @ par["wv"].value.T
        dnorm1, dln1 = rms_norm_backward(da_in, lc["x_in"], par["ln1"].value)
        par["ln1"].grad += dln1
        return dx_mid + dnorm1

    # --- loss ------------------------------------------------------------

    def loss_and_grad(self, packed, theta: float, parallelism="single",
                      block_size: int = DEFAULT_BLOCK, coeff: float = 1.0):
        """Weighted next-token loss of one packed sequence; grads accumulate.

        Position i predicts token i+1 with that token's loss weight; pairs
        crossing a segment boundary are dropped. coeff scales this sequence's
        contribution (1/batch for averaged batches).
        """
        from .packing import mask_from_segments

        mask = mask_from_segments(packed)
        logits, cache = self.forward(packed.tokens, mask, theta, parallelism,
                                     block_size, want_cache=True)
        same_seg = packed.segment_ids[1:] == packed.segment_ids[:-1]
        weights = packed.loss_weights[1:] * same_seg * coeff
        loss, dshift = cross_entropy(logits[:-1], packed.tokens[1:],
                                     weights.astype(logits.dtype))
        dlogits = np.zeros_like(logits)
        dlogits[:-1] = dshift
        self.backward(dlogits, cache)
        return float(loss), cache["audits"]

    def loss_only(self, packed, theta: float, block_size: int = DEFAULT_BLOCK) -> float:
        from .packing import mask_from_segments

        mask = mask_from_segments(packed)
        logits, _ = self.forward(packed.tokens, mask, theta, block_size=block_size)
        same_seg = packed.segment_ids[1:] == packed.segment_ids[:-1]
        weights = packed.loss_weights[1:] * same_seg
        loss, _ = cross_entropy(logits[:-1], packed.tokens[1:], weights.astype(logits.dtype))
        return float(loss)


class DecodeSession:
    """Incremental decoding with per-layer rotated key/value caches.

    prefill() runs the batched forward once and captures the caches; step()
    then extends the sequence one token at a time with dense attention over
    the cached keys, which is exact for a single-segment causal context.
    """

    def __init__(self, model: Transformer, theta: float, max_len=None):
        self.model = model
        self.cfg = model.config
        self.rope = RopeConfig(theta=theta, head_dim=self.cfg.head_dim)
        self.max_len = max_len or self.cfg.max_context
        d = self.cfg.model_dim
        self.kcache = [np.empty((self.max_len, d), dtype=model.dtype)
                       for _ in range(self.cfg.layers)]
        self.vcache = [np.empty((self.max_len, d), dtype=model.dtype)
                       for _ in range(self.cfg.layers)]
        self.length = 0
        self.last_logits = None

    def prefill(self, tokens) -> np.ndarray:
        """Process the prompt in one pass; returns logits for the last token."""
        from .attention import causal_mask

        tokens = np.asarray(tokens, dtype=np.int64)
        n = tokens.shape[0]
        if n == 0:
            raise ModelError("prompt must be non-empty")
        if n > self.max_len:
            raise ContextOverflowError(f"prompt length {n} > max {self.max_len}")
        logits, cache = self.model.forward(tokens, causal_mask(n), self.rope.theta,
                                           want_cache=True)
        hd = self.cfg.head_dim
        positions = np.arange(n, dtype=np.int64)
        for i, lc in enumerate(cache["layers"]):
            for h in range(self.cfg.heads):
                sl = slice(h * hd, (h + 1) * hd)
                self.kcache[i][:n, sl] = rotate_rows(lc["k"][:, sl], positions, self.rope)
                self.vcache[i][:n, sl] = lc["v"][:, sl]
        self.length = n
        self.last_logits = logits[-1]
        return self.last_logits

    def step(self, token: int) -> np.ndarray:
        """Append one token; returns logits for the next position."""
        if self.length >= self.max_len:
            raise ContextOverflowError(f"decode cache full at {self.max_len}")
        m = self.model
        cfg = self.cfg
        pos = np.array([self.length], dtype=np.int64)
        x = m.by_name["embed"].value[np.array([int(token)])]
        hd = cfg.head_dim
        scale = 1.0 / math.sqrt(hd)
        for i in range(cfg.layers):
            p = f"l{i}."
            g = lambda s: m.by_name[p + s].value
            a_in = rms_norm(x, g("ln1"))
            q = a_in @ g("wq")
            k = a_in @ g("wk")
            v = a_in @ g("wv")
            t = self.length
            for h in range(cfg.heads):
                sl = slice(h * hd, (h + 1) * hd)
                self.kcache[i][t, sl] = rotate_rows(k[:, sl], pos, self.rope)[0]
                self.vcache[i][t, sl] = v[0, sl]
            attn = np.empty_like(q)
            for h in range(cfg.heads):
                sl = slice(h * hd, (h + 1) * hd)
                qh = rotate_rows(q[:, sl], pos, self.rope)[0]
                keys = self.kcache[i][: t + 1, sl]
                s = (keys @ qh) * scale
                s -= s.max()
                w = np.exp(s)
                w /= w.sum()
                attn[0, sl] = w @ self.vcache[i][: t + 1, sl]
            x = x + attn @ g("wo")
            m_in = rms_norm(x, g("ln2"))
            act = _silu(m_in @ g("wg")) * (m_in @ g("wu"))
            x = x + act @ g("wd")
        xf = rms_norm(x, m.by_name["lnf"].value)
        self.length += 1
        self.last_logits = (xf @ m.by_name["unembed"].value)[0]
        return self.last_logits
