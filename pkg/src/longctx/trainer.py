"""Training loop machinery: AdamW, warmup schedules, stage plans with
progressive context doubling, bitwise-resumable checkpoints, guided
sampling, and throughput counters.

Data order is a pure function of (seed, step): batch builders reseed per
step, so the resumable random state is just the base seed plus the next step
index, and resuming a checkpoint reproduces the uninterrupted run bitwise.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .model import DecodeSession, ModelConfig, Transformer
from .rope import TOY_SCHEDULE, theta_for_context
from . import vocab as V

CHECKPOINT_MAGIC = b"LCK1"
CHECKPOINT_VERSION = 1
DESK_PEAK_FLOPS = 5.0e10  # nominal laptop-class single-core peak for the MFU estimate


class TrainerError(ValueError):
    pass


class ModeError(TrainerError):
    """Guided sampling asked for without a vision block to guide."""


class TrainAbort(RuntimeError):
    """Non-finite loss; carries the last checkpoint taken before the blowup."""

    def __init__(self, message: str, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


# --- optimizer ----------------------------------------------------------


class AdamW:
    """Adam with bias correction, decoupled weight decay, global-norm clip.

    Norm gains and other 1-d parameters are exempt from weight decay.
    """

    def __init__(self, params, lr_schedule, betas=(0.9, 0.95), eps=1e-8,
                 weight_decay=0.1, grad_clip=1.0):
        self.params = list(params)
        self.lr_schedule = lr_schedule
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self) -> float:
        lr = float(self.lr_schedule(self.t))
        self.t += 1
        scale = 1.0
        if self.grad_clip:
            sq = sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params)
            gnorm = math.sqrt(sq)
            if gnorm > self.grad_clip:
                scale = self.grad_clip / (gnorm + 1e-12)
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = p.grad * scale if scale != 1.0 else p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and p.value.ndim > 1:
                update = update + self.weight_decay * p.value
            p.value -= lr * update
        return lr

    def state(self) -> dict:
        return {
            "t": self.t,
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
        }

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = state["m"][k].astype(self.m[k].dtype, copy=True)
            self.v[k] = state["v"][k].astype(self.v[k].dtype, copy=True)


def make_lr_schedule(kind: str, max_lr: float, min_lr: float, warmup_steps: int,
                     total_steps: int):
    """step (0-based) -> learning rate. Cosine with max == min is constant."""
    if kind not in ("constant", "cosine"):
        raise TrainerError(f"unknown lr schedule {kind!r}")

    def lr(step: int) -> float:
        if warmup_steps > 0 and step < warmup_steps:
            return max_lr * (step + 1) / warmup_steps
        if kind == "constant":
            return max_lr
        span = max(1, total_steps - warmup_steps)
        prog = min(1.0, (step - warmup_steps) / span)
        return min_lr + 0.5 * (max_lr - min_lr) * (1.0 + math.cos(math.pi * prog))

    return lr


# --- stage plans --------------------------------------------------------


@dataclass(frozen=True)
class StagePlan:
    name: str
    seq_len: int
    tokens_per_batch: int
    total_tokens: int
    rope_theta: float = None
    init_from: str = None
    data_filter: tuple = None
    lr_schedule: str = "constant"
    warmup_steps: int = 0
    max_lr: float = 3e-3
    min_lr: float = 3e-4

    def __post_init__(self):
        if self.seq_len < 1 or (self.seq_len & (self.seq_len - 1)) != 0:
            raise TrainerError(f"seq_len must be a positive power of two, got {self.seq_len}")
        if self.tokens_per_batch % self.seq_len != 0:
            raise TrainerError(
                f"tokens_per_batch {self.tokens_per_batch} must be a multiple of seq_len"
            )
        if self.total_tokens % self.tokens_per_batch != 0:
            raise TrainerError("total_tokens must be a whole number of batches")

    @property
    def steps(self) -> int:
        return self.total_tokens // self.tokens_per_batch

    @property
    def seqs_per_batch(self) -> int:
        return self.tokens_per_batch // self.seq_len

    def resolve_theta(self, schedule=TOY_SCHEDULE) -> float:
        if self.rope_theta is not None:
            return float(self.rope_theta)
        return theta_for_context(self.seq_len, schedule)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "seq_len": self.seq_len,
            "tokens_per_batch": self.tokens_per_batch, "total_tokens": self.total_tokens,
            "rope_theta": self.rope_theta, "init_from": self.init_from,
            "data_filter": list(self.data_filter) if self.data_filter else None,
            "lr_schedule": self.lr_schedule, "warmup_steps": self.warmup_steps,
            "max_lr": self.max_lr, "min_lr": self.min_lr,
        }


def validate_plans(plans) -> None:
    """Strictly doubling-or-more power-of-two lengths, chained inits."""
    if not plans:
        raise TrainerError("empty stage plan list")
    if plans[0].init_from not in (None, "fresh"):
        raise TrainerError(f"first stage must init fresh, got {plans[0].init_from!r}")
    for prev, cur in zip(plans, plans[1:]):
        if cur.seq_len <= prev.seq_len:
            raise TrainerError(
                f"stage lengths must strictly increase: {prev.seq_len} -> {cur.seq_len}"
            )
        ratio = cur.seq_len // prev.seq_len
        if prev.seq_len * ratio != cur.seq_len or (ratio & (ratio - 1)) != 0:
            raise TrainerError(f"stage lengths must grow by powers of two, got {ratio}x")
        if cur.init_from != prev.name:
            raise TrainerError(
                f"stage {cur.name!r} must init from {prev.name!r}, got {cur.init_from!r}"
            )


# --- metrics ------------------------------------------------------------


@dataclass
class TrainMetrics:
    step: int
    loss: float
    tokens_per_second: float
    estimated_flops_utilization: float
    wall_clock: float


def estimate_throughput(counters, param_count: int, window: int = 20,
                        peak_flops: float = DESK_PEAK_FLOPS) -> dict:
    """Sliding-window tokens/sec and estimated FLOPs utilization.

    counters is a list of (tokens, seconds) pairs; FLOPs per token uses the
    6 * params approximation for a forward+backward pass.
    """
    if not counters:
        raise TrainerError("need at least one completed step")
    tail = counters[-window:]
    tokens = sum(t for t, _ in tail)
    seconds = sum(s for _, s in tail)
    tok_s = tokens / seconds if seconds > 0 else 0.0
    mfu = 6.0 * param_count * tok_s / peak_flops
    return {"tokens_per_second": tok_s, "estimated_flops_utilization": mfu}


def write_metrics_csv(path, metrics) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "tok_s", "mfu_est", "wall_clock"])
        for m in metrics:
            w.writerow([m.step, repr(m.loss), f"{m.tokens_per_second:.3f}",
                        f"{m.estimated_flops_utilization:.6f}", f"{m.wall_clock:.4f}"])


def fixed_clock(step_seconds: float = 1.0):
    """Deterministic stand-in clock: each call advances by step_seconds.

    Wall time cannot be a function of (config, seed), so reproducible runs
    record this virtual clock in the timing columns instead.
    """
    state = {"t": 0.0}

    def clock() -> float:
        state["t"] += step_seconds
        return state["t"]

    return clock


# --- checkpoints --------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict
    opt_state: dict
    stage: str
    step: int
    rng_state: dict
    config: dict
    config_sha: str
    rope_theta: float = None


def make_checkpoint(model: Transformer, opt, stage: str, step: int, seed: int,
                    rope_theta: float = None) -> Checkpoint:
    cfg = model.config.to_dict()
    return Checkpoint(
        params={name: a.copy() for name, a in model.state_arrays().items()},
        opt_state=opt.state() if opt is not None else {"t": 0, "m": {}, "v": {}},
        stage=stage, step=step,
        rng_state={"seed": int(seed), "next_step": int(step)},
        config=cfg, config_sha=config_hash(cfg),
        rope_theta=rope_theta,
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Versioned binary: magic, json header, then raw little-endian arrays."""
    arrays = []
    for name in sorted(ckpt.params):
        arrays.append((f"p.{name}", ckpt.params[name]))
    for name in sorted(ckpt.opt_state["m"]):
        arrays.append((f"m.{name}", ckpt.opt_state["m"][name]))
    for name in sorted(ckpt.opt_state["v"]):
        arrays.append((f"v.{name}", ckpt.opt_state["v"][name]))
    header = {
        "version": CHECKPOINT_VERSION,
        "stage": ckpt.stage, "step": ckpt.step,
        "opt_t": ckpt.opt_state["t"],
        "rng_state": ckpt.rng_state,
        "config": ckpt.config, "config_sha": ckpt.config_sha,
        "rope_theta": ckpt.rope_theta,
        "arrays": [
            {"name": n, "dtype": a.dtype.str, "shape": list(a.shape)} for n, a in arrays
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a).tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise TrainerError(f"not a checkpoint file: bad magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise TrainerError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen))
        params, m_state, v_state = {}, {}, {}
        for meta in header["arrays"]:
            a = np.frombuffer(f.read(int(np.dtype(meta["dtype"]).itemsize
                                         * int(np.prod(meta["shape"], dtype=np.int64)))),
                              dtype=meta["dtype"]).reshape(meta["shape"]).copy()
            kind, name = meta["name"].split(".", 1)
            {"p": params, "m": m_state, "v": v_state}[kind][name] = a
    return Checkpoint(
        params=params,
        opt_state={"t": header["opt_t"], "m": m_state, "v": v_state},
        stage=header["stage"], step=header["step"],
        rng_state=header["rng_state"], config=header["config"],
        config_sha=header["config_sha"],
        rope_theta=header.get("rope_theta"),
    )


# --- training -----------------------------------------------------------


def train_stage(model: Transformer, plan: StagePlan, batch_fn, optimizer=None,
                seed: int = 0, start_step: int = 0, parallelism="single",
                theta_schedule=TOY_SCHEDULE, metrics_path=None, on_step=None,
                clock=None):
    """Run one stage; returns (final Checkpoint, TrainMetrics list).

    batch_fn(step) must return the packed sequences for that step,
    deterministically. A non-finite loss, or an update that writes
    non-finite parameters, raises TrainAbort carrying the checkpoint taken
    after the last good step. clock defaults to wall time; pass
    fixed_clock() for byte-reproducible metrics files.
    """
    theta = plan.resolve_theta(theta_schedule)
    steps = plan.steps
    if clock is None:
        clock = time.perf_counter
    if optimizer is None:
        optimizer = AdamW(model.params,
                          make_lr_schedule(plan.lr_schedule, plan.max_lr, plan.min_lr,
                                           plan.warmup_steps, steps))
    metrics: list = []
    counters: list = []
    last_good = make_checkpoint(model, optimizer, plan.name, start_step, seed,
                                rope_theta=theta)
    for step in range(start_step, steps):
        t0 = clock()
        batch = batch_fn(step)
        model.zero_grads()
        coeff = 1.0 / len(batch)
        loss = 0.0
        for packed in batch:
            part, _ = model.loss_and_grad(packed, theta, parallelism=parallelism,
                                          coeff=coeff)
            loss += part
        if not math.isfinite(loss):
            if metrics_path is not None:
                write_metrics_csv(metrics_path, metrics)
            raise TrainAbort(
                f"non-finite loss {loss} at stage {plan.name!r} step {step}", last_good
            )
        optimizer.step()
        # a finite loss can still ship non-finite gradients into the update
        if any(not np.all(np.isfinite(p.value)) for p in model.params):
            if metrics_path is not None:
                write_metrics_csv(metrics_path, metrics)
            raise TrainAbort(
                f"non-finite parameters after stage {plan.name!r} step {step}", last_good
            )
        dt = clock() - t0
        counters.append((plan.tokens_per_batch, dt))
        through = estimate_throughput(counters, model.param_count())
        metrics.append(TrainMetrics(
            step=step, loss=loss,
            tokens_per_second=through["tokens_per_second"],
            estimated_flops_utilization=through["estimated_flops_utilization"],
            wall_clock=dt,
        ))
        last_good = make_checkpoint(model, optimizer, plan.name, step + 1, seed,
                                    rope_theta=theta)
        if on_step is not None:
            on_step(step, loss)
    if metrics_path is not None:
        write_metrics_csv(metrics_path, metrics)
    return last_good, metrics


def progressive_run(model: Transformer, plans, batch_fn_factory, out_dir=None,
                    seed: int = 0, parallelism="single", theta_schedule=TOY_SCHEDULE,
                    on_step=None, clock=None):
    """Chain stages, each initialized from the previous one's parameters.

    batch_fn_factory(plan) -> batch_fn for that stage (re-filtering its data
    per the plan). Returns (checkpoints by stage name, metrics by stage name).
    """
    import os

    validate_plans(plans)
    ckpts, all_metrics = {}, {}
    for plan in plans:
        batch_fn = batch_fn_factory(plan)
        metrics_path = None
        if out_dir is not None:
            metrics_path = os.path.join(out_dir, f"metrics_{plan.name}.csv")
        ckpt, metrics = train_stage(model, plan, batch_fn, seed=seed,
                                    parallelism=parallelism,
                                    theta_schedule=theta_schedule,
                                    metrics_path=metrics_path, on_step=on_step,
                                    clock=clock)
        ckpts[plan.name] = ckpt
        all_metrics[plan.name] = metrics
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, f"{plan.name}.ckpt"), ckpt)
    return ckpts, all_metrics


def resume_stage(model: Transformer, plan: StagePlan, batch_fn, ckpt: Checkpoint,
                 parallelism="single", theta_schedule=TOY_SCHEDULE, metrics_path=None,
                 clock=None):
    """Continue a stage from a checkpoint; bitwise-identical to no interruption."""
    model.load_state(ckpt.params)
    optimizer = AdamW(model.params,
                      make_lr_schedule(plan.lr_schedule, plan.max_lr, plan.min_lr,
                                       plan.warmup_steps, plan.steps))
    optimizer.load_state(ckpt.opt_state)
    return train_stage(model, plan, batch_fn, optimizer=optimizer,
                       seed=ckpt.rng_state["seed"], start_step=ckpt.rng_state["next_step"],
                       parallelism=parallelism, theta_schedule=theta_schedule,
                       metrics_path=metrics_path, clock=clock)


# --- sampling -----------------------------------------------------------


def _pick_token(logits, temperature: float, rng: np.random.Generator) -> int:
    z = np.asarray(logits, dtype=np.float64)
    if temperature == 0.0:
        return int(np.argmax(z))
    z = z / temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    idx = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
    return min(idx, len(p) - 1)


def sample(model: Transformer, prompt, max_new: int, cfg_scale: float = 1.0,
           temperature: float = 1.0, seed: int = 0, theta: float = None) -> list:
    """Autoregressive sampling with classifier-free guidance on the logits.

    Guidance mixes l_uncond + cfg_scale * (l_cond - l_uncond), where the
    unconditional branch re-roots the context at bos,vision_open and sees
    only the generated vision tokens. cfg_scale 1 runs the conditional
    branch alone (bitwise identical to plain sampling); 0 runs only the
    unconditional branch.
    """
    if cfg_scale < 0:
        raise TrainerError(f"cfg_scale must be >= 0, got {cfg_scale}")
    prompt = [int(t) for t in prompt]
    if theta is None:
        theta = theta_for_context(model.config.max_context, TOY_SCHEDULE)
    if max_new < 1:
        return []
    if len(prompt) + max_new > model.config.max_context:
        raise TrainerError(
            f"prompt {len(prompt)} + max_new {max_new} exceeds "
            f"max_context {model.config.max_context}"
        )
    rng = np.random.default_rng([seed])

    if cfg_scale == 1.0:
        session = DecodeSession(model, theta)
        logits = session.prefill(prompt)
        out = []
        for _ in range(max_new):
            tok = _pick_token(logits, temperature, rng)
            out.append(tok)
            logits = session.step(tok)
        return out

    if V.VISION_OPEN_ID not in prompt:
        raise ModeError("guided sampling needs a vision block opened in the prompt")
    uncond_root = [V.BOS_ID, V.VISION_OPEN_ID]
    if cfg_scale == 0.0:
        session = DecodeSession(model, theta)
        logits = session.prefill(uncond_root)
        out = []
        for _ in range(max_new):
            tok = _pick_token(logits, temperature, rng)
            out.append(tok)
            logits = session.step(tok)
        return out

    cond = DecodeSession(model, theta)
    uncond = DecodeSession(model, theta)
    lc = cond.prefill(prompt)
    lu = uncond.prefill(uncond_root)
    out = []
    for _ in range(max_new):
        mixed = np.asarray(lu, dtype=np.float64) + cfg_scale * (
            np.asarray(lc, dtype=np.float64) - np.asarray(lu, dtype=np.float64)
        )
        tok = _pick_token(mixed, temperature, rng)
        out.append(tok)
        lc = cond.step(tok)
        lu = uncond.step(tok)
    return out


class GreedyGenerator:
    """Needle-eval adapter: greedy conditional decoding of max_new tokens."""

    def __init__(self, model: Transformer, theta: float = None):
        self.model = model
        self.theta = theta

    def __call__(self, prompt, max_new: int, seed: int):
        return sample(self.model, prompt, max_new, cfg_scale=1.0,
                      temperature=0.0, seed=seed, theta=self.theta)
