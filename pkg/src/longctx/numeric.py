"""Dense float64 matrix primitives with hand-written backward passes.

Everything downstream (attention kernels, the toy transformer) is built from
the few ops in this module, so they stay deliberately boring: row-major 2-D
numpy arrays, no implicit broadcasting, and a finite-difference oracle that
can audit any gradient we compute by hand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# A Matrix is a 2-D, C-contiguous float array (float64 on the reference path,
# float32 on the optional fast path).
Matrix = np.ndarray

_REL_FLOOR = 1e-8  # denominator floor for relative gradient errors


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def as_matrix(x, dtype=np.float64) -> Matrix:
    """Coerce nested lists / arrays to a 2-D C-order float matrix."""
    m = np.ascontiguousarray(np.asarray(x, dtype=dtype))
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected 2-D data, got shape {m.shape}")
    return m


def check_finite(x: Matrix, what: str = "matrix") -> Matrix:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite entries in {what}")
    return x


@dataclass
class ParamTensor:
    """A named weight tensor with a gradient slot of the same shape.

    Weight matrices are 2-D; norm gains are 1-D. Weight decay keys off the
    distinction, so the rank check stays strict.
    """

    name: str
    value: Matrix
    grad: Matrix = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        if self.value.ndim not in (1, 2):
            raise ShapeError(f"{self.name}: params must be 1-D or 2-D, got {self.value.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self) -> None:
        self.grad[:] = 0.0

    @property
    def size(self) -> int:
        return self.value.size


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product with an explicit inner-dimension check."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    return a @ b


def rms_norm(x: Matrix, gain: np.ndarray, eps: float = 1e-6) -> Matrix:
    """Scale each row by 1/sqrt(mean(x^2) + eps), then apply elementwise gain."""
    if eps <= 0:
        raise ValueError("rms_norm eps must be > 0")
    g = np.asarray(gain).reshape(-1)
    if g.shape[0] != x.shape[1]:
        raise ShapeError(f"gain length {g.shape[0]} != row width {x.shape[1]}")
    ms = np.mean(x * x, axis=1) + eps
    scale = ms ** -0.5
    return x * scale[:, None] * g[None, :]


def rms_norm_backward(dy: Matrix, x: Matrix, gain: np.ndarray, eps: float = 1e-6):
    """Gradients of rms_norm: returns (dx, dgain).

    With s = (mean(x^2)+eps)^-1/2 and y = x*s*g:
      dgain = sum over rows of dy * x * s
      dx    = s * (dy*g - x * s^2/n * sum(dy*g*x, row))
    """
    g = np.asarray(gain).reshape(-1)
    n = x.shape[1]
    ms = np.mean(x * x, axis=1) + eps
    scale = ms ** -0.5
    dgain = np.sum(dy * x * scale[:, None], axis=0)
    dyg = dy * g[None, :]
    inner = np.sum(dyg * x, axis=1)
    dx = scale[:, None] * (dyg - x * (scale * scale * inner / n)[:, None])
    return dx, dgain


def softmax_rows(x: Matrix) -> Matrix:
    """Numerically stable row softmax."""
    m = np.max(x, axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=1, keepdims=True)


def cross_entropy(logits: Matrix, targets: np.ndarray, weights: np.ndarray):
    """Weighted next-token cross entropy.

    loss = sum_i w_i * (-log softmax(logits_i)[target_i]); returns (loss, dlogits).
    Rows with w_i = 0 contribute nothing to either output.
    """
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    w = np.asarray(weights, dtype=logits.dtype).reshape(-1)
    if t.shape[0] != logits.shape[0] or w.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"need one target and one weight per logits row: {logits.shape[0]} rows, "
            f"{t.shape[0]} targets, {w.shape[0]} weights"
        )
    if np.any(w < 0):
        raise ValueError("cross_entropy weights must be >= 0")
    vocab = logits.shape[1]
    if np.any((t < 0) | (t >= vocab)):
        bad = t[(t < 0) | (t >= vocab)][0]
        raise IndexError(f"target id {bad} outside vocab range [0, {vocab})")
    m = np.max(logits, axis=1)
    shifted = logits - m[:, None]
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    nll = lse - shifted[np.arange(t.shape[0]), t]
    loss = float(np.sum(w * nll))
    probs = np.exp(shifted - lse[:, None])
    dlogits = probs * w[:, None]
    dlogits[np.arange(t.shape[0]), t] -= w
    return loss, dlogits


def finite_diff_check(
    f,
    params,
    h: float = 1e-5,
    max_coords_per_param: int = 32,
    rng: np.random.Generator | None = None,
) -> float:
    """Central-difference audit of analytic gradients.

    ``f()`` must be deterministic, return the scalar loss, and as a side effect
    fill ``p.grad`` for every ParamTensor in ``params``. Returns the max over
    sampled coordinates of |analytic - central_diff| / max(|analytic|, 1e-8).
    """
    if h <= 0:
        raise ValueError("finite_diff_check step h must be > 0")
    if rng is None:
        rng = np.random.default_rng(0)
    params = list(params)
    f()
    analytic = {p.name: p.grad.copy() for p in params}
    worst = 0.0
    for p in params:
        n = p.size
        k = min(max_coords_per_param, n)
        coords = rng.choice(n, size=k, replace=False)
        flat = p.value.reshape(-1)
        for c in coords:
            orig = flat[c]
            step = h * max(1.0, abs(orig))
            flat[c] = orig + step
            f_plus = f()
            flat[c] = orig - step
            f_minus = f()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = analytic[p.name].reshape(-1)[c]
            err = abs(a - numeric) / max(abs(a), _REL_FLOOR)
            worst = max(worst, err)
    # restore the analytic gradients for the caller
    f()
    return worst
