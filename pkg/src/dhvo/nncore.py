"""Small numpy neural-net toolkit with hand-written backward passes.

Every op has a forward function and a matching ``*_backward`` that takes the
upstream gradient plus whatever the forward saved. Parameter gradients
accumulate into ``ParamBlock.grad`` so callers can compose ops into a fixed
tape. All arrays are float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_HEADER = "dhvo-checkpoint v1"


class ShapeError(ValueError):
    pass


@dataclass
class ParamBlock:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)
    adam_m: np.ndarray = field(default=None, repr=False)
    adam_v: np.ndarray = field(default=None, repr=False)
    step_count: int = 0

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        if self.value.ndim != 2:
            raise ShapeError(f"{self.name}: parameters are stored as 2-D matrices")
        for attr in ("grad", "adam_m", "adam_v"):
            if getattr(self, attr) is None:
                setattr(self, attr, np.zeros_like(self.value))

    @classmethod
    def glorot(cls, name, shape, rng, fan_in=None, fan_out=None):
        fan_in = shape[0] if fan_in is None else fan_in
        fan_out = shape[1] if fan_out is None else fan_out
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return cls(name, rng.uniform(-lim, lim, size=shape))

    @classmethod
    def zeros(cls, name, shape):
        return cls(name, np.zeros(shape))

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def copy(self, name=None) -> "ParamBlock":
        return ParamBlock(name or self.name, self.value.copy(), self.grad.copy(),
                          self.adam_m.copy(), self.adam_v.copy(), self.step_count)


def linear_block(prefix, n_in, n_out, rng):
    """(weight, bias) pair for an affine map with Glorot-uniform weights."""
    return (ParamBlock.glorot(f"{prefix}.W", (n_in, n_out), rng),
            ParamBlock.zeros(f"{prefix}.b", (1, n_out)))


# --- ops ------------------------------------------------------------------------


def affine_forward(x, W: ParamBlock, b: ParamBlock):
    if x.shape[-1] != W.shape[0] or b.shape != (1, W.shape[1]):
        raise ShapeError(f"affine: x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W.value + b.value[0]


def affine_backward(grad_y, x, W: ParamBlock, b: ParamBlock):
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_y.reshape(-1, grad_y.shape[-1])
    W.grad += x2.T @ g2
    b.grad += g2.sum(axis=0, keepdims=True)
    return grad_y @ W.value.T


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(grad, x):
    return grad * (x > 0)


def leaky_relu(x, slope=0.2):
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(grad, x, slope=0.2):
    return grad * np.where(x > 0, 1.0, slope)


def logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logistic_backward(grad, y):
    return grad * y * (1.0 - y)


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_backward(grad, x):
    return grad * logistic(x)


def masked_softmax(scores, mask, axis=-1):
    """Softmax over entries where ``mask`` is true; masked entries are exactly 0."""
    mask = np.asarray(mask, dtype=bool)
    # shift by the row max over unmasked entries; masked entries sit at -1e300
    top = (scores + (mask - 1.0) * 1e300).max(axis=axis, keepdims=True)
    if (top < -1e299).any():
        raise ValueError("masked_softmax: a row has no unmasked entries")
    ex = np.exp(np.minimum(scores - top, 0.0)) * mask
    return ex / ex.sum(axis=axis, keepdims=True)


def masked_softmax_backward(grad_w, w, axis=-1):
    return w * (grad_w - (grad_w * w).sum(axis=axis, keepdims=True))


def mse_scalar(pred, target):
    """Squared error and its derivative w.r.t. ``pred``."""
    diff = target - pred
    return diff * diff, -2.0 * diff


# --- optimisation -----------------------------------------------------------------


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 0.01
    beta_m: float = 0.9
    beta_v: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 < self.beta_m < 1 and 0 < self.beta_v < 1):
            raise ValueError("Adam betas must lie in (0, 1)")


def adam_step(blocks, cfg: AdamConfig):
    """One bias-corrected Adam descent step per block; gradients are zeroed after."""
    for p in blocks:
        p.step_count += 1
        p.adam_m *= cfg.beta_m
        p.adam_m += (1 - cfg.beta_m) * p.grad
        p.adam_v *= cfg.beta_v
        p.adam_v += (1 - cfg.beta_v) * p.grad * p.grad
        m_hat = p.adam_m / (1 - cfg.beta_m ** p.step_count)
        v_hat = p.adam_v / (1 - cfg.beta_v ** p.step_count)
        p.value -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
        p.zero_grad()


# --- verification ----------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_block: dict
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)


def grad_check(closure, blocks, h=1e-5, tol=1e-4, coords=None, rng=None) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``closure()`` must return the scalar loss and accumulate gradients into the
    blocks. The error per block is ``|g_a - g_n| / max(|g_a|, |g_n|)`` in the
    Euclidean norm; the report passes when the worst block is within ``tol``.
    With ``coords`` set, only that many randomly drawn entries per block are
    perturbed (and compared).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for p in blocks:
        p.zero_grad()
    closure()
    analytic = {p.name: p.grad.copy() for p in blocks}
    per_block = {}
    for p in blocks:
        num = np.zeros_like(p.value)
        flat_ids = np.arange(p.value.size)
        if coords is not None and coords < p.value.size:
            flat_ids = np.sort(rng.choice(p.value.size, size=coords, replace=False))
        picked = np.zeros(p.value.size, dtype=bool)
        picked[flat_ids] = True
        picked = picked.reshape(p.value.shape)
        for flat in flat_ids:
            idx = np.unravel_index(flat, p.value.shape)
            orig = p.value[idx]
            p.value[idx] = orig + h
            fp = float(closure())
            p.value[idx] = orig - h
            fm = float(closure())
            p.value[idx] = orig
            num[idx] = (fp - fm) / (2 * h)
        a = np.where(picked, analytic[p.name], 0.0)
        denom = max(np.linalg.norm(a), np.linalg.norm(num))
        per_block[p.name] = 0.0 if denom == 0 else float(np.linalg.norm(a - num) / denom)
    for p in blocks:
        p.zero_grad()
    return GradCheckReport(max(per_block.values(), default=0.0), per_block, tol)


# --- persistence -------------------------------------------------------------------


def dump_checkpoint(arrays: dict) -> str:
    """Text checkpoint: header line, then ``name rows cols`` and row-major values."""
    lines = [CHECKPOINT_HEADER]
    for name, arr in arrays.items():
        arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
        if arr.ndim != 2 or " " in name:
            raise ShapeError(f"cannot store {name!r} with shape {arr.shape}")
        lines.append(f"{name} {arr.shape[0]} {arr.shape[1]}")
        for row in arr:
            lines.append(" ".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def parse_checkpoint(text: str) -> dict:
    lines = text.splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_HEADER:
        raise ValueError(f"not a checkpoint (expected header {CHECKPOINT_HEADER!r})")
    out = {}
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        name, rows, cols = lines[i].split()
        rows, cols = int(rows), int(cols)
        vals = [[float(v) for v in lines[i + 1 + r].split()] for r in range(rows)]
        arr = np.array(vals, dtype=np.float64).reshape(rows, cols)
        out[name] = arr
        i += 1 + rows
    return out


def save_blocks(blocks, path, with_optimizer=True):
    arrays = {}
    for p in blocks:
        arrays[p.name] = p.value
        if with_optimizer:
            arrays[f"{p.name}#adam_m"] = p.adam_m
            arrays[f"{p.name}#adam_v"] = p.adam_v
            arrays[f"{p.name}#step"] = np.array([[float(p.step_count)]])
    Path(path).write_text(dump_checkpoint(arrays))


def load_blocks(blocks, path):
    """Load values (and optimiser state when present) into existing blocks."""
    arrays = parse_checkpoint(Path(path).read_text())
    for p in blocks:
        if p.name not in arrays:
            raise KeyError(f"checkpoint has no block {p.name!r}")
        if arrays[p.name].shape != p.shape:
            raise ShapeError(f"{p.name}: checkpoint shape {arrays[p.name].shape} != {p.shape}")
        p.value[...] = arrays[p.name]
        if f"{p.name}#adam_m" in arrays:
            p.adam_m[...] = arrays[f"{p.name}#adam_m"]
            p.adam_v[...] = arrays[f"{p.name}#adam_v"]
            p.step_count = int(arrays[f"{p.name}#step"][0, 0])
        p.zero_grad()
