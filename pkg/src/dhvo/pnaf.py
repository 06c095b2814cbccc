"""Parameterized normalized-advantage head over a hybrid action space.

Discrete actions are ``(y, k)`` pairs flattened to ``2*y + k``; each owns one
continuous parameter in [0, 1] (CPU frequency when ``k=0``, transmit power when
``k=1``). For every discrete action the head emits a value ``V``, the
maximising parameter ``mu`` and a positive curvature ``Lf``; the action value is

    Q(s, a_d, a_c) = V(s, a_d) - 0.5 * Lf(s, a_d)**2 * (a_c - mu(s, a_d))**2

so the supremum over ``a_c`` is ``V`` and is attained at ``mu``.
"""

from __future__ import annotations

import numpy as np

from .envsim import ActionError, HybridAction
from .nncore import (
    ShapeError,
    affine_backward,
    affine_forward,
    linear_block,
    logistic,
    logistic_backward,
    relu,
    relu_backward,
    softplus,
    softplus_backward,
)

L_FLOOR = 1e-6

__all__ = [
    "HybridAction", "PnafHead", "OuNoise", "advantage", "q_value", "select_action",
    "max_valid_v", "linear_epsilon",
]


def advantage(a_param, mu, Lf):
    d = np.asarray(a_param) - mu
    return -0.5 * Lf * Lf * d * d


class PnafHead:
    def __init__(self, in_dim, n_max=12, hidden=128, rng=None, prefix="pnaf"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_dim, self.n_max, self.hidden = in_dim, n_max, hidden
        self.n_discrete = 2 * n_max
        self.Wh, self.bh = linear_block(f"{prefix}.hidden", in_dim, hidden, rng)
        self.Wv, self.bv = linear_block(f"{prefix}.V", hidden, self.n_discrete, rng)
        self.Wm, self.bm = linear_block(f"{prefix}.mu", hidden, self.n_discrete, rng)
        self.Wl, self.bl = linear_block(f"{prefix}.L", hidden, self.n_discrete, rng)

    def params(self):
        return [self.Wh, self.bh, self.Wv, self.bv, self.Wm, self.bm, self.Wl, self.bl]

    def forward(self, enc):
        enc = np.asarray(enc, dtype=np.float64)
        if enc.shape[-1] != self.in_dim:
            raise ShapeError(f"head expects width {self.in_dim}, got {enc.shape[-1]}")
        pre_h = affine_forward(enc, self.Wh, self.bh)
        hid = relu(pre_h)
        V = affine_forward(hid, self.Wv, self.bv)
        mu = logistic(affine_forward(hid, self.Wm, self.bm))
        pre_l = affine_forward(hid, self.Wl, self.bl)
        Lf = softplus(pre_l) + L_FLOOR
        return (V, mu, Lf), (enc, pre_h, hid, mu, pre_l)

    def backward(self, grads, cache):
        """``grads`` = (dV, dmu, dLf) with the output shapes; returns d enc."""
        gV, gmu, gL = grads
        enc, pre_h, hid, mu, pre_l = cache
        g_hid = affine_backward(gV, hid, self.Wv, self.bv)
        g_hid = g_hid + affine_backward(logistic_backward(gmu, mu), hid, self.Wm, self.bm)
        g_hid = g_hid + affine_backward(softplus_backward(gL, pre_l), hid, self.Wl, self.bl)
        return affine_backward(relu_backward(g_hid, pre_h), enc, self.Wh, self.bh)

    # -- pieces used by the learner ------------------------------------------------

    def q_taken(self, out, idx, param):
        """Q of the taken hybrid action for each batch row."""
        V, mu, Lf = out
        rows = np.arange(len(idx))
        return V[rows, idx] + advantage(param, mu[rows, idx], Lf[rows, idx])

    def q_taken_backward(self, gQ, out, idx, param):
        V, mu, Lf = out
        rows = np.arange(len(idx))
        m, l = mu[rows, idx], Lf[rows, idx]
        d = param - m
        gV, gmu, gL = np.zeros_like(V), np.zeros_like(mu), np.zeros_like(Lf)
        gV[rows, idx] = gQ
        gmu[rows, idx] = gQ * l * l * d
        gL[rows, idx] = -gQ * l * d * d
        return gV, gmu, gL

    def max_valid(self, out, mask):
        V = out[0]
        return np.where(mask, V, -np.inf).max(axis=-1)

    def random_param(self, rng):
        return float(rng.random())

    def greedy(self, out, mask):
        """(discrete index, param) maximising Q over valid actions; ties -> lowest index."""
        V, mu, _ = out
        idx = int(np.argmax(np.where(mask, V, -np.inf)))
        return idx, float(mu[idx])


def q_value(enc, action: HybridAction, head: PnafHead, mask=None) -> float:
    idx = action.index
    if mask is not None and not mask[idx]:
        raise ActionError(f"discrete action {idx} is masked")
    (V, mu, Lf), _ = head.forward(np.asarray(enc)[None])
    return float(V[0, idx] + advantage(action.param, mu[0, idx], Lf[0, idx]))


def max_valid_v(enc, mask, head: PnafHead, terminal=False) -> float:
    if terminal or not np.any(mask):
        return 0.0
    out, _ = head.forward(np.asarray(enc)[None])
    return float(head.max_valid(tuple(o[0] for o in out), mask))


class OuNoise:
    """Ornstein-Uhlenbeck process, one coordinate per discrete action."""

    def __init__(self, size, theta=0.15, sigma=0.2, dt=1.0, rng=None):
        self.size, self.theta, self.sigma, self.dt = size, theta, sigma, dt
        self.rng = np.random.default_rng(0) if rng is None else rng
        self.x = np.zeros(size)

    def reset(self):
        self.x[:] = 0.0

    def sample(self):
        self.x = (self.x - self.theta * self.x * self.dt
                  + self.sigma * np.sqrt(self.dt) * self.rng.standard_normal(self.size))
        return self.x


def select_action(out, mask, head, epsilon, noise: OuNoise | None, rng) -> HybridAction:
    """Epsilon-greedy over valid discrete actions; OU-perturbed parameter when greedy.

    ``out`` is the single-state head output (V, mu, Lf) or the head-specific
    equivalent understood by ``head.greedy``.
    """
    mask = np.asarray(mask, dtype=bool)
    valid = np.flatnonzero(mask)
    if valid.size == 0:
        raise ActionError("no valid actions")
    if rng.random() < epsilon:
        idx = int(valid[rng.integers(valid.size)])
        return HybridAction(idx // 2, idx % 2, head.random_param(rng))
    idx, param = head.greedy(out, mask)
    if noise is not None:
        param = param + float(noise.sample()[idx])
    param = min(max(param, 0.0), 1.0)
    return HybridAction(idx // 2, idx % 2, param)


def linear_epsilon(step, total_steps, start=1.0, end=0.05, frac=0.5):
    """Linear decay from ``start`` to ``end`` over the first ``frac`` of training."""
    horizon = max(1.0, frac * total_steps)
    return end + (start - end) * max(0.0, 1.0 - step / horizon)
