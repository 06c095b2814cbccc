"""Comparison policies (ALE, AO, GOE) and the ablation learners (GDQN-X, PNAF_FLAT)."""

from __future__ import annotations

import enum

import numpy as np

from .envsim import (
    EnvConfig,
    EnvState,
    HybridAction,
    N_FEATURES,
    channel_gain,
    downlink_rate,
    uplink_rate,
)
from .gatenc import GatEncoder
from .nncore import ShapeError, affine_backward, affine_forward, linear_block, relu, relu_backward
from .trainer import Agent, make_dhvo, make_pnaf_flat

GOE_SPEED_MPS = 30 / 3.6


class PolicyKind(str, enum.Enum):
    ALE = "ALE"
    AO = "AO"
    GOE = "GOE"
    GDQN = "GDQN"
    PNAF_FLAT = "PNAF_FLAT"
    DHVO = "DHVO"


def _next_task(state: EnvState, order="lowest") -> int:
    ready = state.dag.ready_set(state.done)
    if order == "lowest":
        return min(ready)
    if order == "highest":
        return max(ready)
    raise ValueError(f"unknown ordering {order!r}")


def ale_policy(state: EnvState, env=None) -> HybridAction:
    """Lowest-id ready task, locally at peak frequency."""
    return HybridAction(_next_task(state), 0, 1.0)


def ao_policy(state: EnvState, env=None) -> HybridAction:
    """Lowest-id ready task, offloaded at peak transmit power."""
    return HybridAction(_next_task(state), 1, 1.0)


def goe_estimate(cfg: EnvConfig, task) -> float:
    """Offload duration forecast at peak power, without the migration penalty."""
    g = channel_gain(cfg)
    return (task.input_bits / uplink_rate(cfg, cfg.p_max_w, g) + task.cycles / cfg.f_edge_hz
            + task.output_bits / downlink_rate(cfg, g))


def goe_policy(state: EnvState, cfg: EnvConfig, order="lowest") -> HybridAction:
    """Offload iff a 30 km/h forecast keeps the vehicle inside the current RSU."""
    y = _next_task(state, order)
    offset = state.position_m % cfg.rsu_coverage_m
    reach = offset + GOE_SPEED_MPS * goe_estimate(cfg, state.dag.tasks[y])
    return HybridAction(y, 1 if reach < cfg.rsu_coverage_m else 0, 1.0)


def _goe_env_policy(state, env):
    return goe_policy(state, env.cfg)


ANALYTIC_POLICIES = {"ALE": ale_policy, "AO": ao_policy, "GOE": _goe_env_policy}


# --- GDQN-X -------------------------------------------------------------------------


class DqnHead:
    """Q-network over (task, offload bit, grid point); grid has ``X`` points on [0, 1]."""

    def __init__(self, in_dim, n_max=12, grid=10, hidden=128, rng=None, prefix="dqn"):
        if grid < 2:
            raise ValueError("grid size must be >= 2")
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_dim, self.n_max, self.grid = in_dim, n_max, grid
        self.n_discrete = 2 * n_max
        self.points = np.linspace(0.0, 1.0, grid)
        self.Wh, self.bh = linear_block(f"{prefix}.hidden", in_dim, hidden, rng)
        self.Wq, self.bq = linear_block(f"{prefix}.Q", hidden, self.n_discrete * grid, rng)

    def params(self):
        return [self.Wh, self.bh, self.Wq, self.bq]

    def forward(self, enc):
        enc = np.asarray(enc, dtype=np.float64)
        if enc.shape[-1] != self.in_dim:
            raise ShapeError(f"head expects width {self.in_dim}, got {enc.shape[-1]}")
        pre = affine_forward(enc, self.Wh, self.bh)
        hid = relu(pre)
        return (affine_forward(hid, self.Wq, self.bq),), (enc, pre, hid)

    def backward(self, grads, cache):
        enc, pre, hid = cache
        g_hid = affine_backward(grads[0], hid, self.Wq, self.bq)
        return affine_backward(relu_backward(g_hid, pre), enc, self.Wh, self.bh)

    def grid_index(self, param):
        return np.rint(np.asarray(param) * (self.grid - 1)).astype(np.int64)

    def q_taken(self, out, idx, param):
        rows = np.arange(len(idx))
        return out[0][rows, idx * self.grid + self.grid_index(param)]

    def q_taken_backward(self, gQ, out, idx, param):
        rows = np.arange(len(idx))
        g = np.zeros_like(out[0])
        g[rows, idx * self.grid + self.grid_index(param)] = gQ
        return (g,)

    def _full_mask(self, mask):
        return np.repeat(np.asarray(mask, dtype=bool), self.grid, axis=-1)

    def max_valid(self, out, mask):
        return np.where(self._full_mask(mask), out[0], -np.inf).max(axis=-1)

    def random_param(self, rng):
        return float(self.points[rng.integers(self.grid)])

    def greedy(self, out, mask):
        a = int(np.argmax(np.where(self._full_mask(mask), out[0], -np.inf)))
        return a // self.grid, float(self.points[a % self.grid])


def make_gdqn(grid=10, n_max=12, seed=0, heads=2, head_dim=6, hidden=128):
    def build(rng):
        enc = GatEncoder(n_max, N_FEATURES, heads, head_dim, rng=rng)
        return enc, DqnHead(enc.out_dim, n_max, grid, hidden, rng)
    return Agent("GDQN", build, n_max, seed)


def make_agent(kind: str, n_max=12, seed=0) -> Agent:
    """Build a learner by name: ``DHVO``, ``PNAF_FLAT`` or ``GDQN<X>`` (e.g. ``GDQN10``)."""
    kind = kind.upper()
    if kind == "DHVO":
        return make_dhvo(n_max, seed)
    if kind in ("PNAF_FLAT", "PNAF"):
        return make_pnaf_flat(n_max, seed)
    if kind.startswith("GDQN") or kind.startswith("DQN"):
        digits = kind.lstrip("GDQN")
        return make_gdqn(int(digits) if digits else 10, n_max, seed)
    raise ValueError(f"unknown learner {kind!r}")
