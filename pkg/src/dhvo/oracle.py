"""Exhaustive reference solver for tiny instances, plus an independent cost check.

``enumerate_optimal`` searches every topological order, offload bit-vector and
grid assignment of the continuous parameter. ``validate_env`` replays a plan
through the environment and again through straight-line formulas that share
no helpers with ``envsim``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import envsim
from .envsim import EnvConfig, HybridAction, StepRecord, VehicleTrace
from .taskgraph import TaskDag


class OracleRefusal(RuntimeError):
    def __init__(self, n_tasks, search_size, max_tasks):
        super().__init__(f"{n_tasks} tasks exceeds max_tasks={max_tasks}; "
                         f"search would visit {search_size} plans")
        self.search_size = search_size


@dataclass(frozen=True)
class OracleConfig:
    max_tasks: int = 5
    f_grid: int = 5
    p_grid: int = 5

    def __post_init__(self):
        if self.f_grid < 2 or self.p_grid < 2:
            raise ValueError("grids need at least 2 points")
        if not 1 <= self.max_tasks <= 5:
            raise ValueError("max_tasks must be in 1..5")

    def points(self, k):
        g = self.f_grid if k == 0 else self.p_grid
        return [i / (g - 1) for i in range(g)]


@dataclass(frozen=True)
class EnvFixture:
    """Everything the environment needs to replay one application deterministically."""

    cfg: EnvConfig
    trace: VehicleTrace
    clock_s: float = 0.0

    def initial_state(self, dag):
        return envsim.initial_state(dag, self.trace, self.clock_s)


@dataclass
class Plan:
    order: list
    choices: list  # (k, param) per position of ``order``
    cost: float
    records: list = field(default_factory=list)

    def actions(self):
        return [HybridAction(y, k, p) for y, (k, p) in zip(self.order, self.choices)]

    def encoding(self):
        return tuple((y, k, p) for y, (k, p) in zip(self.order, self.choices))


def search_size(dag: TaskDag, cfg: OracleConfig) -> int:
    orders = sum(1 for _ in dag.all_topological_orders()) if dag.n <= 8 else math.factorial(dag.n)
    return orders * (cfg.f_grid + cfg.p_grid) ** dag.n


def replay(dag: TaskDag, fixture: EnvFixture, actions) -> list[StepRecord]:
    """Step the environment through ``actions`` (fading off)."""
    state = fixture.initial_state(dag)
    records = []
    for a in actions:
        out = envsim.step(state, fixture.trace, a, fixture.cfg)
        records.append(StepRecord.from_outcome(out))
        state = out.next_state
    return records


def enumerate_optimal(dag: TaskDag, fixture: EnvFixture, cfg: OracleConfig = OracleConfig()) -> Plan:
    if fixture.cfg.fading_enabled:
        raise ValueError("oracle requires a deterministic environment (fading off)")
    if dag.n > cfg.max_tasks:
        raise OracleRefusal(dag.n, search_size(dag, cfg), cfg.max_tasks)
    env_cfg, trace = fixture.cfg, fixture.trace
    options = [(k, p) for k in (0, 1) for p in cfg.points(k)]
    local_memo = {}
    best = {"cost": math.inf, "enc": None}
    order, choices = [], []

    def cost_of(y, k, p, clock, position):
        if k == 0:
            key = (y, p)
            if key not in local_memo:
                local_memo[key] = envsim.execute_task(env_cfg, dag.tasks[y], 0, p, clock,
                                                      position, trace)
            return local_memo[key]
        return envsim.execute_task(env_cfg, dag.tasks[y], k, p, clock, position, trace)

    def dfs(done, clock, u):
        if u >= best["cost"]:
            return  # costs are nonnegative, so a prefix at or above the best cannot win
        if len(done) == dag.n:
            best["cost"], best["enc"] = u, (list(order), list(choices))
            return
        position = trace.distance(clock)
        for y in sorted(dag.ready_set(done)):
            for k, p in options:
                t, e, c, _ = cost_of(y, k, p, clock, position)
                order.append(y)
                choices.append((k, p))
                dfs(done | {y}, clock + t, u + envsim.weighted_cost(env_cfg, t, e, c))
                order.pop()
                choices.pop()

    dfs(frozenset(), fixture.clock_s, 0.0)
    best_order, best_choices = best["enc"]
    plan = Plan(best_order, best_choices, best["cost"])
    plan.records = replay(dag, fixture, plan.actions())
    return plan


def rollout_policy(policy, dag: TaskDag, fixture: EnvFixture, cfg: OracleConfig | None = None):
    """Run ``policy(state, env_like)`` on one application; snap params to the oracle grid."""
    state = fixture.initial_state(dag)
    env_like = _FixtureEnv(fixture, state)
    actions, records = [], []
    while len(state.done) < dag.n:
        env_like.state = state
        a = policy(state, env_like)
        if cfg is not None:
            g = cfg.f_grid if a.k == 0 else cfg.p_grid
            a = HybridAction(a.y, a.k, round(a.param * (g - 1)) / (g - 1))
        out = envsim.step(state, fixture.trace, a, fixture.cfg)
        actions.append(a)
        records.append(StepRecord.from_outcome(out))
        state = out.next_state
    u = envsim.total_cost(records, fixture.cfg)
    return Plan([a.y for a in actions], [(a.k, a.param) for a in actions], u, records)


class _FixtureEnv:
    def __init__(self, fixture, state):
        self.cfg, self.trace, self.state = fixture.cfg, fixture.trace, state


# --- independent straight-line evaluation ------------------------------------------


def straight_line_records(dag: TaskDag, fixture: EnvFixture, plan, slot_offset=0):
    """Per-task (t, e, c, migrated) from the closed-form model, written out longhand.

    ``slot_offset`` shifts which speed sample covers each slot; it exists only to
    inject a known defect for negative-control tests.
    """
    cfg, speeds = fixture.cfg, fixture.trace.speeds_mps
    dt = fixture.trace.slot_s
    n_s = len(speeds)

    def dist(t0, t1):
        # walk slot by slot from t0 to t1
        total, t = 0.0, t0
        while t < t1:
            slot = math.floor(t / dt)
            edge = min((slot + 1) * dt, t1)
            total += (edge - t) * speeds[(slot + slot_offset) % n_s]
            t = edge
        return total

    h = (3e8 / (4 * math.pi * cfg.carrier_hz * cfg.channel_dist_m)) ** cfg.path_loss_exp
    snr_unit = cfg.antenna_gain * h / cfg.noise_w
    wsum = cfg.beta1 + cfg.beta2 + cfg.beta3
    b1, b2, b3 = cfg.beta1 / wsum, cfg.beta2 / wsum, cfg.beta3 / wsum
    clock = fixture.clock_s
    pos = dist(0.0, clock)
    out = []
    for y, (k, param) in zip(plan.order, plan.choices):
        task = dag.tasks[y]
        if k == 0:
            f = cfg.f_local_max_hz - (1 - param) * (cfg.f_local_max_hz - cfg.f_min_frac * cfg.f_local_max_hz)
            t = task.cycles / f
            e = cfg.kappa * task.cycles * f ** 2
            c = 0.0
            mig = False
        else:
            p = cfg.p_max_w - (1 - param) * (cfg.p_max_w - cfg.p_min_frac * cfg.p_max_w)
            r_up = cfg.bandwidth_hz * math.log2(1 + p * snr_unit)
            r_down = cfg.bandwidth_hz * math.log2(1 + cfg.p_down_w * snr_unit)
            t_up = task.input_bits / r_up
            base = t_up + task.cycles / cfg.f_edge_hz + task.output_bits / r_down
            d_i = math.fmod(pos, cfg.rsu_coverage_m)
            mig = d_i + dist(clock, clock + base) >= cfg.rsu_coverage_m
            t = base + cfg.t_prop_s * mig
            e = p * t_up
            c = task.cycles / 1e6 * (cfg.price_compute + cfg.price_migration * mig)
        out.append((t, e, c, bool(mig)))
        pos += dist(clock, clock + t)
        clock += t
    u = sum(b1 * t + b2 * e + b3 * c for t, e, c, _ in out)
    return out, u


@dataclass
class ValidationReport:
    max_rel_error: float
    mismatched_migrations: int
    env_cost: float
    reference_cost: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.mismatched_migrations == 0 and self.max_rel_error <= self.tol


def _rel(a, b):
    scale = max(abs(a), abs(b))
    return 0.0 if scale == 0 else abs(a - b) / scale


def validate_env(dag: TaskDag, fixture: EnvFixture, plan, tol=1e-9, slot_offset=0) -> ValidationReport:
    records = replay(dag, fixture, plan.actions())
    env_u = -sum(r.reward for r in records)
    ref, ref_u = straight_line_records(dag, fixture, plan, slot_offset)
    worst, mism = _rel(env_u, ref_u), 0
    for r, (t, e, c, mig) in zip(records, ref):
        worst = max(worst, _rel(r.t, t), _rel(r.e, e), _rel(r.c, c))
        mism += r.migrated != mig
    return ValidationReport(worst, mism, env_u, ref_u, tol)


def random_plan(dag: TaskDag, rng: np.random.Generator) -> Plan:
    """A uniformly random valid execution plan (random ready task, bit and param)."""
    done, order, choices = set(), [], []
    while len(done) < dag.n:
        ready = sorted(dag.ready_set(done))
        y = ready[rng.integers(len(ready))]
        order.append(y)
        choices.append((int(rng.integers(2)), float(rng.random())))
        done.add(y)
    return Plan(order, choices, float("nan"))


def random_fixture(rng: np.random.Generator, n_tasks: int, cfg: EnvConfig | None = None,
                   trace_len_s: int = 100):
    """A random ``n_tasks``-node dag, a synthetic trace and a random start clock."""
    from .taskgraph import DagGenConfig, generate_dag
    dag = generate_dag(DagGenConfig(n_min=n_tasks, n_max=n_tasks), rng)
    trace = envsim.synth_trace(int(rng.integers(2**31)), len_s=trace_len_s)
    clock = float(rng.uniform(0.0, trace_len_s))
    return dag, EnvFixture(cfg or EnvConfig(), trace, clock)


def grid_gap(dag: TaskDag, fixture: EnvFixture, coarse: int = 5, fine: int = 10):
    """``U(coarse grid) - U(fine grid)``: how much the discretisation costs on this fixture."""
    u_c = enumerate_optimal(dag, fixture, OracleConfig(f_grid=coarse, p_grid=coarse)).cost
    u_f = enumerate_optimal(dag, fixture, OracleConfig(f_grid=fine, p_grid=fine)).cost
    return u_c - u_f
