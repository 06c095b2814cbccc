"""Single-vehicle V2I offloading environment.

The vehicle drives past evenly spaced RSUs of coverage ``rsu_coverage_m``; each
decision epoch executes one ready task either locally (DVFS frequency ``f``) or
on the edge server of the current RSU (transmit power ``p``). Offloaded tasks
that finish after the vehicle has left the serving RSU pay a migration delay
and price.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .taskgraph import CYCLES_PER_MCYCLE, DagGenConfig, TaskDag, TaskSpec, generate_dag

LIGHT_SPEED = 3e8
N_FEATURES = 11
SPEED_WINDOW = 5


class ConfigError(ValueError):
    pass


class ActionError(RuntimeError):
    """Raised when an action violates the precedence mask or parameter bounds."""


@dataclass(frozen=True)
class EnvConfig:
    rsu_coverage_m: float = 200.0
    slot_s: float = 1.0
    bandwidth_hz: float = 2e6
    f_local_max_hz: float = 1e8
    f_edge_hz: float = 1e9
    p_max_w: float = 0.2
    p_down_w: float = 0.2
    kappa: float = 1e-25
    antenna_gain: float = 4.11
    channel_dist_m: float = 100.0
    t_prop_s: float = 5.0
    carrier_hz: float = 915e6
    path_loss_exp: float = 3.0
    noise_w: float = 1e-12
    price_compute: float = 0.1  # $ per Mcycle
    price_migration: float = 2.0  # $ per Mcycle
    beta1: float = 0.33
    beta2: float = 0.33
    beta3: float = 0.33
    fading_enabled: bool = False
    f_min_frac: float = 0.05
    p_min_frac: float = 0.05
    apps_per_episode: int = 20
    # feature normalisation constants
    di_norm_bits: float = 2.8e7
    do_norm_bits: float = 2.8e7
    cycles_norm: float = 1.2e9
    speed_norm_mps: float = 40.0

    def __post_init__(self):
        positive = [
            "rsu_coverage_m", "slot_s", "bandwidth_hz", "f_local_max_hz", "f_edge_hz",
            "p_max_w", "p_down_w", "kappa", "antenna_gain", "channel_dist_m", "carrier_hz",
            "noise_w", "di_norm_bits", "do_norm_bits", "cycles_norm", "speed_norm_mps",
        ]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        nonneg = ["t_prop_s", "path_loss_exp", "price_compute", "price_migration"]
        for name in nonneg:
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("f_min_frac", "p_min_frac"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must be in (0, 1), got {getattr(self, name)}")
        if self.apps_per_episode < 1:
            raise ConfigError("apps_per_episode must be >= 1")
        betas = (self.beta1, self.beta2, self.beta3)
        if min(betas) < 0 or sum(betas) <= 0:
            raise ConfigError(f"weights must be nonnegative with positive sum, got {betas}")
        s = sum(betas)
        for name, b in zip(("beta1", "beta2", "beta3"), betas):
            object.__setattr__(self, name, b / s)

    @property
    def f_min_hz(self) -> float:
        return self.f_min_frac * self.f_local_max_hz

    @property
    def p_min_w(self) -> float:
        return self.p_min_frac * self.p_max_w

    def replace(self, **kw) -> "EnvConfig":
        return dataclasses.replace(self, **kw)


def _parse_value(ftype, raw: str, key: str):
    raw = raw.strip()
    try:
        if ftype in (bool, "bool"):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype in (int, "int"):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_flat_config(text: str, cls, base=None):
    """Parse ``key = value`` lines into a dataclass, starting from ``base``."""
    types = {f.name: f.type for f in dataclasses.fields(cls) if not f.name.startswith("_")}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(types[key], raw, key)
    base = base if base is not None else cls()
    return dataclasses.replace(base, **values)


def dump_flat_config(cfg) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        if f.name.startswith("_"):
            continue
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, tuple):
            continue
        lines.append(f"{f.name} = {v!r}" if isinstance(v, float) else f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def load_env_config(path) -> EnvConfig:
    return parse_flat_config(Path(path).read_text(), EnvConfig)


# --- mobility -----------------------------------------------------------------


@dataclass(frozen=True)
class VehicleTrace:
    speeds_mps: tuple[float, ...]
    slot_s: float = 1.0
    _cum: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        sp = tuple(float(v) for v in self.speeds_mps)
        if not sp:
            raise ConfigError("trace must be nonempty")
        if min(sp) < 0 or not all(math.isfinite(v) for v in sp):
            raise ConfigError("trace speeds must be finite and >= 0")
        object.__setattr__(self, "speeds_mps", sp)
        object.__setattr__(self, "_cum", np.concatenate([[0.0], np.cumsum(sp)]))

    def __len__(self):
        return len(self.speeds_mps)

    def speed_at_slot(self, k: int) -> float:
        """Speed of 1-slot sample ``k``; the trace repeats cyclically."""
        return self.speeds_mps[k % len(self.speeds_mps)]

    def distance(self, t: float) -> float:
        """Distance travelled over ``[0, t]``, piecewise constant per slot."""
        if t <= 0:
            return 0.0
        k = int(t // self.slot_s)
        loops, r = divmod(k, len(self.speeds_mps))
        whole = (loops * self._cum[-1] + self._cum[r]) * self.slot_s
        return float(whole + (t - k * self.slot_s) * self.speeds_mps[r])

    def integral(self, t0: float, t1: float) -> float:
        return self.distance(t1) - self.distance(t0)

    def window(self, clock: float, width: int = SPEED_WINDOW) -> tuple[float, ...]:
        """The ``width`` most recent fully elapsed slots, zero-padded on the left."""
        k = int(clock // self.slot_s)
        return tuple(self.speed_at_slot(j) if j >= 0 else 0.0 for j in range(k - width, k))


def load_trace(path) -> VehicleTrace:
    speeds = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != 2:
                raise ConfigError(f"{path}:{lineno}: expected 't_s,speed_mps'")
            try:
                t, v = int(parts[0]), float(parts[1])
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: cannot parse {line.strip()!r}") from None
            if t != len(speeds):
                raise ConfigError(f"{path}:{lineno}: expected t={len(speeds)}, got {t}")
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"{path}:{lineno}: speed must be finite and >= 0")
            speeds.append(v)
    if not speeds:
        raise ConfigError(f"{path}: empty trace")
    return VehicleTrace(tuple(speeds))


def save_trace(trace: VehicleTrace, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t, v in enumerate(trace.speeds_mps):
            fh.write(f"{t},{v!r}\n")


def synth_trace(seed: int, len_s: int = 100, v_min: float = 5.0, v_max: float = 35.0) -> VehicleTrace:
    """Bounded, smoothed random walk standing in for a recorded speed profile."""
    if v_min < 0 or v_max < v_min or len_s < 1:
        raise ConfigError("need 0 <= v_min <= v_max and len_s >= 1")
    rng = np.random.default_rng(seed)
    span = v_max - v_min
    v = v_min + span * rng.random()
    acc = 0.0
    out = []
    for _ in range(len_s):
        out.append(v)
        acc = 0.7 * acc + rng.normal(0.0, span / 15.0 if span > 0 else 0.0)
        v = v + acc
        if v > v_max:
            v, acc = 2 * v_max - v, -acc
        if v < v_min:
            v, acc = 2 * v_min - v, -acc
        v = min(max(v, v_min), v_max)
    return VehicleTrace(tuple(out))


# --- channel and cost model ---------------------------------------------------


def channel_gain(cfg: EnvConfig, fading_draw: float | None = None) -> float:
    g = (LIGHT_SPEED / (4 * math.pi * cfg.carrier_hz * cfg.channel_dist_m)) ** cfg.path_loss_exp
    if fading_draw is not None:
        g *= fading_draw
    return g


def uplink_rate(cfg: EnvConfig, p_w: float, gain: float) -> float:
    return cfg.bandwidth_hz * math.log2(1 + p_w * cfg.antenna_gain * gain / cfg.noise_w)


def downlink_rate(cfg: EnvConfig, gain: float) -> float:
    return uplink_rate(cfg, cfg.p_down_w, gain)


def local_cost(cfg: EnvConfig, task: TaskSpec, f_hz: float) -> tuple[float, float]:
    f = min(max(f_hz, cfg.f_min_hz), cfg.f_local_max_hz)
    return task.cycles / f, cfg.kappa * task.cycles * f * f


def offload_cost(cfg: EnvConfig, task: TaskSpec, p_w: float, state: "EnvState",
                 trace: VehicleTrace, fading: tuple[float, float] | None = None):
    """(time, energy, charge, migrated) for offloading ``task`` from ``state``."""
    return _offload(cfg, task, p_w, state.clock_s, state.position_m, trace, fading)


def _offload(cfg, task, p_w, clock, position, trace, fading=None):
    p = min(max(p_w, cfg.p_min_w), cfg.p_max_w)
    g_up = channel_gain(cfg, fading[0] if fading else None)
    g_down = channel_gain(cfg, fading[1] if fading else None)
    t_up = task.input_bits / uplink_rate(cfg, p, g_up)
    t_exec = task.cycles / cfg.f_edge_hz
    t_down = task.output_bits / downlink_rate(cfg, g_down)
    tau = t_up + t_exec + t_down
    offset = position % cfg.rsu_coverage_m
    # indicator evaluated on the pre-penalty duration, then the penalty is added
    migrated = offset + trace.integral(clock, clock + tau) >= cfg.rsu_coverage_m
    mcycles = task.cycles / CYCLES_PER_MCYCLE
    time = tau + (cfg.t_prop_s if migrated else 0.0)
    energy = p * t_up
    charge = mcycles * cfg.price_compute + (mcycles * cfg.price_migration if migrated else 0.0)
    return time, energy, charge, bool(migrated)


def decode_param(cfg: EnvConfig, k: int, param: float) -> float:
    """Map a normalised parameter in [0, 1] onto [f_min, f_max] or [p_min, p_max]."""
    if k == 0:
        lo, hi = cfg.f_min_hz, cfg.f_local_max_hz
    else:
        lo, hi = cfg.p_min_w, cfg.p_max_w
    return hi - (1.0 - param) * (hi - lo)


def execute_task(cfg: EnvConfig, task: TaskSpec, k: int, param: float, clock: float,
                 position: float, trace: VehicleTrace, fading=None):
    """Cost of one decision epoch: (time, energy, charge, migrated)."""
    value = decode_param(cfg, k, param)
    if k == 0:
        t, e = local_cost(cfg, task, value)
        return t, e, 0.0, False
    return _offload(cfg, task, value, clock, position, trace, fading)


def weighted_cost(cfg: EnvConfig, t: float, e: float, c: float) -> float:
    return cfg.beta1 * t + cfg.beta2 * e + cfg.beta3 * c


# --- MDP ----------------------------------------------------------------------


@dataclass(frozen=True)
class HybridAction:
    y: int
    k: int
    param: float

    def __post_init__(self):
        if self.k not in (0, 1):
            raise ActionError(f"offload bit must be 0 or 1, got {self.k}")
        if not 0.0 <= self.param <= 1.0:
            raise ActionError(f"param must lie in [0, 1], got {self.param}")

    @property
    def index(self) -> int:
        return 2 * self.y + self.k


@dataclass(frozen=True)
class EnvState:
    clock_s: float
    position_m: float
    dag: TaskDag
    done: frozenset[int]
    speed_window: tuple[float, ...]
    apps_completed: int = 0

    @property
    def remaining(self) -> int:
        return self.dag.n - len(self.done)


def initial_state(dag: TaskDag, trace: VehicleTrace, clock_s: float = 0.0,
                  apps_completed: int = 0) -> EnvState:
    return EnvState(clock_s, trace.distance(clock_s), dag, frozenset(),
                    trace.window(clock_s), apps_completed)


@dataclass(frozen=True)
class StepOutcome:
    time_s: float
    energy_j: float
    charge_usd: float
    migrated: bool
    reward: float
    next_state: EnvState
    episode_done: bool
    app_done: bool
    action: HybridAction


def step(state: EnvState, trace: VehicleTrace, action: HybridAction, cfg: EnvConfig,
         rng: np.random.Generator | None = None) -> StepOutcome:
    if action.y not in state.dag.ready_set(state.done):
        raise ActionError(f"task {action.y} is not ready (done={sorted(state.done)})")
    fading = None
    if cfg.fading_enabled and action.k == 1:
        if rng is None:
            raise ActionError("fading is enabled but no random stream was supplied")
        fading = (float(rng.exponential(1.0)), float(rng.exponential(1.0)))
    task = state.dag.tasks[action.y]
    t, e, c, mig = execute_task(cfg, task, action.k, action.param, state.clock_s,
                                state.position_m, trace, fading)
    clock = state.clock_s + t
    done = state.done | {action.y}
    app_done = len(done) == state.dag.n
    apps = state.apps_completed + int(app_done)
    nxt = EnvState(clock, trace.distance(clock), state.dag, done, trace.window(clock), apps)
    reward = -weighted_cost(cfg, t, e, c)
    return StepOutcome(t, e, c, mig, reward, nxt, app_done and apps >= cfg.apps_per_episode,
                       app_done, action)


# --- observation --------------------------------------------------------------


@dataclass(frozen=True)
class Observation:
    features: np.ndarray  # (n_max, 11)
    node_mask: np.ndarray  # (n_max,) bool
    adjacency: np.ndarray  # (n_max, n_max) bool, directed i -> j
    action_mask: np.ndarray  # (2 * n_max,) bool, index 2*y + k


def observe(state: EnvState, cfg: EnvConfig, n_max: int) -> Observation:
    dag = state.dag
    n = dag.n
    if n > n_max:
        raise ConfigError(f"dag has {n} tasks but padding width is {n_max}")
    feats = np.zeros((n_max, N_FEATURES))
    co = (state.position_m % cfg.rsu_coverage_m) / cfg.rsu_coverage_m
    left = state.remaining / n
    speeds = np.asarray(state.speed_window) / cfg.speed_norm_mps
    for t in dag.tasks:
        feats[t.id, 0] = t.input_bits / cfg.di_norm_bits
        feats[t.id, 1] = t.output_bits / cfg.do_norm_bits
        feats[t.id, 2] = t.cycles / cfg.cycles_norm
        feats[t.id, 3] = 1.0 if t.id in state.done else 0.0
        feats[t.id, 4] = co
        feats[t.id, 5] = left
        feats[t.id, 6:] = speeds
    node_mask = np.zeros(n_max, dtype=bool)
    node_mask[:n] = True
    adj = np.zeros((n_max, n_max), dtype=bool)
    adj[:n, :n] = dag.adjacency()
    amask = np.zeros(2 * n_max, dtype=bool)
    for y in dag.ready_set(state.done):
        amask[2 * y] = amask[2 * y + 1] = True
    return Observation(feats, node_mask, adj, amask)


# --- accounting ---------------------------------------------------------------


@dataclass(frozen=True)
class StepRecord:
    task_id: int
    k: int
    param: float
    t: float
    e: float
    c: float
    migrated: bool
    reward: float

    @classmethod
    def from_outcome(cls, out: StepOutcome) -> "StepRecord":
        a = out.action
        return cls(a.y, a.k, a.param, out.time_s, out.energy_j, out.charge_usd,
                   out.migrated, out.reward)


def total_cost(records, cfg: EnvConfig) -> float:
    u = 0.0
    for r in records:
        u += weighted_cost(cfg, r.t, r.e, r.c)
    return u


RECORD_FIELDS = ["task_id", "k", "param", "t", "e", "c", "migrated", "reward"]


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    for r in records:
        w.writerow([r.task_id, r.k, repr(r.param), repr(r.t), repr(r.e), repr(r.c),
                    int(r.migrated), repr(r.reward)])
    return buf.getvalue()


def records_from_csv(text: str) -> list[StepRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [StepRecord(int(r["task_id"]), int(r["k"]), float(r["param"]), float(r["t"]),
                       float(r["e"]), float(r["c"]), bool(int(r["migrated"])),
                       float(r["reward"])) for r in rows]


# --- episodic wrapper ---------------------------------------------------------


class V2IEnv:
    """Episodes of ``cfg.apps_per_episode`` applications on one continuing clock.

    DAGs, fading draws and trace choice come from separate streams derived from
    ``seed`` so the application sequence does not depend on the policy.
    """

    def __init__(self, cfg: EnvConfig, traces, dag_cfg: DagGenConfig | None = None,
                 seed: int = 0):
        self.cfg = cfg
        self.traces = list(traces) if not isinstance(traces, VehicleTrace) else [traces]
        if not self.traces:
            raise ConfigError("need at least one trace")
        self.dag_cfg = dag_cfg or DagGenConfig()
        self.seed = seed
        self.dag_rng = np.random.default_rng([seed, 0])
        self.fade_rng = np.random.default_rng([seed, 1])
        self.episode = -1
        self.state: EnvState | None = None
        self.trace = self.traces[0]

    def reset(self) -> EnvState:
        self.episode += 1
        self.trace = self.traces[self.episode % len(self.traces)]
        self.state = initial_state(generate_dag(self.dag_cfg, self.dag_rng), self.trace)
        return self.state

    def step(self, action: HybridAction) -> StepOutcome:
        out = step(self.state, self.trace, action, self.cfg, self.fade_rng)
        nxt = out.next_state
        if out.app_done and not out.episode_done:
            nxt = dataclasses.replace(nxt, dag=generate_dag(self.dag_cfg, self.dag_rng),
                                      done=frozenset())
            out = dataclasses.replace(out, next_state=nxt)
        self.state = nxt
        return out

    def observe(self, n_max: int) -> Observation:
        return observe(self.state, self.cfg, n_max)

    def rng_state(self) -> dict:
        return {"episode": self.episode, "dag": self.dag_rng.bit_generator.state,
                "fade": self.fade_rng.bit_generator.state}

    def set_rng_state(self, st: dict) -> None:
        self.episode = st["episode"]
        self.dag_rng.bit_generator.state = st["dag"]
        self.fade_rng.bit_generator.state = st["fade"]
