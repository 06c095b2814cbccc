"""Off-policy training loop: replay buffer, target networks, TD loss, evaluation."""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envsim import (
    ActionError,
    EnvConfig,
    HybridAction,
    N_FEATURES,
    StepRecord,
    V2IEnv,
    observe,
    synth_trace,
    total_cost,
)
from .gatenc import FlatEncoder, GatEncoder
from .nncore import AdamConfig, adam_step, load_blocks, save_blocks
from .pnaf import OuNoise, PnafHead, linear_epsilon, select_action
from .taskgraph import DagGenConfig


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    batch: int = 256
    episodes: int = 20
    tau: float = 0.1
    lr_gat: float = 0.01
    lr_pnaf: float = 0.01
    warmup: int = 500
    seed: int = 0
    capacity: int = 10_000
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_frac: float = 0.5
    ou_theta: float = 0.15
    ou_sigma: float = 0.2
    ou_decay: float = 0.995
    soft_gat_target: bool = False
    reward_scale: float = 0.01
    terminal_on_app: bool = True
    n_max: int = 12

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must be in [0, 1]")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must be in (0, 1]")
        if self.batch < 1 or self.capacity < self.batch or self.warmup < 1:
            raise ValueError("need batch >= 1, capacity >= batch, warmup >= 1")


# --- replay -----------------------------------------------------------------------


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions stored in preallocated arrays."""

    FIELDS = ("feats", "adj", "node", "amask", "idx", "param", "reward",
              "next_feats", "next_adj", "next_node", "next_amask", "terminal")

    def __init__(self, capacity, n_max, n_features=N_FEATURES):
        self.capacity = capacity
        n = n_max
        self.feats = np.zeros((capacity, n, n_features))
        self.adj = np.zeros((capacity, n, n), dtype=bool)
        self.node = np.zeros((capacity, n), dtype=bool)
        self.amask = np.zeros((capacity, 2 * n), dtype=bool)
        self.idx = np.zeros(capacity, dtype=np.int64)
        self.param = np.zeros(capacity)
        self.reward = np.zeros(capacity)
        self.next_feats = np.zeros_like(self.feats)
        self.next_adj = np.zeros_like(self.adj)
        self.next_node = np.zeros_like(self.node)
        self.next_amask = np.zeros_like(self.amask)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.head = 0

    def __len__(self):
        return self.size

    def add(self, obs, action: HybridAction, reward, next_obs, terminal):
        if not np.isfinite(reward):
            raise ValueError(f"non-finite reward {reward}")
        i = self.head
        self.feats[i], self.adj[i], self.node[i], self.amask[i] = (
            obs.features, obs.adjacency, obs.node_mask, obs.action_mask)
        self.idx[i], self.param[i], self.reward[i] = action.index, action.param, reward
        self.next_feats[i], self.next_adj[i], self.next_node[i] = (
            next_obs.features, next_obs.adjacency, next_obs.node_mask)
        self.next_amask[i] = False if terminal else next_obs.action_mask
        self.terminal[i] = terminal
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch, rng):
        return rng.integers(0, self.size, size=batch)

    def gather(self, ids) -> dict:
        return {f: getattr(self, f)[ids] for f in self.FIELDS}

    def sample(self, batch, rng) -> dict:
        return self.gather(self.sample_indices(batch, rng))

    def state_dict(self):
        d = {f: getattr(self, f)[: self.size] for f in self.FIELDS}
        d["meta"] = np.array([self.size, self.head])
        return d

    def load_state_dict(self, d):
        self.size, self.head = (int(v) for v in d["meta"])
        for f in self.FIELDS:
            getattr(self, f)[: self.size] = d[f]


# --- agents -----------------------------------------------------------------------


class Agent:
    """Encoder + head with target copies.

    The encoder target is hard-copied after each update and the head target is
    soft-blended with ``tau``, unless ``soft_gat_target`` is set.
    """

    def __init__(self, kind, build, n_max=12, seed=0):
        self.kind, self.n_max = kind, n_max
        self.encoder, self.head = build(np.random.default_rng([seed, 10]))
        self.target_encoder, self.target_head = build(np.random.default_rng([seed, 10]))
        self.hard_sync_targets()

    def encoder_blocks(self):
        return self.encoder.params()

    def head_blocks(self):
        return self.head.params()

    def blocks(self):
        return self.encoder_blocks() + self.head_blocks()

    def target_blocks(self):
        return self.target_encoder.params() + self.target_head.params()

    def hard_sync_targets(self):
        for src, dst in zip(self.blocks(), self.target_blocks()):
            dst.value[...] = src.value

    def sync_targets(self, tau, soft_gat=False):
        for src, dst in zip(self.encoder_blocks(), self.target_encoder.params()):
            if soft_gat:
                dst.value[...] = tau * src.value + (1 - tau) * dst.value
            else:
                dst.value[...] = src.value
        for src, dst in zip(self.head_blocks(), self.target_head.params()):
            dst.value[...] = tau * src.value + (1 - tau) * dst.value

    def outputs(self, obs):
        enc, _ = self.encoder.forward(obs.features[None], obs.adjacency[None], obs.node_mask[None])
        out, _ = self.head.forward(enc)
        return tuple(o[0] for o in out)

    def act(self, obs, epsilon=0.0, noise=None, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        return select_action(self.outputs(obs), obs.action_mask, self.head, epsilon, noise, rng)

    def targets(self, batch, gamma, reward_scale=1.0):
        """TD targets ``r + gamma * max_a' V'(s', a')``; terminal rows bootstrap 0."""
        enc, _ = self.target_encoder.forward(batch["next_feats"], batch["next_adj"],
                                             batch["next_node"])
        out, _ = self.target_head.forward(enc)
        boot = self.target_head.max_valid(out, batch["next_amask"])
        boot = np.where(batch["terminal"] | ~np.isfinite(boot), 0.0, boot)
        return reward_scale * batch["reward"] + gamma * boot

    def loss_and_grads(self, batch, z):
        """Mean squared TD error; gradients accumulate into the online blocks."""
        enc, ectx = self.encoder.forward(batch["feats"], batch["adj"], batch["node"])
        out, hctx = self.head.forward(enc)
        q = self.head.q_taken(out, batch["idx"], batch["param"])
        diff = z - q
        loss = float(np.mean(diff * diff))
        gq = -2.0 * diff / len(diff)
        g_enc = self.head.backward(self.head.q_taken_backward(gq, out, batch["idx"],
                                                              batch["param"]), hctx)
        self.encoder.backward(g_enc, ectx)
        return loss

    def save(self, path):
        save_blocks(self.blocks(), path)
        save_blocks(self.target_blocks(), str(path) + ".target", with_optimizer=False)

    def load(self, path):
        load_blocks(self.blocks(), path)
        target = Path(str(path) + ".target")
        if target.exists():
            load_blocks(self.target_blocks(), target)
        else:
            self.hard_sync_targets()


def make_dhvo(n_max=12, seed=0, heads=2, head_dim=6, hidden=128, directed=False):
    def build(rng):
        enc = GatEncoder(n_max, N_FEATURES, heads, head_dim, directed=directed, rng=rng)
        return enc, PnafHead(enc.out_dim, n_max, hidden, rng)
    return Agent("DHVO", build, n_max, seed)


def make_pnaf_flat(n_max=12, seed=0, hidden=128):
    def build(rng):
        enc = FlatEncoder(n_max, N_FEATURES)
        return enc, PnafHead(enc.out_dim, n_max, hidden, rng)
    return Agent("PNAF_FLAT", build, n_max, seed)


# --- training ---------------------------------------------------------------------


@dataclass
class EpisodeLog:
    episode: int
    mean_tesc: float
    mean_loss: float
    epsilon: float


def default_traces(seed, count=4, len_s=100):
    return [synth_trace(1000 * seed + i, len_s) for i in range(count)]


def make_env(env_cfg: EnvConfig | None = None, seed=0, traces=None, dag_cfg=None) -> V2IEnv:
    return V2IEnv(env_cfg or EnvConfig(), traces if traces is not None else default_traces(seed),
                  dag_cfg or DagGenConfig(), seed)


class Trainer:
    def __init__(self, agent: Agent, env: V2IEnv, cfg: TrainConfig):
        self.agent, self.env, self.cfg = agent, env, cfg
        s = cfg.seed
        self.act_rng = np.random.default_rng([s, 11])
        self.replay_rng = np.random.default_rng([s, 12])
        self.noise = OuNoise(2 * agent.n_max, cfg.ou_theta, cfg.ou_sigma,
                             rng=np.random.default_rng([s, 13]))
        self.buffer = ReplayBuffer(cfg.capacity, agent.n_max)
        self.adam_enc = AdamConfig(cfg.lr_gat)
        self.adam_head = AdamConfig(cfg.lr_pnaf)
        dag = env.dag_cfg
        self.expected_steps = cfg.episodes * env.cfg.apps_per_episode * (dag.n_min + dag.n_max) / 2
        self.total_steps = 0
        self.log: list[EpisodeLog] = []
        self.use_noise = agent.kind != "GDQN"

    def epsilon(self):
        return linear_epsilon(self.total_steps, self.expected_steps, self.cfg.eps_start,
                              self.cfg.eps_end, self.cfg.eps_frac)

    def update(self):
        batch = self.buffer.sample(self.cfg.batch, self.replay_rng)
        z = self.agent.targets(batch, self.cfg.gamma, self.cfg.reward_scale)
        loss = self.agent.loss_and_grads(batch, z)
        adam_step(self.agent.encoder_blocks(), self.adam_enc)
        adam_step(self.agent.head_blocks(), self.adam_head)
        self.agent.sync_targets(self.cfg.tau, self.cfg.soft_gat_target)
        return loss

    def run_episode(self) -> EpisodeLog:
        env, agent, n_max = self.env, self.agent, self.agent.n_max
        env.reset()
        self.noise.reset()
        obs = env.observe(n_max)
        reward_sum, losses, apps, eps = 0.0, [], 0, self.epsilon()
        while True:
            eps = self.epsilon()
            action = agent.act(obs, eps, self.noise if self.use_noise else None, self.act_rng)
            if not obs.action_mask[action.index]:
                raise ActionError(f"agent chose masked action {action}")
            out = env.step(action)
            next_obs = env.observe(n_max)
            terminal = out.app_done if self.cfg.terminal_on_app else out.episode_done
            self.buffer.add(obs, action, out.reward, next_obs, terminal)
            reward_sum += out.reward
            apps += out.app_done
            self.total_steps += 1
            if len(self.buffer) >= self.cfg.warmup:
                losses.append(self.update())
            obs = next_obs
            if out.episode_done:
                break
        self.noise.sigma *= self.cfg.ou_decay
        entry = EpisodeLog(len(self.log) + 1, -reward_sum / apps,
                           float(np.mean(losses)) if losses else float("nan"), eps)
        self.log.append(entry)
        return entry

    def train(self, episodes=None, log_path=None):
        todo = self.cfg.episodes - len(self.log) if episodes is None else episodes
        for _ in range(todo):
            self.run_episode()
            if log_path is not None:
                write_metric_log(self.log, log_path)
        return self.log

    # -- persistence ---------------------------------------------------------------

    def save(self, run_dir):
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        self.agent.save(run_dir / "params.ckpt")
        np.savez(run_dir / "replay.npz", **self.buffer.state_dict())
        state = {
            "total_steps": self.total_steps,
            "noise_sigma": self.noise.sigma,
            "noise_x": self.noise.x.tolist(),
            "rng": {name: getattr(self, name).bit_generator.state
                    for name in ("act_rng", "replay_rng")},
            "noise_rng": self.noise.rng.bit_generator.state,
            "env": self.env.rng_state(),
            "log": [dataclasses.asdict(e) for e in self.log],
        }
        (run_dir / "trainer.json").write_text(json.dumps(state))
        write_metric_log(self.log, run_dir / "metrics.csv")

    def load(self, run_dir):
        run_dir = Path(run_dir)
        self.agent.load(run_dir / "params.ckpt")
        with np.load(run_dir / "replay.npz") as d:
            self.buffer.load_state_dict(dict(d))
        state = json.loads((run_dir / "trainer.json").read_text())
        self.total_steps = state["total_steps"]
        self.noise.sigma = state["noise_sigma"]
        self.noise.x = np.array(state["noise_x"])
        for name, st in state["rng"].items():
            getattr(self, name).bit_generator.state = st
        self.noise.rng.bit_generator.state = state["noise_rng"]
        self.env.set_rng_state(state["env"])
        self.log = [EpisodeLog(**e) for e in state["log"]]


def train(agent: Agent, env: V2IEnv, cfg: TrainConfig, log_path=None):
    """Run ``cfg.episodes`` episodes; returns the agent and its metric log."""
    t = Trainer(agent, env, cfg)
    t.train(log_path=log_path)
    return agent, t.log


def write_metric_log(log, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "mean_tesc", "mean_loss", "epsilon"])
        for e in log:
            w.writerow([e.episode, repr(e.mean_tesc), repr(e.mean_loss), repr(e.epsilon)])


# --- evaluation -------------------------------------------------------------------


@dataclass
class EvalResult:
    mean_tesc: float
    action_counts: dict
    mean_time: float
    mean_energy: float
    mean_charge: float
    migrations: int
    n_apps: int
    n_tasks: int
    app_costs: list = field(default_factory=list, repr=False)
    neg_reward_mean: float = 0.0


def agent_policy(agent: Agent, snap_grid=None):
    """Greedy policy; ``snap_grid`` rounds the parameter to that many grid points."""
    def policy(state, env):
        a = agent.act(observe(state, env.cfg, agent.n_max), 0.0, None)
        if snap_grid:
            a = HybridAction(a.y, a.k, snap(a.param, snap_grid))
        return a
    policy.__name__ = agent.kind
    return policy


def snap(param, grid):
    return round(param * (grid - 1)) / (grid - 1)


def evaluate(policy, env: V2IEnv, n_apps=50) -> EvalResult:
    """Roll ``policy(state, env)`` over ``n_apps`` applications."""
    cfg = env.cfg
    counts = {0: 0, 1: 0}
    apps, tasks, migrations = 0, 0, 0
    tt = ee = cc = 0.0
    app_costs, app_records, reward_sums, rsum = [], [], [], 0.0
    state = env.reset()
    while apps < n_apps:
        action = policy(state, env)
        out = env.step(action)
        counts[action.k] += 1
        tasks += 1
        migrations += out.migrated
        tt, ee, cc = tt + out.time_s, ee + out.energy_j, cc + out.charge_usd
        app_records.append(StepRecord.from_outcome(out))
        rsum += out.reward
        if out.app_done:
            apps += 1
            app_costs.append(total_cost(app_records, cfg))
            reward_sums.append(rsum)
            app_records, rsum = [], 0.0
        state = env.reset() if out.episode_done and apps < n_apps else env.state
    return EvalResult(float(np.mean(app_costs)), counts, tt / apps, ee / apps, cc / apps,
                      migrations, apps, tasks, app_costs, -float(np.mean(reward_sums)))
