"""Command line, experiment sweeps and result persistence.

Exit codes: 0 ok, 1 usage, 2 configuration, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import oracle
from .baselines import ANALYTIC_POLICIES, make_agent
from .envsim import (
    ConfigError,
    EnvConfig,
    dump_flat_config,
    load_trace,
    parse_flat_config,
    records_to_csv,
    save_trace,
    synth_trace,
)
from .nncore import grad_check
from .taskgraph import DagGenConfig, generate_dag
from .trainer import (
    TrainConfig,
    Trainer,
    agent_policy,
    default_traces,
    evaluate,
    make_env,
)

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

# sweepable names that live on the task generator rather than on EnvConfig
DAG_PARAMS = {
    "cycles_mcycles": "centre of the per-task cycle range, +-200 Mcycles",
    "data_mbyte": "centre of the input and output size ranges, +-0.5 MByte",
}


class UsageError(Exception):
    pass


# --- configuration ---------------------------------------------------------------


def load_configs(env_path=None, train_path=None, overrides=()):
    """Resolve env and train configs from optional files plus ``key=value`` overrides."""
    env = parse_flat_config(Path(env_path).read_text(), EnvConfig) if env_path else EnvConfig()
    tr = parse_flat_config(Path(train_path).read_text(), TrainConfig) if train_path else TrainConfig()
    env_keys = {f.name for f in dataclasses.fields(EnvConfig)}
    tr_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    env_lines, tr_lines = [], []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key = item.split("=", 1)[0].strip()
        if key in env_keys:
            env_lines.append(item)
        elif key in tr_keys:
            tr_lines.append(item)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    env = parse_flat_config("\n".join(env_lines), EnvConfig, env)
    tr = parse_flat_config("\n".join(tr_lines), TrainConfig, tr)
    return env, tr


def dag_config_for(name, value, base: DagGenConfig | None = None) -> DagGenConfig:
    base = base or DagGenConfig()
    if name == "cycles_mcycles":
        c = float(value) * 1e6
        return dataclasses.replace(base, cycles_range=(c - 2e8, c + 2e8))
    if name == "data_mbyte":
        b = float(value) * 8e6
        return dataclasses.replace(base, di_range=(b - 4e6, b + 4e6), do_range=(b - 4e6, b + 4e6))
    raise ConfigError(f"{name!r} is not a task-generator parameter")


# --- experiments -----------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    param: str | None
    values: tuple
    policies: tuple
    repetitions: int = 1
    seed_base: int = 0
    n_apps: int = 50
    episodes: int = 40
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str | None = None

    def __post_init__(self):
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        env_keys = {f.name for f in dataclasses.fields(EnvConfig)}
        if self.param is not None and self.param not in env_keys and self.param not in DAG_PARAMS:
            raise ConfigError(f"swept parameter {self.param!r} is not in the config schema")
        if self.param is None and len(self.values) != 1:
            raise ConfigError("a spec without a swept parameter takes exactly one value")
        for p in self.policies:
            _check_policy_name(p)

    def rows(self):
        for value in self.values:
            for rep in range(self.repetitions):
                for pol in self.policies:
                    yield pol, value, rep


def _check_policy_name(name):
    if name.upper() in ANALYTIC_POLICIES:
        return
    try:
        make_agent(name, n_max=2)
    except ValueError:
        raise ConfigError(f"unknown policy {name!r}") from None


@dataclass
class ResultRow:
    policy: str
    param: str
    value: object
    rep: int
    seed: int
    mean_tesc: float
    mean_time: float
    mean_energy: float
    mean_charge: float
    local: int
    offload: int
    migrations: int
    n_apps: int

    FIELDS = ("policy", "param", "value", "rep", "seed", "mean_tesc", "mean_time",
              "mean_energy", "mean_charge", "local", "offload", "migrations", "n_apps")

    def as_list(self):
        return [getattr(self, f) if not isinstance(getattr(self, f), float) else repr(getattr(self, f))
                for f in self.FIELDS]


def builtin_sweeps(repetitions=1, episodes=40) -> dict[str, ExperimentSpec]:
    """One spec per figure of the evaluation section."""
    five = ("DHVO", "ALE", "AO", "GOE")
    common = dict(repetitions=repetitions, episodes=episodes)
    return {
        "coverage": ExperimentSpec("coverage", "rsu_coverage_m", (150.0, 200.0, 250.0, 300.0),
                                   five, **common),
        "bandwidth": ExperimentSpec("bandwidth", "bandwidth_hz",
                                    (1.5e6, 2.0e6, 2.25e6, 2.5e6, 3.0e6), five, **common),
        "cycles": ExperimentSpec("cycles", "cycles_mcycles", (800.0, 900.0, 1000.0, 1100.0, 1200.0),
                                 five, **common),
        "datasize": ExperimentSpec("datasize", "data_mbyte", (2.5, 2.75, 3.0, 3.25, 3.5), five,
                                   **common),
        "compute_price": ExperimentSpec("compute_price", "price_compute", (0.05, 0.1, 0.15, 0.2),
                                        five, **common),
        "migration_price": ExperimentSpec("migration_price", "price_migration",
                                          (1.0, 2.0, 3.0, 4.0), five, **common),
        "actions": ExperimentSpec("actions", None, (None,), five, n_apps=200, **common),
        "fading": ExperimentSpec("fading", "fading_enabled", (False, True), ("DHVO",), **common),
        "ablation": ExperimentSpec("ablation", None, (None,),
                                   ("DHVO", "PNAF_FLAT", "GDQN2", "GDQN5", "GDQN10"), **common),
    }


def _row_configs(spec: ExperimentSpec, value):
    env, dag_cfg = spec.env, DagGenConfig()
    if spec.param in DAG_PARAMS:
        dag_cfg = dag_config_for(spec.param, value)
    elif spec.param is not None:
        env = env.replace(**{spec.param: value})
    return env, dag_cfg


def run_row(spec: ExperimentSpec, policy: str, value, rep: int, log_dir=None) -> ResultRow:
    """Train (if needed) and evaluate one (policy, value, repetition) cell."""
    seed = spec.seed_base + rep
    env_cfg, dag_cfg = _row_configs(spec, value)
    traces = default_traces(seed)
    if policy.upper() in ANALYTIC_POLICIES:
        pol = ANALYTIC_POLICIES[policy.upper()]
    else:
        agent = make_agent(policy, spec.train.n_max, seed)
        cfg = dataclasses.replace(spec.train, episodes=spec.episodes, seed=seed)
        log_path = None
        if log_dir is not None:
            log_path = Path(log_dir) / f"{spec.name}_{policy}_{value}_{rep}.metrics.csv"
        Trainer(agent, make_env(env_cfg, seed, traces, dag_cfg), cfg).train(log_path=log_path)
        pol = agent_policy(agent)
    res = evaluate(pol, make_env(env_cfg, 1000 + seed, traces, dag_cfg), spec.n_apps)
    return ResultRow(policy, spec.param or "", value, rep, seed, res.mean_tesc, res.mean_time,
                     res.mean_energy, res.mean_charge, res.action_counts[0],
                     res.action_counts[1], res.migrations, res.n_apps)


def _run_row_args(args):
    return run_row(*args)


def run_sweep(spec: ExperimentSpec, out_csv, workers=1, log_dir=None, echo=None):
    """Run every row of ``spec``; each finished row is flushed to ``out_csv`` immediately."""
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    jobs = [(spec, pol, value, rep, log_dir) for pol, value, rep in spec.rows()]
    rows = []
    with open(out_csv, "w", newline="") as fh:
        fh.write(f"# sweep {spec.name}: param={spec.param} values={list(spec.values)} "
                 f"policies={list(spec.policies)} reps={spec.repetitions} "
                 f"seed_base={spec.seed_base} n_apps={spec.n_apps} episodes={spec.episodes}\n")
        for line in dump_flat_config(spec.env).splitlines():
            fh.write(f"# env {line}\n")
        for line in dump_flat_config(spec.train).splitlines():
            fh.write(f"# train {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ResultRow.FIELDS)
        fh.flush()

        def emit(row):
            rows.append(row)
            w.writerow(row.as_list())
            fh.flush()
            if echo:
                echo(row)

        if workers <= 1:
            for job in jobs:
                emit(run_row(*job))
        else:
            with ProcessPoolExecutor(workers) as pool:
                for row in pool.map(_run_row_args, jobs):
                    emit(row)
    return rows


def read_results(path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


# --- audits ----------------------------------------------------------------------


def composite_gradcheck(n_fixtures=20, seed=0, coords=48, batch=4, tol=1e-4):
    """Finite-difference audit of the GAT + PNAF + TD-loss gradient on 3-node graphs."""
    from .envsim import initial_state, observe
    rng = np.random.default_rng(seed)
    cfg = EnvConfig()
    reports = []
    for i in range(n_fixtures):
        agent = make_agent("DHVO", n_max=3, seed=seed * 1000 + i)
        obs = []
        for _ in range(batch):
            dag = generate_dag(DagGenConfig(n_min=3, n_max=3, seed=0), rng)
            trace = synth_trace(int(rng.integers(2**31)))
            state = initial_state(dag, trace, float(rng.uniform(0, 100)))
            obs.append(observe(state, cfg, 3))
        feats = np.stack([o.features for o in obs])
        adj = np.stack([o.adjacency for o in obs])
        node = np.stack([o.node_mask for o in obs])
        idx = np.array([int(rng.choice(np.flatnonzero(o.action_mask))) for o in obs])
        batch_d = {"feats": feats, "adj": adj, "node": node, "idx": idx,
                   "param": rng.random(batch)}
        z = rng.normal(0.0, 1.0, batch)
        blocks = agent.blocks()

        def closure():
            return agent.loss_and_grads(batch_d, z)

        reports.append(grad_check(closure, blocks, coords=coords,
                                  rng=np.random.default_rng([seed, i]), tol=tol))
    return reports


def oracle_suite(trials=1000, fixtures=20, seed=0, max_tasks=4, policies=("ALE", "AO", "GOE"),
                 refine=0):
    """Environment cross-check plus lower-bound check of the analytic baselines."""
    rng = np.random.default_rng(seed)
    worst, failures = 0.0, 0
    for _ in range(trials):
        dag, fx = oracle.random_fixture(rng, int(rng.integers(1, 8)))
        rep = oracle.validate_env(dag, fx, oracle.random_plan(dag, rng))
        worst = max(worst, rep.max_rel_error)
        failures += not rep.ok
    bound_violations, gaps = [], []
    ocfg = oracle.OracleConfig()
    for i in range(fixtures):
        dag, fx = oracle.random_fixture(rng, int(rng.integers(1, max_tasks + 1)))
        best = oracle.enumerate_optimal(dag, fx, ocfg)
        for name in policies:
            u = oracle.rollout_policy(ANALYTIC_POLICIES[name], dag, fx, ocfg).cost
            if u < best.cost:
                bound_violations.append((i, name, u, best.cost))
        if i < refine and dag.n <= 3:
            gaps.append(oracle.grid_gap(dag, fx))
    return {"trials": trials, "max_rel_error": worst, "env_mismatches": failures,
            "fixtures": fixtures, "bound_violations": bound_violations, "grid_gaps": gaps}


# --- CLI ------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="dhvo", description="Hybrid-action offloading for DAG applications in V2I.")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    def configs(sp):
        sp.add_argument("--env-config", help="flat key = value environment config")
        sp.add_argument("--train-config", help="flat key = value training config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any env or train key")
        sp.add_argument("--trace", action="append", default=[], help="speed trace CSV (repeatable)")

    t = sub.add_parser("train", help="train a learner and write checkpoints and a metric log")
    configs(t)
    t.add_argument("--agent", default="DHVO")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--episodes", type=int, default=None)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--resume", action="store_true", help="continue from the run directory")

    e = sub.add_parser("evaluate", help="roll out a baseline or a trained run")
    configs(e)
    e.add_argument("--policy", required=True, help="ALE, AO, GOE or a run directory")
    e.add_argument("--apps", type=int, default=50)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--plan-out", help="write the first application's step records as CSV")
    e.add_argument("--json", action="store_true")

    s = sub.add_parser("sweep", help="run a builtin or ad-hoc experiment grid")
    configs(s)
    s.add_argument("--name", help="builtin sweep: " + ", ".join(builtin_sweeps()))
    s.add_argument("--param")
    s.add_argument("--values", help="comma separated")
    s.add_argument("--policies", help="comma separated")
    s.add_argument("--reps", type=int, default=None)
    s.add_argument("--seed-base", type=int, default=0)
    s.add_argument("--apps", type=int, default=None)
    s.add_argument("--episodes", type=int, default=None)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True, help="results CSV")
    s.add_argument("--log-dir", help="where learners write their metric logs")

    o = sub.add_parser("oracle-check", help="environment cross-check and oracle lower bounds")
    o.add_argument("--trials", type=int, default=1000)
    o.add_argument("--fixtures", type=int, default=20)
    o.add_argument("--refine", type=int, default=0, help="fixtures to re-solve on a 10-point grid")
    o.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("trace-gen", help="write a synthetic speed trace")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--length", type=int, default=100, help="slots")
    g.add_argument("--vmin", type=float, default=5.0)
    g.add_argument("--vmax", type=float, default=35.0)
    g.add_argument("--out", required=True)

    c = sub.add_parser("gradcheck", help="finite-difference audit of the full network")
    c.add_argument("--fixtures", type=int, default=20)
    c.add_argument("--coords", type=int, default=48)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-4)
    return p


def _traces(paths, seed):
    return [load_trace(p) for p in paths] if paths else default_traces(seed)


def _cmd_train(a):
    env_cfg, tr_cfg = load_configs(a.env_config, a.train_config, a.set)
    if a.seed is not None:
        tr_cfg = dataclasses.replace(tr_cfg, seed=a.seed)
    if a.episodes is not None:
        tr_cfg = dataclasses.replace(tr_cfg, episodes=a.episodes)
    out = Path(a.out)
    meta_path = out / "run.json"
    if a.resume:
        if not meta_path.exists():
            raise FileNotFoundError(f"no run to resume in {out}")
        meta = json.loads(meta_path.read_text())
        env_cfg = parse_flat_config(meta["env"], EnvConfig)
        episodes = tr_cfg.episodes
        tr_cfg = dataclasses.replace(parse_flat_config(meta["train"], TrainConfig), episodes=episodes)
        agent_kind = meta["agent"]
    else:
        agent_kind = a.agent
    traces = _traces(a.trace, tr_cfg.seed)
    agent = make_agent(agent_kind, tr_cfg.n_max, tr_cfg.seed)
    trainer = Trainer(agent, make_env(env_cfg, tr_cfg.seed, traces), tr_cfg)
    if a.resume:
        trainer.load(out)
    out.mkdir(parents=True, exist_ok=True)
    meta_path.write_text(json.dumps({"agent": agent_kind, "env": dump_flat_config(env_cfg),
                                     "train": dump_flat_config(tr_cfg)}, indent=1))
    t0 = time.time()
    while len(trainer.log) < tr_cfg.episodes:
        e = trainer.run_episode()
        print(f"episode {e.episode:3d}  tesc {e.mean_tesc:10.3f}  loss {e.mean_loss:12.4f}  "
              f"eps {e.epsilon:.3f}  {time.time() - t0:6.1f}s", flush=True)
        trainer.save(out)
    trainer.save(out)
    return EXIT_OK


def load_run(run_dir):
    """Rebuild the trained agent stored in a ``train`` run directory."""
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "run.json").read_text())
    tr_cfg = parse_flat_config(meta["train"], TrainConfig)
    agent = make_agent(meta["agent"], tr_cfg.n_max, tr_cfg.seed)
    agent.load(run_dir / "params.ckpt")
    return agent, parse_flat_config(meta["env"], EnvConfig)


def _cmd_evaluate(a):
    env_cfg, _ = load_configs(a.env_config, a.train_config, a.set)
    name = a.policy.upper()
    if name in ANALYTIC_POLICIES:
        pol = ANALYTIC_POLICIES[name]
    else:
        if not Path(a.policy, "run.json").exists():
            raise FileNotFoundError(f"{a.policy!r} is neither a baseline nor a run directory")
        agent, run_env = load_run(a.policy)
        if not a.env_config and not a.set:
            env_cfg = run_env
        pol = agent_policy(agent)
    env = make_env(env_cfg, 1000 + a.seed, _traces(a.trace, a.seed))
    if a.plan_out:
        from .envsim import StepRecord
        st, recs = env.reset(), []
        while True:
            out = env.step(pol(st, env))
            recs.append(StepRecord.from_outcome(out))
            st = env.state
            if out.app_done:
                break
        Path(a.plan_out).write_text(records_to_csv(recs))
        env = make_env(env_cfg, 1000 + a.seed, _traces(a.trace, a.seed))
    r = evaluate(pol, env, a.apps)
    summary = {"policy": a.policy, "apps": r.n_apps, "tasks": r.n_tasks,
               "mean_tesc": r.mean_tesc, "mean_time": r.mean_time,
               "mean_energy": r.mean_energy, "mean_charge": r.mean_charge,
               "local": r.action_counts[0], "offload": r.action_counts[1],
               "migrations": r.migrations}
    if a.json:
        print(json.dumps(summary))
    else:
        for k, v in summary.items():
            print(f"{k:12s} {v}")
    return EXIT_OK


def _parse_value_list(param, text):
    out = []
    for raw in text.split(","):
        raw = raw.strip()
        if param == "fading_enabled":
            out.append(raw.lower() in ("1", "true", "yes", "on"))
        else:
            try:
                out.append(float(raw))
            except ValueError:
                raise ConfigError(f"bad sweep value {raw!r}") from None
    return tuple(out)


def _cmd_sweep(a):
    env_cfg, tr_cfg = load_configs(a.env_config, a.train_config, a.set)
    if a.name:
        specs = builtin_sweeps()
        if a.name not in specs:
            raise ConfigError(f"unknown builtin sweep {a.name!r}")
        spec = specs[a.name]
    else:
        if not a.policies:
            raise UsageError("sweep: give --name or --policies (with optional --param/--values)")
        if bool(a.param) != bool(a.values):
            raise UsageError("sweep: --param and --values go together")
        values = _parse_value_list(a.param, a.values) if a.param else (None,)
        spec = ExperimentSpec("custom", a.param, values, tuple(a.policies.split(",")))
    changes = {"env": env_cfg, "train": tr_cfg, "seed_base": a.seed_base}
    if a.policies and a.name:
        changes["policies"] = tuple(a.policies.split(","))
    if a.reps is not None:
        changes["repetitions"] = a.reps
    if a.apps is not None:
        changes["n_apps"] = a.apps
    if a.episodes is not None:
        changes["episodes"] = a.episodes
    spec = dataclasses.replace(spec, **changes)

    def echo(row):
        print(f"{row.policy:10s} {row.param}={row.value} rep={row.rep} tesc={row.mean_tesc:.4f} "
              f"local={row.local} offload={row.offload} mig={row.migrations}", flush=True)

    run_sweep(spec, a.out, a.workers, a.log_dir, echo)
    return EXIT_OK


def _cmd_oracle(a):
    res = oracle_suite(a.trials, a.fixtures, a.seed, refine=a.refine)
    print(f"cross-check: {res['trials']} plans, max relative disagreement "
          f"{res['max_rel_error']:.3e}, mismatches {res['env_mismatches']}")
    print(f"lower bound: {res['fixtures']} fixtures, violations {len(res['bound_violations'])}")
    for gap in res["grid_gaps"]:
        print(f"grid refinement 5 -> 10 points: dU = {gap:.6g}")
    ok = res["env_mismatches"] == 0 and not res["bound_violations"]
    return EXIT_OK if ok else EXIT_RUNTIME


def _cmd_trace(a):
    if a.length < 1 or not 0 <= a.vmin < a.vmax:
        raise ConfigError("need length >= 1 and 0 <= vmin < vmax")
    save_trace(synth_trace(a.seed, a.length, a.vmin, a.vmax), a.out)
    print(f"wrote {a.length} slots to {a.out}")
    return EXIT_OK


def _cmd_gradcheck(a):
    reports = composite_gradcheck(a.fixtures, a.seed, a.coords, tol=a.tol)
    worst = max(r.max_rel_error for r in reports)
    print(f"{len(reports)} fixtures, worst blockwise relative error {worst:.3e} (tol {a.tol:g})")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_RUNTIME


COMMANDS = {"train": _cmd_train, "evaluate": _cmd_evaluate, "sweep": _cmd_sweep,
            "oracle-check": _cmd_oracle, "trace-gen": _cmd_trace, "gradcheck": _cmd_gradcheck}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    try:
        return COMMANDS[args.cmd](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, FileNotFoundError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


cli = main
