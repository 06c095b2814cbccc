"""The ten acceptance criteria, each at its stated tolerance.

Every test records one pass/fail line, printed in the terminal summary.
Learning checks (7, 9) and the trained-agent oracle bound (8) share one
session-scoped pool of 40-episode runs.
"""

import time

import numpy as np
import pytest

from dhvo import envsim, oracle
from dhvo.baselines import ANALYTIC_POLICIES
from dhvo.envsim import EnvConfig, HybridAction, TaskSpec, channel_gain, local_cost, uplink_rate
from dhvo.gatenc import GatEncoder, neighbor_mask
from dhvo.harness import composite_gradcheck
from dhvo.nncore import load_blocks, save_blocks
from dhvo.pnaf import OuNoise, PnafHead, advantage, q_value, select_action
from dhvo.taskgraph import DagGenConfig, generate_dag
from dhvo.trainer import (
    TrainConfig,
    Trainer,
    agent_policy,
    evaluate,
    make_dhvo,
    make_env,
    write_metric_log,
)

SEEDS = (0, 1, 2, 3, 4)  # preregistered learning seeds


def test_c01_cost_model_exactness(report):
    rng = np.random.default_rng(2024)
    t0 = time.time()
    worst, bad = 0.0, 0
    for _ in range(1000):
        dag, fx = oracle.random_fixture(rng, int(rng.integers(1, 13)))
        rep = oracle.validate_env(dag, fx, oracle.random_plan(dag, rng), tol=1e-9)
        worst = max(worst, rep.max_rel_error)
        bad += not rep.ok
    wall = time.time() - t0
    ok = bad == 0 and worst <= 1e-9 and wall < 10
    report("1", ok, f"1000 fixtures, max rel err {worst:.2e}, mismatches {bad}, {wall:.1f}s")
    assert ok


def test_c02_worked_values(report):
    cfg = EnvConfig()
    ru = uplink_rate(cfg, 0.2, channel_gain(cfg))
    t, e = local_cost(cfg, TaskSpec(0, 1, 1, 1e9), 1e8)
    dag = envsim.TaskDag([TaskSpec(0, 2.4e7, 2.4e7, 1e9)], set())
    rec = oracle.replay(dag, oracle.EnvFixture(cfg, envsim.VehicleTrace((0.0,))),
                        [HybridAction(0, 1, 1.0)])[0]
    ok = (abs(ru / 7.93e6 - 1) <= 0.005 and t == 10.0 and abs(e - 1.0) <= 1e-12
          and abs(rec.c - 100.0) <= 1e-12)
    report("2", ok, f"R_u = {ru:.4e} bit/s, local = ({t}, {e:.15g}), charge = {rec.c:.12g}")
    assert ok


def test_c03_gradient_audit(report):
    t0 = time.time()
    reps = composite_gradcheck(n_fixtures=20, seed=0, tol=1e-4)
    wall = time.time() - t0
    worst = max(r.max_rel_error for r in reps)
    ok = all(r.passed for r in reps) and len(reps) >= 20 and wall < 30
    report("3", ok, f"20 fixtures, worst rel err {worst:.2e}, {wall:.1f}s")
    assert ok


def test_c04_pnaf_properties(report):
    rng = np.random.default_rng(4)
    adv_ok = True
    for _ in range(2000):
        a, mu, L = rng.random(), rng.random(), rng.uniform(1e-6, 10)
        v = advantage(a, mu, L)
        adv_ok &= v <= 0 and (v == 0) == (a == mu or (a - mu) * L == 0)
        adv_ok &= advantage(mu, mu, L) == 0
    head = PnafHead(20, n_max=4, hidden=16, rng=rng)
    inv_ok = True
    for _ in range(50):
        enc = rng.normal(size=20)
        act = HybridAction(int(rng.integers(4)), int(rng.integers(2)), float(rng.random()))
        q0 = q_value(enc, act, head)
        others = [i for i in range(8) if i != act.index]
        saved = [(blk, blk.value.copy()) for blk in (head.Wv, head.bv, head.Wm, head.bm,
                                                      head.Wl, head.bl)]
        for blk, _ in saved:
            blk.value[:, others] += rng.normal(size=(blk.value.shape[0], len(others)))
        inv_ok &= q_value(enc, act, head) == q0
        for blk, v in saved:
            blk.value[...] = v
    noise = OuNoise(8, rng=np.random.default_rng(5))
    bad = 0
    for i in range(10_000):
        mask = rng.random(8) < 0.4
        mask[rng.integers(8)] = True
        out = tuple(o[0] for o in head.forward(rng.normal(size=(1, 20)))[0])
        bad += not mask[select_action(out, mask, head, (i % 21) / 20, noise, rng).index]
    ok = adv_ok and inv_ok and bad == 0
    report("4", ok, f"advantage sign/equality {adv_ok}, other-head invariance {inv_ok}, "
                    f"masked picks {bad}/10000")
    assert ok


def test_c05_gat_properties(report):
    rng = np.random.default_rng(5)
    rows_ok = equi_ok = True
    width = None
    for trial in range(100):
        dag = generate_dag(DagGenConfig(), rng)
        obs = envsim.observe(envsim.initial_state(dag, envsim.synth_trace(trial)), EnvConfig(), 12)
        enc = GatEncoder(rng=np.random.default_rng(trial))
        nb = neighbor_mask(obs.adjacency, obs.node_mask)
        for k in range(2):
            att = enc.attention(obs.features, obs.adjacency, obs.node_mask, k)
            rows_ok &= bool(np.allclose(att.sum(axis=1), 1, atol=1e-12) and (att[~nb] == 0).all())
        base, _ = enc.forward(obs.features, obs.adjacency, obs.node_mask)
        width = base.size // 12
        perm = np.arange(12)
        perm[:dag.n] = rng.permutation(dag.n)
        out, _ = enc.forward(obs.features[perm], obs.adjacency[np.ix_(perm, perm)], obs.node_mask)
        equi_ok &= bool(np.allclose(out.reshape(12, -1), base.reshape(12, -1)[perm], atol=1e-12))
    ok = rows_ok and equi_ok and width == 12
    report("5", ok, f"row sums {rows_ok}, 100 relabelings equivariant {equi_ok}, width {width}")
    assert ok


def _mean_costs(policy, cfg, seeds):
    return np.concatenate([evaluate(policy, make_env(cfg, seed=1000 + s), 50).app_costs
                           for s in seeds])


def test_c06_baseline_invariances(report):
    base = EnvConfig()
    sweeps = {"rsu_coverage_m": (150.0, 200.0, 250.0, 300.0),
              "bandwidth_hz": (1.5e6, 2.25e6, 3e6),
              "price_compute": (0.05, 0.1, 0.2), "price_migration": (1.0, 2.0, 4.0)}
    ale = ANALYTIC_POLICIES["ALE"]
    flat = all(len({evaluate(ale, make_env(base.replace(**{k: v}), seed=1000), 50).mean_tesc
                    for v in vals}) == 1 for k, vals in sweeps.items())
    # fixed fixture set: 5 x 50 tests; a coverage step may rise by at most 2 paired SE
    fixture_seeds = range(5)
    detail, mono = [], True
    for name in ("AO", "GOE"):
        costs = [_mean_costs(ANALYTIC_POLICIES[name], base.replace(rsu_coverage_m=c), fixture_seeds)
                 for c in sweeps["rsu_coverage_m"]]
        for a, b in zip(costs, costs[1:]):
            d = b - a
            mono &= d.mean() <= 2 * d.std(ddof=1) / np.sqrt(len(d))
        detail.append(f"{name} " + "/".join(f"{c.mean():.0f}" for c in costs))
    ok = flat and mono
    report("6", ok, f"ALE bit-identical {flat}; coverage 150..300: {', '.join(detail)}")
    assert ok


def _ale_ao_goe_min(trained, seed):
    return min(trained.baseline(n, seed)["eval"].mean_tesc for n in ("ALE", "AO", "GOE"))


def test_c07a_learning_improves(trained, report):
    run = trained.get("DHVO", 0)
    log = run["log"]
    first = log[0].mean_tesc
    last_q = float(np.mean([e.mean_tesc for e in log[-len(log) // 4:]]))
    ok = last_q < first
    report("7a", ok, f"seed 0: episode 1 TESC {first:.1f} -> final-quarter mean {last_q:.1f}, "
                     f"train {run['wall_s']:.0f}s")
    assert ok


def test_c07b_learning_level(trained, report):
    lines, passes = [], 0
    for s in SEEDS:
        got = trained.get("DHVO", s)["eval"].mean_tesc
        bound = 1.05 * _ale_ao_goe_min(trained, s)
        passes += got <= bound
        lines.append(f"s{s} {got:.1f}/{bound:.1f}")
    seed0 = trained.get("DHVO", 0)["eval"].mean_tesc <= 1.05 * _ale_ao_goe_min(trained, 0)
    ok = seed0 or passes >= 3
    report("7b", ok, f"DHVO vs 1.05 x best baseline: {', '.join(lines)}; {passes}/5 seeds")
    assert ok


def test_c08_oracle_bound(trained, report):
    agent = trained.get("DHVO", 0)["agent"]
    pols = {"DHVO": agent_policy(agent), **ANALYTIC_POLICIES}
    rng = np.random.default_rng(8)
    ocfg = oracle.OracleConfig()
    t0, below, count = time.time(), [], 0
    for i in range(20):
        dag, fx = oracle.random_fixture(rng, int(rng.integers(1, 5)))
        best = oracle.enumerate_optimal(dag, fx, ocfg).cost
        for name, pol in pols.items():
            u = oracle.rollout_policy(pol, dag, fx, ocfg).cost
            count += 1
            if u < best:
                below.append((i, name, u, best))
    wall = time.time() - t0
    ok = not below and wall < 120
    report("8", ok, f"20 fixtures x {len(pols)} policies, {len(below)} below optimum, {wall:.1f}s")
    assert ok


def test_c09_ablation_direction(trained, report):
    wins, lines = 0, []
    for s in SEEDS:
        d = trained.get("DHVO", s)["eval"].mean_tesc
        p = trained.get("PNAF_FLAT", s)["eval"].mean_tesc
        g = trained.get("GDQN10", s)["eval"].mean_tesc
        wins += d <= p and d <= g
        lines.append(f"s{s} {d:.0f}/{p:.0f}/{g:.0f}")
    ok = wins >= 3
    report("9", ok, f"DHVO/PNAF_FLAT/GDQN10: {', '.join(lines)}; DHVO best on {wins}/5")
    assert ok


def test_c10_determinism_and_persistence(tmp_path, report):
    cfg = TrainConfig(episodes=4, seed=11)

    def run(path):
        t = Trainer(make_dhvo(seed=11), make_env(seed=11), cfg)
        t.train(log_path=path)
        return t

    a, _ = run(tmp_path / "a.csv"), run(tmp_path / "b.csv")
    same_logs = (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
    save_blocks(a.agent.blocks(), tmp_path / "p.ckpt")
    fresh = make_dhvo(seed=99)
    load_blocks(fresh.blocks(), tmp_path / "p.ckpt")
    exact = all(np.array_equal(x.value, y.value) and np.array_equal(x.adam_m, y.adam_m)
                and np.array_equal(x.adam_v, y.adam_v) and x.step_count == y.step_count
                for x, y in zip(a.agent.blocks(), fresh.blocks()))
    part = Trainer(make_dhvo(seed=11), make_env(seed=11), cfg)
    part.train(2)
    part.save(tmp_path / "run")
    resumed = Trainer(make_dhvo(seed=11), make_env(seed=11), cfg)
    resumed.load(tmp_path / "run")
    resumed.train(2)
    write_metric_log(resumed.log, tmp_path / "r.csv")
    resumes = (tmp_path / "r.csv").read_text() == (tmp_path / "a.csv").read_text()
    ok = same_logs and exact and resumes
    report("10", ok, f"identical logs {same_logs}, checkpoint bit-exact {exact}, "
                     f"resume identical {resumes}")
    assert ok
