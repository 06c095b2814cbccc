"""Train one learner at the 40-episode budget and report its 50-test TESC next to the baselines.

    python scripts/train_dhvo.py --agent DHVO --seed 0 --out runs/dhvo_s0
"""

import argparse
import json
import time

from dhvo.baselines import ANALYTIC_POLICIES, make_agent
from dhvo.trainer import TrainConfig, Trainer, agent_policy, evaluate, make_env


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--agent", default="DHVO")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--episodes", type=int, default=40)
    ap.add_argument("--apps", type=int, default=50)
    ap.add_argument("--out", default=None, help="run directory for checkpoint + metric log")
    a = ap.parse_args()

    agent = make_agent(a.agent, seed=a.seed)
    tr = Trainer(agent, make_env(seed=a.seed), TrainConfig(episodes=a.episodes, seed=a.seed))
    t0 = time.time()
    for _ in range(a.episodes):
        e = tr.run_episode()
        print(f"ep {e.episode:3d} tesc {e.mean_tesc:9.2f} loss {e.mean_loss:9.4f} "
              f"eps {e.epsilon:.3f} {time.time() - t0:6.1f}s", flush=True)
    if a.out:
        tr.save(a.out)
    res = {a.agent: evaluate(agent_policy(agent), make_env(seed=1000 + a.seed), a.apps)}
    for name, pol in ANALYTIC_POLICIES.items():
        res[name] = evaluate(pol, make_env(seed=1000 + a.seed), a.apps)
    print(json.dumps({k: {"mean_tesc": r.mean_tesc, "local": r.action_counts[0],
                          "offload": r.action_counts[1], "migrations": r.migrations}
                      for k, r in res.items()}, indent=1))


if __name__ == "__main__":
    main()
