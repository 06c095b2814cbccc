import re
import time

import pytest

from dhvo.baselines import ANALYTIC_POLICIES, make_agent
from dhvo.trainer import TrainConfig, Trainer, agent_policy, evaluate, make_env

ACCEPTANCE_LINES = []


class TrainedPool:
    """Train each (learner, seed) once per session at the 40-episode budget."""

    def __init__(self, episodes=40, n_apps=50):
        self.episodes, self.n_apps = episodes, n_apps
        self.cache = {}

    def get(self, kind, seed):
        key = (kind, seed)
        if key not in self.cache:
            t0 = time.time()
            agent = make_agent(kind, seed=seed)
            tr = Trainer(agent, make_env(seed=seed), TrainConfig(episodes=self.episodes, seed=seed))
            tr.train()
            wall = time.time() - t0
            res = evaluate(agent_policy(agent), make_env(seed=1000 + seed), self.n_apps)
            self.cache[key] = {"agent": agent, "log": tr.log, "eval": res, "wall_s": wall}
        return self.cache[key]

    def baseline(self, name, seed):
        key = (name, seed)
        if key not in self.cache:
            self.cache[key] = {"eval": evaluate(ANALYTIC_POLICIES[name], make_env(seed=1000 + seed),
                                                self.n_apps)}
        return self.cache[key]


@pytest.fixture(scope="session")
def trained():
    return TrainedPool()


@pytest.fixture(scope="session")
def report():
    def record(criterion, ok, detail):
        ACCEPTANCE_LINES.append((criterion, ok, detail))
    return record


def _crit_key(line):
    m = re.match(r"(\d+)(.*)", line[0])
    return int(m.group(1)), m.group(2)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in sorted(ACCEPTANCE_LINES, key=_crit_key):
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'}  {detail}")
