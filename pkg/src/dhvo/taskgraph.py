"""DAG-structured applications: task specs, random generation, precedence queries."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from pathlib import Path

import numpy as np

BITS_PER_MBYTE = 8_000_000
CYCLES_PER_MCYCLE = 1_000_000


class DagError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    id: int
    input_bits: float
    output_bits: float
    cycles: float

    def __post_init__(self):
        if not (self.input_bits > 0 and self.output_bits > 0 and self.cycles > 0):
            raise DagError(f"task {self.id}: sizes and cycles must be positive")


@dataclass(frozen=True)
class TaskDag:
    tasks: tuple[TaskSpec, ...]
    edges: frozenset[tuple[int, int]]
    _preds: tuple[frozenset[int], ...] = field(init=False, repr=False, compare=False)
    _succs: tuple[frozenset[int], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "edges", frozenset((int(i), int(j)) for i, j in self.edges))
        n = len(self.tasks)
        for idx, t in enumerate(self.tasks):
            if t.id != idx:
                raise DagError(f"task ids must be dense 0..N-1, got {t.id} at position {idx}")
        preds = [set() for _ in range(n)]
        succs = [set() for _ in range(n)]
        for i, j in self.edges:
            if not (0 <= i < n and 0 <= j < n):
                raise DagError(f"edge ({i}, {j}) has an endpoint outside 0..{n - 1}")
            if i == j:
                raise DagError(f"self-edge on task {i}")
            preds[j].add(i)
            succs[i].add(j)
        object.__setattr__(self, "_preds", tuple(frozenset(p) for p in preds))
        object.__setattr__(self, "_succs", tuple(frozenset(s) for s in succs))
        try:
            self.topological_order()
        except CycleError as exc:
            raise DagError(f"graph has a cycle: {exc.args[1]}") from None

    @property
    def n(self) -> int:
        return len(self.tasks)

    def _check(self, i: int):
        if not 0 <= i < self.n:
            raise DagError(f"task id {i} outside 0..{self.n - 1}")

    def predecessors(self, i: int) -> frozenset[int]:
        self._check(i)
        return self._preds[i]

    def successors(self, i: int) -> frozenset[int]:
        self._check(i)
        return self._succs[i]

    def ready_set(self, done) -> set[int]:
        done = set(done)
        return {i for i in range(self.n) if i not in done and self._preds[i] <= done}

    def topological_order(self) -> list[int]:
        ts = TopologicalSorter({i: self._preds[i] for i in range(self.n)})
        return list(ts.static_order())

    def all_topological_orders(self):
        """Yield every topological order, lexicographically by task id."""
        n = self.n
        indeg = [len(p) for p in self._preds]
        order: list[int] = []
        used = [False] * n

        def rec():
            if len(order) == n:
                yield list(order)
                return
            for i in range(n):
                if not used[i] and indeg[i] == 0:
                    used[i] = True
                    order.append(i)
                    for j in self._succs[i]:
                        indeg[j] -= 1
                    yield from rec()
                    for j in self._succs[i]:
                        indeg[j] += 1
                    order.pop()
                    used[i] = False

        yield from rec()

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n), dtype=bool)
        for i, j in self.edges:
            a[i, j] = True
        return a


def predecessors(dag: TaskDag, i: int) -> frozenset[int]:
    return dag.predecessors(i)


def ready_set(dag: TaskDag, done) -> set[int]:
    return dag.ready_set(done)


@dataclass(frozen=True)
class DagGenConfig:
    n_min: int = 8
    n_max: int = 12
    di_range: tuple[float, float] = (2.5 * BITS_PER_MBYTE, 3.5 * BITS_PER_MBYTE)
    do_range: tuple[float, float] = (2.5 * BITS_PER_MBYTE, 3.5 * BITS_PER_MBYTE)
    cycles_range: tuple[float, float] = (800 * CYCLES_PER_MCYCLE, 1200 * CYCLES_PER_MCYCLE)
    edge_prob: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_min <= self.n_max:
            raise DagError(f"need 1 <= n_min <= n_max, got {self.n_min}, {self.n_max}")
        for name in ("di_range", "do_range", "cycles_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise DagError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
        if not 0.0 <= self.edge_prob <= 1.0:
            raise DagError(f"edge_prob must be in [0, 1], got {self.edge_prob}")


def generate_dag(cfg: DagGenConfig, rng: np.random.Generator) -> TaskDag:
    """Draw a random layered DAG.

    Each node gets a uniform layer in ``[0, ceil(N/3)]``; forward-layer pairs are
    joined with probability ``edge_prob``, and any node outside layer 0 left without
    a predecessor is attached to one random node from an earlier layer. Layers
    are only used during construction.
    """
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    di = rng.uniform(*cfg.di_range, size=n)
    do = rng.uniform(*cfg.do_range, size=n)
    cyc = rng.uniform(*cfg.cycles_range, size=n)
    tasks = tuple(TaskSpec(i, float(di[i]), float(do[i]), float(cyc[i])) for i in range(n))

    layers = rng.integers(0, math.ceil(n / 3) + 1, size=n)
    edges = set()
    if cfg.edge_prob > 0:
        for i in range(n):
            for j in range(n):
                if layers[i] < layers[j] and rng.random() < cfg.edge_prob:
                    edges.add((i, j))
        for j in range(n):
            if layers[j] == 0 or any(e[1] == j for e in edges):
                continue
            earlier = [i for i in range(n) if layers[i] < layers[j]]
            if earlier:
                edges.add((int(earlier[rng.integers(len(earlier))]), j))
    return TaskDag(tasks, frozenset(edges))


def dump_dag(dag: TaskDag) -> str:
    lines = [f"{dag.n} {len(dag.edges)}"]
    for t in dag.tasks:
        lines.append(f"{t.id} {t.input_bits!r} {t.output_bits!r} {t.cycles!r}")
    for i, j in sorted(dag.edges):
        lines.append(f"{i} {j}")
    return "\n".join(lines) + "\n"


def parse_dag(text: str) -> TaskDag:
    rows = [ln.split() for ln in text.splitlines() if ln.strip()]
    if not rows or len(rows[0]) != 2:
        raise DagError("line 1: expected header 'N M'")
    n, m = int(rows[0][0]), int(rows[0][1])
    if len(rows) != 1 + n + m:
        raise DagError(f"expected {1 + n + m} non-empty lines, found {len(rows)}")
    tasks = []
    for k, row in enumerate(rows[1 : 1 + n]):
        if len(row) != 4:
            raise DagError(f"line {k + 2}: expected 'id input_bits output_bits cycles'")
        tasks.append(TaskSpec(int(row[0]), float(row[1]), float(row[2]), float(row[3])))
    edges = set()
    for k, row in enumerate(rows[1 + n :]):
        if len(row) != 2:
            raise DagError(f"line {k + n + 2}: expected 'src dst'")
        e = (int(row[0]), int(row[1]))
        if e in edges:
            raise DagError(f"line {k + n + 2}: duplicate edge {e}")
        edges.add(e)
    return TaskDag(tuple(tasks), frozenset(edges))


def save_dag(dag: TaskDag, path) -> None:
    Path(path).write_text(dump_dag(dag))


def load_dag(path) -> TaskDag:
    return parse_dag(Path(path).read_text())
