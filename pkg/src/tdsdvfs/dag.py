"""Task graphs for blocked Cholesky, LU and QR factorizations.

A factorization of an ``N x N`` block matrix is expressed as four kinds of
block tasks (``Factorize``, ``Solve``, ``Update1``, ``Update2``).  This module
builds the dependency DAG for each factorization, derives the per-task
dependency sets (``tds_in`` / ``tds_out``), maps blocks onto a 2-D block cyclic
process grid, extracts a critical path from the dependency sets alone, and
computes CPM slack for arbitrary duration assignments.
"""

from __future__ import annotations

import enum
import heapq
import json
from dataclasses import dataclass
from functools import total_ordering
from typing import Callable, Hashable, Iterable, Mapping, Sequence

__all__ = [
    "DagError",
    "TaskKind",
    "EdgeKind",
    "TaskRef",
    "DepEdge",
    "TaskGraph",
    "ProcessGrid",
    "Timing",
    "map_owner",
    "generate_graph",
    "generate_crit_path",
    "critical_path_method",
    "compute_slack",
    "program_order",
    "last_update_step",
    "FACTORIZATIONS",
]

FACTORIZATIONS = ("cholesky", "lu", "qr")


class DagError(ValueError):
    """Raised for invalid block indices, graphs or duration maps."""


class TaskKind(enum.IntEnum):
    FACTORIZE = 0
    SOLVE = 1
    UPDATE1 = 2
    UPDATE2 = 3

    @property
    def label(self) -> str:
        return _KIND_LABELS[self]

    @classmethod
    def from_label(cls, label: str) -> "TaskKind":
        try:
            return _KIND_BY_LABEL[label.lower()]
        except KeyError:
            raise DagError(f"unknown task kind {label!r}") from None


_KIND_LABELS = {
    TaskKind.FACTORIZE: "Factorize",
    TaskKind.SOLVE: "Solve",
    TaskKind.UPDATE1: "Update1",
    TaskKind.UPDATE2: "Update2",
}
_KIND_BY_LABEL = {v.lower(): k for k, v in _KIND_LABELS.items()}


class EdgeKind(str, enum.Enum):
    EXPLICIT = "explicit"  # different blocks
    IMPLICIT = "implicit"  # same block


@total_ordering
@dataclass(frozen=True)
class TaskRef:
    """One block task.  ``step`` is the elimination step that issues it.

    Tasks sort in program order: by step, then Factorize < Solve < Update,
    then column-major block position.
    """

    kind: TaskKind
    row: int
    col: int
    step: int

    def __post_init__(self):
        if self.row < 1 or self.col < 1 or self.step < 1:
            raise DagError(f"block indices and step must be >= 1: {self!r}")
        if self.step > min(self.row, self.col):
            raise DagError(f"step exceeds min(row, col): {self!r}")
        diagonal = self.kind in (TaskKind.FACTORIZE, TaskKind.UPDATE2)
        if diagonal != (self.row == self.col):
            raise DagError(f"{self.kind.label} on block ({self.row},{self.col})")

    @classmethod
    def factorize(cls, k: int) -> "TaskRef":
        return cls(TaskKind.FACTORIZE, k, k, k)

    @classmethod
    def solve(cls, row: int, col: int) -> "TaskRef":
        return cls(TaskKind.SOLVE, row, col, min(row, col))

    @classmethod
    def update1(cls, row: int, col: int, step: int) -> "TaskRef":
        return cls(TaskKind.UPDATE1, row, col, step)

    @classmethod
    def update2(cls, i: int, step: int) -> "TaskRef":
        return cls(TaskKind.UPDATE2, i, i, step)

    @property
    def block(self) -> tuple[int, int]:
        return (self.row, self.col)

    @property
    def sort_key(self) -> tuple[int, int, int, int, int]:
        phase = min(int(self.kind), 2)
        return (self.step, phase, self.col, self.row, int(self.kind))

    def __lt__(self, other: "TaskRef") -> bool:
        if not isinstance(other, TaskRef):
            return NotImplemented
        return self.sort_key < other.sort_key

    def __str__(self) -> str:
        base = f"{self.kind.label}({self.row},{self.col})"
        if self.kind in (TaskKind.UPDATE1, TaskKind.UPDATE2):
            return f"{base}@{self.step}"
        return base

    def to_dict(self) -> dict:
        return {"kind": self.kind.label, "row": self.row, "col": self.col, "step": self.step}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TaskRef":
        try:
            return cls(TaskKind.from_label(d["kind"]), int(d["row"]), int(d["col"]), int(d["step"]))
        except KeyError as exc:
            raise DagError(f"task record missing field {exc}") from None


@total_ordering
@dataclass(frozen=True)
class DepEdge:
    src: TaskRef
    dst: TaskRef
    kind: EdgeKind

    def __lt__(self, other: "DepEdge") -> bool:
        return (self.src, self.dst) < (other.src, other.dst)


@dataclass(frozen=True)
class ProcessGrid:
    p_rows: int
    p_cols: int
    block_size: int = 1

    def __post_init__(self):
        if self.p_rows < 1 or self.p_cols < 1:
            raise DagError("process grid dimensions must be >= 1")
        if self.block_size < 1:
            raise DagError("block size must be >= 1")

    @property
    def size(self) -> int:
        return self.p_rows * self.p_cols

    def owner(self, i: int, j: int) -> tuple[int, int]:
        return map_owner(self, i, j)

    def rank(self, coord: tuple[int, int]) -> int:
        """Row-major rank of a grid coordinate."""
        return coord[0] * self.p_cols + coord[1]

    def coord(self, rank: int) -> tuple[int, int]:
        return divmod(rank, self.p_cols)


def map_owner(grid: ProcessGrid, i: int, j: int, n_blocks: int | None = None) -> tuple[int, int]:
    """Grid coordinate owning block ``(i, j)`` (1-based) under 2-D block cyclic layout."""
    if i < 1 or j < 1 or (n_blocks is not None and (i > n_blocks or j > n_blocks)):
        raise DagError(f"block index ({i},{j}) out of range")
    return ((i - 1) % grid.p_rows, (j - 1) % grid.p_cols)


class TaskGraph:
    """Immutable factorization DAG with its dependency sets.

    ``tds_in[t]`` holds the tasks ``t`` waits on; ``tds_out[t]`` holds the tasks
    waiting on ``t``.  Both are derived from ``edges`` so they stay symmetric.
    """

    def __init__(self, kind: str, n_blocks: int, tasks: Iterable[TaskRef], edges: Iterable[DepEdge]):
        self.kind = kind
        self.n_blocks = n_blocks
        self.tasks: tuple[TaskRef, ...] = tuple(sorted(set(tasks)))
        self.edges: tuple[DepEdge, ...] = tuple(sorted(set(edges)))
        task_set = set(self.tasks)
        tds_in: dict[TaskRef, set[TaskRef]] = {t: set() for t in self.tasks}
        tds_out: dict[TaskRef, set[TaskRef]] = {t: set() for t in self.tasks}
        for e in self.edges:
            if e.src not in task_set or e.dst not in task_set:
                raise DagError(f"edge {e.src} -> {e.dst} references an unknown task")
            tds_in[e.dst].add(e.src)
            tds_out[e.src].add(e.dst)
        self.tds_in: dict[TaskRef, frozenset[TaskRef]] = {t: frozenset(s) for t, s in tds_in.items()}
        self.tds_out: dict[TaskRef, frozenset[TaskRef]] = {t: frozenset(s) for t, s in tds_out.items()}
        self._topo = self._toposort()

    def __len__(self) -> int:
        return len(self.tasks)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TaskGraph):
            return NotImplemented
        return (self.kind, self.n_blocks, self.tasks, self.edges) == (
            other.kind, other.n_blocks, other.tasks, other.edges)

    def __repr__(self) -> str:
        return f"TaskGraph({self.kind!r}, n_blocks={self.n_blocks}, tasks={len(self.tasks)}, edges={len(self.edges)})"

    def _toposort(self) -> tuple[TaskRef, ...]:
        indeg = {t: len(self.tds_in[t]) for t in self.tasks}
        heap = [t for t, d in indeg.items() if d == 0]
        heapq.heapify(heap)
        order = []
        while heap:
            t = heapq.heappop(heap)
            order.append(t)
            for s in self.tds_out[t]:
                indeg[s] -= 1
                if indeg[s] == 0:
                    heapq.heappush(heap, s)
        if len(order) != len(self.tasks):
            raise DagError("dependency graph contains a cycle")
        return tuple(order)

    def topological_order(self) -> tuple[TaskRef, ...]:
        """Deterministic topological order (smallest ready task first)."""
        return self._topo

    def count(self, kind: TaskKind) -> int:
        return sum(1 for t in self.tasks if t.kind is kind)

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_blocks": self.n_blocks,
            "tasks": [t.to_dict() for t in self.tasks],
            "edges": [
                {"from": e.src.to_dict(), "to": e.dst.to_dict(), "kind": e.kind.value}
                for e in self.edges
            ],
        }

    def to_json(self, indent: int | None = 1) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TaskGraph":
        try:
            tasks = [TaskRef.from_dict(t) for t in d["tasks"]]
            edges = [
                DepEdge(TaskRef.from_dict(e["from"]), TaskRef.from_dict(e["to"]), EdgeKind(e["kind"]))
                for e in d["edges"]
            ]
            return cls(str(d["kind"]), int(d["n_blocks"]), tasks, edges)
        except (KeyError, TypeError) as exc:
            raise DagError(f"malformed graph document: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "TaskGraph":
        return cls.from_dict(json.loads(text))

    def to_dot(self) -> str:
        lines = [f'digraph "{self.kind}_{self.n_blocks}" {{', "  rankdir=TB;"]
        for t in self.tasks:
            lines.append(f'  "{t}";')
        for e in self.edges:
            style = "solid" if e.kind is EdgeKind.EXPLICIT else "dashed"
            lines.append(f'  "{e.src}" -> "{e.dst}" [style={style}];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def _edge(src: TaskRef, dst: TaskRef) -> DepEdge:
    kind = EdgeKind.IMPLICIT if src.block == dst.block else EdgeKind.EXPLICIT
    return DepEdge(src, dst, kind)


def last_update_step(kind: str, row: int, col: int) -> int:
    """Step of the final update applied to block ``(row, col)``; 0 if none.

    Statically computed, so IsLastInstance needs no runtime bookkeeping.
    """
    if kind == "qr" and row < col:
        return row  # the row-panel update issued by Factorize(row,row)
    return min(row, col) - 1


def _update(row: int, col: int, step: int) -> TaskRef:
    if row == col:
        return TaskRef.update2(row, step)
    return TaskRef.update1(row, col, step)


def _last_update(kind: str, row: int, col: int) -> TaskRef | None:
    step = last_update_step(kind, row, col)
    return _update(row, col, step) if step >= 1 else None


def _cholesky(n: int):
    tasks, edges = [], []
    for i in range(1, n + 1):
        tasks.append(TaskRef.factorize(i))
        for j in range(i + 1, n + 1):
            tasks.append(TaskRef.solve(j, i))
    for k in range(1, n + 1):
        for j in range(k + 1, n + 1):
            tasks.append(TaskRef.update2(j, k))
            for i in range(j + 1, n + 1):
                tasks.append(TaskRef.update1(i, j, k))

    for i in range(1, n + 1):
        f = TaskRef.factorize(i)
        for j in range(i + 1, n + 1):
            edges.append(_edge(f, TaskRef.solve(j, i)))
        if i > 1:
            edges.append(_edge(TaskRef.update2(i, i - 1), f))
    # the last Update1 on a panel block precedes the Solve on that block
    for i in range(2, n + 1):
        for j in range(i + 1, n + 1):
            edges.append(_edge(TaskRef.update1(j, i, i - 1), TaskRef.solve(j, i)))
    for i in range(1, n + 1):
        for j in range(i + 1, n + 1):
            s = TaskRef.solve(j, i)
            for k in range(j + 1, n + 1):
                edges.append(_edge(s, TaskRef.update1(k, j, i)))
            for k in range(i + 1, j):
                edges.append(_edge(s, TaskRef.update1(j, k, i)))
            edges.append(_edge(s, TaskRef.update2(j, i)))
    return tasks, edges


def _lu(n: int):
    tasks, edges = [], []
    for k in range(1, n + 1):
        f = TaskRef.factorize(k)
        tasks.append(f)
        prev = _last_update("lu", k, k)
        if prev:
            edges.append(_edge(prev, f))
        for i in range(k + 1, n + 1):
            for s in (TaskRef.solve(i, k), TaskRef.solve(k, i)):
                tasks.append(s)
                edges.append(_edge(f, s))
                prev = _last_update("lu", s.row, s.col)
                if prev:
                    edges.append(_edge(prev, s))
        for i in range(k + 1, n + 1):
            for j in range(k + 1, n + 1):
                u = _update(i, j, k)
                tasks.append(u)
                edges.append(_edge(TaskRef.solve(i, k), u))
                edges.append(_edge(TaskRef.solve(k, j), u))
    return tasks, edges


def _qr(n: int):
    tasks, edges = [], []
    for k in range(1, n + 1):
        f = TaskRef.factorize(k)
        tasks.append(f)
        prev = _last_update("qr", k, k)
        if prev:
            edges.append(_edge(prev, f))
        above = f
        for i in range(k + 1, n + 1):
            s = TaskRef.solve(i, k)
            tasks.append(s)
            edges.append(_edge(above, s))
            prev = _last_update("qr", i, k)
            if prev:
                edges.append(_edge(prev, s))
            above = s
        for j in range(k + 1, n + 1):
            # row-panel update of block (k, j) by the diagonal reflectors
            r = TaskRef.update1(k, j, k)
            tasks.append(r)
            edges.append(_edge(f, r))
            if k > 1:
                edges.append(_edge(_update(k, j, k - 1), r))
        for i in range(k + 1, n + 1):
            for j in range(k + 1, n + 1):
                u = _update(i, j, k)
                tasks.append(u)
                edges.append(_edge(TaskRef.solve(i, k), u))
                edges.append(_edge(TaskRef.update1(k, j, k), u))
    return tasks, edges


_BUILDERS = {"cholesky": _cholesky, "lu": _lu, "qr": _qr}


def generate_graph(kind: str, n_blocks: int) -> TaskGraph:
    """Build the task DAG of a blocked ``kind`` factorization on ``n_blocks`` block rows."""
    kind = kind.lower()
    if kind not in _BUILDERS:
        raise DagError(f"unknown factorization {kind!r}; expected one of {FACTORIZATIONS}")
    if n_blocks < 1:
        raise DagError("n_blocks must be >= 1")
    tasks, edges = _BUILDERS[kind](n_blocks)
    return TaskGraph(kind, n_blocks, tasks, edges)


def generate_crit_path(graph: TaskGraph) -> list[TaskRef]:
    """Critical path derived from the dependency sets alone.

    Every Factorize is a member, no Update1 ever is, and an Update2 or Solve
    joins when something already on the path depends on it.  The members are
    then walked as a dependency chain from the first Factorize, taking the
    smallest qualifying successor at each hop.
    """
    if not graph.tasks:
        raise DagError("empty graph has no critical path")
    members: set[TaskRef] = set()
    for t in reversed(graph.topological_order()):
        if t.kind is TaskKind.FACTORIZE:
            members.add(t)
        elif t.kind is TaskKind.UPDATE1:
            continue
        elif graph.tds_out[t] & members:
            members.add(t)
    starts = [t for t in graph.topological_order() if t.kind is TaskKind.FACTORIZE]
    if not starts:
        raise DagError("graph has no Factorize task")
    path = [starts[0]]
    while True:
        nxt = sorted(graph.tds_out[path[-1]] & members)
        if not nxt:
            return path
        path.append(nxt[0])


@dataclass(frozen=True)
class Timing:
    """Forward/backward CPM pass results keyed by node."""

    earliest_start: dict
    earliest_end: dict
    latest_end: dict
    makespan: object

    def slack(self, node) -> object:
        return self.latest_end[node] - self.earliest_end[node]


def critical_path_method(
    order: Sequence[Hashable],
    preds: Mapping[Hashable, Iterable[Hashable]],
    durations: Mapping[Hashable, object],
    edge_delay: Callable[[Hashable, Hashable], object] | None = None,
) -> Timing:
    """Forward and backward CPM passes over any DAG given in topological ``order``.

    Works with any numeric type supporting ``+``, ``-`` and ``max`` (floats,
    ints, Fractions), so exact inputs give exact slack.
    """
    zero = 0 * next(iter(durations.values()), 0)
    es, ef = {}, {}
    for v in order:
        start = zero
        for u in preds[v]:
            t = ef[u] + edge_delay(u, v) if edge_delay else ef[u]
            if t > start:
                start = t
        es[v] = start
        ef[v] = start + durations[v]
    makespan = max(ef.values(), default=zero)
    succs: dict = {v: [] for v in order}
    for v in order:
        for u in preds[v]:
            succs[u].append(v)
    le = {}
    for v in reversed(order):
        end = makespan
        for w in succs[v]:
            t = le[w] - durations[w] - (edge_delay(v, w) if edge_delay else zero)
            if t < end:
                end = t
        le[v] = end
    return Timing(es, ef, le, makespan)


def compute_slack(
    graph: TaskGraph,
    durations: Mapping[TaskRef, object],
    edge_delay: Callable[[TaskRef, TaskRef], object] | None = None,
    rel_tol: float = 1e-12,
) -> dict[TaskRef, object]:
    """Slack (latest end minus earliest end) of every task.

    ``edge_delay(u, t)`` adds a transfer time on edge ``u -> t``, e.g. the
    message time between the owning processes.  Float round-off below
    ``rel_tol * makespan`` is reported as exactly zero.
    """
    missing = [t for t in graph.tasks if t not in durations]
    if missing:
        raise DagError(f"missing duration for {missing[0]}")
    if any(durations[t] <= 0 for t in graph.tasks):
        raise DagError("durations must be positive")
    timing = critical_path_method(graph.topological_order(), graph.tds_in, durations, edge_delay)
    eps = abs(timing.makespan) * rel_tol if isinstance(timing.makespan, float) else 0
    out = {}
    for t in graph.tasks:
        s = timing.slack(t)
        out[t] = 0 * s if abs(s) <= eps else s
    return out


def program_order(graph: TaskGraph, grid: ProcessGrid) -> list[list[TaskRef]]:
    """Tasks of each process (indexed by row-major rank) in execution order.

    One process runs its tasks sequentially; program order is step-major,
    then Factorize < Solve < Update, which never contradicts a dependency.
    """
    lanes: list[list[TaskRef]] = [[] for _ in range(grid.size)]
    for t in graph.tasks:
        lanes[grid.rank(map_owner(grid, t.row, t.col))].append(t)
    for lane in lanes:
        lane.sort()
    return lanes
