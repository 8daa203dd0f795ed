"""Communication graph, Metropolis weights and privacy-preserving average consensus.

Agents never read each other's state.  Every value that crosses an agent
boundary is a :class:`MaskedPayload` routed by a :class:`MessageBus`, which
keeps an audit log of what was sent.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import InputError

logger = logging.getLogger(__name__)

MAX_AAC_ROUNDS = 10_000


@dataclass(frozen=True, eq=False)
class CommGraph:
    h: int
    adjacency: np.ndarray

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        if adj.shape != (self.h, self.h):
            raise InputError(f"adjacency must be {self.h}x{self.h}")
        if np.any(np.diag(adj)):
            raise InputError("graph has self-loops")
        if not np.array_equal(adj, adj.T):
            raise InputError("graph adjacency is not symmetric")
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)

    @classmethod
    def from_edges(cls, h: int, edges: Sequence[Sequence[int]]) -> "CommGraph":
        """Build from 1-based undirected edges."""
        if h < 1:
            raise InputError("graph needs at least one node")
        adj = np.zeros((h, h), dtype=bool)
        for edge in edges:
            if len(edge) != 2:
                raise InputError(f"edge {edge!r} must have two endpoints")
            i, j = int(edge[0]), int(edge[1])
            if not (1 <= i <= h and 1 <= j <= h):
                raise InputError(f"edge ({i}, {j}) out of range 1..{h}")
            if i == j:
                raise InputError(f"self-loop on node {i}")
            adj[i - 1, j - 1] = adj[j - 1, i - 1] = True
        return cls(h, adj)

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def neighbors(self, i: int) -> list[int]:
        """0-based neighbor indices of 0-based node ``i``."""
        return np.flatnonzero(self.adjacency[i]).tolist()

    def edges(self) -> list[tuple[int, int]]:
        return [(int(i) + 1, int(j) + 1) for i, j in zip(*np.nonzero(np.triu(self.adjacency)))]

    def to_dict(self) -> dict:
        return {"h": self.h, "edges": [list(e) for e in self.edges()]}


def parse_graph(text: str) -> CommGraph:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid graph JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict) or set(raw) != {"h", "edges"}:
        raise InputError("graph file must be an object with exactly the keys 'h' and 'edges'")
    return CommGraph.from_edges(int(raw["h"]), raw["edges"])


def load_graph(path: str | Path) -> CommGraph:
    return parse_graph(Path(path).read_text(encoding="utf-8"))


def ring(h: int) -> CommGraph:
    if h == 1:
        return CommGraph(1, np.zeros((1, 1), dtype=bool))
    edges = [(i, i % h + 1) for i in range(1, h + 1)] if h > 2 else [(1, 2)]
    return CommGraph.from_edges(h, edges)


def circulant(h: int, offsets: Sequence[int]) -> CommGraph:
    edges = {tuple(sorted((i, (i + o - 1) % h + 1))) for i in range(1, h + 1) for o in offsets}
    return CommGraph.from_edges(h, [e for e in edges if e[0] != e[1]])


@dataclass
class GraphReport:
    connected: bool
    violations: list[tuple[int, int]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.connected and not self.violations

    def lines(self) -> list[str]:
        if self.ok:
            return ["ok"]
        out = []
        if not self.connected:
            out.append("graph is not connected")
        for i, j in self.violations:
            out.append(
                f"neighborhood containment: node {j} has no neighbor outside node {i}'s "
                f"closed neighborhood; node {i} could recover node {j}'s value"
            )
        return out


def validate_graph(g: CommGraph) -> GraphReport:
    """Check connectivity and the neighborhood non-containment privacy condition.

    For every edge ``(i, j)`` node ``j`` must have a neighbor that ``i`` neither
    is nor sees; otherwise ``i`` observes every message ``j`` mixes and can undo
    ``j``'s mask.
    """
    n_comp, _ = connected_components(g.adjacency.astype(int), directed=False)
    violations = []
    for i in range(g.h):
        closed_i = set(g.neighbors(i)) | {i}
        for j in g.neighbors(i):
            if set(g.neighbors(j)) <= closed_i:
                violations.append((i + 1, j + 1))
    return GraphReport(connected=n_comp == 1, violations=violations)


def metropolis(g: CommGraph) -> np.ndarray:
    d = g.degrees
    w = np.zeros((g.h, g.h))
    i, j = np.nonzero(g.adjacency)
    w[i, j] = 1.0 / (1.0 + np.maximum(d[i], d[j]))
    w[np.diag_indices(g.h)] = 1.0 - w.sum(axis=1)
    return w


@dataclass(frozen=True, eq=False)
class WeightMatrices:
    w: np.ndarray
    w_star: np.ndarray
    epsilon: float
    iota_min: float
    iota_2: float

    @property
    def h(self) -> int:
        return self.w.shape[0]

    def disagreement_rate(self, accelerated: bool = True) -> float:
        """Second-largest absolute eigenvalue (largest off the consensus direction)."""
        mat = self.w_star if accelerated else self.w
        vals = np.linalg.eigvalsh(mat)
        if self.h == 1:
            return 0.0
        # consensus eigenvalue 1 is the largest; remove one copy of it
        rest = np.delete(vals, np.argmax(vals))
        return float(np.max(np.abs(rest)))


def accelerate(w: np.ndarray) -> WeightMatrices:
    h = w.shape[0]
    vals = np.linalg.eigvalsh(w)
    iota_min = float(vals[0])
    iota_2 = float(vals[-2]) if h > 1 else float(vals[0])
    # a single node has nothing to accelerate
    eps = 0.0 if h == 1 else (iota_min + iota_2) / (2.0 - iota_min - iota_2)
    w_star = (1.0 + eps) * w - eps * np.eye(h)
    return WeightMatrices(w=w, w_star=w_star, epsilon=eps, iota_min=iota_min, iota_2=iota_2)


def weights_for(g: CommGraph) -> WeightMatrices:
    return accelerate(metropolis(g))


@dataclass(frozen=True)
class NoiseSchedule:
    """Geometrically decaying mask: ``delta_i(t) ~ U[-rho/2 s^(t+1), rho/2 s^(t+1)]``.

    ``rho == 0`` disables masking (used by oracle tests).
    """

    rho: float = 1.0
    sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.rho < 0:
            raise InputError("noise amplitude rho must be nonnegative")
        if not 0.0 <= self.sigma < 1.0:
            raise InputError("noise decay sigma must lie in [0, 1)")

    def generators(self, h: int) -> list[np.random.Generator]:
        return [np.random.default_rng(s) for s in np.random.SeedSequence(self.seed).spawn(h)]

    def residual_bound(self, h: int, rounds: int) -> float:
        """Bound on the telescoped noise left in the network sum after ``rounds``."""
        return h * 0.5 * self.rho * self.sigma**rounds


def rounds_for_tolerance(
    wm: WeightMatrices, tol: float, noise: NoiseSchedule | None = None, cap: int = MAX_AAC_ROUNDS
) -> int:
    """Fixed AAC round budget reaching relative disagreement ``tol``.

    Consensus error decays like ``lam^T / (1 - lam)`` with ``lam`` the
    second-largest absolute eigenvalue of ``W*``; the residual mask decays like
    ``sigma^T``.  The larger requirement wins.
    """
    lam = wm.disagreement_rate()
    t = 1
    if lam > 1e-15:
        t = math.ceil(math.log(tol * (1.0 - lam)) / math.log(lam))
    if noise is not None and noise.rho > 0 and noise.sigma > 0:
        t = max(t, math.ceil(math.log(tol / noise.rho) / math.log(noise.sigma)))
    return int(min(max(t, 1), cap))


@dataclass(frozen=True, eq=False)
class MaskedPayload:
    """A noise-masked consensus value ``y_i^+(t)``; the only inter-agent message type."""

    sender: int
    round: int
    value: np.ndarray
    kind: str = "aac"


class MessageBus:
    """Round-synchronous, double-buffered message routing along graph edges."""

    def __init__(self, graph: CommGraph):
        self.graph = graph
        self._pending: dict[int, dict[int, MaskedPayload]] = {i: {} for i in range(graph.h)}
        self._inbox: dict[int, dict[int, MaskedPayload]] = {i: {} for i in range(graph.h)}
        self.log: Counter = Counter()
        self.sent = 0
        self._neighbors = [graph.neighbors(i) for i in range(graph.h)]

    def publish(self, msg: MaskedPayload) -> None:
        if not isinstance(msg, MaskedPayload):
            raise TypeError(f"refusing to route unmasked message of type {type(msg).__name__}")
        # senders hand over a fresh array each round; freezing it is enough
        msg.value.setflags(write=False)
        targets = self._neighbors[msg.sender]
        for j in targets:
            self._pending[j][msg.sender] = msg
        self.log[(type(msg).__name__, msg.kind)] += len(targets)
        self.sent += len(targets)

    def deliver(self) -> None:
        self._inbox = self._pending
        self._pending = {i: {} for i in range(self.graph.h)}

    def inbox(self, receiver: int) -> dict[int, MaskedPayload]:
        return self._inbox[receiver]

    def audit(self) -> dict[str, int]:
        return {f"{t}:{k}": n for (t, k), n in sorted(self.log.items())}


class AacParticipant:
    """One agent's side of a privacy-preserving accelerated average consensus run."""

    def __init__(self, index: int, initial: np.ndarray, w_star_row: np.ndarray, rng, rho, sigma):
        self.index = index
        self._y = np.array(initial, dtype=float, copy=True)
        self._row = w_star_row
        self._rng = rng
        self._rho = rho
        self._sigma = sigma
        self._prev_delta = 0.0
        self.published: list[np.ndarray] | None = None

    def _delta(self, t: int):
        if self._rho == 0:
            return 0.0
        half = 0.5 * self._rho * self._sigma ** (t + 1)
        delta = self._rng.random(size=self._y.shape)
        delta -= 0.5
        delta *= 2.0 * half
        return delta

    def publish(self, t: int) -> MaskedPayload:
        delta = self._delta(t)
        masked = self._y + delta
        masked -= self._prev_delta
        self._masked = masked
        self._prev_delta = delta
        if self.published is not None:
            self.published.append(self._masked.copy())
        return MaskedPayload(self.index, t, self._masked)

    def update(self, inbox: dict[int, MaskedPayload]) -> None:
        acc = self._row[self.index] * self._masked
        for j, msg in inbox.items():
            acc += self._row[j] * msg.value
        self._y = acc

    @property
    def value(self) -> np.ndarray:
        return self._y


def run_rounds(participants: Sequence[AacParticipant], bus: MessageBus, rounds: int) -> None:
    for t in range(rounds):
        for p in participants:
            bus.publish(p.publish(t))
        bus.deliver()
        for p in participants:
            p.update(bus.inbox(p.index))


def aac_run(
    initial: Sequence[np.ndarray],
    wm: WeightMatrices,
    ns: NoiseSchedule,
    rounds: int,
    *,
    graph: CommGraph | None = None,
    bus: MessageBus | None = None,
    rngs: Sequence[np.random.Generator] | None = None,
    record: bool = False,
):
    """Run ``rounds`` synchronous AAC rounds and return each agent's ``y_i(T)``.

    With ``record`` the published (masked) streams are returned as a second
    value, one list of arrays per agent.
    """
    h = len(initial)
    if h != wm.h:
        raise InputError(f"{h} initial values for a {wm.h}-node weight matrix")
    if rounds < 1:
        raise InputError("AAC needs at least one round")
    shape = np.shape(initial[0])
    if any(np.shape(y) != shape for y in initial):
        raise InputError("all initial values must share one shape")
    if bus is None:
        if graph is None:
            graph = CommGraph(h, (wm.w != 0) & ~np.eye(h, dtype=bool))
        bus = MessageBus(graph)
    rngs = ns.generators(h) if rngs is None else rngs
    parts = [
        AacParticipant(i, initial[i], wm.w_star[i], rngs[i], ns.rho, ns.sigma) for i in range(h)
    ]
    if record:
        for p in parts:
            p.published = []
    run_rounds(parts, bus, rounds)
    values = [p.value for p in parts]
    if record:
        return values, [p.published for p in parts]
    return values
