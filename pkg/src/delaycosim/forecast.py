"""Reliable repetition counts, activation masks and delay forecasts.

A link activated at step ``k`` is repeated ``r[k, j]`` times so that at least
one attempt succeeds with probability ``phi``. The counts double as the
time-varying edge weights of a graph whose earliest-arrival paths are the
reliable sender-to-receiver delay forecasts.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field

import numpy as np

from .netmodel import LinkStateChain, NetworkTopology

LOG = logging.getLogger(__name__)

UNREACHABLE = 10**9


def is_unreachable(value) -> bool:
    return value is None or value >= UNREACHABLE


def compute_repetitions(chain: LinkStateChain, phi: float, k0: int, H: int, max_reps: int | None = None):
    """Repetition counts for a link first activated at ``k0, ..., k0 + H - 1``.

    ``chain`` is the link's chain as observed at ``k0``. For every start step
    the joint (all attempts failed so far, chain state) vector is pushed
    through the chain until the success probability reaches ``phi``. Counts
    larger than ``max_reps`` (default ``H``) are reported as ``UNREACHABLE``.
    """
    if not 0.0 < phi < 1.0:
        raise ValueError("phi must lie strictly between 0 and 1")
    del k0  # the chain already carries the state at k0
    max_reps = H if max_reps is None else max_reps
    P = chain.transition
    fail = 1.0 - chain.success_prob
    pi = chain.distribution()
    row = np.full(H, UNREACHABLE, dtype=np.int64)
    for s in range(H):
        alive = pi.copy()
        for m in range(1, max_reps + 1):
            alive = alive * fail
            if 1.0 - alive.sum() >= phi - 1e-12:
                row[s] = m
                break
            alive = alive @ P
        pi = pi @ P
    return row


@dataclass(frozen=True)
class RepetitionProfile:
    """``reps[k, j]``: repetitions for link ``j`` first activated ``k`` steps ahead."""

    reps: np.ndarray
    start: int = 0

    @property
    def horizon(self) -> int:
        return self.reps.shape[0]

    @property
    def n_v(self) -> int:
        return self.reps.shape[1]

    @classmethod
    def from_chains(cls, chains, phi: float, k0: int, H: int, max_reps: int | None = None):
        cols = [compute_repetitions(c, phi, k0, H, max_reps) for c in chains]
        reps = np.column_stack(cols) if cols else np.zeros((H, 0), dtype=np.int64)
        return cls(reps.astype(np.int64), k0)


def build_gamma(profile: RepetitionProfile, kappa: int) -> np.ndarray:
    """Diagonal of the activation mask for prediction step ``kappa``.

    Entry ``k * n_v + j`` is 1 iff ``kappa - r[k, j] - k >= 0`` (Heaviside
    with value 1 at 0); unreachable links never complete.
    """
    H = profile.horizon
    if not 0 <= kappa <= H:
        raise ValueError(f"kappa={kappa} outside 0..{H}")
    k = np.arange(H)[:, None]
    reps = profile.reps
    mask = (kappa - reps - k >= 0) & (reps < UNREACHABLE)
    return mask.astype(np.int64).reshape(-1)


@dataclass(frozen=True)
class WeightedEdge:
    link: int
    source: int
    target: int
    weights: np.ndarray


@dataclass(frozen=True)
class WeightedDelayGraph:
    """Communication nodes and links carrying per-start-step repetition weights.

    ``weights[t]`` belongs to a departure at absolute step ``start + t``.
    """

    node_count: int
    edges: tuple[WeightedEdge, ...]
    start: int = 0

    @classmethod
    def from_profile(cls, topology: NetworkTopology, profile: RepetitionProfile):
        edges = tuple(
            WeightedEdge(link.link_id, link.from_entity, link.to_entity, profile.reps[:, link.link_id].copy())
            for link in topology.links if link.from_entity is not None
        )
        return cls(topology.n_q, edges, profile.start)

    @classmethod
    def from_sequences(cls, node_count: int, sequences, start: int = 0):
        """Build from ``[(source, target, weights), ...]``."""
        edges = tuple(
            WeightedEdge(i, s, t, np.asarray(w, dtype=np.int64)) for i, (s, t, w) in enumerate(sequences)
        )
        return cls(node_count, edges, start)

    def adjacency(self):
        adj = {n: [] for n in range(self.node_count)}
        for e in self.edges:
            adj[e.source].append(e)
        return adj


def _earliest_departure_arrival(edge: WeightedEdge, t: int, start: int):
    """Best arrival over departures at or after absolute step ``t`` (waiting allowed)."""
    best = UNREACHABLE
    w = edge.weights
    for idx in range(max(t - start, 0), w.size):
        if w[idx] >= UNREACHABLE:
            continue
        best = min(best, start + idx + int(w[idx]))
    return best


def shortest_route(graph: WeightedDelayGraph, src: int, dst: int, k0: int, cap: int | None = None):
    """Earliest-arrival search on the time-expanded graph.

    Returns ``(delay, hops)`` with ``hops`` a list of
    ``(link, source, target, depart, arrive)``; ``delay`` is ``UNREACHABLE``
    when ``dst`` cannot be reached (or only later than ``k0 + cap``).
    """
    if not (0 <= src < graph.node_count and 0 <= dst < graph.node_count):
        raise IndexError("node index out of range")
    if src == dst:
        return 0, []
    adj = graph.adjacency()
    arrival = {src: k0}
    parent = {}
    heap = [(k0, src)]
    settled = set()
    while heap:
        t, node = heapq.heappop(heap)
        if node in settled:
            continue
        settled.add(node)
        if node == dst:
            break
        for edge in adj[node]:
            arr = _earliest_departure_arrival(edge, t, graph.start)
            if arr >= UNREACHABLE:
                continue
            if arr < arrival.get(edge.target, UNREACHABLE) or (
                    arr == arrival.get(edge.target) and edge.link < parent[edge.target][0].link):
                arrival[edge.target] = arr
                parent[edge.target] = (edge, t)
                heapq.heappush(heap, (arr, edge.target))
    if dst not in arrival:
        return UNREACHABLE, []
    delay = arrival[dst] - k0
    if cap is not None and delay > cap:
        return UNREACHABLE, []
    hops = []
    node = dst
    while node != src:
        edge, t_ready = parent[node]
        depart = _best_departure(edge, t_ready, graph.start)
        hops.append((edge.link, edge.source, edge.target, depart, arrival[node]))
        node = edge.source
    hops.reverse()
    return delay, hops


def _best_departure(edge, t, start):
    best, when = UNREACHABLE, None
    for idx in range(max(t - start, 0), edge.weights.size):
        w = edge.weights[idx]
        if w < UNREACHABLE and start + idx + w < best:
            best, when = start + idx + int(w), start + idx
    return when


def shortest_delay(graph: WeightedDelayGraph, src: int, dst: int, k0: int, cap: int | None = None) -> int:
    return shortest_route(graph, src, dst, k0, cap)[0]


@dataclass
class DelayForecastTable:
    """Reliable delay forecasts ``tau[(sender, receiver)][l]`` for sends at ``start + l``."""

    start: int
    tau: dict = field(default_factory=dict)

    def get(self, sender: int, receiver: int, k: int):
        seq = self.tau.get((sender, receiver))
        if seq is None or not 0 <= k - self.start < len(seq):
            return None
        value = int(seq[k - self.start])
        return None if is_unreachable(value) else value


def forecast_pairs(graph: WeightedDelayGraph, pairs, k0: int, H: int) -> DelayForecastTable:
    table = DelayForecastTable(k0)
    for sender, receiver in pairs:
        seq = np.array([shortest_delay(graph, sender, receiver, k0 + l, cap=H) for l in range(H)], dtype=np.int64)
        for l in range(H - 1):
            a, b = seq[l], seq[l + 1]
            if a < UNREACHABLE and b < UNREACHABLE and a > b + 1:
                LOG.warning("non-FIFO forecast for %s->%s at step %d", sender, receiver, k0 + l)
        table.tau[(sender, receiver)] = seq
    return table
