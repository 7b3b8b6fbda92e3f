"""Discrete-time packet network: topology, Markov-modulated links and packet flights.

Every packet in transit is its own queue subsystem ``q`` with a single 1 at
the entity currently holding it. Links move the packet according to their
column of the routing matrix; a transmission attempt only succeeds with the
probability of the link's current Markov state.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class InvalidIndex(ValueError):
    pass


class InfeasibleActivation(RuntimeError):
    """Raised when an activation would leave the single-occupancy state space."""


@dataclass(frozen=True)
class LinkSpec:
    link_id: int
    from_entity: int | None
    to_entity: int
    name: str = ""

    def effect_column(self, n_q: int) -> np.ndarray:
        col = np.zeros(n_q, dtype=int)
        col[self.to_entity] = 1
        if self.from_entity is not None:
            col[self.from_entity] = -1
        return col


@dataclass(frozen=True)
class NetworkTopology:
    entity_count: int
    links: tuple[LinkSpec, ...]
    constituency: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        C = np.asarray(self.constituency, dtype=int)
        if C.ndim != 2 or C.shape[1] != len(self.links):
            raise ValueError("constituency matrix must have one column per link")
        if not np.isin(C, (0, 1)).all():
            raise ValueError("constituency matrix must be binary")
        if len(self.links) and (C.sum(axis=1) == 0).any():
            raise ValueError("every constituency row needs at least one link")
        if len(self.links) and (C.sum(axis=0) == 0).any():
            raise ValueError("every link must belong to a constituency group")
        for pos, link in enumerate(self.links):
            if link.link_id != pos:
                raise ValueError("link ids must equal their position")
            ends = [link.to_entity] + ([link.from_entity] if link.from_entity is not None else [])
            if any(not 0 <= e < self.entity_count for e in ends):
                raise InvalidIndex(f"link {pos} references an unknown entity")
            if link.from_entity == link.to_entity:
                raise ValueError(f"link {pos} is a self loop")
        object.__setattr__(self, "constituency", C)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"CN{i + 1}" for i in range(self.entity_count)))

    @property
    def n_q(self) -> int:
        return self.entity_count

    @property
    def n_v(self) -> int:
        return len(self.links)

    @property
    def n_c(self) -> int:
        return self.constituency.shape[0]

    @property
    def routing(self) -> np.ndarray:
        """Routing matrix R with one effect column per link."""
        if not self.links:
            return np.zeros((self.n_q, 0), dtype=int)
        return np.column_stack([link.effect_column(self.n_q) for link in self.links])

    def index_of(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class LinkStateChain:
    """Discrete-time Markov chain modulating one link's success probability."""

    transition: np.ndarray
    success_prob: np.ndarray
    state: int = 0

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.transition, dtype=float))
        p = np.atleast_1d(np.asarray(self.success_prob, dtype=float))
        if P.shape != (p.size, p.size):
            raise ValueError("transition matrix must be square with one row per state")
        if (P < 0).any() or np.abs(P.sum(axis=1) - 1.0).max() > 1e-12:
            raise ValueError("transition matrix must be row-stochastic")
        if ((p < 0) | (p > 1)).any():
            raise ValueError("success probabilities must lie in [0, 1]")
        if not 0 <= self.state < p.size:
            raise InvalidIndex("chain state out of range")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "success_prob", p)

    @classmethod
    def constant(cls, p: float) -> "LinkStateChain":
        return cls(np.ones((1, 1)), np.array([p]), 0)

    @property
    def state_count(self) -> int:
        return self.success_prob.size

    @property
    def p(self) -> float:
        return float(self.success_prob[self.state])

    def distribution(self) -> np.ndarray:
        pi = np.zeros(self.state_count)
        pi[self.state] = 1.0
        return pi


def sample_and_advance(chains, rng: np.random.Generator):
    """Draw one Bernoulli outcome per link, then move every chain one step.

    Two uniforms are consumed per link (outcome, transition) in link order,
    so identical seeds reproduce identical outcome sequences.
    """
    outcomes = np.zeros(len(chains), dtype=int)
    advanced = []
    for j, chain in enumerate(chains):
        outcomes[j] = int(rng.random() < chain.p)
        cdf = np.cumsum(chain.transition[chain.state])
        nxt = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        advanced.append(replace(chain, state=min(nxt, chain.state_count - 1)))
    return outcomes, advanced


@dataclass(frozen=True)
class PacketFlight:
    flight_id: int
    origin: int
    destination: int
    queue: np.ndarray
    created_at: int
    promised_arrival: int | None = None
    payload: object = None

    def __post_init__(self):
        q = np.asarray(self.queue, dtype=int)
        if q.sum() != 1 or not np.isin(q, (0, 1)).all():
            raise InfeasibleActivation(f"flight {self.flight_id} violates single occupancy: {q}")
        if self.promised_arrival is not None and self.promised_arrival < 0:
            raise ValueError("promised arrival must be non-negative")
        object.__setattr__(self, "queue", q)

    @property
    def location(self) -> int:
        return int(np.flatnonzero(self.queue)[0])

    @property
    def arrived(self) -> bool:
        return bool(self.queue[self.destination] == 1)


def create_request(topology: NetworkTopology, origin: int, dest: int, k: int,
                   flight_id: int = 0, payload=None) -> PacketFlight:
    n_q = topology.n_q
    if not (0 <= origin < n_q and 0 <= dest < n_q):
        raise InvalidIndex(f"origin/destination ({origin}, {dest}) outside 0..{n_q - 1}")
    if origin == dest:
        raise ValueError("origin and destination must differ")
    queue = np.zeros(n_q, dtype=int)
    queue[origin] = 1
    return PacketFlight(flight_id, origin, dest, queue, k, None, payload)


def step_flight(flight: PacketFlight, topology: NetworkTopology, activations, outcomes) -> PacketFlight:
    """Apply ``q' = q + R diag(outcomes) v`` to one flight."""
    v = np.asarray(activations, dtype=int)
    b = np.asarray(outcomes, dtype=int)
    moved = flight.queue + topology.routing @ (b * v)
    if moved.sum() != 1 or not np.isin(moved, (0, 1)).all():
        raise InfeasibleActivation(
            f"flight {flight.flight_id}: activation {v.tolist()} leads to queue {moved.tolist()}")
    return replace(flight, queue=moved)


@dataclass(frozen=True)
class Transmission:
    """An ongoing repeated transmission of one flight over one link."""

    flight_id: int
    link: int
    started: int
    repetitions: int
    attempts: int = 0

    @property
    def remaining(self) -> int:
        return self.repetitions - self.attempts


@dataclass(frozen=True)
class Delivery:
    flight_id: int
    origin: int
    destination: int
    created_at: int
    arrived_at: int
    promised_arrival: int | None
    payload: object = None


@dataclass(frozen=True)
class NetworkState:
    time: int
    flights: tuple[PacketFlight, ...] = ()
    chains: tuple[LinkStateChain, ...] = ()
    transmissions: tuple[Transmission, ...] = ()
    delivered: tuple[Delivery, ...] = field(default=(), repr=False)

    def stacked_queue(self) -> np.ndarray:
        if not self.flights:
            return np.zeros(0, dtype=int)
        return np.concatenate([f.queue for f in self.flights])


def retire_served(state: NetworkState) -> NetworkState:
    """Drop flights sitting at their destination and log their arrival."""
    keep, done = [], []
    for flight in state.flights:
        if flight.arrived:
            done.append(Delivery(flight.flight_id, flight.origin, flight.destination, flight.created_at,
                                 state.time, flight.promised_arrival, flight.payload))
        else:
            keep.append(flight)
    if not done:
        return state
    return replace(state, flights=tuple(keep), delivered=state.delivered + tuple(done))
