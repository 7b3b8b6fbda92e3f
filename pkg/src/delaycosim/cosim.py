"""Global-clock co-simulation of the network controller and the plant controllers.

Per step ``k``:

1. the network controller derives repetition counts and delay forecasts
   from the link chains and hands them to the controllers at no delay;
2. every controller runs once, in topological order of the information
   graph, using the newest message that is available from each predecessor;
3. the outgoing messages become packet requests and the network policy
   schedules one step of transmissions;
4. the plants (and the reference generator) advance.

In ``worstcase`` mode every message is held back until exactly
``tau_max`` steps after it was sent and every delay forecast is replaced
by ``tau_max``; nothing else differs between the modes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import tomli

from . import dmpc
from .forecast import RepetitionProfile, WeightedDelayGraph, forecast_pairs
from .netmodel import LinkSpec, LinkStateChain, NetworkTopology
from .rpnc import Request, RpncController, SchedulerInfeasible

LOG = logging.getLogger(__name__)

MODES = ("predicted", "worstcase")
SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ReferenceStep:
    at: int
    value: float
    announced: int


@dataclass
class ReferenceSpec:
    """Virtual predecessor driven by a piecewise constant input reference.

    A step is part of the communicated plan from its ``announced`` step on;
    before that the generator's plan holds the current value.
    """

    name: str
    feeds: str
    bound: float
    initial: float = 0.0
    steps: tuple = ()

    def value(self, t: int) -> float:
        val = self.initial
        for s in sorted(self.steps, key=lambda s: s.at):
            if s.at <= t:
                val = s.value
        return val

    def planned(self, t: int, now: int) -> float:
        val = self.initial
        for s in sorted(self.steps, key=lambda s: s.at):
            if s.at <= t and (s.announced <= now or s.at <= now):
                val = s.value
        return val


@dataclass
class SubsystemSpec:
    name: str
    node: str
    plant: dmpc.PlantModel
    x0: np.ndarray
    predecessors: tuple
    weights: dmpc.Weights
    tail_bound: float
    relative_bound: np.ndarray | None = None


@dataclass(frozen=True)
class PinnedDelay:
    sender: str
    receiver: str
    first: int
    last: int
    delay: int


@dataclass
class ScenarioConfig:
    name: str
    duration: int
    horizon: int
    phi: float
    seed: int
    mode: str
    topology: NetworkTopology
    chains: tuple
    subsystems: list
    reference: ReferenceSpec | None
    tau_max: dict
    pinned: tuple = ()
    relaxed: bool = False
    source: Path | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.duration < 0 or self.horizon < 1:
            raise ConfigError("duration must be >= 0 and horizon >= 1")
        if not 0.0 < self.phi < 1.0:
            raise ConfigError("phi must lie in (0, 1)")
        names = [s.name for s in self.subsystems]
        if len(set(names)) != len(names):
            raise ConfigError("subsystem names must be unique")
        known = set(names) | ({self.reference.name} if self.reference else set())
        for s in self.subsystems:
            for p in s.predecessors:
                if p not in known:
                    raise ConfigError(f"{s.name}: unknown predecessor {p}")
            if s.node not in self.topology.names:
                raise ConfigError(f"{s.name}: unknown node {s.node}")
        try:
            self.graph = dmpc.InfoGraph({s.name: s.predecessors for s in self.subsystems})
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        for s in self.subsystems:
            for p in s.predecessors:
                if self.reference is not None and p == self.reference.name:
                    continue
                tau = self.tau_max.get((p, s.name))
                if tau is None or tau < 1:
                    raise ConfigError(f"tau_max for {p}->{s.name} must be given and >= 1")

    def by_name(self, name) -> SubsystemSpec:
        for s in self.subsystems:
            if s.name == name:
                return s
        raise KeyError(name)

    def with_overrides(self, seed=None, mode=None) -> "ScenarioConfig":
        return replace(self, seed=self.seed if seed is None else int(seed), mode=self.mode if mode is None else mode)


@dataclass(frozen=True)
class TraceRecord:
    step: int
    subsystem: str
    state: tuple
    input: tuple
    pred_state: tuple
    pred_input: tuple
    age: int
    out_delay: int
    promised_delay: int
    realized_delay: int
    cost: float
    containment: str


@dataclass
class TraceLog:
    scenario: str
    mode: str
    seed: int
    records: list = field(default_factory=list)
    events: list = field(default_factory=list)
    fault: tuple | None = None

    def for_subsystem(self, name):
        return [r for r in self.records if r.subsystem == name]

    def record_at(self, step: int, name: str) -> TraceRecord:
        for r in self.records:
            if r.step == step and r.subsystem == name:
                return r
        raise KeyError((step, name))


@dataclass
class _Message:
    sender: str
    receiver: str
    sent_at: int
    payload: dmpc.PeerMessage
    available_at: int | None = None
    promised_at: int | None = None
    network_arrival: int | None = None
    flight_id: int | None = None


def stage_cost(weights: dmpc.Weights, x_aug, u_aug) -> float:
    x_aug = np.asarray(x_aug, float)
    u_aug = np.asarray(u_aug, float)
    return float(x_aug @ weights.Q_x @ x_aug + u_aug @ weights.Q_u @ u_aug)


def metrics(trace: TraceLog, weights: dict) -> dict:
    """Summed quadratic deviation per subsystem, plus ``total``.

    Each record contributes ``|[x; x_pred]|^2_Qx + |[u; u_pred]|^2_Qu`` with
    the realized values.
    """
    out = {}
    for rec in trace.records:
        w = weights[rec.subsystem]
        c = stage_cost(w, np.r_[rec.state, rec.pred_state], np.r_[rec.input, rec.pred_input])
        out[rec.subsystem] = out.get(rec.subsystem, 0.0) + c
    out["total"] = float(sum(out.values()))
    return out


class Simulation:
    """Mutable state of one co-simulation run."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.H = cfg.horizon
        self.rng = np.random.default_rng(cfg.seed)
        self.network = RpncController(cfg.topology, cfg.phi, cfg.horizon, cfg.relaxed)
        self.net_state = self.network.initial_state(cfg.chains)
        self.order = [n for n in cfg.graph.order if n in {s.name for s in cfg.subsystems}]
        self.states = {s.name: np.asarray(s.x0, float).copy() for s in cfg.subsystems}
        self.controllers = {}
        self.messages = {}
        self.flight_msg = {}
        ref = cfg.reference
        if ref is not None:
            self.ref_state = np.asarray(cfg.by_name(ref.feeds).x0, float).copy()
        for s in cfg.subsystems:
            preds = []
            tails = {}
            for p in s.predecessors:
                if ref is not None and p == ref.name:
                    preds.append((p, s.plant))
                    tails[p] = self._box(ref.bound, s.plant.n_u)
                else:
                    ps = cfg.by_name(p)
                    preds.append((p, ps.plant))
                    tails[p] = self._box(ps.tail_bound, ps.plant.n_u)
            coupling = None
            if s.relative_bound is not None and preds:
                coupling = relative_box(s.plant.n_x, [pp.n_x for _, pp in preds], s.relative_bound)
            ctl = dmpc.LocalController(s.name, s.plant, preds, s.weights, self.H, coupling, tails)
            ctl.previous = self._bootstrap(s.name, s.x0, s.plant.n_u, s.tail_bound)
            self.controllers[s.name] = ctl
            for p, _ in preds:
                if ref is not None and p == ref.name:
                    continue
                boot = self._bootstrap(p, cfg.by_name(p).x0, cfg.by_name(p).plant.n_u, cfg.by_name(p).tail_bound)
                self.messages.setdefault((p, s.name), []).append(
                    _Message(p, s.name, 0, boot, available_at=0, network_arrival=0))

    def _box(self, bound, n_u):
        b = np.broadcast_to(np.asarray(bound, float), (n_u,))
        return np.concatenate([b, b])

    def _bootstrap(self, name, x0, n_u, tail):
        bounds = np.tile(self._box(tail, n_u), (self.H, 1))
        bounds[0] = 0.0
        return dmpc.PeerMessage(name, 0, np.asarray(x0, float).copy(), np.zeros(self.H * n_u), bounds)

    # delay bookkeeping -------------------------------------------------
    def _tau_max(self, sender, receiver):
        return int(self.cfg.tau_max[(sender, receiver)])

    def _pinned(self, sender, receiver, k):
        for p in self.cfg.pinned:
            if p.sender == sender and p.receiver == receiver and p.first <= k <= p.last:
                return p.delay
        return None

    def _newest(self, sender, receiver, k):
        best = None
        for m in self.messages.get((sender, receiver), ()):
            if m.available_at is not None and m.available_at <= k and (best is None or m.sent_at > best.sent_at):
                best = m
        return best

    def _forecast_delay(self, table, sender, receiver, k):
        pinned = self._pinned(sender, receiver, k)
        if pinned is not None:
            return pinned
        if self.cfg.mode == "worstcase":
            return self._tau_max(sender, receiver)
        s_node = self.cfg.topology.index_of(self.cfg.by_name(sender).node)
        r_node = self.cfg.topology.index_of(self.cfg.by_name(receiver).node)
        val = table.get(s_node, r_node, k) if table is not None else None
        return self._tau_max(sender, receiver) if val is None else val

    def _age_forecast(self, table, sender, receiver, k, age):
        tau_max = self._tau_max(sender, receiver)
        if self.cfg.mode == "worstcase":
            return [age] + [min(age + l, tau_max) for l in range(1, self.H)]
        arrivals = []
        for m in self.messages.get((sender, receiver), ()):
            when = m.available_at if m.available_at is not None else m.promised_at
            if when is not None:
                arrivals.append((when, m.sent_at))
        for off in range(self.H):
            tau = self._forecast_delay(table, sender, receiver, k + off)
            if tau is not None:
                arrivals.append((k + off + tau, k + off))
        out = [age]
        for l in range(1, self.H):
            seen = [s for when, s in arrivals if when <= k + l]
            newest = max(seen) if seen else k - age
            out.append(min(k + l - newest, tau_max))
        return out

    # main loop ---------------------------------------------------------
    def step(self, k: int, trace: TraceLog):
        cfg = self.cfg
        profile = RepetitionProfile.from_chains(self.net_state.network.chains, cfg.phi, k, self.H)
        graph = WeightedDelayGraph.from_profile(cfg.topology, profile)
        pairs = {(cfg.topology.index_of(cfg.by_name(p).node), cfg.topology.index_of(s.node))
                 for s in cfg.subsystems for p in s.predecessors if cfg.reference is None or p != cfg.reference.name}
        table = forecast_pairs(graph, sorted(pairs), k, self.H) if cfg.mode == "predicted" else None

        ref = cfg.reference
        inputs, sent, ages, outd = {}, {}, {}, {}
        results = {}
        for name in self.order:
            spec = cfg.by_name(name)
            ctl = self.controllers[name]
            inbox, delay = {}, dmpc.DelayState()
            for p in spec.predecessors:
                if ref is not None and p == ref.name:
                    inbox[p] = self._reference_message(k)
                    delay.ages[p] = 0
                    delay.age_forecast[p] = [0] * self.H
                    continue
                msg = self._newest(p, name, k)
                age = k - msg.sent_at
                inbox[p] = msg.payload
                delay.ages[p] = age
                delay.age_forecast[p] = self._age_forecast(table, p, name, k, age)
            followers = cfg.graph.followers(name)
            delay.out_delay = max((self._forecast_delay(table, name, f, k) for f in followers), default=0)
            res = ctl.step(k, self.states[name], inbox, delay)
            results[name] = res
            inputs[name] = res.u
            sent[name] = res.message
            ages[name] = min(delay.ages.values()) if delay.ages else -1
            outd[name] = delay.out_delay

        requests = []
        new_msgs = []
        for name in self.order:
            for f in cfg.graph.followers(name):
                m = _Message(name, f, k, sent[name])
                self.messages.setdefault((name, f), []).append(m)
                pinned = self._pinned(name, f, k)
                if pinned is not None:
                    m.available_at = k + pinned
                    m.network_arrival = k + pinned
                    m.promised_at = k + pinned
                    continue
                new_msgs.append(m)
                requests.append(Request(cfg.topology.index_of(cfg.by_name(name).node),
                                        cfg.topology.index_of(cfg.by_name(f).node), (name, f, k)))
        report, self.net_state = self.network.step(self.net_state, requests, self.rng)
        for flight, m in zip(report.created, new_msgs):
            m.flight_id = flight.flight_id
            self.flight_msg[flight.flight_id] = m
        for fid, when in report.absolute_promises.items():
            m = self.flight_msg.get(fid)
            if m is not None and when is not None and m.network_arrival is None:
                if cfg.mode == "worstcase":
                    when = max(when, m.sent_at + self._tau_max(m.sender, m.receiver))
                m.promised_at = when
        for d in report.deliveries:
            m = self.flight_msg.pop(d.flight_id, None)
            if m is None:
                continue
            m.network_arrival = d.arrived_at
            m.available_at = d.arrived_at
            if cfg.mode == "worstcase":
                m.available_at = max(d.arrived_at, m.sent_at + self._tau_max(m.sender, m.receiver))
        for ev in report.events:
            trace.events.append((k, ev[0], f"flight={ev[1]} link={ev[2]}"))

        # records before the plants move
        for name in self.order:
            spec = cfg.by_name(name)
            px, pu = [], []
            for p in spec.predecessors:
                if ref is not None and p == ref.name:
                    px.append(self.ref_state)
                    pu.append(np.atleast_1d(ref.value(k)))
                else:
                    px.append(self.states[p])
                    pu.append(inputs[p])
            px = np.concatenate(px) if px else np.zeros(0)
            pu = np.concatenate(pu) if pu else np.zeros(0)
            cost = stage_cost(spec.weights, np.r_[self.states[name], px], np.r_[inputs[name], pu])
            trace.records.append(TraceRecord(
                k, name, tuple(float(v) for v in self.states[name]), tuple(float(v) for v in inputs[name]),
                tuple(float(v) for v in px), tuple(float(v) for v in pu), int(ages[name]), int(outd[name]),
                -1, -1, cost, results[name].containment))

        for name in self.order:
            spec = cfg.by_name(name)
            self.states[name] = spec.plant.step(self.states[name], inputs[name])
        if ref is not None:
            self.ref_state = cfg.by_name(ref.feeds).plant.step(self.ref_state, [ref.value(k)])
        return results

    def _reference_message(self, k):
        ref = self.cfg.reference
        plan = np.array([ref.planned(k + l, k) for l in range(self.H)])
        bounds = np.tile([ref.bound, ref.bound], (self.H, 1))
        bounds[0] = 0.0
        return dmpc.PeerMessage(ref.name, k, self.ref_state.copy(), plan, bounds)

    def finalize(self, trace: TraceLog):
        """Fill promised and realized delays of every sent message into the records."""
        index = {(r.step, r.subsystem): i for i, r in enumerate(trace.records)}
        for (sender, receiver), msgs in sorted(self.messages.items()):
            for m in msgs:
                i = index.get((m.sent_at, sender))
                if i is None or m.payload.sent_at != m.sent_at or (m.sent_at == 0 and m.network_arrival == 0):
                    continue
                rec = trace.records[i]
                promised = m.promised_at - m.sent_at if m.promised_at is not None else -1
                realized = m.available_at - m.sent_at if m.available_at is not None else -1
                trace.records[i] = replace(rec, promised_delay=promised, realized_delay=realized)


def relative_box(n_x: int, pred_dims, bound) -> dmpc.StateConstraint:
    """``|x - x_pred| <= bound`` componentwise for every predecessor."""
    bound = np.broadcast_to(np.asarray(bound, float), (n_x,))
    total = n_x + sum(pred_dims)
    rows, rhs = [], []
    off = n_x
    for d in pred_dims:
        if d != n_x:
            raise ConfigError("relative bounds need equal state dimensions")
        D = np.zeros((n_x, total))
        D[:, :n_x] = np.eye(n_x)
        D[:, off:off + d] = -np.eye(d)
        rows += [D, -D]
        rhs += [bound, bound]
        off += d
    return dmpc.StateConstraint(np.vstack(rows), np.concatenate(rhs))


def run(cfg: ScenarioConfig) -> TraceLog:
    """Simulate ``cfg.duration`` steps; faults are recorded, not raised."""
    trace = TraceLog(cfg.name, cfg.mode, cfg.seed)
    sim = Simulation(cfg)
    for k in range(cfg.duration):
        try:
            sim.step(k, trace)
        except (dmpc.ControlInfeasible, SchedulerInfeasible) as exc:
            LOG.error("fault at step %d: %s", k, exc)
            trace.fault = (k, f"{type(exc).__name__}: {exc}")
            break
    sim.finalize(trace)
    return trace


def weights_by_name(cfg: ScenarioConfig) -> dict:
    return {s.name: s.weights for s in cfg.subsystems}


def compare(cfg: ScenarioConfig):
    """Run both modes on the same seed; returns ``(traces, metrics)`` keyed by mode."""
    traces, scores = {}, {}
    for mode in MODES:
        tr = run(cfg.with_overrides(mode=mode))
        traces[mode] = tr
        scores[mode] = metrics(tr, weights_by_name(cfg))
    return traces, scores


# configuration -------------------------------------------------------------

def relative_weights(n_x: int, n_pred: int, state_w, input_w, input_abs: float, n_u: int = 1):
    """Quadratic weights on ``x - x_pred`` and ``u - u_pred`` for every predecessor."""
    W = np.diag(np.broadcast_to(np.asarray(state_w, float), (n_x,)))
    total = n_x * (1 + n_pred)
    Qx = np.zeros((total, total))
    U = np.diag(np.broadcast_to(np.asarray(input_w, float), (n_u,)))
    Qu = np.zeros((n_u * (1 + n_pred),) * 2)
    Qu[:n_u, :n_u] += input_abs * np.eye(n_u)
    for p in range(1, n_pred + 1):
        E = np.zeros((n_x, total))
        E[:, :n_x] = np.eye(n_x)
        E[:, p * n_x:(p + 1) * n_x] = -np.eye(n_x)
        Qx += E.T @ W @ E
        F = np.zeros((n_u, Qu.shape[0]))
        F[:, :n_u] = np.eye(n_u)
        F[:, p * n_u:(p + 1) * n_u] = -np.eye(n_u)
        Qu += F.T @ U @ F
    return Qx, Qu


def _chain(spec) -> LinkStateChain:
    if "p" in spec:
        return LinkStateChain.constant(float(spec["p"]))
    return LinkStateChain(np.asarray(spec["transition"], float), np.asarray(spec["success"], float),
                          int(spec.get("state", 0)))


def config_from_dict(data: dict, source: Path | None = None) -> ScenarioConfig:
    """Build a :class:`ScenarioConfig` from the parsed scenario file."""
    try:
        if int(data.get("schema_version", -1)) != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {data.get('schema_version')!r}")
        net = data["network"]
        nodes = list(net["nodes"])
        chain_defs = net.get("chains", {})
        links, chains = [], []
        for i, ln in enumerate(net["links"]):
            src = ln.get("from")
            links.append(LinkSpec(i, nodes.index(src) if src is not None else None, nodes.index(ln["to"]),
                                  ln.get("name", "")))
            ch = ln.get("chain", {"p": 1.0})
            chains.append(_chain(chain_defs[ch] if isinstance(ch, str) else ch))
        groups = net.get("groups", [[i] for i in range(len(links))])
        C = np.zeros((len(groups), len(links)), dtype=int)
        for g, members in enumerate(groups):
            C[g, list(members)] = 1
        topology = NetworkTopology(len(nodes), tuple(links), C, tuple(nodes))

        ref = None
        if "reference" in data:
            r = data["reference"]
            ref = ReferenceSpec(r["name"], r["feeds"], float(r["bound"]), float(r.get("initial", 0.0)),
                                tuple(ReferenceStep(int(s["at"]), float(s["value"]), int(s.get("announced", s["at"])))
                                      for s in r.get("steps", [])))
        subsystems = []
        for p in data["plants"]:
            plant = dmpc.PlantModel.box_input(p["A"], p["B"], p["u_min"], p["u_max"])
            preds = tuple(p.get("predecessors", []))
            n_x, n_u = plant.n_x, plant.n_u
            w = p["weights"]
            if "Q_x" in w:
                Qx, Qu, QT = w["Q_x"], w["Q_u"], w.get("Q_T", w["Q_x"])
            else:
                Qx, Qu = relative_weights(n_x, len(preds), w["state"], w["input"], w.get("input_abs", 0.0), n_u)
                QT = float(w.get("terminal_scale", 1.0)) * Qx
            rel = p.get("relative_bound")
            subsystems.append(SubsystemSpec(
                p["name"], p["node"], plant, np.asarray(p.get("x0", np.zeros(n_x)), float), preds,
                dmpc.Weights(Qx, Qu, QT), float(p.get("tail_bound", 1.0)),
                None if rel is None else np.asarray(rel, float)))
        tau_max = {(t["sender"], t["receiver"]): int(t["tau_max"]) for t in data.get("pairs", [])}
        pinned = tuple(PinnedDelay(o["sender"], o["receiver"], int(o["first"]), int(o["last"]), int(o["delay"]))
                       for o in data.get("pinned_delays", []))
        sim = data.get("simulation", {})
        return ScenarioConfig(
            name=str(data.get("name", "scenario")), duration=int(sim.get("duration", 0)),
            horizon=int(sim.get("horizon", 5)), phi=float(sim.get("phi", 0.9)), seed=int(sim.get("seed", 0)),
            mode=str(sim.get("mode", "predicted")), topology=topology, chains=tuple(chains),
            subsystems=subsystems, reference=ref, tau_max=tau_max, pinned=pinned,
            relaxed=bool(sim.get("relaxed", False)), source=source)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ConfigError(f"invalid scenario: {type(exc).__name__}: {exc}") from exc


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomli.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(data, path)
