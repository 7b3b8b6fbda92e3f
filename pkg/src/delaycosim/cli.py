"""Command-line front end.

``delaycosim run CONFIG``       simulate one mode, write trace/events/metrics
``delaycosim compare CONFIG``   simulate both modes on the same seed
``delaycosim forecast CONFIG``  print reliable delay forecasts only

Exit status: 0 success, 1 configuration error, 2 simulation fault.
Log verbosity is read from ``DELAYCOSIM_LOG`` (e.g. ``DEBUG``, ``INFO``).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import tomli

from . import cosim
from .forecast import (RepetitionProfile, WeightedDelayGraph, is_unreachable, shortest_route)

LOG = logging.getLogger("delaycosim")

EXIT_OK, EXIT_CONFIG, EXIT_FAULT = 0, 1, 2

TRACE_COLUMNS = ("step", "subsystem", "state", "input", "pred_state", "pred_input", "age", "out_delay",
                 "promised_delay", "realized_delay", "cost", "containment")
EVENT_COLUMNS = ("step", "kind", "detail")


@dataclass
class RunManifest:
    config: Path
    out: Path
    seed: int | None = None
    mode: str | None = None
    compare: bool = False


# serialization ---------------------------------------------------------------

def _vec(values) -> str:
    return ";".join(repr(float(v)) for v in values)


def _unvec(text: str) -> tuple:
    return tuple(float(v) for v in text.split(";")) if text else ()


def trace_to_csv(trace: cosim.TraceLog) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in trace.records:
        w.writerow([r.step, r.subsystem, _vec(r.state), _vec(r.input), _vec(r.pred_state), _vec(r.pred_input),
                    r.age, r.out_delay, r.promised_delay, r.realized_delay, repr(float(r.cost)), r.containment])
    return buf.getvalue()


def records_from_csv(text: str) -> list:
    rows = csv.DictReader(io.StringIO(text))
    if tuple(rows.fieldnames or ()) != TRACE_COLUMNS:
        raise ValueError("unexpected trace columns")
    return [cosim.TraceRecord(int(r["step"]), r["subsystem"], _unvec(r["state"]), _unvec(r["input"]),
                              _unvec(r["pred_state"]), _unvec(r["pred_input"]), int(r["age"]), int(r["out_delay"]),
                              int(r["promised_delay"]), int(r["realized_delay"]), float(r["cost"]),
                              r["containment"]) for r in rows]


def events_to_csv(trace: cosim.TraceLog) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVENT_COLUMNS)
    for step, kind, detail in trace.events:
        w.writerow([step, kind, detail])
    return buf.getvalue()


def events_from_csv(text: str) -> list:
    return [(int(r["step"]), r["kind"], r["detail"]) for r in csv.DictReader(io.StringIO(text))]


def read_trace(directory, stem="trace") -> cosim.TraceLog:
    """Rebuild a :class:`TraceLog` from the files written by :func:`write_trace`."""
    directory = Path(directory)
    summary = json.loads((directory / f"{stem}.json").read_text())
    trace = cosim.TraceLog(summary["scenario"], summary["mode"], summary["seed"])
    trace.records = records_from_csv((directory / f"{stem}.csv").read_text())
    trace.events = events_from_csv((directory / f"{stem}_events.csv").read_text())
    trace.fault = tuple(summary["fault"]) if summary["fault"] is not None else None
    return trace


def atomic_write(path: Path, text: str):
    """Write ``text`` next to ``path`` and rename it into place."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    umask = os.umask(0)
    os.umask(umask)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _summary(trace: cosim.TraceLog, scores: dict) -> dict:
    return {"scenario": trace.scenario, "mode": trace.mode, "seed": trace.seed,
            "steps": len({r.step for r in trace.records}),
            "fault": list(trace.fault) if trace.fault is not None else None,
            "metrics": {k: scores[k] for k in sorted(scores)}}


def write_trace(directory: Path, trace: cosim.TraceLog, scores: dict, stem="trace"):
    atomic_write(directory / f"{stem}.csv", trace_to_csv(trace))
    atomic_write(directory / f"{stem}_events.csv", events_to_csv(trace))
    atomic_write(directory / f"{stem}.json", json.dumps(_summary(trace, scores), indent=2, sort_keys=True) + "\n")


# commands --------------------------------------------------------------------

def _load(manifest: RunManifest) -> cosim.ScenarioConfig:
    cfg = cosim.load_config(manifest.config)
    if manifest.mode is not None and manifest.mode not in cosim.MODES:
        raise cosim.ConfigError(f"unknown mode {manifest.mode!r}")
    return cfg.with_overrides(seed=manifest.seed, mode=manifest.mode)


def cmd_run(manifest: RunManifest, out=None) -> int:
    out = sys.stdout if out is None else out
    try:
        cfg = _load(manifest)
    except cosim.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    trace = cosim.run(cfg)
    scores = cosim.metrics(trace, cosim.weights_by_name(cfg))
    write_trace(Path(manifest.out), trace, scores)
    print(f"scenario {cfg.name} mode={cfg.mode} seed={cfg.seed}", file=out)
    for name in sorted(k for k in scores if k != "total"):
        print(f"  {name:<8} {scores[name]:12.4f}", file=out)
    print(f"  {'total':<8} {scores['total']:12.4f}", file=out)
    if trace.fault is not None:
        print(f"fault at step {trace.fault[0]}: {trace.fault[1]}", file=out)
        return EXIT_FAULT
    return EXIT_OK


def comparison_table(names, scores) -> str:
    """Table with one row per mode and one column per subsystem plus total."""
    cols = list(names) + ["total"]
    labels = {"worstcase": "worst case delay", "predicted": "predicted delay"}
    lines = ["{:<18}".format("") + "".join(f"{c:>12}" for c in cols)]
    for mode in ("worstcase", "predicted"):
        lines.append(f"{labels[mode]:<18}" + "".join(f"{scores[mode][c]:12.2f}" for c in cols))
    wc, pr = scores["worstcase"]["total"], scores["predicted"]["total"]
    gain = 0.0 if wc == 0 else 100.0 * (wc - pr) / wc
    lines.append(f"improvement: {gain:.2f}%")
    return "\n".join(lines)


def cmd_compare(manifest: RunManifest, out=None) -> int:
    out = sys.stdout if out is None else out
    try:
        cfg = _load(RunManifest(manifest.config, manifest.out, manifest.seed, None, True))
    except cosim.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    traces, scores = cosim.compare(cfg)
    directory = Path(manifest.out)
    for mode, trace in traces.items():
        write_trace(directory, trace, scores[mode], stem=f"trace_{mode}")
    names = [s.name for s in cfg.subsystems]
    table = comparison_table(names, scores)
    atomic_write(directory / "comparison.txt", table + "\n")
    print(table, file=out)
    faults = {m: t.fault for m, t in traces.items() if t.fault is not None}
    for mode, fault in sorted(faults.items()):
        print(f"fault in {mode} at step {fault[0]}: {fault[1]}", file=out)
    return EXIT_FAULT if faults else EXIT_OK


def _forecast_graph(data: dict, cfg_loader):
    """Delay graph from an explicit ``[forecast]`` table or from the scenario network."""
    fc = data.get("forecast")
    if fc is not None and "edges" in fc:
        nodes = list(fc["nodes"])
        seqs = [(nodes.index(e["from"]), nodes.index(e["to"]), e["weights"]) for e in fc["edges"]]
        return nodes, WeightedDelayGraph.from_sequences(len(nodes), seqs, int(fc.get("start", 0))), fc
    cfg = cfg_loader()
    start = int((fc or {}).get("start", 0))
    profile = RepetitionProfile.from_chains(cfg.chains, cfg.phi, start, cfg.horizon)
    return list(cfg.topology.names), WeightedDelayGraph.from_profile(cfg.topology, profile), fc or {}


def cmd_forecast(manifest: RunManifest, out=None) -> int:
    out = sys.stdout if out is None else out
    try:
        with Path(manifest.config).open("rb") as fh:
            data = tomli.load(fh)
        nodes, graph, fc = _forecast_graph(data, lambda: _load(manifest))
        queries = fc.get("queries")
        if queries is None:
            queries = [[a, b] for a in nodes for b in nodes if a != b]
        pairs = [(nodes.index(a), nodes.index(b)) for a, b in queries]
        steps = int(fc.get("steps", 1))
        start = graph.start
    except (OSError, cosim.ConfigError, KeyError, ValueError, tomli.TOMLDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for s, t in pairs:
        for k in range(start, start + steps):
            delay, hops = shortest_route(graph, s, t, k)
            if is_unreachable(delay):
                print(f"{nodes[s]} -> {nodes[t]} k={k}: unreachable", file=out)
                continue
            path = [nodes[s]] + [nodes[h[2]] for h in hops]
            print(f"{nodes[s]} -> {nodes[t]} k={k}: tau={delay} path={'->'.join(path)}", file=out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="delaycosim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "compare", "forecast"):
        p = sub.add_parser(name)
        p.add_argument("config", type=Path)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=Path, default=Path("out"))
        p.add_argument("--mode", choices=cosim.MODES, default=None)
    return parser


def configure_logging():
    level = os.environ.get("DELAYCOSIM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    manifest = RunManifest(args.config, args.out, args.seed, args.mode, args.command == "compare")
    handler = {"run": cmd_run, "compare": cmd_compare, "forecast": cmd_forecast}[args.command]
    return handler(manifest)


if __name__ == "__main__":
    sys.exit(main())
