"""Discrete-time dynamic graphs: data model, edge-list ingestion, event logs.

Node identity is the external string label. Dense integer ids are assigned in
order of first appearance and are only meaningful inside one ``DynamicGraph``.
"""

from __future__ import annotations

import json
import logging
import math
import re
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ValidationError

log = logging.getLogger(__name__)

EVENT_KINDS = ("add_node", "del_node", "add_edge", "del_edge")


@dataclass(frozen=True)
class NodeRegistry:
    labels: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValidationError("duplicate labels in registry")
        object.__setattr__(self, "_index", {lab: i for i, lab in enumerate(self.labels)})

    @property
    def index(self) -> dict[str, int]:
        return self._index

    def __len__(self):
        return len(self.labels)

    def id_of(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise ValidationError(f"unknown node label {label!r}") from None


@dataclass(frozen=True)
class Snapshot:
    timestamp_index: int
    timestamp_label: str
    edges: tuple[tuple[int, int, float], ...]
    node_mask: frozenset[int]
    self_loops: int = field(default=0, compare=False)  # diagnostic only

    @property
    def nodes(self) -> list[int]:
        return sorted(self.node_mask)


@dataclass(frozen=True)
class DynamicGraph:
    registry: NodeRegistry
    snapshots: tuple[Snapshot, ...]
    directed: bool = False

    @property
    def T(self) -> int:
        return len(self.snapshots)

    def label(self, node_id: int) -> str:
        return self.registry.labels[node_id]

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "directed": self.directed,
            "labels": list(self.registry.labels),
            "snapshots": [
                {
                    "timestamp_index": s.timestamp_index,
                    "timestamp_label": s.timestamp_label,
                    "nodes": s.nodes,
                    "edges": [[u, v, w] for u, v, w in s.edges],
                    "self_loops": s.self_loops,
                }
                for s in self.snapshots
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DynamicGraph":
        try:
            registry = NodeRegistry(tuple(data["labels"]))
            snaps = tuple(
                Snapshot(
                    timestamp_index=int(s["timestamp_index"]),
                    timestamp_label=str(s["timestamp_label"]),
                    edges=tuple((int(u), int(v), float(w)) for u, v, w in s["edges"]),
                    node_mask=frozenset(int(n) for n in s["nodes"]),
                    self_loops=int(s.get("self_loops", 0)),
                )
                for s in data["snapshots"]
            )
            return cls(registry, snaps, bool(data.get("directed", False)))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed graph document: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DynamicGraph":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def write_edge_lists(self, directory) -> Path:
        """Write one edge-list file per snapshot plus a manifest; return the manifest path.

        Nodes first seen in a snapshot are declared up front as single-label
        rows (in id order) so that re-parsing reproduces the registry order;
        isolated nodes are likewise written as single-label rows.
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = []
        declared: set[int] = set()
        for s in self.snapshots:
            name = f"snapshot_{s.timestamp_index:04d}.tsv"
            fresh = [n for n in s.nodes if n not in declared]
            declared.update(fresh)
            lines = [self.label(n) for n in fresh]
            touched = set(fresh)
            for u, v, w in s.edges:
                lines.append(f"{self.label(u)}\t{self.label(v)}\t{w!r}")
                touched.update((u, v))
            for n in s.nodes:
                if n not in touched:
                    lines.append(self.label(n))
            (directory / name).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
            manifest.append({"path": name, "timestamp_label": s.timestamp_label})
        mpath = directory / "manifest.json"
        mpath.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
        return mpath


# -- edge-list parsing ---------------------------------------------------------


@dataclass
class _ParsedFile:
    rows: list[tuple[str, str, float]] = field(default_factory=list)
    isolated: list[str] = field(default_factory=list)
    self_loop_labels: list[str] = field(default_factory=list)
    seen: dict[str, None] = field(default_factory=dict)  # labels in order of appearance


def _parse_edge_file(path: Path) -> _ParsedFile:
    out = _ParsedFile()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            parts = [p.strip() for p in parts if p.strip()]
            if len(parts) == 1:
                out.isolated.append(parts[0])
                out.seen.setdefault(parts[0])
                continue
            if len(parts) not in (2, 3):
                raise ValidationError(f"{path}:{lineno}: malformed row {raw.rstrip()!r}")
            src, dst = parts[0], parts[1]
            out.seen.setdefault(src)
            out.seen.setdefault(dst)
            try:
                weight = float(parts[2]) if len(parts) == 3 else 1.0
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: malformed weight {parts[2]!r}") from None
            if not math.isfinite(weight):
                raise ValidationError(f"{path}:{lineno}: non-finite weight {parts[2]!r}")
            if src == dst:
                out.self_loop_labels.append(src)
                continue
            out.rows.append((src, dst, weight))
    return out


def _natural_key(text: str):
    return [int(tok) if tok.isdigit() else tok for tok in re.split(r"(\d+)", text)]


def read_manifest(path) -> list[tuple[Path, str]]:
    """Read a JSON manifest ``[{path, timestamp_label}, ...]``; paths resolve relative to it."""
    path = Path(path)
    try:
        entries = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid manifest JSON: {exc}") from exc
    if not isinstance(entries, list):
        raise ValidationError(f"{path}: manifest must be a JSON array")
    out = []
    for e in entries:
        p = Path(e["path"])
        if not p.is_absolute():
            p = path.parent / p
        out.append((p, str(e.get("timestamp_label", p.stem))))
    return out


def parse_snapshots(
    paths: Sequence,
    directed: bool = False,
    timestamp_labels: Sequence[str] | None = None,
    threads: int = 1,
) -> DynamicGraph:
    """Parse one edge-list file per snapshot into a ``DynamicGraph``.

    Without ``timestamp_labels`` the files are ordered by a natural sort of
    their stems (so ``g_2`` precedes ``g_10``) and the stem becomes the label.
    Duplicate rows are summed; self-loops are dropped and counted.
    """
    paths = [Path(p) for p in paths]
    if not paths:
        raise ValidationError("no snapshots")
    if timestamp_labels is None:
        order = sorted(range(len(paths)), key=lambda i: _natural_key(paths[i].stem))
        paths = [paths[i] for i in order]
        timestamp_labels = [p.stem for p in paths]
    elif len(timestamp_labels) != len(paths):
        raise ValidationError("timestamp_labels length does not match paths")

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parsed = list(pool.map(_parse_edge_file, paths))
    else:
        parsed = [_parse_edge_file(p) for p in paths]

    # single-owner merge: ids follow first appearance in snapshot order
    labels: dict[str, int] = {}

    def intern(lab):
        if lab not in labels:
            labels[lab] = len(labels)
        return labels[lab]

    snaps = []
    for t, (pf, tlabel) in enumerate(zip(parsed, timestamp_labels)):
        weights: dict[tuple[int, int], float] = {}
        mask = set()
        for lab in pf.seen:
            intern(lab)
        for src, dst, w in pf.rows:
            u, v = intern(src), intern(dst)
            if not directed and v < u:
                u, v = v, u
            weights[(u, v)] = weights.get((u, v), 0.0) + w
            mask.update((u, v))
        for lab in pf.isolated + pf.self_loop_labels:
            mask.add(intern(lab))
        if pf.self_loop_labels:
            log.warning("%s: dropped %d self-loop row(s)", paths[t], len(pf.self_loop_labels))
        edges = tuple(sorted((u, v, w) for (u, v), w in weights.items()))
        snaps.append(Snapshot(t, str(tlabel), edges, frozenset(mask), len(pf.self_loop_labels)))

    return DynamicGraph(NodeRegistry(tuple(labels)), tuple(snaps), directed)


def parse_manifest(path, directed: bool = False, threads: int = 1) -> DynamicGraph:
    entries = read_manifest(path)
    if not entries:
        raise ValidationError("no snapshots")
    return parse_snapshots([p for p, _ in entries], directed, [lab for _, lab in entries], threads)


# -- event logs ----------------------------------------------------------------


@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    src: str
    dst: str | None = None
    weight: float = 1.0


@dataclass(frozen=True)
class EventLog:
    events: tuple[Event, ...]

    @classmethod
    def read_jsonl(cls, path) -> "EventLog":
        events = []
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                if not raw.strip():
                    continue
                try:
                    rec = json.loads(raw)
                    ev = Event(
                        float(rec["time"]),
                        str(rec["kind"]),
                        str(rec["src"]),
                        None if rec.get("dst") is None else str(rec["dst"]),
                        float(rec.get("weight", 1.0)),
                    )
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ValidationError(f"{path}:{lineno}: malformed event: {exc}") from exc
                events.append(ev)
        return cls(tuple(events))

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.events:
                rec = {"time": e.time, "kind": e.kind, "src": e.src}
                if e.dst is not None:
                    rec["dst"] = e.dst
                    rec["weight"] = e.weight
                fh.write(json.dumps(rec) + "\n")


def _check_event(e: Event) -> None:
    if e.kind not in EVENT_KINDS:
        raise ValidationError(f"unknown event kind {e.kind!r}")
    if not math.isfinite(e.time):
        raise ValidationError(f"non-finite event time {e.time!r}")
    if e.kind.endswith("_edge"):
        if e.dst is None:
            raise ValidationError(f"{e.kind} event at t={e.time} lacks dst")
        if not math.isfinite(e.weight):
            raise ValidationError(f"non-finite weight at t={e.time}")


def discretize_events(log_: EventLog, interval: float, directed: bool = False, origin: float = 0.0) -> DynamicGraph:
    """Bucket an event log into snapshots of width ``interval`` starting at ``origin``.

    Each node/edge lives on half-open intervals ``[added, deleted)``. It is put in
    every bucket that its lifetime touches; an entity added and deleted at the
    same instant still appears in the bucket of that instant. Edge endpoints are
    present wherever the edge is. Deleting a node deletes its incident edges.
    """
    if not (interval > 0 and math.isfinite(interval)):
        raise ValidationError("interval must be a positive finite number")
    if not log_.events:
        raise ValidationError("empty event log")
    for e in log_.events:
        _check_event(e)
    events = sorted(log_.events, key=lambda e: e.time)  # stable: ties keep log order
    if events[0].time < origin:
        raise ValidationError(f"event at t={events[0].time} precedes origin {origin}")

    def bucket(t):
        return int(math.floor((t - origin) / interval))

    def last_bucket(start, end):
        # last bucket touched by [start, end); zero-length lifetimes keep their own bucket
        return max(bucket(start), int(math.ceil((end - origin) / interval)) - 1)

    labels: dict[str, int] = {}

    def intern(lab):
        if lab not in labels:
            labels[lab] = len(labels)
        return labels[lab]

    def key(src, dst):
        u, v = intern(src), intern(dst)
        if not directed and v < u:
            u, v = v, u
        return u, v

    node_open: dict[int, float] = {}
    edge_open: dict[tuple[int, int], tuple[float, float]] = {}
    node_spans: list[tuple[int, float, float]] = []
    edge_spans: list[tuple[tuple[int, int], float, float, float]] = []
    t_end = events[-1].time

    def close_edge(k, t):
        start, w = edge_open.pop(k)
        edge_spans.append((k, start, t, w))

    for e in events:
        if e.kind == "add_node":
            n = intern(e.src)
            node_open.setdefault(n, e.time)
        elif e.kind == "add_edge":
            k = key(e.src, e.dst)
            if k in edge_open:
                # re-adding a live edge updates its weight from this instant on
                close_edge(k, e.time)
            edge_open[k] = (e.time, e.weight)
        elif e.kind == "del_edge":
            if e.src not in labels or e.dst not in labels or key(e.src, e.dst) not in edge_open:
                raise ValidationError(f"del_edge ({e.src}, {e.dst}) at t={e.time} has no matching live edge")
            close_edge(key(e.src, e.dst), e.time)
        else:  # del_node
            n = labels.get(e.src)
            incident = [k for k in edge_open if n in k] if n is not None else []
            if n is None or (n not in node_open and not incident):
                raise ValidationError(f"del_node {e.src} at t={e.time} references no live node")
            for k in incident:
                close_edge(k, e.time)
            if n in node_open:
                node_spans.append((n, node_open.pop(n), e.time))
            else:
                # implicitly present through edges only; nothing further to close
                pass

    horizon = math.inf
    for n, start in node_open.items():
        node_spans.append((n, start, horizon))
    for k, (start, w) in list(edge_open.items()):
        edge_spans.append((k, start, horizon, w))

    T = bucket(t_end) + 1
    masks = [set() for _ in range(T)]
    weights: list[dict[tuple[int, int], tuple[float, float]]] = [dict() for _ in range(T)]
    for n, a, b in node_spans:
        hi = T - 1 if b == horizon else min(T - 1, last_bucket(a, b))
        for k in range(bucket(a), hi + 1):
            masks[k].add(n)
    for kk, a, b, w in edge_spans:
        hi = T - 1 if b == horizon else min(T - 1, last_bucket(a, b))
        for k in range(bucket(a), hi + 1):
            prev = weights[k].get(kk)
            # within a bucket the most recently added weight wins
            if prev is None or a >= prev[0]:
                weights[k][kk] = (a, w)
            masks[k].update(kk)

    snaps = []
    for k in range(T):
        edges = tuple(sorted((u, v, w) for (u, v), (_, w) in weights[k].items()))
        lo = origin + k * interval
        snaps.append(Snapshot(k, _format_time(lo), edges, frozenset(masks[k])))
    return DynamicGraph(NodeRegistry(tuple(labels)), tuple(snaps), directed)


def _format_time(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(x)


# -- diagnostics ---------------------------------------------------------------


def validate(g: DynamicGraph) -> dict:
    """Return a diagnostics report. ``report["ok"]`` is False on any invariant breach."""
    breaches: list[str] = []
    warnings_: list[str] = []
    n_reg = len(g.registry)
    if g.T < 1:
        breaches.append("graph has no snapshots")
    per_snapshot = []
    births: dict[str, int] = {}
    last_seen: dict[str, int] = {}
    for pos, s in enumerate(g.snapshots):
        if s.timestamp_index != pos:
            breaches.append(f"snapshot {pos}: timestamp_index {s.timestamp_index} out of order")
        bad_ids = [n for n in s.node_mask if not 0 <= n < n_reg]
        if bad_ids:
            breaches.append(f"snapshot {pos}: unregistered node ids {sorted(bad_ids)}")
        seen_pairs = set()
        touched = set()
        for u, v, w in s.edges:
            if u not in s.node_mask or v not in s.node_mask:
                breaches.append(f"snapshot {pos}: edge ({u}, {v}) endpoint not in node mask")
            if not (0 <= u < n_reg and 0 <= v < n_reg):
                breaches.append(f"snapshot {pos}: edge ({u}, {v}) references unregistered id")
            if u == v:
                breaches.append(f"snapshot {pos}: self-loop on {u}")
            if not math.isfinite(w):
                breaches.append(f"snapshot {pos}: non-finite weight on ({u}, {v})")
            pair = (u, v) if g.directed else (min(u, v), max(u, v))
            if pair in seen_pairs:
                breaches.append(f"snapshot {pos}: duplicate edge {pair}")
            if not g.directed and u > v:
                breaches.append(f"snapshot {pos}: undirected edge ({u}, {v}) not canonical")
            seen_pairs.add(pair)
            touched.update((u, v))
        if not s.edges:
            warnings_.append(f"empty snapshot {pos}")
        for n in sorted(s.node_mask):
            if 0 <= n < n_reg:
                lab = g.registry.labels[n]
                births.setdefault(lab, pos)
                last_seen[lab] = pos
        per_snapshot.append(
            {
                "t": pos,
                "label": s.timestamp_label,
                "nodes": len(s.node_mask),
                "edges": len(s.edges),
                "isolated": len(s.node_mask - touched),
                "self_loops_dropped": s.self_loops,
            }
        )
    deaths = {lab: t + 1 for lab, t in last_seen.items() if t + 1 < g.T}
    never = [lab for lab in g.registry.labels if lab not in births]
    if never:
        warnings_.append(f"{len(never)} registered node(s) never present")
    return {
        "ok": not breaches,
        "T": g.T,
        "nodes": n_reg,
        "directed": g.directed,
        "snapshots": per_snapshot,
        "births": births,
        "deaths": deaths,
        "warnings": warnings_,
        "breaches": breaches,
    }


def degree_totals(g: DynamicGraph) -> dict[int, int]:
    """Total degree of every node summed over all snapshots."""
    deg: dict[int, int] = defaultdict(int)
    for s in g.snapshots:
        for u, v, _ in s.edges:
            deg[u] += 1
            deg[v] += 1
    return dict(deg)


def adjacency(snapshot: Snapshot, directed: bool) -> dict[int, list[tuple[int, float]]]:
    adj: dict[int, list[tuple[int, float]]] = {n: [] for n in snapshot.nodes}
    for u, v, w in snapshot.edges:
        adj[u].append((v, w))
        if not directed:
            adj[v].append((u, w))
    return adj


def from_edges(
    snapshots: Iterable[Iterable[tuple]], directed: bool = False, timestamp_labels: Sequence[str] | None = None
) -> DynamicGraph:
    """Build a graph in memory from per-snapshot ``(src, dst[, weight])`` label tuples.

    Follows the same aggregation rules as :func:`parse_snapshots`.
    """
    labels: dict[str, int] = {}

    def intern(lab):
        lab = str(lab)
        if lab not in labels:
            labels[lab] = len(labels)
        return labels[lab]

    snaps = []
    for t, rows in enumerate(snapshots):
        weights: dict[tuple[int, int], float] = {}
        mask = set()
        loops = 0
        for row in rows:
            if len(row) == 1:
                mask.add(intern(row[0]))
                continue
            src, dst = row[0], row[1]
            w = float(row[2]) if len(row) > 2 else 1.0
            if not math.isfinite(w):
                raise ValidationError(f"non-finite weight in snapshot {t}")
            if str(src) == str(dst):
                mask.add(intern(src))
                loops += 1
                continue
            u, v = intern(src), intern(dst)
            if not directed and v < u:
                u, v = v, u
            weights[(u, v)] = weights.get((u, v), 0.0) + w
            mask.update((u, v))
        label = str(timestamp_labels[t]) if timestamp_labels else str(t)
        edges = tuple(sorted((u, v, w) for (u, v), w in weights.items()))
        snaps.append(Snapshot(t, label, edges, frozenset(mask), loops))
    if not snaps:
        raise ValidationError("no snapshots")
    return DynamicGraph(NodeRegistry(tuple(labels)), tuple(snaps), directed)
