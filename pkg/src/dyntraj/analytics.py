"""Micro- and macro-level structural-change metrics between adjacent snapshots.

Every transition ``t-1 -> t`` is evaluated on the nodes present at both times.
Neighbour rankings are computed inside that common set, so ranks at the two
times refer to the same candidates. Ordering is by descending cosine
similarity (embedding space) or ascending Euclidean distance (projected
positions), with ties going to the lower node id.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .embedding import EmbeddingSeries
from .errors import ValidationError
from .provenance import fingerprint
from .trajectory import TrajectorySet, cosine_similarity_matrix

SPACES = ("raw_embedding", "projected_2d")
MOVEMENT_VARIANTS = ("raw", "unit_normalized", "projected")
CSV_HEADER = ("node", "t", "jaccard_n", "rbo_raw", "rbo_norm", "arc", "l1", "l2")


@dataclass
class MetricConfig:
    n: int = 10
    m: int = 10
    p: float = 0.9
    space: str = "raw_embedding"
    movement: str = "raw"

    def validate(self) -> None:
        if self.n < 1 or self.m < 1:
            raise ValidationError("n and m must be >= 1")
        if not 0.0 < self.p < 1.0:
            raise ValidationError("p must lie in (0, 1)")
        if self.space not in SPACES:
            raise ValidationError(f"unknown space {self.space!r}")
        if self.movement not in MOVEMENT_VARIANTS:
            raise ValidationError(f"unknown movement variant {self.movement!r}")


@dataclass(frozen=True)
class RankedNeighborList:
    owner: int
    timestamp_index: int
    neighbors: tuple[int, ...]


# -- list-level metrics ----------------------------------------------------------------


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    union = a | b
    return len(a & b) / len(union) if union else 1.0


def rbo_lists(a, b, p: float = 0.9, m: int | None = None) -> tuple[float, float]:
    """Truncated rank-biased overlap of two rankings: ``(raw, raw / (1 - p**m))``.

    ``raw = (1 - p) * sum_{d=1..m} p**(d-1) * |a[:d] & b[:d]| / d``, evaluated
    as ``(1 - p**m)`` minus the weighted disagreement so that identical lists
    give exactly ``1 - p**m``.
    """
    m = min(len(a), len(b)) if m is None else m
    if m > len(a) or m > len(b):
        raise ValidationError(f"depth m={m} exceeds list length")
    seen_a, seen_b = set(), set()
    overlap = 0
    deficit = 0.0
    weight = 1.0
    for d in range(1, m + 1):
        x, y = a[d - 1], b[d - 1]
        seen_b.add(y)
        overlap += (x in seen_b) + (y in seen_a)
        seen_a.add(x)
        deficit += weight * (d - overlap) / d
        weight *= p
    raw = max(0.0, (1.0 - p**m) - (1.0 - p) * deficit)
    return raw, raw / (1.0 - p**m)


# -- per-transition engine ---------------------------------------------------------------


def _snapshot(source, t: int) -> tuple[np.ndarray, dict[int, int], np.ndarray]:
    """(ids ascending, id -> row, vectors) of snapshot ``t`` of a series or trajectory set."""
    if isinstance(source, EmbeddingSeries):
        m = source.matrices[t]
        order = np.argsort(m.ids, kind="stable")
        ids = m.ids[order]
        H = m.rows[order]
    elif isinstance(source, TrajectorySet):
        ids = np.array(source.present(t), dtype=np.int64)
        H = np.array([source.positions[(int(n), t)] for n in ids], dtype=np.float64).reshape(-1, 2)
    else:
        raise ValidationError(f"unsupported metric source {type(source).__name__}")
    return ids, {int(n): r for r, n in enumerate(ids)}, H


def _num_snapshots(source) -> int:
    return source.T


def _space_of(source) -> str:
    return "projected_2d" if isinstance(source, TrajectorySet) else "raw_embedding"


def _orders(H: np.ndarray, space: str) -> np.ndarray:
    """Row i: the other rows ordered nearest first (column index ascending on ties)."""
    n = H.shape[0]
    if space == "raw_embedding":
        key = -cosine_similarity_matrix(H, H)
    else:
        diff = H[:, None, :] - H[None, :, :]
        key = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(key, np.inf)
    return np.argsort(key, axis=1, kind="stable")[:, : n - 1]


def _ranks(order: np.ndarray) -> np.ndarray:
    n = order.shape[0]
    R = np.zeros((n, n), dtype=np.int64)
    rows = np.repeat(np.arange(n), n - 1)
    R[rows, order.ravel()] = np.tile(np.arange(1, n), n)
    return R


@dataclass
class _Transition:
    t: int
    ids: np.ndarray  # common node ids, ascending
    prev_order: np.ndarray
    cur_order: np.ndarray

    @property
    def size(self) -> int:
        return len(self.ids)

    def overlaps(self, depth: int) -> np.ndarray:
        """(N, depth) prefix-intersection sizes |prev[:d] & cur[:d]| for d = 1..depth."""
        n = self.size
        if depth > n - 1:
            raise ValidationError(f"depth {depth} exceeds {n - 1} common neighbours at t={self.t}")
        rows = np.arange(n)
        in_a = np.zeros((n, n), dtype=bool)
        in_b = np.zeros((n, n), dtype=bool)
        x = np.zeros(n, dtype=np.int64)
        out = np.empty((n, depth), dtype=np.int64)
        for d in range(depth):
            a, b = self.prev_order[:, d], self.cur_order[:, d]
            in_b[rows, b] = True
            x += in_b[rows, a]
            x += in_a[rows, b]
            in_a[rows, a] = True
            out[:, d] = x
        return out

    def jaccard(self, n: int) -> np.ndarray:
        x = self.overlaps(n)[:, n - 1]
        return x / (2 * n - x)

    def rbo(self, m: int, p: float) -> tuple[np.ndarray, np.ndarray]:
        x = self.overlaps(m)
        depth = np.arange(1, m + 1)
        w = p ** np.arange(m) / depth
        # (1 - p**m) minus weighted disagreement: exact for identical prefixes
        raw = np.maximum((1.0 - p**m) - (1.0 - p) * ((depth - x) @ w), 0.0)
        return raw, raw / (1.0 - p**m)

    def arc(self) -> np.ndarray:
        n = self.size
        R0, R1 = _ranks(self.prev_order), _ranks(self.cur_order)
        return np.abs(R1 - R0).sum(axis=1) / n


def _transition(source, t: int, space: str | None = None) -> _Transition:
    if not 1 <= t < _num_snapshots(source):
        raise ValidationError(f"transition index t={t} outside [1, {_num_snapshots(source)})")
    space = space or _space_of(source)
    ids0, map0, H0 = _snapshot(source, t - 1)
    ids1, map1, H1 = _snapshot(source, t)
    common = np.array(sorted(set(map0) & set(map1)), dtype=np.int64)
    if len(common) < 2:
        raise ValidationError(f"fewer than 2 common nodes at t={t}")
    P = H0[[map0[int(n)] for n in common]]
    C = H1[[map1[int(n)] for n in common]]
    return _Transition(t, common, _orders(P, space), _orders(C, space))


def _row(tr: _Transition, i: int) -> int:
    pos = np.searchsorted(tr.ids, i)
    if pos >= len(tr.ids) or tr.ids[pos] != i:
        raise ValidationError(f"node {i} is not present at both t={tr.t - 1} and t={tr.t}")
    return int(pos)


# -- public per-node operations ---------------------------------------------------------------


def ranked_neighbors(source, i: int, t: int, depth: int, universe=None) -> RankedNeighborList:
    """Nearest ``depth`` nodes of ``i`` at ``t``, optionally restricted to ``universe``."""
    ids, rmap, H = _snapshot(source, t)
    if i not in rmap:
        raise ValidationError(f"node {i} absent at t={t}")
    if universe is not None:
        keep = np.array(sorted(set(int(u) for u in universe) & set(rmap) | {i}), dtype=np.int64)
        H = H[[rmap[int(n)] for n in keep]]
        ids = keep
    if not 1 <= depth <= len(ids) - 1:
        raise ValidationError(f"depth {depth} out of range for {len(ids)} nodes")
    order = _orders(H, _space_of(source))
    row = int(np.searchsorted(ids, i))
    return RankedNeighborList(i, t, tuple(int(ids[c]) for c in order[row, :depth]))


def jaccard_n(source, i: int, t: int, n: int) -> float:
    tr = _transition(source, t)
    return float(tr.jaccard(n)[_row(tr, i)])


def rbo(source, i: int, m: int, t: int, p: float = 0.9) -> tuple[float, float]:
    tr = _transition(source, t)
    raw, norm = tr.rbo(m, p)
    r = _row(tr, i)
    return float(raw[r]), float(norm[r])


def arc(source, i: int, t: int) -> float:
    tr = _transition(source, t)
    return float(tr.arc()[_row(tr, i)])


def narc(source) -> float:
    """Per-transition sum of ARC normalised by ``N^t - 1``, averaged over transitions."""
    T = _num_snapshots(source)
    if T < 2:
        raise ValidationError("NARC needs at least two snapshots")
    vals = []
    for t in range(1, T):
        tr = _transition(source, t)
        vals.append(tr.arc().sum() / (tr.size - 1))
    return float(np.mean(vals))


def macro_rbo(source, m: int, p: float = 0.9) -> tuple[float, float]:
    T = _num_snapshots(source)
    if T < 2:
        raise ValidationError("macro RBO needs at least two snapshots")
    raws, norms = [], []
    for t in range(1, T):
        raw, norm = _transition(source, t).rbo(m, p)
        raws.append(raw.mean())
        norms.append(norm.mean())
    return float(np.mean(raws)), float(np.mean(norms))


def _movement_vectors(source, t: int, variant: str):
    ids, rmap, H = _snapshot(source, t)
    if variant == "unit_normalized":
        norms = np.linalg.norm(H, axis=1, keepdims=True)
        H = np.divide(H, norms, out=np.zeros_like(H), where=norms > 0)
    return rmap, H


def movement_lp(source, variant: str = "raw", p: int = 2) -> tuple[float, dict[tuple[int, int], float]]:
    """Mean ``||h_i^t - h_i^{t-1}||_p`` over common nodes, averaged over transitions.

    ``variant`` is ``raw`` or ``unit_normalized`` for an embedding series and
    ``projected`` for a trajectory set. Returns the scalar and the per
    ``(node, t)`` values.
    """
    if p not in (1, 2):
        raise ValidationError("p must be 1 or 2")
    if variant not in MOVEMENT_VARIANTS:
        raise ValidationError(f"unknown movement variant {variant!r}")
    if variant == "projected" and not isinstance(source, TrajectorySet):
        raise ValidationError("projected movement needs a trajectory set")
    if variant != "projected" and not isinstance(source, EmbeddingSeries):
        raise ValidationError(f"{variant} movement needs an embedding series")
    T = _num_snapshots(source)
    if T < 2:
        raise ValidationError("movement needs at least two snapshots")
    per: dict[tuple[int, int], float] = {}
    means = []
    prev_map, prev_H = _movement_vectors(source, 0, variant)
    for t in range(1, T):
        cur_map, cur_H = _movement_vectors(source, t, variant)
        common = sorted(set(prev_map) & set(cur_map))
        if not common:
            raise ValidationError(f"no common nodes at t={t}")
        diff = cur_H[[cur_map[n] for n in common]] - prev_H[[prev_map[n] for n in common]]
        d = np.abs(diff).sum(axis=1) if p == 1 else np.sqrt(np.einsum("ij,ij->i", diff, diff))
        for n, v in zip(common, d.tolist()):
            per[(n, t)] = v
        means.append(d.mean())
        prev_map, prev_H = cur_map, cur_H
    return float(np.mean(means)), per


# -- full report -------------------------------------------------------------------------------


@dataclass
class MetricReport:
    labels: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)  # (node_id, t, jaccard, rbo_raw, rbo_norm, arc, l1, l2)
    scalars: dict = field(default_factory=dict)
    config: MetricConfig = field(default_factory=MetricConfig)

    def per_transition(self) -> dict[int, dict[str, float]]:
        out: dict[int, dict[str, float]] = {}
        cols = CSV_HEADER[2:]
        for t in sorted({r[1] for r in self.rows}):
            sel = np.array([r[2:] for r in self.rows if r[1] == t], dtype=np.float64)
            out[t] = {c: float(v) for c, v in zip(cols, sel.mean(axis=0))}
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for nid, t, *vals in self.rows:
            w.writerow([self.labels[nid], t, *(repr(float(v)) for v in vals)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {**self.scalars, "config": asdict(self.config), "config_fingerprint": fingerprint(self.config)}

    def export_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    def export_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_metrics_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [
            {k: (v if k == "node" else int(v) if k == "t" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def compute_report(
    series: EmbeddingSeries | None, cfg: MetricConfig, trajectories: TrajectorySet | None = None
) -> MetricReport:
    """Evaluate every metric for every common node of every transition."""
    cfg.validate()
    if cfg.space == "projected_2d" and trajectories is None:
        raise ValidationError("projected_2d space needs a trajectory set")
    if cfg.movement == "projected" and trajectories is None:
        raise ValidationError("projected movement needs a trajectory set")
    if series is None and (cfg.space == "raw_embedding" or cfg.movement != "projected"):
        raise ValidationError("an embedding series is required for this configuration")
    ranking_source = trajectories if cfg.space == "projected_2d" else series
    movement_source = trajectories if cfg.movement == "projected" else series
    labels = tuple(series.registry.labels if series is not None else trajectories.labels)
    T = ranking_source.T
    if T < 2:
        raise ValidationError("metrics need at least two snapshots")

    l1_scalar, l1 = movement_lp(movement_source, cfg.movement, 1)
    l2_scalar, l2 = movement_lp(movement_source, cfg.movement, 2)
    rows = []
    narc_terms, rbo_raw_means, rbo_norm_means = [], [], []
    for t in range(1, T):
        tr = _transition(ranking_source, t)
        jac = tr.jaccard(cfg.n)
        raw, norm = tr.rbo(cfg.m, cfg.p)
        a = tr.arc()
        narc_terms.append(a.sum() / (tr.size - 1))
        rbo_raw_means.append(raw.mean())
        rbo_norm_means.append(norm.mean())
        for r, nid in enumerate(tr.ids.tolist()):
            rows.append(
                (
                    nid,
                    t,
                    float(jac[r]),
                    float(raw[r]),
                    float(norm[r]),
                    float(a[r]),
                    l1.get((nid, t), math.nan),
                    l2.get((nid, t), math.nan),
                )
            )
    scalars = {
        "narc": float(np.mean(narc_terms)),
        "macro_rbo_raw": float(np.mean(rbo_raw_means)),
        "macro_rbo_normalized": float(np.mean(rbo_norm_means)),
        "L1": l1_scalar,
        "L2": l2_scalar,
        "transitions": T - 1,
    }
    return MetricReport(labels, rows, scalars, cfg)
