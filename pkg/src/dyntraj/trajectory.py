"""Anchor-based cross-time alignment of embedding snapshots into one 2-D frame.

A fixed set of anchor nodes is projected once. At every timestamp each node is
placed by aggregating the projected positions of its ``k`` most cosine-similar
anchors (similarities computed in that timestamp's embedding space). Anchors
are additionally pulled towards their static position by ``alpha``.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding import EmbeddingSeries, cosine_similarity_matrix
from .errors import ValidationError
from .graph import DynamicGraph, degree_totals
from .projection import ProjectionConfig, project
from .provenance import fingerprint

log = logging.getLogger(__name__)

AGGREGATIONS = ("mean", "similarity_softmax")
STRATEGIES = ("auto", "all_v0", "top_degree", "random")


@dataclass
class AlignmentConfig:
    k: int = 10
    alpha: float = 0.3
    aggregation: str = "similarity_softmax"
    tau: float = 0.1
    anchor_strategy: str = "auto"
    anchor_cap: int = 5000
    anchor_seed: int | None = 42
    reference_t: int = 0
    threads: int = 1

    def validate(self) -> None:
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError("alpha must lie in [0, 1]")
        if self.aggregation not in AGGREGATIONS:
            raise ValidationError(f"unknown aggregation {self.aggregation!r}")
        if not self.tau > 0:
            raise ValidationError("tau must be > 0")
        if self.anchor_strategy not in STRATEGIES:
            raise ValidationError(f"unknown anchor strategy {self.anchor_strategy!r}")
        if self.anchor_cap < 1 or self.threads < 1:
            raise ValidationError("anchor_cap and threads must be >= 1")
        if self.anchor_strategy == "random" and self.anchor_seed is None:
            raise ValidationError("random anchor strategy needs a seed")


@dataclass
class AnchorSet:
    ids: np.ndarray  # ascending node ids
    reference_t: int
    X: np.ndarray  # (M, d)
    Z: np.ndarray  # (M, 2)
    projection_meta: dict = field(default_factory=dict)

    def fingerprint(self) -> str:
        return fingerprint({"ids": self.ids.tolist(), "t": self.reference_t, "Z": self.Z.tolist()})


# -- anchors ---------------------------------------------------------------------


def select_anchors(
    g: DynamicGraph | None,
    series: EmbeddingSeries,
    cfg: AlignmentConfig,
    projection: ProjectionConfig | None = None,
) -> AnchorSet:
    """Pick anchors among the nodes of the first snapshot and project their reference rows."""
    cfg.validate()
    if g is not None:
        v0 = sorted(g.snapshots[0].node_mask)
    else:
        v0 = sorted(series.matrices[0].ids.tolist())
    if not v0:
        raise ValidationError("snapshot 0 is empty")
    strategy = cfg.anchor_strategy
    if strategy == "auto":
        strategy = "all_v0" if len(v0) <= cfg.anchor_cap else "top_degree"
    if strategy == "all_v0":
        ids = v0
    elif strategy == "top_degree":
        if g is None:
            raise ValidationError("top_degree anchors need the graph")
        deg = degree_totals(g)
        ids = sorted(sorted(v0, key=lambda n: (-deg.get(n, 0), n))[: cfg.anchor_cap])
    else:
        rng = np.random.default_rng(cfg.anchor_seed)
        take = min(cfg.anchor_cap, len(v0))
        ids = sorted(rng.choice(np.array(v0), size=take, replace=False).tolist())
    if len(ids) <= cfg.k:
        raise ValidationError(f"need more than k={cfg.k} anchors, have {len(ids)}")
    if not 0 <= cfg.reference_t < series.T:
        raise ValidationError(f"reference_t {cfg.reference_t} outside [0, {series.T})")
    ref = series.matrices[cfg.reference_t]
    rmap = ref.row_map
    missing = [n for n in ids if n not in rmap]
    if missing:
        labels = [series.registry.labels[n] for n in missing[:5]]
        raise ValidationError(f"anchor(s) missing from reference timestamp {cfg.reference_t}: {labels}")
    ids = np.array(ids, dtype=np.int64)
    X = ref.rows[[rmap[int(n)] for n in ids]]
    proj = project(X, projection)
    meta = {k: v for k, v in proj.meta.items() if k != "kl_history"}
    meta["method"] = proj.method
    return AnchorSet(ids, cfg.reference_t, X, proj.coords, meta)


# -- per-node primitives -----------------------------------------------------------


def cosine_similarities(v, X, return_flags: bool = False):
    """Cosine similarity of ``v`` against each row of ``X``, clamped to [-1, 1].

    Rows (or ``v``) with zero norm get similarity 0; with ``return_flags`` a
    boolean mask of those rows is returned as well.
    """
    v = np.asarray(v, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    nv = np.linalg.norm(v)
    nx = np.linalg.norm(X, axis=1)
    zero = (nx == 0) | (nv == 0)
    denom = np.where(zero, 1.0, nx * nv)
    sims = np.where(zero, 0.0, (X @ v) / denom)
    np.clip(sims, -1.0, 1.0, out=sims)
    return (sims, zero) if return_flags else sims


def knn_anchors(similarities, k: int, self_index: int | None = None, anchor_ids=None) -> np.ndarray:
    """Indices of the ``k`` most similar anchors, best first; ties go to the lower anchor id."""
    s = np.asarray(similarities, dtype=np.float64)
    m = len(s)
    avail = m - (1 if self_index is not None else 0)
    if not 1 <= k <= avail:
        raise ValidationError(f"k={k} out of range for {avail} candidate anchors")
    ids = np.arange(m) if anchor_ids is None else np.asarray(anchor_ids)
    s = s.copy()
    if self_index is not None:
        s[self_index] = -np.inf
    return np.lexsort((ids, -s))[:k]


def _knn_rows(S: np.ndarray, k: int, exclude: np.ndarray) -> np.ndarray:
    """Row-wise :func:`knn_anchors` with columns already in ascending anchor-id order."""
    S = S.copy()
    rows_ex = np.flatnonzero(exclude >= 0)
    S[rows_ex, exclude[rows_ex]] = -np.inf
    n, m = S.shape
    if k >= m:
        return np.stack([np.lexsort((np.arange(m), -row))[:k] for row in S]) if n else np.zeros((0, k), int)
    kth = -np.partition(-S, k - 1, axis=1)[:, k - 1]
    out = np.empty((n, k), dtype=np.int64)
    for r in range(n):
        cand = np.flatnonzero(S[r] >= kth[r])  # ascending ids, contains every tie at the cut
        order = np.lexsort((cand, -S[r, cand]))[:k]
        out[r] = cand[order]
    return out


def aggregate(neighbors, similarities, Z, mode: str = "similarity_softmax", tau: float = 0.1) -> np.ndarray:
    """Convex combination of the neighbour anchors' projected positions."""
    neighbors = np.asarray(neighbors)
    if len(neighbors) == 0:
        raise ValidationError("aggregate needs at least one neighbour")
    Zn = np.asarray(Z, dtype=np.float64)[neighbors]
    if len(neighbors) == 1:
        return Zn[0].copy()
    if mode == "mean":
        z = Zn.mean(axis=0)
    elif mode == "similarity_softmax":
        s = np.asarray(similarities, dtype=np.float64)[neighbors]
        w = np.exp((s - s.max()) / tau)
        z = (w / w.sum()) @ Zn
    else:
        raise ValidationError(f"unknown aggregation {mode!r}")
    # guard against last-ulp drift outside the neighbours' box
    return np.clip(z, Zn.min(axis=0), Zn.max(axis=0))


def _aggregate_rows(nbrs: np.ndarray, S: np.ndarray, Z: np.ndarray, mode: str, tau: float) -> np.ndarray:
    Zn = Z[nbrs]  # (n, k, 2)
    if nbrs.shape[1] == 1:
        return Zn[:, 0, :].copy()
    if mode == "mean":
        z = Zn.mean(axis=1)
    else:
        s = np.take_along_axis(S, nbrs, axis=1)
        w = np.exp((s - s.max(axis=1, keepdims=True)) / tau)
        w /= w.sum(axis=1, keepdims=True)
        z = np.einsum("nk,nkc->nc", w, Zn)
    return np.clip(z, Zn.min(axis=1), Zn.max(axis=1))


def interpolate(z_static, z_agg, alpha: float, is_anchor: bool) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError("alpha must lie in [0, 1]")
    z_agg = np.asarray(z_agg, dtype=np.float64)
    if not is_anchor:
        return z_agg.copy()
    return alpha * np.asarray(z_static, dtype=np.float64) + (1.0 - alpha) * z_agg


# -- trajectories --------------------------------------------------------------------


@dataclass
class TrajectorySet:
    labels: tuple[str, ...]  # registry labels, indexed by node id
    timestamp_labels: tuple[str, ...]
    positions: dict[tuple[int, int], tuple[float, float]]
    anchor_ids: tuple[int, ...] = ()
    anchor_Z: tuple[tuple[float, float], ...] = ()
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.timestamp_labels)

    def nodes(self) -> list[int]:
        return sorted({n for n, _ in self.positions})

    def points(self, node_id: int) -> list[tuple[int, float, float]]:
        return [(t, *self.positions[(node_id, t)]) for t in range(self.T) if (node_id, t) in self.positions]

    def present(self, t: int) -> list[int]:
        return sorted(n for n, tt in self.positions if tt == t)

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "timestamps": list(self.timestamp_labels),
            "anchors": [
                {"label": self.labels[n], "x": z[0], "y": z[1]} for n, z in zip(self.anchor_ids, self.anchor_Z)
            ],
            "nodes": [
                {"label": self.labels[n], "points": [[t, x, y] for t, x, y in self.points(n)]} for n in self.nodes()
            ],
            "labels": list(self.labels),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrajectorySet":
        try:
            labels = tuple(data.get("labels") or [n["label"] for n in data["nodes"]])
            index = {lab: i for i, lab in enumerate(labels)}
            positions = {}
            for node in data["nodes"]:
                nid = index[node["label"]]
                for t, x, y in node["points"]:
                    positions[(nid, int(t))] = (float(x), float(y))
            anchors = data.get("anchors", [])
            return cls(
                labels,
                tuple(data.get("timestamps") or range(1 + max((t for _, t in positions), default=-1))),
                positions,
                tuple(index[a["label"]] for a in anchors),
                tuple((float(a["x"]), float(a["y"])) for a in anchors),
                dict(data.get("meta", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed trajectory document: {exc}") from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=False) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TrajectorySet":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _place_rows(V, A, Z, anchor_pos, k, cfg):
    """Aggregated positions for rows of ``V`` against present anchors ``A``."""
    S = cosine_similarity_matrix(V, A)
    nbrs = _knn_rows(S, k, anchor_pos)
    return _aggregate_rows(nbrs, S, Z, cfg.aggregation, cfg.tau)


def compute_trajectories(
    g: DynamicGraph | None, series: EmbeddingSeries, anchors: AnchorSet, cfg: AlignmentConfig
) -> TrajectorySet:
    """Place every node present at every timestamp into the anchor frame."""
    cfg.validate()
    if g is not None and g.T != series.T:
        raise ValidationError(f"graph has {g.T} snapshots, embeddings have {series.T}")
    anchor_index = {int(n): j for j, n in enumerate(anchors.ids)}
    positions: dict[tuple[int, int], tuple[float, float]] = {}
    coverage = []
    for m in series.matrices:
        t = m.timestamp_index
        rmap = m.row_map
        present = [j for j, n in enumerate(anchors.ids.tolist()) if n in rmap]
        if len(present) < len(anchors.ids):
            msg = f"t={t}: {len(anchors.ids) - len(present)} of {len(anchors.ids)} anchors absent"
            log.warning(msg)
            coverage.append(msg)
        if len(present) < cfg.k:
            raise ValidationError(f"t={t}: only {len(present)} anchors present, need k={cfg.k}")
        if len(present) == cfg.k and any(int(n) in anchor_index for n in m.ids):
            raise ValidationError(f"t={t}: anchors need k+1={cfg.k + 1} present anchors to exclude themselves")
        present = np.array(present, dtype=np.int64)
        A = m.rows[[rmap[int(anchors.ids[j])] for j in present]]
        Zp = anchors.Z[present]
        col_of = {int(anchors.ids[j]): c for c, j in enumerate(present)}
        exclude = np.array([col_of.get(int(n), -1) for n in m.ids], dtype=np.int64)

        n = len(m.ids)
        chunk = 2048
        spans = [(lo, min(n, lo + chunk)) for lo in range(0, n, chunk)]

        def run(span):
            lo, hi = span
            return _place_rows(m.rows[lo:hi], A, Zp, exclude[lo:hi], cfg.k, cfg)

        if cfg.threads > 1 and len(spans) > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                parts = list(pool.map(run, spans))
        else:
            parts = [run(s) for s in spans]
        agg = np.concatenate(parts) if parts else np.zeros((0, 2))
        for r, nid in enumerate(m.ids.tolist()):
            j = anchor_index.get(nid)
            if j is None:
                z = agg[r]
            else:
                z = cfg.alpha * anchors.Z[j] + (1.0 - cfg.alpha) * agg[r]
            positions[(nid, t)] = (float(z[0]), float(z[1]))

    meta = {
        "method": anchors.projection_meta.get("method", "unknown"),
        "k": cfg.k,
        "alpha": cfg.alpha,
        "aggregation": cfg.aggregation,
        "tau": cfg.tau,
        "anchor_count": int(len(anchors.ids)),
        "reference_t": anchors.reference_t,
        "anchor_fingerprint": anchors.fingerprint(),
        "config_fingerprint": fingerprint({k: v for k, v in cfg.__dict__.items() if k != "threads"}),
        "projection": anchors.projection_meta,
        "coverage_warnings": coverage,
    }
    return TrajectorySet(
        tuple(series.registry.labels),
        tuple(mm.timestamp_label for mm in series.matrices),
        positions,
        tuple(int(n) for n in anchors.ids),
        tuple((float(x), float(y)) for x, y in anchors.Z),
        meta,
    )


# -- Procrustes baseline ------------------------------------------------------------


def procrustes_align(A, B) -> tuple[np.ndarray, float]:
    """Orthogonal ``R`` minimising ``||A R - B||_F`` and the attained residual."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ValidationError(f"shape mismatch {A.shape} vs {B.shape}")
    M = A.T @ B
    if not np.any(M):
        raise ValidationError("degenerate (zero) cross-covariance")
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    return R, float(np.linalg.norm(A @ R - B))


def displacement(traj: TrajectorySet, node_id: int) -> list[float]:
    """Euclidean step lengths along one node's trajectory."""
    pts = traj.points(node_id)
    return [math.hypot(b[1] - a[1], b[2] - a[2]) for a, b in zip(pts, pts[1:])]
