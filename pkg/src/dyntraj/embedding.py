"""Temporal node embeddings: a shallow lookup-table trainer and file I/O.

The trainer minimises, per snapshot,

    lambda_link * L_link + lambda_node * L_node + lambda_edge * L_edge

where ``L_link`` is skip-gram with negative sampling over random-walk
co-occurrences, ``L_node`` is the squared error of a linear readout against a
per-node attribute, and ``L_edge`` is the squared error of the inner product of
two endpoint embeddings against the edge weight. All terms are summed over the
minibatch. A single embedding table is used for both the centre and the
context role, so ``<v_i, v_j>`` is the link score directly.
"""

from __future__ import annotations

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import NumericError, ValidationError
from .graph import DynamicGraph, NodeRegistry, Snapshot

log = logging.getLogger(__name__)

_BIN_MAGIC = b"DTEMB\x01"


@dataclass(frozen=True)
class EmbeddingMatrix:
    timestamp_index: int
    timestamp_label: str
    ids: np.ndarray  # dense node id of each row
    rows: np.ndarray  # (N_t, d) float64

    @property
    def row_map(self) -> dict[int, int]:
        return {int(n): r for r, n in enumerate(self.ids)}

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return (
            self.timestamp_index == other.timestamp_index
            and self.timestamp_label == other.timestamp_label
            and np.array_equal(self.ids, other.ids)
            and self.rows.shape == other.rows.shape
            and np.array_equal(self.rows, other.rows)
        )


@dataclass(frozen=True)
class EmbeddingSeries:
    matrices: tuple[EmbeddingMatrix, ...]
    registry: NodeRegistry

    @property
    def d(self) -> int:
        return self.matrices[0].d

    @property
    def T(self) -> int:
        return len(self.matrices)

    def vector(self, node_id: int, t: int) -> np.ndarray:
        m = self.matrices[t]
        return m.rows[m.row_map[node_id]]


@dataclass
class TrainingConfig:
    d: int = 64
    epochs: int = 5
    learning_rate: float = 0.025
    min_learning_rate: float = 0.0001
    negatives: int = 5
    walks_per_node: int = 10
    walk_length: int = 20
    window: int = 5
    batch_size: int = 128
    lambda_link: float = 1.0
    lambda_node: float = 0.0
    lambda_edge: float = 0.0
    seed: int | None = 42
    threads: int = 1

    def validate(self) -> None:
        if self.seed is None:
            raise ValidationError("training seed must be set")
        if self.d < 2:
            raise ValidationError("embedding dimension d must be >= 2")
        if min(self.lambda_link, self.lambda_node, self.lambda_edge) < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.epochs < 0 or self.walks_per_node < 1 or self.walk_length < 2 or self.window < 1:
            raise ValidationError("epochs, walks_per_node, walk_length, window out of range")
        if self.negatives < 0 or self.batch_size < 1 or self.threads < 1:
            raise ValidationError("negatives, batch_size, threads out of range")
        if not (self.learning_rate > 0 and self.min_learning_rate >= 0):
            raise ValidationError("learning rates must be positive")


# -- loss ----------------------------------------------------------------------


@dataclass
class Params:
    """Trainable state of one snapshot: embedding table plus node readout."""

    emb: np.ndarray  # (N, d)
    w: np.ndarray  # (d,)
    b: np.ndarray  # (1,)

    def copy(self) -> "Params":
        return Params(self.emb.copy(), self.w.copy(), self.b.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.emb.ravel(), self.w, self.b])

    @classmethod
    def from_flat(cls, vec: np.ndarray, n: int, d: int) -> "Params":
        return cls(vec[: n * d].reshape(n, d).copy(), vec[n * d : n * d + d].copy(), vec[n * d + d :].copy())


def _empty_pairs():
    return np.zeros((0, 2), dtype=np.int64)


@dataclass
class Minibatch:
    """Row indices into ``Params.emb`` plus regression targets."""

    pos: np.ndarray = field(default_factory=_empty_pairs)
    neg: np.ndarray = field(default_factory=_empty_pairs)
    nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    node_targets: np.ndarray = field(default_factory=lambda: np.zeros(0))
    edges: np.ndarray = field(default_factory=_empty_pairs)
    edge_targets: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _scatter_rows(target: np.ndarray, idx: np.ndarray, values: np.ndarray) -> None:
    """``target[idx] += values`` with repeated indices accumulated."""
    n, d = target.shape
    flat = (idx[:, None] * d + np.arange(d)[None, :]).ravel()
    target += np.bincount(flat, weights=values.ravel(), minlength=n * d).reshape(n, d)


def _check(value, term):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite value in {term} term", module="embedding", op="loss_and_grad")


def loss_and_grad(params: Params, batch: Minibatch, cfg: TrainingConfig) -> tuple[float, Params]:
    """Composite loss on ``batch`` and its exact gradient with respect to ``params``."""
    E = params.emb
    gE = np.zeros_like(E)
    gw = np.zeros_like(params.w)
    gb = np.zeros_like(params.b)
    total = 0.0

    if cfg.lambda_link:
        lam = cfg.lambda_link
        for pairs, sign in ((batch.pos, 1.0), (batch.neg, -1.0)):
            if len(pairs) == 0:
                continue
            u, v = E[pairs[:, 0]], E[pairs[:, 1]]
            s = np.einsum("ij,ij->i", u, v)
            # positives: -log sigmoid(s); negatives: -log sigmoid(-s)
            term = np.logaddexp(0.0, -sign * s)
            _check(term, "link")
            total += lam * float(term.sum())
            coef = (lam * -sign * _sigmoid(-sign * s))[:, None]
            _scatter_rows(gE, np.concatenate([pairs[:, 0], pairs[:, 1]]), np.concatenate([coef * v, coef * u]))

    if cfg.lambda_node and len(batch.nodes):
        lam = cfg.lambda_node
        h = E[batch.nodes]
        resid = h @ params.w + params.b[0] - batch.node_targets
        _check(resid, "node")
        total += lam * float(resid @ resid)
        c = 2.0 * lam * resid
        _scatter_rows(gE, batch.nodes, c[:, None] * params.w[None, :])
        gw += c @ h
        gb += c.sum()

    if cfg.lambda_edge and len(batch.edges):
        lam = cfg.lambda_edge
        u, v = E[batch.edges[:, 0]], E[batch.edges[:, 1]]
        resid = np.einsum("ij,ij->i", u, v) - batch.edge_targets
        _check(resid, "edge")
        total += lam * float(resid @ resid)
        c = (2.0 * lam * resid)[:, None]
        _scatter_rows(gE, np.concatenate([batch.edges[:, 0], batch.edges[:, 1]]), np.concatenate([c * v, c * u]))

    if not math.isfinite(total):
        raise NumericError("non-finite total loss", module="embedding", op="loss_and_grad")
    return total, Params(gE, gw, gb)


# -- random walks --------------------------------------------------------------


def _csr(n: int, snapshot: Snapshot, local: Mapping[int, int], directed: bool):
    src, dst, wts = [], [], []
    for u, v, w in snapshot.edges:
        a, b = local[u], local[v]
        w = abs(w) if w != 0 else 1.0
        src.append(a)
        dst.append(b)
        wts.append(w)
        if not directed:
            src.append(b)
            dst.append(a)
            wts.append(w)
    src = np.asarray(src, dtype=np.int64)
    order = np.lexsort((np.asarray(dst, dtype=np.int64), src)) if len(src) else np.zeros(0, dtype=np.int64)
    src = src[order]
    dst = np.asarray(dst, dtype=np.int64)[order]
    wts = np.asarray(wts, dtype=np.float64)[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    indptr = np.cumsum(indptr)
    cum = np.cumsum(wts)
    return indptr, dst, wts, cum


def random_walks(n: int, csr, walks_per_node: int, walk_length: int, rng: np.random.Generator) -> np.ndarray:
    """Weighted random walks from every node; stopped walks are padded with -1."""
    indptr, dst, wts, cum = csr
    starts = np.tile(np.arange(n, dtype=np.int64), walks_per_node)
    walks = np.full((len(starts), walk_length), -1, dtype=np.int64)
    walks[:, 0] = starts
    if len(dst) == 0:
        return walks
    seg_lo = np.where(indptr[:-1] > 0, cum[np.maximum(indptr[:-1] - 1, 0)], 0.0)
    seg_lo[indptr[:-1] == 0] = 0.0
    seg_tot = np.where(indptr[1:] > indptr[:-1], cum[np.maximum(indptr[1:] - 1, 0)] - seg_lo, 0.0)
    cur = starts.copy()
    alive = np.ones(len(starts), dtype=bool)
    for step in range(1, walk_length):
        alive &= indptr[cur + 1] > indptr[cur]
        if not alive.any():
            break
        idx = np.flatnonzero(alive)
        c = cur[idx]
        r = rng.random(len(idx))
        target = seg_lo[c] + r * seg_tot[c]
        pick = np.searchsorted(cum, target, side="right")
        pick = np.clip(pick, indptr[c], indptr[c + 1] - 1)
        nxt = dst[pick]
        cur[idx] = nxt
        walks[idx, step] = nxt
    return walks


def walk_pairs(walks: np.ndarray, window: int) -> np.ndarray:
    """(centre, context) pairs within ``window`` steps, both directions."""
    out = []
    L = walks.shape[1]
    for off in range(1, min(window, L - 1) + 1):
        a, b = walks[:, :-off].ravel(), walks[:, off:].ravel()
        ok = (a >= 0) & (b >= 0)
        p = np.stack([a[ok], b[ok]], axis=1)
        out.append(p)
        out.append(p[:, ::-1])
    if not out:
        return _empty_pairs()
    return np.concatenate(out).astype(np.int64)


# -- training ------------------------------------------------------------------


def _sgd_apply(params: Params, grad: Params, lr: float) -> None:
    params.emb -= lr * grad.emb
    params.w -= lr * grad.w
    params.b -= lr * grad.b


def _train_snapshot(
    params: Params,
    snapshot: Snapshot,
    local: Mapping[int, int],
    directed: bool,
    cfg: TrainingConfig,
    rng: np.random.Generator,
    node_y: np.ndarray | None,
    edge_targets: bool,
) -> None:
    n = params.emb.shape[0]
    if cfg.epochs == 0 or n == 0:
        return
    csr = _csr(n, snapshot, local, directed)
    keys = []
    for u, v, _ in snapshot.edges:
        keys.append(local[u] * n + local[v])
        if not directed:
            keys.append(local[v] * n + local[u])
    neighbor_keys = np.unique(np.array(keys, dtype=np.int64))
    edge_idx = np.array([[local[u], local[v]] for u, v, _ in snapshot.edges], dtype=np.int64).reshape(-1, 2)
    edge_w = np.array([w for _, _, w in snapshot.edges], dtype=np.float64)
    has_node_y = np.zeros(n, dtype=bool) if node_y is None else np.isfinite(node_y)

    epoch_pairs = []
    for _ in range(cfg.epochs):
        walks = random_walks(n, csr, cfg.walks_per_node, cfg.walk_length, rng)
        pairs = walk_pairs(walks, cfg.window)
        epoch_pairs.append((walks, pairs[rng.permutation(len(pairs))]))
    n_batches = [max(1, math.ceil(len(p) / cfg.batch_size)) for _, p in epoch_pairs]
    total_steps = sum(n_batches)
    step = 0
    for (walks, pairs), nb in zip(epoch_pairs, n_batches):
        counts = np.bincount(walks[walks >= 0], minlength=n).astype(np.float64) ** 0.75
        noise = counts / counts.sum()
        batches = []
        for bi in range(nb):
            pos = pairs[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]
            neg = _empty_pairs()
            if cfg.negatives and len(pos):
                centres = np.repeat(pos[:, 0], cfg.negatives)
                cand = rng.choice(n, size=len(centres), p=noise)
                keep = (centres != cand) & ~np.isin(centres * n + cand, neighbor_keys)
                neg = np.stack([centres[keep], cand[keep]], axis=1)
            mb = Minibatch(pos=pos, neg=neg)
            if cfg.lambda_node and node_y is not None and len(pos):
                nodes = np.unique(pos[:, 0])
                nodes = nodes[has_node_y[nodes]]
                mb.nodes, mb.node_targets = nodes, node_y[nodes]
            if cfg.lambda_edge and edge_targets and len(edge_idx):
                pick = rng.integers(0, len(edge_idx), size=min(cfg.batch_size, len(edge_idx)))
                mb.edges, mb.edge_targets = edge_idx[pick], edge_w[pick]
            frac = step / max(1, total_steps)
            lr = cfg.learning_rate - (cfg.learning_rate - cfg.min_learning_rate) * frac
            batches.append((mb, lr))
            step += 1
        if cfg.threads > 1:
            # lock-free shared updates; ordering across workers is not reproducible
            shards = [batches[i :: cfg.threads] for i in range(cfg.threads)]

            def run(shard):
                for mb, lr in shard:
                    _, g = loss_and_grad(params, mb, cfg)
                    _sgd_apply(params, g, lr)

            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                list(pool.map(run, shards))
        else:
            for mb, lr in batches:
                _, g = loss_and_grad(params, mb, cfg)
                _sgd_apply(params, g, lr)


def train_series(
    g: DynamicGraph,
    cfg: TrainingConfig,
    node_targets: Sequence[Mapping[str, float]] | Mapping[int, Mapping[str, float]] | None = None,
    edge_targets: bool = False,
) -> EmbeddingSeries:
    """Train one embedding matrix per snapshot, warm-starting from the previous one.

    ``node_targets`` maps snapshot index to ``{label: value}``. Rows of new
    nodes are drawn from N(0, 1/d); surviving nodes carry their previous row.
    """
    cfg.validate()
    if cfg.lambda_node > 0 and not node_targets:
        raise ValidationError("lambda_node > 0 requires node targets")
    if cfg.lambda_edge > 0 and not edge_targets:
        raise ValidationError("lambda_edge > 0 requires edge weights as targets")
    if isinstance(node_targets, Sequence):
        node_targets = dict(enumerate(node_targets))

    d = cfg.d
    std = 1.0 / math.sqrt(d)
    prev: dict[int, np.ndarray] = {}
    w = np.random.default_rng([cfg.seed, 0, 0]).normal(0.0, std, size=d)
    b = np.zeros(1)
    matrices = []
    for s in g.snapshots:
        t = s.timestamp_index
        ids = np.array(s.nodes, dtype=np.int64)
        local = {int(n): i for i, n in enumerate(ids)}
        init_rng = np.random.default_rng([cfg.seed, t, 1])
        emb = np.empty((len(ids), d))
        for i, n in enumerate(ids.tolist()):
            emb[i] = prev[n] if n in prev else init_rng.normal(0.0, std, size=d)
        params = Params(emb, w.copy(), b.copy())
        node_y = None
        if node_targets and t in node_targets:
            node_y = np.full(len(ids), np.nan)
            for lab, val in node_targets[t].items():
                nid = g.registry.index.get(lab)
                if nid is not None and nid in local:
                    node_y[local[nid]] = float(val)
        rng = np.random.default_rng([cfg.seed, t, 2])
        _train_snapshot(params, s, local, g.directed, cfg, rng, node_y, edge_targets)
        if not np.all(np.isfinite(params.emb)):
            raise NumericError(f"non-finite embeddings at snapshot {t}", module="embedding", op="train_series")
        matrices.append(EmbeddingMatrix(t, s.timestamp_label, ids, params.emb))
        prev = {int(n): params.emb[i].copy() for i, n in enumerate(ids)}
        w, b = params.w, params.b
    return EmbeddingSeries(tuple(matrices), g.registry)


# -- file I/O --------------------------------------------------------------------


def _write_text(path: Path, m: EmbeddingMatrix, labels: Sequence[str]) -> None:
    lines = [f"{len(m.ids)} {m.d} {m.timestamp_label}"]
    for nid, row in zip(m.ids.tolist(), m.rows):
        lines.append(labels[nid] + " " + " ".join(repr(float(x)) for x in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_binary(path: Path, m: EmbeddingMatrix, labels: Sequence[str]) -> None:
    tl = m.timestamp_label.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_BIN_MAGIC)
        fh.write(struct.pack("<III", len(m.ids), m.d, len(tl)))
        fh.write(tl)
        for nid, row in zip(m.ids.tolist(), m.rows):
            lab = labels[nid].encode("utf-8")
            fh.write(struct.pack("<I", len(lab)))
            fh.write(lab)
            fh.write(np.ascontiguousarray(row, dtype="<f8").tobytes())


def save_embeddings(series: EmbeddingSeries, directory, binary: bool = False) -> list[Path]:
    """Write one file per snapshot (``emb_0000.txt`` or ``.bin``); return the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for m in series.matrices:
        p = directory / f"emb_{m.timestamp_index:04d}.{'bin' if binary else 'txt'}"
        (_write_binary if binary else _write_text)(p, m, series.registry.labels)
        paths.append(p)
    return paths


def _read_text(path: Path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split(maxsplit=2)
        if len(header) < 2:
            raise ValidationError(f"{path}: malformed header")
        n, d = int(header[0]), int(header[1])
        tlabel = header[2].strip() if len(header) > 2 else path.stem
        labels, rows = [], []
        for lineno, raw in enumerate(fh, start=2):
            if not raw.strip():
                continue
            parts = raw.split()
            if len(parts) != d + 1:
                raise ValidationError(f"{path}:{lineno}: expected {d} values, got {len(parts) - 1}")
            labels.append(parts[0])
            rows.append([float(x) for x in parts[1:]])
    if len(labels) != n:
        raise ValidationError(f"{path}: header says {n} rows, found {len(labels)}")
    return tlabel, labels, np.array(rows, dtype=np.float64).reshape(n, d)


def _read_binary(path: Path):
    data = Path(path).read_bytes()
    if not data.startswith(_BIN_MAGIC):
        raise ValidationError(f"{path}: not a binary embedding file")
    off = len(_BIN_MAGIC)
    n, d, tl = struct.unpack_from("<III", data, off)
    off += 12
    tlabel = data[off : off + tl].decode("utf-8")
    off += tl
    labels, rows = [], np.empty((n, d))
    for i in range(n):
        (ll,) = struct.unpack_from("<I", data, off)
        off += 4
        labels.append(data[off : off + ll].decode("utf-8"))
        off += ll
        rows[i] = np.frombuffer(data, dtype="<f8", count=d, offset=off)
        off += 8 * d
    return tlabel, labels, rows


def embedding_paths(source) -> list[Path]:
    """Expand a directory into its ``emb_*`` files in order; pass lists through."""
    if isinstance(source, (str, Path)) and Path(source).is_dir():
        files = sorted(Path(source).glob("emb_*.txt")) or sorted(Path(source).glob("emb_*.bin"))
        if not files:
            raise ValidationError(f"{source}: no embedding files found")
        return files
    if isinstance(source, (str, Path)):
        return [Path(source)]
    return [Path(p) for p in source]


def load_embeddings(paths, graph: DynamicGraph | None = None) -> EmbeddingSeries:
    """Load per-snapshot embedding files in the given order.

    With ``graph`` the rows are keyed to its registry and every label must be
    known to it; otherwise a registry is built from first appearance.
    """
    paths = embedding_paths(paths)
    if not paths:
        raise ValidationError("no embedding files")
    for p in paths:
        if not p.exists():
            raise ValidationError(f"missing embedding file: {p}")
    raw = [(_read_binary(p) if p.suffix == ".bin" else _read_text(p)) for p in paths]
    dims = {r[2].shape[1] for r in raw}
    if len(dims) > 1:
        raise ValidationError(f"dimension mismatch across snapshots: {sorted(dims)}")
    if dims.pop() < 2:
        raise ValidationError("embedding dimension must be >= 2")
    if graph is not None:
        registry = graph.registry
        if graph.T != len(raw):
            raise ValidationError(f"graph has {graph.T} snapshots but {len(raw)} embedding files were given")
    else:
        seen: dict[str, None] = {}
        for _, labels, _ in raw:
            for lab in labels:
                seen.setdefault(lab)
        registry = NodeRegistry(tuple(seen))
    matrices = []
    for t, (tlabel, labels, rows) in enumerate(raw):
        if not np.all(np.isfinite(rows)):
            raise ValidationError(f"{paths[t]}: non-finite embedding values")
        if len(set(labels)) != len(labels):
            raise ValidationError(f"{paths[t]}: duplicate labels")
        ids = []
        for lab in labels:
            if lab not in registry.index:
                raise ValidationError(f"{paths[t]}: label {lab!r} unknown to the supplied graph")
            ids.append(registry.index[lab])
        ids = np.array(ids, dtype=np.int64)
        order = np.argsort(ids, kind="stable")
        if graph is not None and set(ids.tolist()) != set(graph.snapshots[t].node_mask):
            raise ValidationError(f"{paths[t]}: rows do not match the node set of snapshot {t}")
        matrices.append(EmbeddingMatrix(t, tlabel, ids[order], rows[order]))
    return EmbeddingSeries(tuple(matrices), registry)


def cosine_similarity_matrix(V, A) -> np.ndarray:
    """All-pairs cosine similarity between rows of ``V`` and rows of ``A``.

    Computed as ``<v, a> / (|v| |a|)`` so exactly representable dot products
    (and therefore exact ties) survive; zero-norm rows give 0.
    """
    V = np.asarray(V, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    nv = np.linalg.norm(V, axis=1)
    na = np.linalg.norm(A, axis=1)
    denom = np.outer(nv, na)
    S = V @ A.T
    np.divide(S, denom, out=S, where=denom > 0)
    S[denom == 0] = 0.0
    np.clip(S, -1.0, 1.0, out=S)
    return S


# -- kNN graphs ------------------------------------------------------------------


def build_knn_graph(m: EmbeddingMatrix, k: int = 20) -> Snapshot:
    """Directed kNN graph by cosine similarity; edge weight is the similarity.

    Ties are broken towards the lower node id.
    """
    n = len(m.ids)
    if not 1 <= k < n:
        raise ValidationError(f"k={k} out of range for {n} nodes")
    sims = cosine_similarity_matrix(m.rows, m.rows)
    edges = []
    for i in range(n):
        s = sims[i].copy()
        s[i] = -np.inf
        order = np.lexsort((m.ids, -s))[:k]
        for j in order:
            edges.append((int(m.ids[i]), int(m.ids[j]), float(sims[i, j])))
    edges.sort()
    return Snapshot(m.timestamp_index, m.timestamp_label, tuple(edges), frozenset(int(x) for x in m.ids))


def knn_graph_series(series: EmbeddingSeries, k: int = 20) -> DynamicGraph:
    """Rebuild a directed dynamic graph from each snapshot's embedding kNN structure."""
    snaps = tuple(build_knn_graph(m, k) for m in series.matrices)
    return DynamicGraph(series.registry, snaps, directed=True)

