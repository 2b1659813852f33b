"""Small synthetic dynamic graphs for demos and tests."""

from __future__ import annotations

import json
import shutil
from importlib import resources
from pathlib import Path

import numpy as np

from .graph import DynamicGraph, from_edges


def community_graph(
    n_communities: int = 3,
    size: int = 10,
    T: int = 5,
    p_in: float = 0.6,
    p_out: float = 0.02,
    seed: int = 7,
) -> DynamicGraph:
    """Planted communities with one migrating node, one late arrival and one departure.

    Node ``n{size-1}`` drifts from community 0 to community 1 over the snapshots,
    the last node is absent from the first two snapshots, and the last node of
    community 1 leaves before the final snapshot.
    """
    rng = np.random.default_rng(seed)
    n = n_communities * size
    names = [f"n{i:02d}" for i in range(n)]
    comm = np.repeat(np.arange(n_communities), size)
    migrant, newcomer, leaver = size - 1, n - 1, 2 * size - 1
    snaps = []
    for t in range(T):
        frac = t / max(1, T - 1)
        present = np.ones(n, dtype=bool)
        if t < 2:
            present[newcomer] = False
        if t == T - 1:
            present[leaver] = False
        rows = []
        for i in range(n):
            for j in range(i + 1, n):
                if not (present[i] and present[j]):
                    continue
                if migrant in (i, j):
                    other = j if i == migrant else i
                    p = p_in * (1 - frac) if comm[other] == 0 else p_in * frac if comm[other] == 1 else p_out
                else:
                    p = p_in if comm[i] == comm[j] else p_out
                if rng.random() < p:
                    rows.append((names[i], names[j], float(rng.integers(1, 5))))
        for i in np.flatnonzero(present):
            rows.append((names[i],))
        snaps.append(rows)
    return from_edges(snaps, timestamp_labels=[f"{2000 + t}" for t in range(T)])


SYNTHETIC_CONFIG = {
    "seed": 42,
    "threads": 1,
    "input": {"manifest": "manifest.json", "directed": False},
    "training": {"d": 16, "epochs": 5, "lambda_link": 1.0},
    "projection": {"method": "tsne", "perplexity": 8, "iterations": 500},
    "alignment": {"k": 5, "alpha": 0.3, "aggregation": "similarity_softmax", "tau": 0.1},
    "metrics": {"n": 5, "m": 10, "p": 0.9},
    "render": {"highlight": ["n09", "n29", "n00"], "show_timestamps": True},
}


def write_synthetic(directory) -> Path:
    """Write the 30-node, 5-snapshot demo dataset and its pipeline config; return the config path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    community_graph().write_edge_lists(directory)
    cfg = directory / "config.json"
    cfg.write_text(json.dumps(SYNTHETIC_CONFIG, indent=1) + "\n", encoding="utf-8")
    return cfg


def bundled_dir():
    return resources.files("dyntraj") / "data" / "synthetic"


def copy_bundled(directory) -> Path:
    """Copy the bundled demo dataset into ``directory``; return its config path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    src = bundled_dir()
    for item in src.iterdir():
        if item.is_file():
            with resources.as_file(item) as p:
                shutil.copyfile(p, directory / item.name)
    return directory / "config.json"
