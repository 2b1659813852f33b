"""Two-dimensional projections of embedding matrices (PCA and exact t-SNE)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ValidationError
from .provenance import fingerprint

METHODS = ("pca", "tsne")


@dataclass
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    early_exaggeration: float = 12.0
    early_exaggeration_iters: int = 250
    learning_rate: float | None = None  # None -> max(N / 12, 50)
    momentum_initial: float = 0.5
    momentum_final: float = 0.8
    momentum_switch: int = 250
    min_gain: float = 0.01
    seed: int | None = 42


@dataclass
class ProjectionConfig:
    method: str = "tsne"
    tsne: TsneConfig = field(default_factory=TsneConfig)


@dataclass
class Projection2D:
    coords: np.ndarray  # (N, 2)
    method: str
    meta: dict = field(default_factory=dict)


# -- PCA -----------------------------------------------------------------------


def pca_project(X) -> Projection2D:
    """Project onto the top two eigenvectors of the sample covariance.

    Each eigenvector is signed so that its largest-magnitude entry is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3 or X.shape[1] < 2:
        raise ValidationError(f"PCA needs an N x d matrix with N >= 3, d >= 2; got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("PCA input contains non-finite values")
    if np.all(X == X[0]):
        raise ValidationError("degenerate covariance: all rows identical")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1][:2]
    evals, evecs = evals[order], evecs[:, order]
    for c in range(2):
        pivot = np.argmax(np.abs(evecs[:, c]))
        if evecs[pivot, c] < 0:
            evecs[:, c] = -evecs[:, c]
    coords = Xc @ evecs
    return Projection2D(
        coords,
        "pca",
        {"explained_variance": [float(v) for v in np.maximum(evals, 0.0)], "components": evecs.T.tolist()},
    )


# -- t-SNE -----------------------------------------------------------------------


def _sq_distances(X: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", X, X)
    D = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(D, 0.0, out=D)
    np.fill_diagonal(D, 0.0)
    return D


def _row_entropy(D: np.ndarray, beta: np.ndarray, offdiag: np.ndarray):
    P = np.exp(-D * beta[:, None]) * offdiag
    s = P.sum(axis=1)
    H = np.log(s) + beta * (D * P).sum(axis=1) / s
    return P / s[:, None], H


def conditional_probabilities(X, perplexity: float, tol: float = 1e-10, max_steps: int = 200):
    """Per-point Gaussian conditionals ``P[i, j] = p_{j|i}`` calibrated to ``perplexity``.

    The precision of each row is found by bisection so that the row's Shannon
    entropy (in bits) equals ``log2(perplexity)``. Raises ``NumericError`` if a
    row is still off by more than 1e-5 bits after ``max_steps`` steps.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        raise ValidationError("need at least two points")
    D = _sq_distances(X)
    offdiag = ~np.eye(n, dtype=bool)
    # shift each row by its smallest off-diagonal distance; leaves p_{j|i} unchanged
    Dm = np.where(offdiag, D, np.inf).min(axis=1)
    D = np.where(offdiag, D - Dm[:, None], 0.0)
    target = math.log(perplexity)
    beta = np.ones(n)
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    P, H = _row_entropy(D, beta, offdiag)
    active = np.abs(H - target) / math.log(2) > tol
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        too_flat = H[idx] > target
        lo[idx[too_flat]] = beta[idx[too_flat]]
        hi[idx[~too_flat]] = beta[idx[~too_flat]]
        b = beta[idx]
        b = np.where(
            too_flat,
            np.where(np.isinf(hi[idx]), b * 2.0, 0.5 * (lo[idx] + hi[idx])),
            0.5 * (lo[idx] + hi[idx]),
        )
        beta[idx] = b
        Pi, Hi = _row_entropy(D[idx], b, offdiag[idx])
        P[idx], H[idx] = Pi, Hi
        active[idx] = np.abs(Hi - target) / math.log(2) > tol
    err = np.abs(H - target) / math.log(2)
    if np.any(err > 1e-5) or not np.all(np.isfinite(P)):
        bad = int(np.argmax(err))
        raise NumericError(
            f"perplexity search did not converge for point {bad} (error {err[bad]:.3g} bits)",
            module="projection",
            op="tsne_project",
        )
    return P, beta


def joint_probabilities(X, perplexity: float) -> np.ndarray:
    P, _ = conditional_probabilities(X, perplexity)
    P = (P + P.T) / (2.0 * P.shape[0])
    return P / P.sum()


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    num = 1.0 / (1.0 + _sq_distances(Y))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), 1e-12)
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def tsne_project(X, cfg: TsneConfig | None = None) -> Projection2D:
    """Exact t-SNE with early exaggeration, momentum and adaptive gains.

    The KL objective is recorded every 10 iterations in ``meta["kl_history"]``
    as ``(iteration, kl)`` pairs. Coordinates are re-centred every 50
    iterations and once more at the end.
    """
    cfg = cfg or TsneConfig()
    if cfg.seed is None:
        raise ValidationError("t-SNE seed must be set")
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 10:
        raise ValidationError(f"t-SNE needs at least 10 points, got {n}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("t-SNE input contains non-finite values")
    if cfg.iterations < cfg.early_exaggeration_iters:
        raise ValidationError("iterations must be >= early_exaggeration_iters")
    perplexity = min(cfg.perplexity, (n - 1) / 3.0)
    if perplexity < 2:
        raise ValidationError(f"perplexity {perplexity:.3g} < 2 after clamping")
    lr = cfg.learning_rate if cfg.learning_rate is not None else max(n / 12.0, 50.0)

    P = joint_probabilities(X, perplexity)
    rng = np.random.default_rng(cfg.seed)
    Y = rng.normal(0.0, 1e-4, size=(n, 2))
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)
    history = []
    for it in range(cfg.iterations):
        exaggerate = it < cfg.early_exaggeration_iters
        momentum = cfg.momentum_initial if it < cfg.momentum_switch else cfg.momentum_final
        num = 1.0 / (1.0 + _sq_distances(Y))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        if (it + 1) % 10 == 0:
            mask = P > 0
            history.append((it + 1, float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))))
        W = ((cfg.early_exaggeration if exaggerate else 1.0) * P - Q) * num
        grad = 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)
        same = np.sign(grad) == np.sign(velocity)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, cfg.min_gain, out=gains)
        velocity = momentum * velocity - lr * gains * grad
        Y = Y + velocity
        if (it + 1) % 50 == 0:
            Y -= Y.mean(axis=0)
        if not np.all(np.isfinite(Y)):
            raise NumericError(f"non-finite coordinates at iteration {it + 1}", module="projection", op="tsne_project")
    Y -= Y.mean(axis=0)
    return Projection2D(
        Y,
        "tsne",
        {"perplexity": perplexity, "learning_rate": lr, "kl_history": history},
    )


def project(X, cfg: ProjectionConfig | None = None) -> Projection2D:
    """Dispatch to the configured projection and stamp the result with a config fingerprint."""
    cfg = cfg or ProjectionConfig()
    if cfg.method == "pca":
        out = pca_project(X)
    elif cfg.method == "tsne":
        out = tsne_project(X, cfg.tsne)
    else:
        raise ValidationError(f"unsupported method {cfg.method!r}; choose from {METHODS}")
    out.meta["config_fingerprint"] = fingerprint(cfg if cfg.method == "tsne" else {"method": "pca"})
    return out
