"""Exact O(N^2) t-SNE for 2-D embedding of patch features.

Desk scale only (N <= 5000). Conditional bandwidths come from a binary search
matching the row entropy to log2(perplexity); the low-dimensional kernel is
Student-t with one degree of freedom; optimization is momentum gradient
descent with early exaggeration. A 1e-12 floor inside the KL and gradient
expressions keeps them finite.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .featurestore import Cohort

_FLOOR = 1e-12


@dataclass
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    learning_rate: float = 200.0
    momentum_start: float = 0.5
    momentum_final: float = 0.8
    momentum_switch: int = 250
    init: str = "pca"
    seed: int = 0

    def validate(self, n: int) -> None:
        if not 1.0 < self.perplexity < n / 3.0:
            raise ValueError(
                f"perplexity must lie in (1, N/3) = (1, {n / 3:.1f}), got {self.perplexity}"
            )
        if self.iterations < 250:
            raise ValueError(f"iterations must be >= 250, got {self.iterations}")
        if self.init not in ("pca", "random"):
            raise ValueError(f"init must be 'pca' or 'random', got {self.init!r}")


@dataclass
class Embedding2D:
    coords: np.ndarray  # (N, 2)
    kl_history: list[tuple[int, float]] = field(default_factory=list)


def perplexity_calibration(
    sq_dists: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 64
) -> tuple[float, np.ndarray]:
    """Bandwidth sigma_i and conditional row p_{j|i} for one point.

    Binary search over the precision beta = 1/(2 sigma^2) until the Shannon
    entropy of the row (in bits) is within `tol` of log2(perplexity). With all
    distances equal the row is uniform for any sigma and the search simply
    stops at the iteration cap.
    """
    d = np.asarray(sq_dists, dtype=np.float64)
    if d.ndim != 1 or d.size == 0:
        raise ValueError("need a 1-D row of squared distances")
    if d.max() <= 0.0:
        raise ValueError("degenerate row: all squared distances are zero")
    target = np.log2(perplexity)
    beta, beta_min, beta_max = 1.0, 0.0, np.inf
    d_shift = d - d.min()  # exp underflow guard; cancels after normalization
    p = np.full_like(d, 1.0 / d.size)
    for _ in range(max_iter):
        w = np.exp(-beta * d_shift)
        total = w.sum()
        p = w / total
        nz = p > 0
        entropy = float(-(p[nz] * np.log2(p[nz])).sum())
        if abs(entropy - target) <= tol:
            break
        if entropy > target:  # too flat: sharpen by raising beta
            beta_min = beta
            beta = beta * 2.0 if np.isinf(beta_max) else (beta + beta_max) / 2.0
        else:
            beta_max = beta
            beta = beta / 2.0 if beta_min == 0.0 else (beta + beta_min) / 2.0
    return float(np.sqrt(1.0 / (2.0 * beta))), p


def _squared_distances(X: np.ndarray) -> np.ndarray:
    sq = np.sum(X * X, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def joint_probabilities(X: np.ndarray, perplexity: float) -> np.ndarray:
    """Symmetrized affinities P = (P_{j|i} + P_{i|j}) / 2N, zero diagonal."""
    n = X.shape[0]
    d2 = _squared_distances(X)
    cond = np.zeros((n, n))
    mask = ~np.eye(n, dtype=bool)
    for i in range(n):
        _, row = perplexity_calibration(d2[i][mask[i]], perplexity)
        cond[i][mask[i]] = row
    return (cond + cond.T) / (2.0 * n)


def _kl_and_grad(P: np.ndarray, Y: np.ndarray) -> tuple[float, np.ndarray]:
    """KL(P || Q(Y)) and its gradient for the Student-t kernel."""
    student = 1.0 / (1.0 + _squared_distances(Y))
    np.fill_diagonal(student, 0.0)
    Q = student / student.sum()
    W = (P - Q) * student
    grad = 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)
    mask = P > 0
    kl = float(
        np.sum(P[mask] * np.log(np.maximum(P[mask], _FLOOR) / np.maximum(Q[mask], _FLOOR)))
    )
    return kl, grad


def _pca_init(X: np.ndarray, seed: int) -> np.ndarray:
    """Top-2 principal directions by power iteration with deflation."""
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / X.shape[0]
    rng = np.random.default_rng(seed)
    comps = []
    for _ in range(2):
        v = rng.normal(size=cov.shape[0])
        v /= np.linalg.norm(v)
        for _ in range(200):
            for u in comps:
                v -= (v @ u) * u
            w = cov @ v
            for u in comps:
                w -= (w @ u) * u
            norm = np.linalg.norm(w)
            if norm < 1e-30:
                break
            w /= norm
            if np.linalg.norm(w - v) < 1e-12:
                v = w
                break
            v = w
        comps.append(v)
    Y = Xc @ np.column_stack(comps)
    # small-scale start keeps early exaggeration effective
    std = Y.std(axis=0)
    std[std == 0] = 1.0
    return Y / std * 1e-4


def tsne(X: np.ndarray, cfg: TsneConfig) -> Embedding2D:
    """Embed X to 2-D; deterministic under cfg.seed; KL recorded every 50 iters."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 10:
        raise ValueError("need a 2-D matrix with at least 10 rows")
    n = X.shape[0]
    cfg.validate(n)
    P = joint_probabilities(X, cfg.perplexity)

    if cfg.init == "pca":
        Y = _pca_init(X, cfg.seed)
    else:
        Y = np.random.default_rng(cfg.seed).normal(scale=1e-4, size=(n, 2))
    velocity = np.zeros_like(Y)

    kl_history: list[tuple[int, float]] = []
    for it in range(cfg.iterations):
        P_eff = P * cfg.early_exaggeration if it < cfg.exaggeration_iters else P
        _, grad = _kl_and_grad(P_eff, Y)
        momentum = (
            cfg.momentum_start if it < cfg.momentum_switch else cfg.momentum_final
        )
        velocity = momentum * velocity - cfg.learning_rate * grad
        Y = Y + velocity
        if not np.all(np.isfinite(Y)):
            raise NumericalError(f"non-finite embedding at iteration {it}")
        if (it + 1) % 50 == 0:
            kl, _ = _kl_and_grad(P, Y)
            kl_history.append((it + 1, kl))
    return Embedding2D(coords=Y, kl_history=kl_history)


def embed_report(
    cohort: Cohort,
    out_csv: str,
    cfg: TsneConfig,
    sample_cap: int = 2000,
    representation: np.ndarray | None = None,
) -> tuple[Embedding2D, np.ndarray]:
    """Embed (a seeded subsample of) the cohort and write labeled coordinates.

    `representation` substitutes a transformed feature matrix (row-aligned
    with the cohort); None embeds the raw features. Writes the coordinates CSV
    plus `<out>.meta.json` with the full embedding configuration and
    `<out>.kl.csv` with the recorded KL trace. Returns the embedding and the
    sampled row indices.
    """
    if sample_cap > 5000:
        raise ValueError(
            f"sample_cap {sample_cap} exceeds the exact t-SNE bound of 5000; refusing"
        )
    if sample_cap < 10:
        raise ValueError("sample_cap must be >= 10")
    Z = cohort.features if representation is None else np.asarray(representation)
    if Z.shape[0] != cohort.n:
        raise ValidationError("representation rows do not match cohort size")
    if cohort.n > sample_cap:
        rng = np.random.default_rng(cfg.seed)
        idx = np.sort(rng.choice(cohort.n, size=sample_cap, replace=False))
    else:
        idx = np.arange(cohort.n)
    emb = tsne(Z[idx].astype(np.float64), cfg)

    with open(out_csv, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patch_id", "wsi_id", "hospital", "disease", "x", "y"])
        for row, i in enumerate(idx):
            writer.writerow(
                [
                    cohort.patch_ids[i],
                    cohort.wsi_ids[i],
                    cohort.hospital_names[int(cohort.hospital[i])],
                    cohort.disease_names[int(cohort.disease[i])],
                    repr(float(emb.coords[row, 0])),
                    repr(float(emb.coords[row, 1])),
                ]
            )
    meta = {
        "perplexity": cfg.perplexity,
        "iterations": cfg.iterations,
        "early_exaggeration": cfg.early_exaggeration,
        "exaggeration_iters": cfg.exaggeration_iters,
        "learning_rate": cfg.learning_rate,
        "momentum_start": cfg.momentum_start,
        "momentum_final": cfg.momentum_final,
        "momentum_switch": cfg.momentum_switch,
        "init": cfg.init,
        "seed": cfg.seed,
        "sample_cap": sample_cap,
        "rows": int(idx.size),
        "representation": "raw" if representation is None else "transformed",
    }
    with open(out_csv + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
    with open(out_csv + ".kl.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "kl"])
        for it, kl in emb.kl_history:
            writer.writerow([it, repr(kl)])
    return emb, idx
