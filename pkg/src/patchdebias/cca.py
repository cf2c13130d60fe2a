"""Canonical-correlation alignment baseline: map each hospital's features into
a shared space with a reference hospital via whitening + SVD CCA.

Views are paired by seeded random matching within the same disease class
(with replacement when a class is unbalanced). Each non-reference hospital is
projected by its own X-side basis; the reference is projected by the average
of the Y-side bases. No sign or gauge canonicalization is applied across the
per-hospital fits, so the pooled space is only defined up to per-hospital
rotations of equal-correlation subspaces.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, NumericalError, ValidationError
from .featurestore import Cohort, validate_cohort

CCA_MAGIC = b"GCC1"
_EIG_FLOOR = 1e-12


@dataclass
class CcaProjection:
    """Per-hospital projection into the shared canonical space."""

    reference: int
    k: int
    ridge: float
    projections: dict[int, np.ndarray]  # hospital index -> (D, k)
    means: dict[int, np.ndarray]  # hospital index -> (D,) centering vector
    correlations: dict[int, np.ndarray]  # hospital index -> (k,) descending


def _inv_sqrt(S: np.ndarray, what: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(S)
    if vals.min() <= _EIG_FLOOR * max(vals.max(), 1.0):
        raise NumericalError(
            f"{what} covariance is singular; increase ridge (min eigenvalue {vals.min():.3e})"
        )
    return (vecs / np.sqrt(vals)) @ vecs.T


def fit_cca(
    X: np.ndarray, Y: np.ndarray, k: int, ridge: float | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-k canonical directions of row-paired views X and Y.

    Solves the whitened cross-covariance SVD: with Sxx, Syy ridge-regularized,
    M = Sxx^{-1/2} Sxy Syy^{-1/2} = U diag(rho) V^T, Wx = Sxx^{-1/2} U[:, :k],
    Wy = Syy^{-1/2} V[:, :k]. Ridge defaults to 1e-6 * trace(S)/D per side.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ValueError("X and Y must be 2-D with equal row counts")
    n, dx = X.shape
    dy = Y.shape[1]
    if k < 1 or k > min(dx, dy):
        raise ValueError(f"k must lie in [1, {min(dx, dy)}], got {k}")
    if n < 2:
        raise ValueError("need at least 2 paired rows")
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    Sxx = Xc.T @ Xc / n
    Syy = Yc.T @ Yc / n
    Sxy = Xc.T @ Yc / n
    rx = 1e-6 * np.trace(Sxx) / dx if ridge is None else ridge
    ry = 1e-6 * np.trace(Syy) / dy if ridge is None else ridge
    Sxx = Sxx + rx * np.eye(dx)
    Syy = Syy + ry * np.eye(dy)
    isx = _inv_sqrt(Sxx, "X")
    isy = _inv_sqrt(Syy, "Y")
    U, S, Vt = np.linalg.svd(isx @ Sxy @ isy, full_matrices=False)
    Wx = isx @ U[:, :k]
    Wy = isy @ Vt[:k].T
    return Wx, Wy, S[:k]


def _class_indices(cohort: Cohort, rows: np.ndarray) -> dict[int, np.ndarray]:
    return {
        c: rows[cohort.disease[rows] == c]
        for c in np.unique(cohort.disease[rows])
    }


def align_domains(
    cohort: Cohort,
    reference: int,
    k: int,
    ridge: float | None = None,
    seed: int = 0,
) -> tuple[Cohort, CcaProjection]:
    """Project every hospital into the canonical space shared with `reference`.

    Returns the transformed cohort (feature width k, labels preserved) and the
    fitted per-hospital projection.
    """
    validate_cohort(cohort)
    if not 0 <= reference < cohort.n_hospitals:
        raise ValueError(
            f"reference hospital index {reference} out of range 0..{cohort.n_hospitals - 1}"
        )
    rng = np.random.default_rng(seed)
    features = cohort.features.astype(np.float64)
    rows_of = {
        h: np.flatnonzero(cohort.hospital == h) for h in range(cohort.n_hospitals)
    }
    for h, rows in rows_of.items():
        if rows.size < k + 1:
            raise ValueError(
                f"hospital {cohort.hospital_names[h]!r} has {rows.size} samples; need >= k+1 = {k + 1}"
            )

    ref_rows = rows_of[reference]
    ref_classes = _class_indices(cohort, ref_rows)
    projections: dict[int, np.ndarray] = {}
    means: dict[int, np.ndarray] = {}
    correlations: dict[int, np.ndarray] = {}

    if cohort.n_hospitals == 1:
        # degenerate case: self-CCA of the reference against itself
        Wx, _, corr = fit_cca(features[ref_rows], features[ref_rows], k, ridge)
        projections[reference] = Wx
        means[reference] = features[ref_rows].mean(axis=0)
        correlations[reference] = corr
    else:
        wy_stack = []
        corr_stack = []
        for h in range(cohort.n_hospitals):
            if h == reference:
                continue
            rows = rows_of[h]
            h_classes = _class_indices(cohort, rows)
            for c in sorted(set(ref_classes) | set(h_classes)):
                if c not in h_classes:
                    raise ValidationError(
                        f"hospital {cohort.hospital_names[h]!r} lacks disease class "
                        f"{cohort.disease_names[c]!r} present in reference"
                    )
                if c not in ref_classes:
                    raise ValidationError(
                        f"reference hospital lacks disease class {cohort.disease_names[c]!r} "
                        f"present in {cohort.hospital_names[h]!r}"
                    )
            paired_ref = np.empty(rows.size, dtype=np.int64)
            for c in sorted(h_classes):
                mine = h_classes[c]
                pool = ref_classes[c]
                if pool.size >= mine.size:
                    pick = rng.permutation(pool.size)[: mine.size]
                else:
                    pick = rng.choice(pool.size, size=mine.size, replace=True)
                order = np.searchsorted(rows, mine)
                paired_ref[order] = pool[pick]
            Wx, Wy, corr = fit_cca(features[rows], features[paired_ref], k, ridge)
            projections[h] = Wx
            means[h] = features[rows].mean(axis=0)
            correlations[h] = corr
            wy_stack.append(Wy)
            corr_stack.append(corr)
        projections[reference] = np.mean(wy_stack, axis=0)
        means[reference] = features[ref_rows].mean(axis=0)
        # descending average of the per-hospital spectra backing the mean basis
        correlations[reference] = np.mean(corr_stack, axis=0)

    out = np.empty((cohort.n, k), dtype=np.float64)
    for h, rows in rows_of.items():
        out[rows] = (features[rows] - means[h]) @ projections[h]
    aligned = Cohort(
        patch_ids=list(cohort.patch_ids),
        wsi_ids=list(cohort.wsi_ids),
        hospital=cohort.hospital.copy(),
        disease=cohort.disease.copy(),
        features=out.astype(np.float32),
        hospital_names=list(cohort.hospital_names),
        disease_names=list(cohort.disease_names),
    )
    projection = CcaProjection(
        reference=reference,
        k=k,
        ridge=-1.0 if ridge is None else ridge,  # -1 marks the auto rule
        projections=projections,
        means=means,
        correlations=correlations,
    )
    return aligned, projection


def save_cca(projection: CcaProjection, path: str) -> None:
    """GCC1 checkpoint: dims header then per-hospital f64 matrices."""
    hospitals = sorted(projection.projections)
    dim = projection.projections[hospitals[0]].shape[0]
    parts = [
        CCA_MAGIC,
        struct.pack(
            "<IIII", dim, projection.k, len(hospitals), projection.reference
        ),
        struct.pack("<d", projection.ridge),
    ]
    for h in hospitals:
        parts.append(struct.pack("<I", h))
        parts.append(np.ascontiguousarray(projection.projections[h], dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(projection.means[h], dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(projection.correlations[h], dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_cca(path: str) -> CcaProjection:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise DataFormatError(f"{path}: truncated projection file")
        out = data[pos : pos + n]
        pos += n
        return out

    if take(4) != CCA_MAGIC:
        raise DataFormatError(f"{path}: bad magic")
    dim, k, n_hosp, reference = struct.unpack("<IIII", take(16))
    (ridge,) = struct.unpack("<d", take(8))
    projections, means, correlations = {}, {}, {}
    for _ in range(n_hosp):
        (h,) = struct.unpack("<I", take(4))
        projections[h] = np.frombuffer(take(8 * dim * k), dtype="<f8").reshape(dim, k).copy()
        means[h] = np.frombuffer(take(8 * dim), dtype="<f8").copy()
        correlations[h] = np.frombuffer(take(8 * k), dtype="<f8").copy()
    if pos != len(data):
        raise DataFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return CcaProjection(
        reference=reference,
        k=k,
        ridge=ridge,
        projections=projections,
        means=means,
        correlations=correlations,
    )
