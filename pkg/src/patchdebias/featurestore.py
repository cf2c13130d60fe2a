"""Patch-feature cohorts: CSV and binary I/O, standardization, grouped folds, synthesis.

Features are stored as float32 (matching typical encoder output precision);
all statistics are computed in float64.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataFormatError, ValidationError

BINARY_MAGIC = b"GDB1"
STD_FLOOR = 1e-8
DISEASE_DIMS = 8  # leading feature block carrying synthetic disease signal


@dataclass
class PatchRecord:
    """One patch: feature vector plus disease label, hospital label and slide group."""

    patch_id: str
    wsi_id: str
    hospital: int
    disease: int
    features: np.ndarray


@dataclass(eq=False)
class Cohort:
    """A set of patch records with hospital/disease name tables.

    Immutable by convention after construction; safe for concurrent reads.
    """

    patch_ids: list[str]
    wsi_ids: list[str]
    hospital: np.ndarray
    disease: np.ndarray
    features: np.ndarray
    hospital_names: list[str]
    disease_names: list[str]

    @property
    def n(self) -> int:
        return len(self.patch_ids)

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_hospitals(self) -> int:
        return len(self.hospital_names)

    @property
    def n_diseases(self) -> int:
        return len(self.disease_names)

    def record(self, i: int) -> PatchRecord:
        return PatchRecord(
            patch_id=self.patch_ids[i],
            wsi_id=self.wsi_ids[i],
            hospital=int(self.hospital[i]),
            disease=int(self.disease[i]),
            features=self.features[i],
        )

    @property
    def records(self) -> list[PatchRecord]:
        return [self.record(i) for i in range(self.n)]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Cohort):
            return NotImplemented
        return (
            self.patch_ids == other.patch_ids
            and self.wsi_ids == other.wsi_ids
            and np.array_equal(self.hospital, other.hospital)
            and np.array_equal(self.disease, other.disease)
            and self.features.dtype == other.features.dtype
            and np.array_equal(self.features, other.features)
            and self.hospital_names == other.hospital_names
            and self.disease_names == other.disease_names
        )


@dataclass
class Standardizer:
    """Per-dimension z-scoring statistics fitted on training-fold records only."""

    mean: np.ndarray
    std: np.ndarray

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != self.mean.shape[0]:
            raise ValueError(
                f"feature width {X.shape[1]} does not match standardizer width {self.mean.shape[0]}"
            )
        return (X - self.mean) / self.std


@dataclass
class FoldPlan:
    """k-fold assignment keyed by slide (wsi_id); all patches of a slide share a fold."""

    k: int
    assignment: dict[str, int]


@dataclass
class SynthSpec:
    """Parametric multi-site cohort with controllable disease/site signal and confounding.

    Disease signal lives on dims [0, 8): for two classes a +/- sign pattern,
    for more classes one-hot contiguous blocks. Site signal is a centered sign
    code on dims [8, 8+n_hospitals): +hospital_signal on the site's own dim,
    -hospital_signal on the rest of the block, so sites are pairwise separated
    by 2*sqrt(2)*hospital_signal. `confound` is the per-slide probability that
    the slide's disease is forced to (hospital index mod n_diseases) instead of
    taking its balanced-grid value.
    """

    dim: int = 16
    n_hospitals: int = 4
    n_diseases: int = 2
    wsis_per_cell: int = 5
    patches_per_wsi: int = 100
    disease_signal: float = 1.0
    hospital_signal: float = 1.0
    confound: float = 0.0
    noise_sigma: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.dim < DISEASE_DIMS + self.n_hospitals:
            raise ValueError(
                f"dim must be >= {DISEASE_DIMS} + n_hospitals, got {self.dim}"
            )
        if self.n_hospitals < 1 or self.n_diseases < 1:
            raise ValueError("need at least one hospital and one disease")
        if self.n_diseases > DISEASE_DIMS:
            raise ValueError(f"at most {DISEASE_DIMS} disease classes supported")
        if self.wsis_per_cell < 1 or self.patches_per_wsi < 1:
            raise ValueError("wsis_per_cell and patches_per_wsi must be positive")
        if not 0.0 <= self.confound <= 1.0:
            raise ValueError(f"confound must lie in [0, 1], got {self.confound}")
        for name in ("disease_signal", "hospital_signal", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def validate_cohort(cohort: Cohort) -> None:
    """Raise ValidationError if any cohort invariant is broken."""
    n = cohort.n
    if n < 1:
        raise ValidationError("cohort must contain at least one record")
    if cohort.features.ndim != 2 or cohort.features.shape[0] != n:
        raise ValidationError("feature matrix shape does not match record count")
    if not np.all(np.isfinite(cohort.features)):
        raise ValidationError("cohort contains non-finite feature values")
    if len(set(cohort.patch_ids)) != n:
        raise ValidationError("duplicate patch_id in cohort")
    if len(set(cohort.hospital_names)) != len(cohort.hospital_names):
        raise ValidationError("hospital names are not unique")
    if len(set(cohort.disease_names)) != len(cohort.disease_names):
        raise ValidationError("disease names are not unique")
    if n and (cohort.hospital.min() < 0 or cohort.hospital.max() >= cohort.n_hospitals):
        raise ValidationError("hospital index out of range")
    if n and (cohort.disease.min() < 0 or cohort.disease.max() >= cohort.n_diseases):
        raise ValidationError("disease index out of range")
    seen: dict[str, tuple[int, int]] = {}
    for wsi, h, d in zip(cohort.wsi_ids, cohort.hospital, cohort.disease):
        labels = (int(h), int(d))
        prev = seen.setdefault(wsi, labels)
        if prev != labels:
            raise ValidationError(
                f"slide {wsi!r} maps to more than one (hospital, disease) pair"
            )


def _index_of(name: str, names: list[str], lookup: dict[str, int]) -> int:
    # first-appearance ordering keeps index maps deterministic without sorting
    idx = lookup.get(name)
    if idx is None:
        idx = len(names)
        lookup[name] = idx
        names.append(name)
    return idx


def load_csv(path: str) -> Cohort:
    """Load a cohort from `patch_id,wsi_id,hospital,disease,f0..f{D-1}` CSV."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if len(header) < 5 or header[:4] != ["patch_id", "wsi_id", "hospital", "disease"]:
            raise DataFormatError(
                f"{path}: header must start with patch_id,wsi_id,hospital,disease"
            )
        dim = len(header) - 4
        expected = [f"f{i}" for i in range(dim)]
        if header[4:] != expected:
            raise DataFormatError(f"{path}: feature columns must be named f0..f{dim - 1}")

        patch_ids: list[str] = []
        wsi_ids: list[str] = []
        hosp_idx: list[int] = []
        dis_idx: list[int] = []
        rows: list[list[float]] = []
        hospital_names: list[str] = []
        disease_names: list[str] = []
        hosp_lookup: dict[str, int] = {}
        dis_lookup: dict[str, int] = {}

        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4 + dim:
                raise DataFormatError(
                    f"{path}: line {line_no}: expected {4 + dim} fields, got {len(row)}"
                )
            try:
                feats = [float(v) for v in row[4:]]
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {line_no}: {exc}") from None
            if not all(math.isfinite(v) for v in feats):
                raise ValidationError(f"{path}: line {line_no}: non-finite feature value")
            patch_ids.append(row[0])
            wsi_ids.append(row[1])
            hosp_idx.append(_index_of(row[2], hospital_names, hosp_lookup))
            dis_idx.append(_index_of(row[3], disease_names, dis_lookup))
            rows.append(feats)

    if not rows:
        raise ValidationError(f"{path}: no records")
    cohort = Cohort(
        patch_ids=patch_ids,
        wsi_ids=wsi_ids,
        hospital=np.asarray(hosp_idx, dtype=np.int64),
        disease=np.asarray(dis_idx, dtype=np.int64),
        features=np.asarray(rows, dtype=np.float64).astype(np.float32),
        hospital_names=hospital_names,
        disease_names=disease_names,
    )
    validate_cohort(cohort)
    return cohort


def save_csv(cohort: Cohort, path: str) -> None:
    validate_cohort(cohort)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["patch_id", "wsi_id", "hospital", "disease"]
            + [f"f{i}" for i in range(cohort.dim)]
        )
        for i in range(cohort.n):
            # str() of a float32 scalar is the shortest decimal that round-trips
            writer.writerow(
                [
                    cohort.patch_ids[i],
                    cohort.wsi_ids[i],
                    cohort.hospital_names[int(cohort.hospital[i])],
                    cohort.disease_names[int(cohort.disease[i])],
                ]
                + [str(v) for v in cohort.features[i]]
            )


class _Reader:
    """Cursor over a byte buffer with truncation checks."""

    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataFormatError(f"{self.path}: truncated file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def string(self) -> str:
        length = self.u32()
        return self.take(length).decode("utf-8")


def _pack_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_binary(cohort: Cohort, path: str) -> None:
    """Write the GDB1 binary layout; round-trips bit-exactly with load_binary."""
    validate_cohort(cohort)
    if cohort.n_hospitals > 0xFFFF or cohort.n_diseases > 0xFFFF:
        raise ValidationError("binary format supports at most 65535 label values")
    feats = np.ascontiguousarray(cohort.features, dtype="<f4")
    parts = [
        BINARY_MAGIC,
        struct.pack(
            "<IIII", cohort.n, cohort.dim, cohort.n_hospitals, cohort.n_diseases
        ),
    ]
    for name in cohort.hospital_names:
        parts.append(_pack_string(name))
    for name in cohort.disease_names:
        parts.append(_pack_string(name))
    for i in range(cohort.n):
        parts.append(_pack_string(cohort.patch_ids[i]))
        parts.append(_pack_string(cohort.wsi_ids[i]))
        parts.append(struct.pack("<HH", int(cohort.hospital[i]), int(cohort.disease[i])))
        parts.append(feats[i].tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_binary(path: str) -> Cohort:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, path)
    magic = r.take(4)
    if magic != BINARY_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    n, dim, n_hosp, n_dis = (r.u32() for _ in range(4))
    hospital_names = [r.string() for _ in range(n_hosp)]
    disease_names = [r.string() for _ in range(n_dis)]
    patch_ids, wsi_ids = [], []
    hosp = np.empty(n, dtype=np.int64)
    dis = np.empty(n, dtype=np.int64)
    feats = np.empty((n, dim), dtype=np.float32)
    for i in range(n):
        patch_ids.append(r.string())
        wsi_ids.append(r.string())
        hosp[i] = r.u16()
        dis[i] = r.u16()
        feats[i] = np.frombuffer(r.take(4 * dim), dtype="<f4")
    if r.pos != len(data):
        raise DataFormatError(f"{path}: {len(data) - r.pos} trailing bytes")
    cohort = Cohort(patch_ids, wsi_ids, hosp, dis, feats, hospital_names, disease_names)
    validate_cohort(cohort)
    return cohort


def fit_standardizer(cohort: Cohort, include: Iterable[int]) -> Standardizer:
    """Per-dimension mean and population std over the included record indices.

    Std entries are clamped to >= 1e-8 so a single record cannot divide by zero.
    """
    idx = np.asarray(list(include), dtype=np.int64)
    if idx.size == 0:
        raise ValueError("include set is empty")
    X = cohort.features[idx].astype(np.float64)
    mean = X.mean(axis=0)
    std = X.std(axis=0)  # population std (ddof=0)
    return Standardizer(mean=mean, std=np.maximum(std, STD_FLOOR))


def save_standardizer(standardizer: Standardizer, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {"mean": standardizer.mean.tolist(), "std": standardizer.std.tolist()}, fh
        )


def load_standardizer(path: str) -> Standardizer:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    return Standardizer(
        mean=np.asarray(obj["mean"], dtype=np.float64),
        std=np.asarray(obj["std"], dtype=np.float64),
    )


def grouped_kfold(cohort: Cohort, k: int, seed: int = 0) -> FoldPlan:
    """Deal slides into k folds, stratified by (hospital, disease) cell.

    Slides are shuffled per cell under `seed`, then assigned round-robin with a
    cursor that runs across cells, so fold sizes stay balanced and every fold
    sees every cell whenever the cell has at least k slides.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    slide_labels: dict[str, tuple[int, int]] = {}
    for wsi, h, d in zip(cohort.wsi_ids, cohort.hospital, cohort.disease):
        slide_labels.setdefault(wsi, (int(h), int(d)))
    if len(slide_labels) < k:
        raise ValueError(f"need at least k={k} distinct slides, got {len(slide_labels)}")

    cells: dict[tuple[int, int], list[str]] = {}
    for wsi, cell in slide_labels.items():
        cells.setdefault(cell, []).append(wsi)

    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    cursor = 0
    for cell in sorted(cells):
        ids = sorted(cells[cell])
        rng.shuffle(ids)
        for wsi in ids:
            assignment[wsi] = cursor % k
            cursor += 1
    return FoldPlan(k=k, assignment=assignment)


def save_fold_plan(plan: FoldPlan, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["wsi_id", "fold"])
        for wsi in sorted(plan.assignment):
            writer.writerow([wsi, plan.assignment[wsi]])


def load_fold_plan(path: str) -> FoldPlan:
    assignment: dict[str, int] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["wsi_id", "fold"]:
            raise DataFormatError(f"{path}: expected header wsi_id,fold")
        for row in reader:
            if len(row) != 2:
                raise DataFormatError(f"{path}: malformed row {row!r}")
            assignment[row[0]] = int(row[1])
    if not assignment:
        raise DataFormatError(f"{path}: empty fold plan")
    return FoldPlan(k=max(assignment.values()) + 1, assignment=assignment)


def patch_fold_ids(plan: FoldPlan, cohort: Cohort) -> np.ndarray:
    """Fold index per patch; raises if the plan does not cover the cohort."""
    try:
        return np.asarray([plan.assignment[w] for w in cohort.wsi_ids], dtype=np.int64)
    except KeyError as exc:
        raise ValidationError(f"fold plan does not cover slide {exc.args[0]!r}") from None


def _disease_mean(spec: SynthSpec, disease: int) -> np.ndarray:
    block = np.zeros(DISEASE_DIMS)
    if spec.n_diseases == 2:
        block[:] = spec.disease_signal * (1.0 if disease == 0 else -1.0)
    else:
        chunks = np.array_split(np.arange(DISEASE_DIMS), spec.n_diseases)
        block[chunks[disease]] = spec.disease_signal
    return block


def synth_generate(spec: SynthSpec) -> Cohort:
    """Generate a multi-site cohort matching the spec; deterministic under seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    H, C = spec.n_hospitals, spec.n_diseases
    hospital_names = [f"site{h}" for h in range(H)]
    disease_names = [f"class{c}" for c in range(C)]

    patch_ids: list[str] = []
    wsi_ids: list[str] = []
    hosp: list[int] = []
    dis: list[int] = []
    blocks: list[np.ndarray] = []
    wsi_counter = 0
    for h in range(H):
        for c in range(C):
            for _ in range(spec.wsis_per_cell):
                u = rng.random()  # slide-level confound draw
                disease = (h % C) if u < spec.confound else c
                mu = np.zeros(spec.dim)
                mu[:DISEASE_DIMS] = _disease_mean(spec, disease)
                mu[DISEASE_DIMS : DISEASE_DIMS + H] = -spec.hospital_signal
                mu[DISEASE_DIMS + h] = spec.hospital_signal
                X = rng.normal(mu, spec.noise_sigma, size=(spec.patches_per_wsi, spec.dim))
                wsi = f"wsi{wsi_counter:04d}"
                wsi_counter += 1
                for j in range(spec.patches_per_wsi):
                    patch_ids.append(f"{wsi}_p{j:03d}")
                    wsi_ids.append(wsi)
                hosp.extend([h] * spec.patches_per_wsi)
                dis.extend([disease] * spec.patches_per_wsi)
                blocks.append(X)

    cohort = Cohort(
        patch_ids=patch_ids,
        wsi_ids=wsi_ids,
        hospital=np.asarray(hosp, dtype=np.int64),
        disease=np.asarray(dis, dtype=np.int64),
        features=np.vstack(blocks).astype(np.float32),
        hospital_names=hospital_names,
        disease_names=disease_names,
    )
    validate_cohort(cohort)
    return cohort
