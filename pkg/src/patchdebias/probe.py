"""Bias quantification: train probe MLPs on frozen representations, score
Accuracy/AUC/F1 per grouped fold, aggregate mean +/- std, and sweep lambda.

The adversarial rows retrain a fresh probe on the debiased representation per
fold; probe capacity and seeds are identical across representations so the
comparison measures the representation, not the probe.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Iterator

import numpy as np

from .adversarial import DebiasModel, TrainConfig, TrainHistory, train_adversarial, transform
from .errors import ValidationError
from .featurestore import Cohort, FoldPlan, Standardizer, fit_standardizer, patch_fold_ids
from .metrics import accuracy, macro_f1, macro_ovr_auc
from .nncore import (
    MlpHead,
    adam_step,
    backward,
    flatten_grads,
    forward,
    head_params,
    init_adam,
    init_mlp,
    softmax,
    softmax_ce,
)

TASKS = ("disease", "hospital")


@dataclass
class ProbeConfig:
    hidden: int = 256  # 0 means a purely linear probe
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0

    def validate(self) -> None:
        if self.hidden < 0:
            raise ValueError(f"hidden must be >= 0, got {self.hidden}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass
class FoldMetrics:
    accuracy: float
    auc: float
    f1: float


@dataclass
class MetricsReport:
    task: str
    method: str
    folds: list[FoldMetrics]
    mean: dict[str, float]
    std: dict[str, float]
    lam: float | None = None

    @classmethod
    def from_folds(
        cls, task: str, method: str, folds: list[FoldMetrics], lam: float | None = None
    ) -> "MetricsReport":
        mean, std = {}, {}
        for key in ("accuracy", "auc", "f1"):
            vals = np.array([getattr(f, key) for f in folds])
            mean[key] = float(vals.mean())
            std[key] = float(vals.std())  # population std across folds
        return cls(task=task, method=method, folds=folds, mean=mean, std=std, lam=lam)

    def to_dict(self) -> dict:
        out = {
            "task": self.task,
            "method": self.method,
            "folds": [
                {"accuracy": f.accuracy, "auc": f.auc, "f1": f.f1} for f in self.folds
            ],
            "mean": self.mean,
            "std": self.std,
        }
        if self.lam is not None:
            out["lambda"] = self.lam
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "MetricsReport":
        folds = [FoldMetrics(**f) for f in obj["folds"]]
        return cls(
            task=obj["task"],
            method=obj["method"],
            folds=folds,
            mean=dict(obj["mean"]),
            std=dict(obj["std"]),
            lam=obj.get("lambda"),
        )


@dataclass
class SweepPoint:
    lam: float
    disease: MetricsReport
    hospital: MetricsReport


@dataclass
class SweepResult:
    points: list[SweepPoint]

    def __post_init__(self) -> None:
        lams = [p.lam for p in self.points]
        if any(b <= a for a, b in zip(lams, lams[1:])):
            raise ValueError("sweep lambdas must be strictly increasing")

    def to_csv_rows(self) -> list[list]:
        rows = [["lambda", "task", "metric", "mean", "std"]]
        for p in self.points:
            for task, report in (("disease", p.disease), ("hospital", p.hospital)):
                for metric in ("accuracy", "auc", "f1"):
                    rows.append(
                        [p.lam, task, metric, report.mean[metric], report.std[metric]]
                    )
        return rows


@dataclass
class FoldContext:
    """Everything one cross-validation fold produced before probing."""

    fold: int
    train_idx: np.ndarray
    eval_idx: np.ndarray
    Z_train: np.ndarray
    Z_eval: np.ndarray
    scaler: Standardizer | None
    model: DebiasModel | None
    history: TrainHistory | None


def train_probe(
    Z: np.ndarray,
    labels: np.ndarray,
    cfg: ProbeConfig,
    n_classes: int | None = None,
) -> MlpHead:
    """Train a softmax-CE probe (width -> hidden -> K, linear when hidden=0)."""
    cfg.validate()
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if Z.ndim != 2 or Z.shape[0] != labels.shape[0]:
        raise ValueError("Z and labels must agree on the number of rows")
    if len(np.unique(labels)) < 2:
        raise ValueError("probe training needs at least 2 classes present")
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes

    init_seed, shuffle_seed = np.random.SeedSequence(cfg.seed).generate_state(2)
    dims = (
        [Z.shape[1], n_classes]
        if cfg.hidden == 0
        else [Z.shape[1], cfg.hidden, n_classes]
    )
    probe = init_mlp(dims, "relu", seed=int(init_seed))
    params = head_params(probe)
    opt = init_adam(params, lr=cfg.lr)
    rng = np.random.default_rng(int(shuffle_seed))

    n = Z.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            logits, cache = forward(probe, Z[idx])
            _, dlogits = softmax_ce(logits, labels[idx])
            grads, _ = backward(probe, cache, dlogits)
            adam_step(params, flatten_grads(grads), opt)
    return probe


def probe_scores(probe: MlpHead, Z: np.ndarray) -> np.ndarray:
    logits, _ = forward(probe, Z)
    return softmax(logits)


def fold_patch_indices(
    plan: FoldPlan, cohort: Cohort
) -> list[tuple[np.ndarray, np.ndarray]]:
    """(train, eval) patch-index arrays per fold; raises if the plan misses slides."""
    fold_of = patch_fold_ids(plan, cohort)
    out = []
    for f in range(plan.k):
        eval_idx = np.flatnonzero(fold_of == f)
        train_idx = np.flatnonzero(fold_of != f)
        out.append((train_idx, eval_idx))
    return out


def _target_labels(cohort: Cohort, target: str) -> tuple[np.ndarray, int]:
    if target == "hospital":
        return cohort.hospital, cohort.n_hospitals
    if target == "disease":
        return cohort.disease, cohort.n_diseases
    raise ValueError(f"target must be one of {TASKS}, got {target!r}")


def _score_fold(
    probe: MlpHead, Z_eval: np.ndarray, labels_eval: np.ndarray, n_classes: int
) -> FoldMetrics:
    scores = probe_scores(probe, Z_eval)
    pred = scores.argmax(axis=1)
    return FoldMetrics(
        accuracy=accuracy(pred, labels_eval),
        auc=macro_ovr_auc(scores, labels_eval),
        f1=macro_f1(pred, labels_eval, n_classes),
    )


def iter_fold_representations(
    cohort: Cohort,
    folds: FoldPlan,
    mode: str = "raw",
    standardize: bool = True,
    train_cfg: TrainConfig | None = None,
) -> Iterator[FoldContext]:
    """Per fold: standardize on the training folds, optionally train a
    DebiasModel there and transform both splits. Eval-fold rows never reach
    any fitting step."""
    if mode not in ("raw", "adversarial"):
        raise ValueError(f"mode must be 'raw' or 'adversarial', got {mode!r}")
    if mode == "adversarial" and train_cfg is None:
        raise ValueError("adversarial mode requires a TrainConfig")
    for f, (train_idx, eval_idx) in enumerate(fold_patch_indices(folds, cohort)):
        if eval_idx.size == 0:
            raise ValidationError(f"fold {f} is empty; metrics undefined")
        Z_train = cohort.features[train_idx].astype(np.float64)
        Z_eval = cohort.features[eval_idx].astype(np.float64)
        scaler = None
        if standardize:
            scaler = fit_standardizer(cohort, train_idx)
            Z_train = scaler.transform(Z_train)
            Z_eval = scaler.transform(Z_eval)
        model = history = None
        if mode == "adversarial":
            fold_cfg = replace(train_cfg, seed=train_cfg.seed + f)
            model, history = train_adversarial(
                Z_train,
                cohort.disease[train_idx],
                cohort.hospital[train_idx],
                fold_cfg,
                n_classes=cohort.n_diseases,
                n_domains=cohort.n_hospitals,
            )
            Z_train = transform(model, Z_train)
            Z_eval = transform(model, Z_eval)
        yield FoldContext(
            fold=f,
            train_idx=train_idx,
            eval_idx=eval_idx,
            Z_train=Z_train,
            Z_eval=Z_eval,
            scaler=scaler,
            model=model,
            history=history,
        )


def bias_pipeline(
    cohort: Cohort,
    folds: FoldPlan,
    target: str,
    probe_cfg: ProbeConfig,
    mode: str = "raw",
    train_cfg: TrainConfig | None = None,
    standardize: bool = True,
) -> MetricsReport:
    """Per-fold probe training and evaluation on raw or debiased features.

    Fold f's probe trains on every other fold's representation and is scored
    on fold f. Probe seeds derive as probe_cfg.seed + fold, identically for
    every representation; DebiasModel seeds derive as train_cfg.seed + fold.
    """
    labels, n_classes = _target_labels(cohort, target)
    fold_metrics = []
    for ctx in iter_fold_representations(cohort, folds, mode, standardize, train_cfg):
        probe = train_probe(
            ctx.Z_train,
            labels[ctx.train_idx],
            replace(probe_cfg, seed=probe_cfg.seed + ctx.fold),
            n_classes=n_classes,
        )
        fold_metrics.append(
            _score_fold(probe, ctx.Z_eval, labels[ctx.eval_idx], n_classes)
        )
    method = "raw-probe" if mode == "raw" else "adversarial"
    lam = train_cfg.lam if mode == "adversarial" else None
    return MetricsReport.from_folds(target, method, fold_metrics, lam=lam)


def evaluate_pair(
    cohort: Cohort,
    folds: FoldPlan,
    probe_cfg: ProbeConfig,
    mode: str = "raw",
    train_cfg: TrainConfig | None = None,
    standardize: bool = True,
    on_fold: Callable[[FoldContext], None] | None = None,
) -> tuple[MetricsReport, MetricsReport]:
    """(disease, hospital) reports sharing one DebiasModel per fold.

    Bit-identical to two separate bias_pipeline calls; the shared fold models
    just avoid training them twice. `on_fold` sees each FoldContext (used by
    the CLI to save checkpoints and by tests for leakage instrumentation).
    """
    per_task: dict[str, list[FoldMetrics]] = {task: [] for task in TASKS}
    for ctx in iter_fold_representations(cohort, folds, mode, standardize, train_cfg):
        if on_fold is not None:
            on_fold(ctx)
        for task in TASKS:
            labels, n_classes = _target_labels(cohort, task)
            probe = train_probe(
                ctx.Z_train,
                labels[ctx.train_idx],
                replace(probe_cfg, seed=probe_cfg.seed + ctx.fold),
                n_classes=n_classes,
            )
            per_task[task].append(
                _score_fold(probe, ctx.Z_eval, labels[ctx.eval_idx], n_classes)
            )
    method = "raw-probe" if mode == "raw" else "adversarial"
    lam = train_cfg.lam if mode == "adversarial" else None
    disease = MetricsReport.from_folds("disease", method, per_task["disease"], lam=lam)
    hospital = MetricsReport.from_folds("hospital", method, per_task["hospital"], lam=lam)
    return disease, hospital


def lambda_sweep(
    cohort: Cohort,
    folds: FoldPlan,
    lambdas: list[float],
    probe_cfg: ProbeConfig,
    train_cfg: TrainConfig,
    standardize: bool = True,
) -> SweepResult:
    """One adversarial (disease, hospital) pipeline pair per lambda, ordered by lambda."""
    if not lambdas:
        raise ValueError("lambda grid is empty")
    if any(lam < 0 for lam in lambdas):
        raise ValueError("lambda values must be >= 0")
    if len(set(lambdas)) != len(lambdas):
        raise ValueError("lambda values must be distinct")
    points = []
    for lam in sorted(lambdas):
        disease, hospital = evaluate_pair(
            cohort,
            folds,
            probe_cfg,
            mode="adversarial",
            train_cfg=replace(train_cfg, lam=lam),
            standardize=standardize,
        )
        points.append(SweepPoint(lam=lam, disease=disease, hospital=hospital))
    return SweepResult(points=points)
