"""Adversarial debiasing: frozen features -> projection head -> disease head,
with a domain head attached through a gradient reversal layer.

The domain head itself is trained to minimize the domain loss (its parameter
gradients are never reversed or scaled); only the projection receives the
reversed, lambda-scaled domain feedback. The reported total loss is
loss_disease + lambda * loss_domain.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataFormatError, TrainingError
from .nncore import (
    ACTIVATIONS,
    DenseLayer,
    MlpHead,
    adam_step,
    backward,
    flatten_grads,
    forward,
    grl_backward,
    grl_forward,
    head_params,
    init_adam,
    init_mlp,
    softmax,
    softmax_ce,
)

CHECKPOINT_MAGIC = b"GDM1"


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lam: float = 1.0
    proj_hidden: int = 512
    proj_out: int = 256
    lr: float = 1e-3
    seed: int = 0
    shuffle: bool = True
    activation: str = "relu"
    lambda_warmup: bool = False  # linear ramp 0 -> lam over the run; off by default

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.proj_hidden < 1 or self.proj_out < 1:
            raise ValueError("projection dims must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")


@dataclass
class DebiasModel:
    projection: MlpHead
    disease_head: MlpHead
    domain_head: MlpHead
    lam: float

    @property
    def in_dim(self) -> int:
        return self.projection.in_dim

    @property
    def out_dim(self) -> int:
        return self.projection.out_dim


@dataclass
class TrainHistory:
    loss_disease: list[float] = field(default_factory=list)
    loss_domain: list[float] = field(default_factory=list)
    loss_total: list[float] = field(default_factory=list)
    acc_disease: list[float] = field(default_factory=list)
    acc_domain: list[float] = field(default_factory=list)


def build_model(
    in_dim: int, n_diseases: int, n_hospitals: int, cfg: TrainConfig
) -> DebiasModel:
    """Projection D -> hidden -> D' plus single-affine classifier heads."""
    cfg.validate()
    s_proj, s_dis, s_dom = np.random.SeedSequence(cfg.seed).generate_state(3)
    return DebiasModel(
        projection=init_mlp(
            [in_dim, cfg.proj_hidden, cfg.proj_out], cfg.activation, seed=int(s_proj)
        ),
        disease_head=init_mlp([cfg.proj_out, n_diseases], "identity", seed=int(s_dis)),
        domain_head=init_mlp([cfg.proj_out, n_hospitals], "identity", seed=int(s_dom)),
        lam=cfg.lam,
    )


def compute_losses(
    model: DebiasModel,
    X: np.ndarray,
    y: np.ndarray,
    d: np.ndarray,
    lam: float | None = None,
) -> dict:
    """One forward/backward pass over a mini-batch.

    Returns losses, logits, and gradients keyed by component. The projection
    gradient is the training gradient: disease-branch contribution plus the
    reversed domain-branch contribution (-lam * dL_domain/dtheta). Domain-head
    parameter gradients are plain dL_domain/dtheta (never reversed), so the
    domain classifier keeps learning even at lam = 0.
    """
    lam = model.lam if lam is None else lam
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    Z, cache_proj = forward(model.projection, X)
    logits_y, cache_y = forward(model.disease_head, Z)
    logits_d, cache_d = forward(model.domain_head, grl_forward(Z))
    loss_y, dlogits_y = softmax_ce(logits_y, y)
    loss_d, dlogits_d = softmax_ce(logits_d, d)
    loss_total = loss_y + lam * loss_d

    grads_y, dZ_y = backward(model.disease_head, cache_y, dlogits_y)
    grads_d, dZ_d = backward(model.domain_head, cache_d, dlogits_d)
    dZ = dZ_y + grl_backward(dZ_d, lam)
    grads_proj, _ = backward(model.projection, cache_proj, dZ)
    return {
        "loss_disease": loss_y,
        "loss_domain": loss_d,
        "loss_total": loss_total,
        "logits_disease": logits_y,
        "logits_domain": logits_d,
        "grads": {
            "projection": grads_proj,
            "disease_head": grads_y,
            "domain_head": grads_d,
        },
    }


def _model_params(model: DebiasModel) -> list[np.ndarray]:
    return (
        head_params(model.projection)
        + head_params(model.disease_head)
        + head_params(model.domain_head)
    )


def _flatten_model_grads(grads: dict) -> list[np.ndarray]:
    return (
        flatten_grads(grads["projection"])
        + flatten_grads(grads["disease_head"])
        + flatten_grads(grads["domain_head"])
    )


def train_adversarial(
    X: np.ndarray,
    y: np.ndarray,
    d: np.ndarray,
    cfg: TrainConfig,
    n_classes: int | None = None,
    n_domains: int | None = None,
) -> tuple[DebiasModel, TrainHistory]:
    """Train projection and both heads jointly; input features stay frozen.

    Mini-batch order reshuffles every epoch from the run seed; the last partial
    batch is kept. Deterministic: identical (X, y, d, cfg) give bit-identical
    parameters. Head widths default to max label + 1; pass the cohort
    cardinalities explicitly when a training view may miss a class.
    """
    cfg.validate()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    d = np.asarray(d, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[0] != d.shape[0]:
        raise ValueError("X, y, d must agree on the number of rows")
    if not np.all(np.isfinite(X)):
        raise ValueError("training features must be finite")
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    n_domains = int(d.max()) + 1 if n_domains is None else n_domains
    if len(np.unique(y)) < 2 or len(np.unique(d)) < 2:
        raise ValueError("adversarial training needs >= 2 disease and >= 2 hospital classes")

    model = build_model(X.shape[1], n_classes, n_domains, cfg)
    params = _model_params(model)
    opt = init_adam(params, lr=cfg.lr)
    shuffle_seed = np.random.SeedSequence(cfg.seed).generate_state(4)[3]
    rng = np.random.default_rng(int(shuffle_seed))

    n = X.shape[0]
    history = TrainHistory()
    for epoch in range(cfg.epochs):
        if cfg.lambda_warmup and cfg.epochs > 1:
            lam_epoch = cfg.lam * epoch / (cfg.epochs - 1)
        else:
            lam_epoch = cfg.lam
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        sums = np.zeros(3)
        hits_y = hits_d = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            res = compute_losses(model, X[idx], y[idx], d[idx], lam=lam_epoch)
            if not np.isfinite(res["loss_total"]):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            adam_step(params, _flatten_model_grads(res["grads"]), opt)
            w = len(idx)
            sums += w * np.array(
                [res["loss_disease"], res["loss_domain"], res["loss_total"]]
            )
            hits_y += int((res["logits_disease"].argmax(axis=1) == y[idx]).sum())
            hits_d += int((res["logits_domain"].argmax(axis=1) == d[idx]).sum())
        history.loss_disease.append(sums[0] / n)
        history.loss_domain.append(sums[1] / n)
        history.loss_total.append(sums[2] / n)
        history.acc_disease.append(hits_y / n)
        history.acc_domain.append(hits_d / n)
    return model, history


def transform(model: DebiasModel, X: np.ndarray) -> np.ndarray:
    """Debiased representation z = A(x); the GRL and domain head play no part."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.in_dim:
        raise ValueError(f"expected features of width {model.in_dim}, got {X.shape}")
    Z, _ = forward(model.projection, X)
    return Z


def predict_disease(model: DebiasModel, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Disease prediction from the debiased representation.

    Returns (class indices, class probabilities); argmax ties break toward the
    lower index.
    """
    Z = transform(model, X)
    logits, _ = forward(model.disease_head, Z)
    probs = softmax(logits)
    return logits.argmax(axis=1), probs


def _pack_head(head: MlpHead) -> bytes:
    dims = head.dims
    tag = ACTIVATIONS.index(head.activation)
    return struct.pack(f"<I{len(dims)}IB", len(dims), *dims, tag)


def save_checkpoint(model: DebiasModel, path: str) -> None:
    """GDM1 checkpoint: architecture descriptor then f64 parameters in layer order."""
    parts = [CHECKPOINT_MAGIC]
    for head in (model.projection, model.disease_head, model.domain_head):
        parts.append(_pack_head(head))
    parts.append(struct.pack("<d", model.lam))
    for head in (model.projection, model.disease_head, model.domain_head):
        for layer in head.layers:
            parts.append(np.ascontiguousarray(layer.W, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(layer.b, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path: str) -> DebiasModel:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise DataFormatError(f"{path}: truncated checkpoint")
        out = data[pos : pos + n]
        pos += n
        return out

    if take(4) != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: bad checkpoint magic")
    descriptors = []
    for _ in range(3):
        (ndims,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndims}I", take(4 * ndims))
        (tag,) = struct.unpack("<B", take(1))
        if tag >= len(ACTIVATIONS):
            raise DataFormatError(f"{path}: unknown activation tag {tag}")
        descriptors.append((list(dims), ACTIVATIONS[tag]))
    (lam,) = struct.unpack("<d", take(8))

    heads = []
    for dims, activation in descriptors:
        layers = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            W = np.frombuffer(take(8 * fan_out * fan_in), dtype="<f8").reshape(
                fan_out, fan_in
            ).copy()
            b = np.frombuffer(take(8 * fan_out), dtype="<f8").copy()
            layers.append(DenseLayer(W=W, b=b))
        heads.append(MlpHead(layers=layers, activation=activation))
    if pos != len(data):
        raise DataFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return DebiasModel(
        projection=heads[0], disease_head=heads[1], domain_head=heads[2], lam=lam
    )


def history_to_csv(history: TrainHistory, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss_d", "loss_h", "loss_total", "acc_d", "acc_h"])
        for e in range(len(history.loss_total)):
            writer.writerow(
                [
                    e,
                    repr(history.loss_disease[e]),
                    repr(history.loss_domain[e]),
                    repr(history.loss_total[e]),
                    repr(history.acc_disease[e]),
                    repr(history.acc_domain[e]),
                ]
            )
