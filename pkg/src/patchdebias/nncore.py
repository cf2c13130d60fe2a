"""Dense network primitives: MLP forward/backward, softmax cross-entropy,
gradient reversal, Adam, and a finite-difference gradient checker.

Everything is float64, pure-function style, and deterministic under explicit
seeds. ReLU uses subgradient 0 at exactly zero pre-activation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingError

ACTIVATIONS = ("relu", "identity")


@dataclass
class DenseLayer:
    W: np.ndarray  # (out_dim, in_dim)
    b: np.ndarray  # (out_dim,)

    @property
    def in_dim(self) -> int:
        return int(self.W.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.W.shape[0])


@dataclass
class MlpHead:
    """Affine layers with `activation` between layers and none after the last."""

    layers: list[DenseLayer]
    activation: str = "relu"

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations for one mini-batch."""

    inputs: list[np.ndarray]
    preacts: list[np.ndarray]

    @property
    def batch(self) -> int:
        return int(self.inputs[0].shape[0])


@dataclass
class AdamState:
    lr: float
    beta1: float
    beta2: float
    eps: float
    t: int
    m: list[np.ndarray]
    v: list[np.ndarray]


def init_mlp(dims: list[int], activation: str = "relu", seed: int = 0) -> MlpHead:
    """Uniform fan-in init: W ~ U(-s, s) with s = sqrt(6/fan_in), biases zero."""
    if len(dims) < 2:
        raise ValueError("need at least an input and an output dimension")
    if any(d <= 0 for d in dims):
        raise ValueError(f"all layer dims must be positive, got {dims}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {ACTIVATIONS}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(DenseLayer(W=W, b=np.zeros(fan_out)))
    return MlpHead(layers=layers, activation=activation)


def _activate(head: MlpHead, Z: np.ndarray) -> np.ndarray:
    if head.activation == "relu":
        return np.maximum(Z, 0.0)
    return Z


def forward(head: MlpHead, X: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != head.in_dim:
        raise ValueError(
            f"expected input of shape (N, {head.in_dim}), got {X.shape}"
        )
    inputs, preacts = [], []
    A = X
    last = len(head.layers) - 1
    for i, layer in enumerate(head.layers):
        inputs.append(A)
        Z = A @ layer.W.T + layer.b
        preacts.append(Z)
        A = Z if i == last else _activate(head, Z)
    return A, ForwardCache(inputs=inputs, preacts=preacts)


def backward(
    head: MlpHead, cache: ForwardCache, dY: np.ndarray
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Analytic gradients of the composed map.

    Returns per-layer (dW, db) plus dX so upstream modules can chain.
    """
    if len(cache.inputs) != len(head.layers):
        raise ValueError("cache does not match head layer count")
    for layer, A, Z in zip(head.layers, cache.inputs, cache.preacts):
        if A.shape[1] != layer.in_dim or Z.shape[1] != layer.out_dim:
            raise ValueError("cache shapes do not match head dims")
    dY = np.asarray(dY, dtype=np.float64)
    if dY.shape != (cache.batch, head.out_dim):
        raise ValueError(
            f"expected upstream gradient of shape {(cache.batch, head.out_dim)}, got {dY.shape}"
        )

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(head.layers)
    dZ = dY
    for i in range(len(head.layers) - 1, -1, -1):
        layer = head.layers[i]
        A = cache.inputs[i]
        grads[i] = (dZ.T @ A, dZ.sum(axis=0))
        dA = dZ @ layer.W
        if i > 0:
            if head.activation == "relu":
                # subgradient 0 at Z == 0
                dZ = dA * (cache.preacts[i - 1] > 0.0)
            else:
                dZ = dA
    return grads, dA


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy with max-subtraction; returns (loss, dLogits).

    dLogits is (softmax - onehot) / N, i.e. the gradient of the mean loss.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ValueError("logits must be (N, K) with K >= 2")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logsumexp - shifted[np.arange(n), labels]))
    probs = softmax(logits)
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n


def grl_forward(Z: np.ndarray) -> np.ndarray:
    """Identity in the forward pass."""
    return Z


def grl_backward(dZ: np.ndarray, lam: float) -> np.ndarray:
    """Reverse and scale the incoming gradient: -lam * dZ."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return (-lam) * np.asarray(dZ, dtype=np.float64)


def head_params(head: MlpHead) -> list[np.ndarray]:
    """Parameter references in stable order (W0, b0, W1, b1, ...)."""
    out: list[np.ndarray] = []
    for layer in head.layers:
        out.append(layer.W)
        out.append(layer.b)
    return out


def flatten_grads(grads: list[tuple[np.ndarray, np.ndarray]]) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    for dW, db in grads:
        out.append(dW)
        out.append(db)
    return out


def init_adam(
    params: list[np.ndarray],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    return AdamState(
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        t=0,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def adam_step(
    params: list[np.ndarray], grads: list[np.ndarray], state: AdamState
) -> tuple[list[np.ndarray], AdamState]:
    """Bias-corrected adaptive-moment update; mutates params and state in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must have equal length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient passed to optimizer")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match param {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: int
    worst_entry: int


def grad_check(closure, params: list[np.ndarray], h: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    `closure(params) -> (loss, grads)` must be deterministic. Relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-6); the floor keeps
    near-zero entries from amplifying finite-difference noise.
    """
    _, analytic = closure(params)
    worst = (0.0, -1, -1)
    for pi, p in enumerate(params):
        flat = p.reshape(-1)
        a_flat = np.asarray(analytic[pi]).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            loss_plus, _ = closure(params)
            flat[j] = orig - h
            loss_minus, _ = closure(params)
            flat[j] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * h)
            denom = max(abs(a_flat[j]), abs(numeric), 1e-6)
            rel = abs(a_flat[j] - numeric) / denom
            if rel > worst[0]:
                worst = (rel, pi, j)
    return GradCheckReport(
        max_rel_error=worst[0], worst_param=worst[1], worst_entry=worst[2]
    )
