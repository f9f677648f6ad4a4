"""Small differentiable prediction models with weighted losses.

Parameters live in one flat float64 vector. Layers are stored in order as a
row-major ``(fan_in, fan_out)`` weight matrix followed by its bias; every
layer except the last belongs to the feature extractor span, the last layer
is the head span.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax, expit

__all__ = [
    "ModelSpec",
    "ParamVector",
    "init_params",
    "forward",
    "features",
    "predict_proba",
    "weighted_loss",
    "weighted_grad",
    "loss_and_grad",
    "l2sp_penalty",
    "as_soft_targets",
]

ARCHITECTURES = ("linear-regression", "softmax-linear", "mlp")
ACTIVATIONS = ("relu", "swish")


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    input_dim: int
    output_dim: int
    hidden_sizes: tuple = ()
    activation: str = "relu"
    # regression only: an mlp with a linear output and squared-error loss
    regression: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if self.architecture == "mlp":
            if not self.hidden_sizes or min(self.hidden_sizes) < 1:
                raise ValueError("mlp needs at least one positive hidden layer")
        elif self.hidden_sizes:
            raise ValueError(f"{self.architecture} takes no hidden layers")

    @property
    def is_regression(self) -> bool:
        return self.architecture == "linear-regression" or self.regression

    @property
    def layer_sizes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_sizes, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_sizes)

    @property
    def head_size(self) -> int:
        i, o = self.layer_sizes[-1]
        return i * o + o

    def with_output_dim(self, output_dim: int) -> "ModelSpec":
        d = asdict(self)
        d["output_dim"] = int(output_dim)
        return ModelSpec(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat parameters with the ``[phi | head]`` partition."""

    values: np.ndarray
    phi_span: tuple[int, int]
    head_span: tuple[int, int]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        p0, p1 = self.phi_span
        h0, h1 = self.head_span
        if not (p0 == 0 and p1 == h0 and h1 == v.shape[0] and v.ndim == 1):
            raise ValueError("phi and head spans must tile the parameter vector")

    @classmethod
    def for_spec(cls, spec: ModelSpec, values) -> "ParamVector":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (spec.n_params,):
            raise ValueError(f"expected {spec.n_params} parameters, got shape {values.shape}")
        split = spec.n_params - spec.head_size
        return cls(values, (0, split), (split, spec.n_params))

    @property
    def phi(self) -> np.ndarray:
        return self.values[self.phi_span[0]:self.phi_span[1]]

    @property
    def head(self) -> np.ndarray:
        return self.values[self.head_span[0]:self.head_span[1]]

    def __len__(self) -> int:
        return self.values.shape[0]

    def replace(self, values) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=np.float64), self.phi_span, self.head_span)

    def copy(self) -> "ParamVector":
        return self.replace(self.values.copy())

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return (self.phi_span == other.phi_span and self.head_span == other.head_span
                and np.array_equal(self.values, other.values))


def _check(spec: ModelSpec, params: ParamVector):
    if len(params) != spec.n_params:
        raise ValueError(f"parameter vector of length {len(params)} does not match spec ({spec.n_params})")


def _layers(spec: ModelSpec, values: np.ndarray):
    out, k = [], 0
    for i, o in spec.layer_sizes:
        W = values[k:k + i * o].reshape(i, o)
        k += i * o
        b = values[k:k + o]
        k += o
        out.append((W, b))
    return out


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """Fan-in scaled uniform weights, zero biases."""
    chunks = []
    for i, o in spec.layer_sizes:
        bound = 1.0 / np.sqrt(i)
        chunks.append(rng.uniform(-bound, bound, size=i * o))
        chunks.append(np.zeros(o))
    return ParamVector.for_spec(spec, np.concatenate(chunks))


def _act(spec, z):
    if spec.activation == "relu":
        return np.maximum(z, 0.0)
    return z * expit(z)


def _act_grad(spec, z):
    if spec.activation == "relu":
        return (z > 0).astype(z.dtype)
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


def _inputs(spec, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(f"inputs must have shape (n, {spec.input_dim}), got {X.shape}")
    return X


def _forward_cache(spec, params, X):
    layers = _layers(spec, params.values)
    pre, acts = [], [X]
    h = X
    for W, b in layers[:-1]:
        z = h @ W + b
        pre.append(z)
        h = _act(spec, z)
        acts.append(h)
    W, b = layers[-1]
    return h @ W + b, pre, acts, layers


def forward(spec: ModelSpec, params: ParamVector, X) -> np.ndarray:
    """Logits (classification) or predictions (regression), shape ``(n, output_dim)``."""
    _check(spec, params)
    return _forward_cache(spec, params, _inputs(spec, X))[0]


def features(spec: ModelSpec, params: ParamVector, X) -> np.ndarray:
    """Penultimate activations: the input to the head layer."""
    _check(spec, params)
    return _forward_cache(spec, params, _inputs(spec, X))[2][-1]


def predict_proba(spec: ModelSpec, params: ParamVector, X) -> np.ndarray:
    if spec.is_regression:
        raise ValueError("predict_proba is undefined for regression models")
    return softmax(forward(spec, params, X), axis=1)


def as_soft_targets(targets, k: int) -> np.ndarray:
    """Hard labels -> one-hot rows; soft rows are validated and passed through."""
    t = np.asarray(targets)
    if t.ndim == 1:
        if not np.issubdtype(t.dtype, np.integer):
            if not np.all(t == np.round(t)):
                raise ValueError("1-D classification targets must be integer labels")
            t = t.astype(np.int64)
        if t.size and (t.min() < 0 or t.max() >= k):
            raise ValueError(f"label out of range [0, {k})")
        out = np.zeros((t.shape[0], k))
        out[np.arange(t.shape[0]), t] = 1.0
        return out
    t = t.astype(np.float64)
    if t.ndim != 2 or t.shape[1] != k:
        raise ValueError(f"soft targets must have shape (n, {k}), got {t.shape}")
    if np.any(t < 0) or not np.allclose(t.sum(axis=1), 1.0, rtol=0, atol=1e-9):
        raise ValueError("soft target rows must be non-negative and sum to 1")
    return t


def _regression_targets(targets, k):
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[1] != k:
        raise ValueError(f"regression targets must have {k} columns, got {y.shape}")
    return y


def _weights(weights, n):
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError(f"expected {n} weights, got shape {w.shape}")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    return w


def loss_and_grad(spec: ModelSpec, params: ParamVector, X, targets, weights, need_grad=True):
    """Weighted summed loss and (optionally) its gradient by backpropagation.

    Classification uses soft-target cross-entropy ``-sum_c p_c log q_c``
    through a log-softmax; regression uses ``0.5 * ||y - f||^2`` (unit
    variance Gaussian negative log density up to a constant).
    """
    _check(spec, params)
    X = _inputs(spec, X)
    n = X.shape[0]
    w = _weights(weights, n)
    out, pre, acts, layers = _forward_cache(spec, params, X)
    if spec.is_regression:
        y = _regression_targets(targets, spec.output_dim)
        if y.shape[0] != n:
            raise ValueError("targets and inputs differ in length")
        resid = out - y
        per = 0.5 * np.einsum("ij,ij->i", resid, resid)
        dout = resid
    else:
        p = as_soft_targets(targets, spec.output_dim)
        if p.shape[0] != n:
            raise ValueError("targets and inputs differ in length")
        logq = log_softmax(out, axis=1)
        # 0 * -inf guard for one-hot rows against saturated logits
        per = -np.einsum("ij,ij->i", p, np.where(p > 0, logq, 0.0))
        dout = np.exp(logq) * p.sum(axis=1, keepdims=True) - p
    loss = float(w @ per)
    if not need_grad:
        return loss, None
    delta = dout * w[:, None]
    grads = []
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        h = acts[li]
        grads.append(delta.sum(axis=0))
        grads.append((h.T @ delta).ravel())
        if li > 0:
            delta = (delta @ W.T) * _act_grad(spec, pre[li - 1])
    grads.reverse()
    return loss, np.concatenate(grads)


def weighted_loss(spec: ModelSpec, params: ParamVector, X, targets, weights) -> float:
    """``sum_i weights[i] * loss(params; X[i], targets[i])``."""
    return loss_and_grad(spec, params, X, targets, weights, need_grad=False)[0]


def weighted_grad(spec: ModelSpec, params: ParamVector, X, targets, weights) -> np.ndarray:
    return loss_and_grad(spec, params, X, targets, weights)[1]


def l2sp_penalty(params: ParamVector, anchor: ParamVector, beta: float):
    """Gaussian prior centred at ``anchor`` with variance ``beta``.

    Returns ``(||theta - anchor||^2 / (2 beta), (theta - anchor) / beta)``.
    """
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if len(params) != len(anchor):
        raise ValueError("params and anchor differ in length")
    diff = params.values - anchor.values
    return float(diff @ diff) / (2.0 * beta), diff / beta
