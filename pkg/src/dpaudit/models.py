"""Tiny differentiable classifiers with exact second-order products.

Two model families are supported, both trained with softmax cross-entropy:

* ``logreg``: multinomial logistic regression, parameters [W, b]
* ``mlp1``: one hidden layer with relu or tanh, parameters [W1, b1, W2, b2]

Parameters always travel as a flat 1-D vector; :func:`unpack` exposes views
of the individual blocks. Beyond value/gradient evaluation the module
provides the two second-order products needed to differentiate through
gradient descent: an exact Hessian-vector product in parameter space and the
mixed product that routes a parameter-space vector into input space.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .data import Dataset, Example
from .errors import DimensionError

_DTYPES = {"f32": np.float32, "f64": np.float64}


def resolve_dtype(tag: str) -> np.dtype:
    if tag not in _DTYPES:
        raise DimensionError(f"dtype tag must be one of {sorted(_DTYPES)}, got {tag!r}")
    return np.dtype(_DTYPES[tag])


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    Attributes:
        kind: "logreg" or "mlp1".
        input_dim: feature count D.
        num_classes: output classes K, at least 2.
        hidden_dim: hidden width for mlp1, ignored for logreg.
        activation: "relu" or "tanh", mlp1 only.
    """

    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in ("logreg", "mlp1"):
            raise DimensionError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1:
            raise DimensionError("input_dim must be positive")
        if self.num_classes < 2:
            raise DimensionError("num_classes must be at least 2")
        if self.kind == "mlp1":
            if self.hidden_dim < 1:
                raise DimensionError("mlp1 requires hidden_dim >= 1")
            if self.activation not in ("relu", "tanh"):
                raise DimensionError(f"unknown activation {self.activation!r}")

    @property
    def param_count(self) -> int:
        d, k, h = self.input_dim, self.num_classes, self.hidden_dim
        if self.kind == "logreg":
            return k * d + k
        return h * d + h + k * h + k

    @property
    def act_id(self) -> int:
        return kernels.ACT_TANH if self.activation == "tanh" else kernels.ACT_RELU

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "hidden_dim": self.hidden_dim,
            "activation": self.activation,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(
            kind=d["kind"],
            input_dim=int(d["input_dim"]),
            num_classes=int(d["num_classes"]),
            hidden_dim=int(d.get("hidden_dim", 0)),
            activation=d.get("activation", "relu"),
        )


def check_params(spec: ModelSpec, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params)
    if params.ndim != 1 or params.shape[0] != spec.param_count:
        raise DimensionError(
            f"parameter vector must have shape ({spec.param_count},), got {params.shape}"
        )
    if not np.isfinite(params).all():
        raise DimensionError("parameter vector contains non-finite values")
    return np.ascontiguousarray(params)


def unpack(spec: ModelSpec, params: np.ndarray) -> tuple[np.ndarray, ...]:
    """Views of the parameter blocks, in storage order."""
    d, k, h = spec.input_dim, spec.num_classes, spec.hidden_dim
    if spec.kind == "logreg":
        return params[: k * d].reshape(k, d), params[k * d :]
    o1 = h * d
    o2 = o1 + h
    o3 = o2 + k * h
    return (
        params[:o1].reshape(h, d),
        params[o1:o2],
        params[o2:o3].reshape(k, h),
        params[o3:],
    )


def init_params(spec: ModelSpec, seed: int, dtype: str = "f64") -> np.ndarray:
    """Deterministic fan-in-scaled Gaussian init, zero biases."""
    dt = resolve_dtype(dtype)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x1217))))
    w = np.zeros(spec.param_count, dtype=np.float64)
    if spec.kind == "logreg":
        W, _ = unpack(spec, w)
        W[:] = rng.standard_normal(W.shape) / np.sqrt(spec.input_dim)
    else:
        W1, _, W2, _ = unpack(spec, w)
        W1[:] = rng.standard_normal(W1.shape) / np.sqrt(spec.input_dim)
        W2[:] = rng.standard_normal(W2.shape) / np.sqrt(spec.hidden_dim)
    return w.astype(dt)


def _check_batch(spec: ModelSpec, X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.ascontiguousarray(X)
    y = np.ascontiguousarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise DimensionError(f"feature batch must be (n, {spec.input_dim}), got {X.shape}")
    if y.shape != (X.shape[0],):
        raise DimensionError(f"label batch must be ({X.shape[0]},), got {y.shape}")
    if len(y) and (y.min() < 0 or y.max() >= spec.num_classes):
        raise DimensionError("labels out of range")
    return X, y


def _ex_batch(spec: ModelSpec, ex: Example) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(ex.features, dtype=np.float64).reshape(1, -1)
    y = np.array([ex.label], dtype=np.int64)
    return _check_batch(spec, x, y)


# ------------------------------------------------------------- batch ops

def logits_batch(spec: ModelSpec, params: np.ndarray, X: np.ndarray, y=None) -> np.ndarray:
    X, _ = _check_batch(spec, X, np.zeros(X.shape[0], dtype=np.int64) if y is None else y)
    X = X.astype(params.dtype, copy=False)
    if spec.kind == "logreg":
        W, b = unpack(spec, params)
        return kernels.logreg_logits(W, b, X)
    W1, b1, W2, b2 = unpack(spec, params)
    return kernels.mlp_logits(W1, b1, W2, b2, X, spec.act_id)


def loss_batch(spec: ModelSpec, params: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    X, y = _check_batch(spec, X, y)
    X = X.astype(params.dtype, copy=False)
    if spec.kind == "logreg":
        W, b = unpack(spec, params)
        return kernels.logreg_loss(W, b, X, y)
    W1, b1, W2, b2 = unpack(spec, params)
    return kernels.mlp_loss(W1, b1, W2, b2, X, y, spec.act_id)


def grads_batch(spec: ModelSpec, params: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    X, y = _check_batch(spec, X, y)
    X = X.astype(params.dtype, copy=False)
    if spec.kind == "logreg":
        W, b = unpack(spec, params)
        return kernels.logreg_grads(W, b, X, y)
    W1, b1, W2, b2 = unpack(spec, params)
    return kernels.mlp_grads(W1, b1, W2, b2, X, y, spec.act_id)


def grad_input_batch(spec: ModelSpec, params: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    X, y = _check_batch(spec, X, y)
    X = X.astype(params.dtype, copy=False)
    if spec.kind == "logreg":
        W, b = unpack(spec, params)
        return kernels.logreg_grad_input(W, b, X, y)
    W1, b1, W2, b2 = unpack(spec, params)
    return kernels.mlp_grad_input(W1, b1, W2, b2, X, y, spec.act_id)


def clipped_grad_sum(
    spec: ModelSpec, params: np.ndarray, X: np.ndarray, y: np.ndarray, clip_norm: float
) -> np.ndarray:
    """Sum over the batch of per-example gradients clipped to L2 norm <= clip_norm."""
    X, y = _check_batch(spec, X, y)
    X = X.astype(params.dtype, copy=False)
    c = float(clip_norm)
    if spec.kind == "logreg":
        W, b = unpack(spec, params)
        return kernels.logreg_clipped_grad_sum(W, b, X, y, c)
    W1, b1, W2, b2 = unpack(spec, params)
    return kernels.mlp_clipped_grad_sum(W1, b1, W2, b2, X, y, c, spec.act_id)


def reverse_step_products(
    spec: ModelSpec,
    params: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    adjoint: np.ndarray,
    clip_norm: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Transpose of one summed-clipped-gradient update.

    Returns (h, cross) where, with u_i the clip Jacobian at example i's
    gradient applied to ``adjoint``, h = sum_i H_i u_i (flat, parameter
    space) and cross[i] = u_i routed into example i's feature space through
    the mixed second derivative of the loss.
    """
    X, y = _check_batch(spec, X, y)
    X = X.astype(params.dtype, copy=False)
    adjoint = np.ascontiguousarray(adjoint, dtype=params.dtype)
    if adjoint.shape != (spec.param_count,):
        raise DimensionError(
            f"adjoint must have shape ({spec.param_count},), got {adjoint.shape}"
        )
    c = float(clip_norm)
    if spec.kind == "logreg":
        W, b = unpack(spec, params)
        aW, ab = unpack(spec, adjoint)
        return kernels.logreg_reverse_step(W, b, X, y, aW, ab, c)
    W1, b1, W2, b2 = unpack(spec, params)
    aW1, ab1, aW2, ab2 = unpack(spec, adjoint)
    return kernels.mlp_reverse_step(W1, b1, W2, b2, X, y, aW1, ab1, aW2, ab2, c, spec.act_id)


# ------------------------------------------------------ per-example ops

def forward(spec: ModelSpec, params: np.ndarray, ex: Example) -> np.ndarray:
    """Logit vector for one example."""
    x, y = _ex_batch(spec, ex)
    return logits_batch(spec, params, x, y)[0]


def loss(spec: ModelSpec, params: np.ndarray, ex: Example) -> float:
    """Softmax cross-entropy of one example (negative log-probability of its label)."""
    x, y = _ex_batch(spec, ex)
    return float(loss_batch(spec, params, x, y)[0])


def grad_params(spec: ModelSpec, params: np.ndarray, ex: Example) -> np.ndarray:
    """Flat loss gradient with respect to the parameters."""
    x, y = _ex_batch(spec, ex)
    return grads_batch(spec, params, x, y)[0]


def grad_input(spec: ModelSpec, params: np.ndarray, ex: Example) -> np.ndarray:
    """Loss gradient with respect to the example's features."""
    x, y = _ex_batch(spec, ex)
    return grad_input_batch(spec, params, x, y)[0]


def hvp_params(spec: ModelSpec, params: np.ndarray, ex: Example, v: np.ndarray) -> np.ndarray:
    """Exact Hessian-vector product H v of one example's loss, parameter space."""
    x, y = _ex_batch(spec, ex)
    h, _ = reverse_step_products(spec, params, x, y, v, np.inf)
    return h


def cross_hvp_input(spec: ModelSpec, params: np.ndarray, ex: Example, v: np.ndarray) -> np.ndarray:
    """Mixed second-order product v^T (d^2 loss / d params d features)."""
    x, y = _ex_batch(spec, ex)
    _, cross = reverse_step_products(spec, params, x, y, v, np.inf)
    return cross[0]


def predict_accuracy(spec: ModelSpec, params: np.ndarray, data: Dataset) -> float:
    """Fraction of examples whose argmax logit matches the label."""
    U = logits_batch(spec, params, data.X, data.y)
    return float((U.argmax(axis=1) == data.y).mean())
