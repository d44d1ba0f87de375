"""Fully-connected feedforward regression network written directly on numpy.

Hidden layers use ELU (or sigmoid) activations, optional batch normalization
placed before the activation, and inverted dropout on hidden outputs.
Training is mini-batch Adam on MAE (or MSE) loss.

All routines operate on row batches: ``X`` has shape ``(n, input_dim)`` and
estimates come back with shape ``(n,)``. A 1-D input is treated as a single
row and yields a scalar.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import NumericError, StructuralError

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


def _scalar_or_array(x, out):
    return float(out) if np.ndim(x) == 0 else out


def elu(x, alpha=1.0):
    x_arr = np.asarray(x, dtype=float)
    out = alpha * np.expm1(np.minimum(x_arr, 0.0)) + np.maximum(x_arr, 0.0)
    return _scalar_or_array(x, out)


def elu_derivative(x, alpha=1.0):
    """1 on the positive side, ``elu(x) + alpha`` otherwise."""
    x_arr = np.asarray(x, dtype=float)
    out = np.where(x_arr > 0, 1.0, alpha * np.exp(np.minimum(x_arr, 0.0)))
    return _scalar_or_array(x, out)


def sigmoid(x, lam=1.0):
    # tanh form saturates cleanly instead of overflowing exp for large |x|
    x_arr = np.asarray(x, dtype=float)
    out = 0.5 * (1.0 + np.tanh(0.5 * lam * x_arr))
    return _scalar_or_array(x, out)


def sigmoid_derivative(x, lam=1.0):
    s = np.asarray(sigmoid(x, lam))
    return _scalar_or_array(x, lam * s * (1.0 - s))


@dataclass(frozen=True)
class Activation:
    kind: str = "elu"
    param: float = 1.0

    def __post_init__(self):
        if self.kind not in ("elu", "sigmoid", "identity"):
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind != "identity" and not self.param > 0:
            raise ValueError(f"{self.kind} parameter must be positive, got {self.param}")

    def __call__(self, u):
        if self.kind == "elu":
            return elu(u, self.param)
        if self.kind == "sigmoid":
            return sigmoid(u, self.param)
        return u

    def derivative(self, u, out):
        """Derivative at ``u`` given ``out = self(u)`` (reused to save work)."""
        if self.kind == "elu":
            return np.where(u > 0, 1.0, out + self.param)
        if self.kind == "sigmoid":
            return self.param * out * (1.0 - out)
        return np.ones_like(u)


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    hidden_dims: tuple = (256, 256, 256)
    output_dim: int = 1
    activation: Activation = Activation("elu", 1.0)
    use_batchnorm: bool = False
    keep_prob: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) != d or d < 1 for d in dims):
            raise ValueError(f"layer sizes must be positive integers, got {dims}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must be in (0, 1], got {self.keep_prob}")
        if self.activation.kind == "identity" and self.hidden_dims:
            raise ValueError("hidden layers need a nonlinear activation")

    @property
    def dims(self) -> tuple:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activation": {"kind": self.activation.kind, "param": self.activation.param},
            "use_batchnorm": self.use_batchnorm,
            "keep_prob": self.keep_prob,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(d["hidden_dims"]),
            output_dim=int(d["output_dim"]),
            activation=Activation(d["activation"]["kind"], float(d["activation"]["param"])),
            use_batchnorm=bool(d["use_batchnorm"]),
            keep_prob=float(d["keep_prob"]),
        )


def paper_layer_spec(input_dim: int = 84, use_batchnorm: bool = True, keep_prob: float = 0.5) -> LayerSpec:
    """Three hidden ELU layers of 256 units."""
    return LayerSpec(input_dim, (256, 256, 256), 1, Activation("elu", 1.0), use_batchnorm, keep_prob)


@dataclass
class NetworkParams:
    """Layer weights ``(fan_out, fan_in)``, biases, and batchnorm state.

    ``output_scale``/``output_offset`` form a fixed affine map on the raw
    network output so targets in vehicles/hr need not be learned from scratch.
    """

    weights: list
    biases: list
    bn_scale: list = field(default_factory=list)
    bn_shift: list = field(default_factory=list)
    running_mean: list = field(default_factory=list)
    running_var: list = field(default_factory=list)
    output_scale: float = 1.0
    output_offset: float = 0.0

    def trainable(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        for g, s in zip(self.bn_scale, self.bn_shift):
            out.extend((g, s))
        return out

    def copy(self) -> "NetworkParams":
        cp = lambda arrs: [a.copy() for a in arrs]
        return NetworkParams(
            cp(self.weights), cp(self.biases), cp(self.bn_scale), cp(self.bn_shift),
            cp(self.running_mean), cp(self.running_var), self.output_scale, self.output_offset,
        )

    def zeros_like(self) -> "NetworkParams":
        z = lambda arrs: [np.zeros_like(a) for a in arrs]
        return NetworkParams(
            z(self.weights), z(self.biases), z(self.bn_scale), z(self.bn_shift),
            z(self.running_mean), z(self.running_var), 0.0, 0.0,
        )

    def validate(self, spec: LayerSpec) -> None:
        dims = spec.dims
        n_layers = len(dims) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise StructuralError(f"expected {n_layers} layers, got {len(self.weights)}")
        for l in range(n_layers):
            if self.weights[l].shape != (dims[l + 1], dims[l]):
                raise StructuralError(
                    f"layer {l} weight shape {self.weights[l].shape} != {(dims[l + 1], dims[l])}"
                )
            if self.biases[l].shape != (dims[l + 1],):
                raise StructuralError(f"layer {l} bias shape {self.biases[l].shape}")
        n_bn = len(spec.hidden_dims) if spec.use_batchnorm else 0
        for name in ("bn_scale", "bn_shift", "running_mean", "running_var"):
            arrs = getattr(self, name)
            if len(arrs) != n_bn:
                raise StructuralError(f"expected {n_bn} {name} vectors, got {len(arrs)}")
            for l, a in enumerate(arrs):
                if a.shape != (dims[l + 1],):
                    raise StructuralError(f"{name}[{l}] shape {a.shape}")
        for a in self.trainable() + self.running_mean + self.running_var:
            if not np.all(np.isfinite(a)):
                raise NumericError("non-finite parameter")


def init_params(spec: LayerSpec, rng: np.random.Generator) -> NetworkParams:
    """He-uniform weights, zero biases, identity batchnorm."""
    dims = spec.dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    params = NetworkParams(weights, biases)
    if spec.use_batchnorm:
        for h in spec.hidden_dims:
            params.bn_scale.append(np.ones(h))
            params.bn_shift.append(np.zeros(h))
            params.running_mean.append(np.zeros(h))
            params.running_var.append(np.ones(h))
    return params


def sample_dropout_masks(spec: LayerSpec, rng: np.random.Generator, n_rows: int = 1) -> list:
    """One Bernoulli(keep_prob) 0/1 mask per hidden layer, shape ``(n_rows, width)``."""
    p = spec.keep_prob
    if p >= 1.0:
        return [np.ones((n_rows, h)) for h in spec.hidden_dims]
    return [(rng.random((n_rows, h)) < p).astype(float) for h in spec.hidden_dims]


@dataclass
class ForwardCache:
    mode: str
    inputs: list        # input to each layer
    pre: list           # pre-activation after batchnorm, hidden layers
    act: list           # activation output before the dropout mask
    masks: Optional[list]
    zhat: list = field(default_factory=list)
    inv_std: list = field(default_factory=list)
    batch_mean: list = field(default_factory=list)
    batch_var: list = field(default_factory=list)
    estimate: Optional[np.ndarray] = None


def forward(params: NetworkParams, spec: LayerSpec, x, mode: str = "eval", masks=None):
    """Returns ``(estimate, cache)``.

    Train mode multiplies hidden outputs by ``mask / keep_prob`` and normalizes
    with batch statistics; Eval mode is the plain layer recursion with the
    running statistics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    single = np.ndim(x) == 1
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise StructuralError(f"input has {X.shape[-1]} features, network expects {spec.input_dim}")
    n_hidden = len(spec.hidden_dims)
    train = mode == "train"
    if train:
        if masks is None:
            if spec.keep_prob < 1.0:
                raise StructuralError("train mode with dropout requires masks")
        elif len(masks) != n_hidden:
            raise StructuralError(f"expected {n_hidden} masks, got {len(masks)}")
    elif masks is not None:
        raise StructuralError("eval mode takes no dropout masks")

    cache = ForwardCache(mode, [], [], [], masks)
    a = X
    for l in range(n_hidden):
        cache.inputs.append(a)
        z = a @ params.weights[l].T + params.biases[l]
        if spec.use_batchnorm:
            if train:
                mu, var = z.mean(axis=0), z.var(axis=0)
                cache.batch_mean.append(mu)
                cache.batch_var.append(var)
            else:
                mu, var = params.running_mean[l], params.running_var[l]
            inv = 1.0 / np.sqrt(var + BN_EPS)
            zhat = (z - mu) * inv
            cache.zhat.append(zhat)
            cache.inv_std.append(inv)
            u = params.bn_scale[l] * zhat + params.bn_shift[l]
        else:
            u = z
        h = spec.activation(u)
        cache.pre.append(u)
        cache.act.append(h)
        if train and masks is not None:
            h = h * (masks[l] / spec.keep_prob)
        if not np.all(np.isfinite(h)):
            raise NumericError("non-finite activation", layer=l)
        a = h
    cache.inputs.append(a)
    out = a @ params.weights[-1].T + params.biases[-1]
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite output", layer=n_hidden)
    est = out[:, 0] * params.output_scale + params.output_offset
    cache.estimate = est
    return (float(est[0]) if single else est), cache


def loss_value(estimate, target, loss: str = "mae") -> float:
    err = np.asarray(estimate, dtype=float) - np.asarray(target, dtype=float)
    if loss == "mae":
        return float(np.mean(np.abs(err)))
    if loss == "mse":
        return float(np.mean(err ** 2))
    raise ValueError(f"unknown loss {loss!r}")


def loss_gradient(estimate, target, loss: str = "mae") -> np.ndarray:
    """d(mean loss)/d(estimate) for each row."""
    err = np.atleast_1d(np.asarray(estimate, dtype=float) - np.asarray(target, dtype=float))
    n = err.shape[0]
    if loss == "mae":
        return np.sign(err) / n
    if loss == "mse":
        return 2.0 * err / n
    raise ValueError(f"unknown loss {loss!r}")


def backward_from_output(params: NetworkParams, spec: LayerSpec, cache: ForwardCache, d_estimate) -> NetworkParams:
    """Backpropagate ``d_estimate`` (gradient w.r.t. each row's estimate)."""
    if cache is None or not cache.inputs:
        raise StructuralError("backward needs the cache from a forward call")
    n_hidden = len(spec.hidden_dims)
    grads = params.zeros_like()
    d_out = np.asarray(d_estimate, dtype=float).reshape(-1, 1) * params.output_scale
    a_last = cache.inputs[-1]
    grads.weights[-1] = d_out.T @ a_last
    grads.biases[-1] = d_out.sum(axis=0)
    da = d_out @ params.weights[-1]
    train = cache.mode == "train"
    for l in reversed(range(n_hidden)):
        if train and cache.masks is not None:
            da = da * (cache.masks[l] / spec.keep_prob)
        du = da * spec.activation.derivative(cache.pre[l], cache.act[l])
        if spec.use_batchnorm:
            zhat, inv = cache.zhat[l], cache.inv_std[l]
            grads.bn_scale[l] = (du * zhat).sum(axis=0)
            grads.bn_shift[l] = du.sum(axis=0)
            dzhat = du * params.bn_scale[l]
            if train:
                n = dzhat.shape[0]
                dz = (inv / n) * (n * dzhat - dzhat.sum(axis=0) - zhat * (dzhat * zhat).sum(axis=0))
            else:
                dz = dzhat * inv
        else:
            dz = du
        grads.weights[l] = dz.T @ cache.inputs[l]
        grads.biases[l] = dz.sum(axis=0)
        if l > 0:
            da = dz @ params.weights[l]
    return grads


def backward(params: NetworkParams, spec: LayerSpec, cache: ForwardCache, target, loss: str = "mae") -> NetworkParams:
    """Gradients of the mean batch loss w.r.t. every trainable array."""
    if cache is None or cache.estimate is None:
        raise StructuralError("backward needs the cache from a forward call")
    return backward_from_output(params, spec, cache, loss_gradient(cache.estimate, target, loss))


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, arrays: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0, **hyper)


def adam_step(state: AdamState, params: list, grads: list):
    """One bias-corrected Adam update, applied in place; returns ``(state, params)``.

    The step is refused (nothing modified) when any gradient is non-finite.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise StructuralError("adam: parameter, gradient and moment lists differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise StructuralError(f"adam: gradient {i} shape {g.shape} != parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adam: non-finite gradient in array {i}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return state, params


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    loss: str = "mae"
    scale_targets: bool = True


@dataclass
class LossHistory:
    """Per-epoch MAE in vehicles/hr. Validation entries are NaN when no
    validation set was given."""

    train_mae: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)

    def __len__(self):
        return len(self.train_mae)


def _check_xy(X, y, spec):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise StructuralError(f"features must be (n, {spec.input_dim}), got {X.shape}")
    if y.shape != (X.shape[0],):
        raise StructuralError(f"targets shape {y.shape} does not match {X.shape[0]} rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise NumericError("NaN or infinite value in training data")
    return X, y


def train(X, y, spec: LayerSpec, config: TrainConfig = TrainConfig(), validation=None):
    """Mini-batch Adam training. Returns ``(params, LossHistory)``.

    Initialization, shuffling and dropout all draw from one generator seeded
    with ``config.seed``, so identical inputs give bit-identical results.
    ``validation`` is an optional ``(X_val, y_val)`` pair that is only scored,
    never trained on.
    """
    X, y = _check_xy(X, y, spec)
    if X.shape[0] == 0:
        raise StructuralError("training set is empty")
    if validation is not None:
        Xv, yv = _check_xy(validation[0], validation[1], spec)
    rng = np.random.default_rng(config.seed)
    params = init_params(spec, rng)
    if config.scale_targets:
        params.output_offset = float(np.mean(y))
        std = float(np.std(y))
        params.output_scale = std if std > 0 else 1.0
    adam = AdamState.zeros(
        params.trainable(), learning_rate=config.learning_rate,
        beta1=config.beta1, beta2=config.beta2, epsilon=config.epsilon,
    )
    history = LossHistory()
    n = X.shape[0]
    bs = max(1, int(config.batch_size))
    dropout = spec.keep_prob < 1.0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        abs_err = 0.0
        seen = 0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            if spec.use_batchnorm and idx.size < 2:
                continue
            xb, yb = X[idx], y[idx]
            masks = sample_dropout_masks(spec, rng, idx.size) if dropout else None
            est, cache = forward(params, spec, xb, mode="train", masks=masks)
            grads = backward(params, spec, cache, yb, config.loss)
            adam_step(adam, params.trainable(), grads.trainable())
            if spec.use_batchnorm:
                for l in range(len(spec.hidden_dims)):
                    params.running_mean[l] *= BN_MOMENTUM
                    params.running_mean[l] += (1 - BN_MOMENTUM) * cache.batch_mean[l]
                    params.running_var[l] *= BN_MOMENTUM
                    params.running_var[l] += (1 - BN_MOMENTUM) * cache.batch_var[l]
            abs_err += float(np.abs(est - yb).sum())
            seen += idx.size
        history.train_mae.append(abs_err / seen if seen else float("nan"))
        if validation is not None:
            history.val_mae.append(float(np.mean(np.abs(predict(params, spec, Xv) - yv))))
        else:
            history.val_mae.append(float("nan"))
    return params, history


def predict(params: NetworkParams, spec: LayerSpec, x):
    """Eval-mode estimate clamped at zero (volumes are nonnegative)."""
    est, _ = forward(params, spec, x, mode="eval")
    if np.ndim(est) == 0:
        return max(est, 0.0)
    return np.maximum(est, 0.0)
