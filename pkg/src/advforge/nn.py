"""
Small differentiable CNN engine in float64 numpy.

Activations are kept channels-last (N, H, W, C) internally; the public input
layout is (N, C, H, W). Every layer exposes ``forward(params, x) -> (y, cache)``
and ``backward(params, cache, dy, need_dx) -> (dx, grads)`` so a ``Model`` can
run exact reverse mode over its fixed layer stack.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# layer specs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Conv:
    filters: int
    kernel: int
    stride: int = 1
    padding: int = 0

    kind = "conv"

    def output_shape(self, shape):
        c, h, w = shape
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv kernel {self.kernel} does not fit input {shape}")
        return (self.filters, ho, wo)

    def param_shapes(self, shape):
        return [("weight", (self.filters, shape[0], self.kernel, self.kernel)),
                ("bias", (self.filters,))]


@dataclass(frozen=True)
class MaxPool:
    window: int = 2

    kind = "maxpool"

    def output_shape(self, shape):
        c, h, w = shape
        if h < self.window or w < self.window:
            raise ShapeError(f"pool window {self.window} larger than input {shape}")
        return (c, h // self.window, w // self.window)

    def param_shapes(self, shape):
        return []


@dataclass(frozen=True)
class Dense:
    units: int

    kind = "dense"

    def output_shape(self, shape):
        return (self.units,)

    def param_shapes(self, shape):
        return [("weight", (int(np.prod(shape)), self.units)), ("bias", (self.units,))]


@dataclass(frozen=True)
class ReLU:
    kind = "relu"

    def output_shape(self, shape):
        return tuple(shape)

    def param_shapes(self, shape):
        return []


@dataclass(frozen=True)
class Softmax:
    kind = "softmax"

    def output_shape(self, shape):
        return tuple(shape)

    def param_shapes(self, shape):
        return []


LAYER_TYPES = {cls.kind: cls for cls in (Conv, MaxPool, Dense, ReLU, Softmax)}


def _layer_to_dict(layer):
    d = {"type": layer.kind}
    d.update({k: getattr(layer, k) for k in layer.__dataclass_fields__})
    return d


def _layer_from_dict(d):
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in LAYER_TYPES:
        raise ValueError(f"unknown layer type {kind!r}")
    return LAYER_TYPES[kind](**d)


@dataclass(frozen=True)
class ModelConfig:
    layers: Tuple
    input_shape: Tuple[int, ...] = (1, 28, 28)
    num_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if len(self.input_shape) not in (1, 3):
            raise ShapeError(f"input_shape must be (D,) or (C, H, W), got {self.input_shape}")
        if not self.layers or not isinstance(self.layers[-1], Softmax):
            raise ShapeError("final layer must be Softmax")
        shapes = self.shapes()
        if shapes[-1] != (self.num_classes,):
            raise ShapeError(
                f"network emits {shapes[-1]} before Softmax, expected ({self.num_classes},)")
        if any(isinstance(layer, Softmax) for layer in self.layers[:-1]):
            raise ShapeError("Softmax is only allowed as the final layer")

    def shapes(self):
        """Activation shape after every layer (channels-first, no batch dim)."""
        out = []
        shape = self.input_shape
        for layer in self.layers:
            if isinstance(layer, (Conv, MaxPool)) and len(shape) != 3:
                raise ShapeError(f"{layer.kind} needs an image input, got {shape}")
            shape = layer.output_shape(shape)
            out.append(tuple(shape))
        return out

    def param_specs(self):
        """(name, shape) of every parameter in declaration order."""
        specs = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            for pname, pshape in layer.param_shapes(shape):
                specs.append((f"{i}.{layer.kind}.{pname}", tuple(pshape)))
            shape = layer.output_shape(shape)
        return specs

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [_layer_to_dict(layer) for layer in self.layers],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        return cls(layers=[_layer_from_dict(x) for x in d["layers"]],
                   input_shape=d["input_shape"], num_classes=d["num_classes"])


def mnist_cnn(num_classes=10):
    """Two conv/pool stages, 1024-unit hidden layer; the MNIST architecture."""
    return ModelConfig(
        layers=[
            Conv(32, 5, 1, 2), ReLU(), MaxPool(2),
            Conv(64, 5, 1, 2), ReLU(), MaxPool(2),
            Dense(1024), ReLU(),
            Dense(num_classes), Softmax(),
        ],
        input_shape=(1, 28, 28),
        num_classes=num_classes,
    )


def svhn_cnn(num_classes=10):
    return ModelConfig(
        layers=[
            Conv(32, 5, 1, 0), ReLU(),
            Conv(64, 5, 1, 0), ReLU(), MaxPool(2),
            Conv(128, 3, 1, 0), ReLU(), MaxPool(2),
            Dense(512), ReLU(),
            Dense(num_classes), Softmax(),
        ],
        input_shape=(3, 32, 32),
        num_classes=num_classes,
    )


# --------------------------------------------------------------------------
# layer kernels (channels-last)
# --------------------------------------------------------------------------


def _conv_forward(layer, w, b, x):
    k, s, p = layer.kernel, layer.stride, layer.padding
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    n, c = x.shape[0], x.shape[3]
    # window view is (n, ho, wo, c, k, k); columns are laid out (k, k, c)
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s].transpose(0, 1, 2, 4, 5, 3)
    ho, wo = win.shape[1], win.shape[2]
    cols = win.reshape(n * ho * wo, k * k * c)
    wmat = w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)
    y = cols @ wmat.T
    y += b
    return y.reshape(n, ho, wo, -1), (cols, x.shape)


def _conv_backward(layer, w, cache, dy, need_dx):
    cols, xshape = cache
    k, s, p = layer.kernel, layer.stride, layer.padding
    n, ho, wo, f = dy.shape
    c = xshape[3]
    dmat = dy.reshape(-1, f)
    wmat = w.transpose(0, 2, 3, 1).reshape(f, -1)
    dw = (dmat.T @ cols).reshape(f, k, k, c).transpose(0, 3, 1, 2)
    grads = {"weight": np.ascontiguousarray(dw), "bias": dmat.sum(axis=0)}
    if not need_dx:
        return None, grads
    dcols = (dmat @ wmat).reshape(n, ho, wo, k, k, c)
    dx = np.zeros(xshape, dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + s * ho:s, j:j + s * wo:s, :] += dcols[:, :, :, i, j, :]
    if p:
        dx = dx[:, p:-p, p:-p, :]
    return dx, grads


def _pool_forward(layer, x):
    q = layer.window
    n, h, w, c = x.shape
    ho, wo = h // q, w // q
    views = [x[:, i:ho * q:q, j:wo * q:q, :] for i in range(q) for j in range(q)]
    y = views[0]
    for v in views[1:]:
        y = np.maximum(y, v)
    # route to the first maximum in row-major window order
    masks = []
    taken = np.zeros(y.shape, dtype=bool)
    for v in views:
        m = (v == y) & ~taken
        taken |= m
        masks.append(m)
    return y, (masks, x.shape)


def _pool_backward(layer, cache, dy):
    masks, xshape = cache
    q = layer.window
    n, h, w, c = xshape
    ho, wo = h // q, w // q
    exact = ho * q == h and wo * q == w
    dx = np.empty(xshape, dtype=DTYPE) if exact else np.zeros(xshape, dtype=DTYPE)
    for idx, m in enumerate(masks):
        i, j = divmod(idx, q)
        dx[:, i:ho * q:q, j:wo * q:q, :] = dy * m
    return dx


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


def truncated_normal(rng, shape, std):
    """Normal(0, std) resampled until every draw lies within two std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class Model:
    """
    A layer stack plus its parameters.

    Treat instances as values: attacks and evaluation never mutate them.
    Training works on a ``copy()``.
    """

    def __init__(self, config: ModelConfig, params: Dict[str, np.ndarray], rng_seed: int = 0):
        self.config = config
        self.rng_seed = int(rng_seed)
        specs = config.param_specs()
        if [n for n, _ in specs] != list(params):
            raise ShapeError(f"parameter names {list(params)} do not match config {[n for n, _ in specs]}")
        for name, shape in specs:
            if tuple(params[name].shape) != shape:
                raise ShapeError(f"parameter {name}: expected shape {shape}, got {params[name].shape}")
        self.params = {n: np.ascontiguousarray(params[n], dtype=DTYPE) for n, _ in specs}

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, weight_std: float = 0.1, bias: float = 0.1):
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in config.param_specs():
            if name.endswith("weight"):
                params[name] = truncated_normal(rng, shape, weight_std)
            else:
                params[name] = np.full(shape, bias, dtype=DTYPE)
        return cls(config, params, seed)

    def copy(self):
        return Model(self.config, {k: v.copy() for k, v in self.params.items()}, self.rng_seed)

    @property
    def num_params(self):
        return sum(v.size for v in self.params.values())

    def _layer_params(self, i):
        prefix = f"{i}.{self.config.layers[i].kind}."
        return self.params.get(prefix + "weight"), self.params.get(prefix + "bias")

    def check_input(self, x):
        x = np.asarray(x, dtype=DTYPE)
        expected = self.config.input_shape
        if x.ndim != len(expected) + 1 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"input shape mismatch: expected (batch, {', '.join(map(str, expected))}), "
                             f"got {tuple(x.shape)}")
        return x

    # -- forward / backward -------------------------------------------------

    def forward_cached(self, x):
        """Logits and the per-layer caches needed by ``backward``."""
        x = self.check_input(x)
        h = np.ascontiguousarray(x.transpose(0, 2, 3, 1)) if x.ndim == 4 else x
        caches = []
        for i, layer in enumerate(self.config.layers[:-1]):
            w, b = self._layer_params(i)
            if isinstance(layer, Conv):
                h, cache = _conv_forward(layer, w, b, h)
            elif isinstance(layer, MaxPool):
                h, cache = _pool_forward(layer, h)
            elif isinstance(layer, ReLU):
                cache = h > 0
                h = h * cache
            elif isinstance(layer, Dense):
                cache = h.shape
                flat = h.reshape(h.shape[0], -1)
                h = flat @ w + b
                cache = (flat, cache)
            caches.append(cache)
        return h, caches

    def backward(self, caches, dlogits, need_params=True, need_input=False):
        """
        Reverse pass from d(loss)/d(logits).

        Returns ``(grads, dx)``; ``grads`` is None unless ``need_params`` and
        ``dx`` (channels-first, same layout as the input) is None unless
        ``need_input``.
        """
        layers = self.config.layers[:-1]
        grads = {} if need_params else None
        dh = np.asarray(dlogits, dtype=DTYPE)
        # first layer whose input gradient is required
        stop = 0
        if not need_input:
            stop = next((i for i, layer in enumerate(layers) if self._layer_params(i)[0] is not None),
                        len(layers))
        for i in range(len(layers) - 1, -1, -1):
            layer, cache = layers[i], caches[i]
            need_dx = i > stop or need_input
            w, _ = self._layer_params(i)
            if isinstance(layer, Dense):
                flat, shape = cache
                if need_params:
                    grads[f"{i}.dense.weight"] = flat.T @ dh
                    grads[f"{i}.dense.bias"] = dh.sum(axis=0)
                dh = (dh @ w.T).reshape(shape) if need_dx else None
            elif isinstance(layer, Conv):
                dh, g = _conv_backward(layer, w, cache, dh, need_dx)
                if need_params:
                    grads[f"{i}.conv.weight"] = g["weight"]
                    grads[f"{i}.conv.bias"] = g["bias"]
            elif isinstance(layer, MaxPool):
                dh = _pool_backward(layer, cache, dh)
            elif isinstance(layer, ReLU):
                dh = dh * cache
            if dh is None:
                break
        if grads is not None:
            grads = {name: grads[name] for name in self.params}
        dx = None
        if need_input:
            dx = dh.transpose(0, 3, 1, 2) if dh.ndim == 4 else dh
        return grads, dx

    def logits(self, x):
        return self.forward_cached(x)[0]

    def predict(self, x):
        return softmax(self.logits(x))

    def input_gradient(self, x, loss_fn):
        """d(loss)/dx with parameters held fixed."""
        z, caches = self.forward_cached(x)
        _, dz = loss_fn(z)
        return self.backward(caches, dz, need_params=False, need_input=True)[1]

    def param_gradient(self, x, loss_fn):
        z, caches = self.forward_cached(x)
        value, dz = loss_fn(z)
        return value, self.backward(caches, dz, need_params=True)[0]


class CountingModel:
    """
    Proxy that counts input-gradient evaluations (reverse passes that reach
    the input) on the wrapped model.
    """

    def __init__(self, model):
        self.model = model
        self.input_grad_calls = 0

    def backward(self, caches, dlogits, need_params=True, need_input=False):
        if need_input:
            self.input_grad_calls += 1
        return self.model.backward(caches, dlogits, need_params, need_input)

    def input_gradient(self, x, loss_fn):
        return Model.input_gradient(self, x, loss_fn)

    def param_gradient(self, x, loss_fn):
        return Model.param_gradient(self, x, loss_fn)

    def __getattr__(self, name):
        return getattr(self.model, name)


# --------------------------------------------------------------------------
# probabilities and losses
# --------------------------------------------------------------------------


def softmax(z):
    z = np.asarray(z, dtype=DTYPE)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    z = np.asarray(z, dtype=DTYPE)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class Labels:
    """Per-example target distributions plus the hard class index of each row."""

    targets: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.targets, dtype=DTYPE)
        idx = np.asarray(self.indices, dtype=np.int64)
        if t.ndim != 2 or idx.shape != (t.shape[0],):
            raise ShapeError(f"targets {t.shape} and indices {idx.shape} are not aligned")
        if np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-9) or np.any(t < 0):
            raise ValueError("every target row must be a probability distribution")
        if np.any(t.argmax(axis=1) != idx):
            raise ValueError("target argmax disagrees with the stored class index")
        object.__setattr__(self, "targets", t)
        object.__setattr__(self, "indices", idx)

    @classmethod
    def one_hot(cls, indices, num_classes):
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= num_classes):
            raise ValueError(f"class index outside [0, {num_classes})")
        return cls(np.eye(num_classes, dtype=DTYPE)[idx], idx)

    @property
    def num_classes(self):
        return self.targets.shape[1]

    def __len__(self):
        return self.targets.shape[0]

    def __getitem__(self, sl):
        return Labels(self.targets[sl], self.indices[sl])

    def hard(self):
        return Labels.one_hot(self.indices, self.num_classes)


def _as_probs(p):
    return np.asarray(getattr(p, "targets", p), dtype=DTYPE)


def cross_entropy(p_target, q, reduction="mean"):
    """
    Mean (or per-example) ``-sum_c p_c log q_c`` over the batch.

    ``q`` is a probability batch; it is floored at 1e-12 before the log.
    ``p_target`` may be a probability array or a ``Labels``.
    """
    p = _as_probs(p_target)
    q = np.asarray(q, dtype=DTYPE)
    if p.shape != q.shape:
        raise ShapeError(f"cross_entropy shape mismatch: {p.shape} vs {q.shape}")
    per = -(p * np.log(np.maximum(q, PROB_FLOOR))).sum(axis=-1)
    return per if reduction == "none" else float(per.mean())


def forward(model, x):
    """Softmax probabilities of ``model`` on the batch ``x``."""
    return model.predict(x)


@dataclass
class SoftmaxCrossEntropy:
    """
    CE between fixed target distributions and softmax(logits).

    Evaluated as ``-sum p * log_softmax(z)``; the fused gradient is
    ``scale * (softmax(z) - p)``, so it is exactly zero wherever the model
    reproduces the target. ``reduction`` is ``mean`` or ``sum``
    over the batch.
    """

    targets: np.ndarray
    scale: float = 1.0
    reduction: str = "mean"

    def __post_init__(self):
        self.targets = _as_probs(self.targets)

    def __call__(self, z):
        if z.shape != self.targets.shape:
            raise ShapeError(f"logits {z.shape} do not match targets {self.targets.shape}")
        p = self.targets
        per = -(p * log_softmax(z)).sum(axis=-1)
        dz = softmax(z) - p
        norm = self.scale / z.shape[0] if self.reduction == "mean" else self.scale
        value = per.mean() if self.reduction == "mean" else per.sum()
        return self.scale * float(value), dz * norm


def dissimilarity(z_ref, z_new):
    """
    Per-example CE(softmax(z_ref), softmax(z_new)) and its gradients w.r.t.
    both logit arrays.
    """
    p = softmax(z_ref)
    log_q = log_softmax(z_new)
    a = -log_q
    per = (p * a).sum(axis=-1)
    dz_new = softmax(z_new) - p
    dz_ref = p * (a - per[:, None])
    return per, dz_ref, dz_new


@dataclass
class Dissimilarity:
    """
    Mean CE(ref_probs, softmax(z)) with ``ref_probs`` held constant.
    """

    ref_probs: np.ndarray
    scale: float = 1.0

    def __call__(self, z):
        p = np.asarray(self.ref_probs, dtype=DTYPE)
        per = -(p * log_softmax(z)).sum(axis=-1)
        dz = softmax(z) - p
        return self.scale * float(per.mean()), dz * (self.scale / z.shape[0])


class SelfDissimilarity:
    """
    Mean CE(softmax(z), softmax(z)) with gradient through both arguments.

    The second-argument partial is zero where the two distributions coincide,
    so the gradient equals that of the output entropy.
    """

    def __call__(self, z):
        per, dz_ref, dz_new = dissimilarity(z, z)
        m = z.shape[0]
        return float(per.mean()), (dz_ref + dz_new) / m


def grad_params(model, x, loss_fn):
    """Exact d(loss)/d(theta) as a dict keyed like ``model.params``."""
    return model.param_gradient(x, loss_fn)[1]


def grad_input(model, x, loss_fn):
    """Exact d(loss)/dx, same shape as ``x``."""
    return model.input_gradient(x, loss_fn)


def check_finite(name, value):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite values in {name}")


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------


@dataclass
class OptimizerSpec:
    name: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.name not in ("adam", "sgd"):
            raise ValueError(f"optimizer.name must be 'adam' or 'sgd', got {self.name!r}")
        if not self.lr > 0:
            raise ValueError("optimizer.lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("optimizer betas must lie in [0, 1)")

    def to_dict(self):
        if self.name == "sgd":
            return {"name": "sgd", "lr": self.lr}
        return {"name": self.name, "lr": self.lr, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {"name", "lr", "beta1", "beta2", "eps"}
        if unknown:
            raise ValueError(f"unknown optimizer keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(model, grads, opt_state: Optional[OptState], spec: OptimizerSpec, inplace=False):
    """
    One SGD or Adam update. Returns ``(model, opt_state)``; with
    ``inplace=False`` neither argument is modified.
    """
    if set(grads) != set(model.params):
        raise ShapeError("gradient names do not match model parameters")
    state = OptState() if opt_state is None else opt_state
    if not inplace:
        model = model.copy()
        state = copy.deepcopy(state)
    state.step += 1
    t = state.step
    for name, theta in model.params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient {name}: shape {g.shape} != {theta.shape}")
        if spec.name == "sgd":
            theta -= spec.lr * g
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            v = state.v[name] = np.zeros_like(theta)
        m *= spec.beta1
        m += (1 - spec.beta1) * g
        v *= spec.beta2
        v += (1 - spec.beta2) * (g * g)
        mhat = m / (1 - spec.beta1 ** t)
        vhat = v / (1 - spec.beta2 ** t)
        theta -= spec.lr * mhat / (np.sqrt(vhat) + spec.eps)
    return model, state
