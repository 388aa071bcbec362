"""
Training regimes: natural, FGSM / IFGSM adversarial training and the
two-step e2SAD defense, plus label smoothing and the gradient-regularized
minmax objective (evaluation only).
"""

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .attacks import clamp_ball, clip_to_range
from .data import BatchIterator
from .nn import (DTYPE, CountingModel, Labels, Model, NumericError, OptimizerSpec,
                 SelfDissimilarity, ShapeError, SoftmaxCrossEntropy, Dissimilarity,
                 dissimilarity, mnist_cnn, optimizer_step, softmax)

log = logging.getLogger(__name__)

MODES = ("natural", "adv_fgsm", "adv_ifgsm", "e2sad")

CONFIG_KEYS = ("mode", "alpha", "lambda", "eps1", "eps2", "adv_eps", "adv_steps",
               "smoothing_delta", "batch_size", "iterations", "optimizer", "seed", "data_range")


class ConfigError(ValueError):
    """Invalid training configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "natural"
    alpha: Optional[float] = None
    lam: Optional[float] = None
    eps1: Optional[float] = None
    eps2: Optional[float] = None
    adv_eps: Optional[float] = None
    adv_steps: Optional[int] = None
    smoothing_delta: float = 0.0
    batch_size: int = 128
    iterations: int = 2000
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    seed: int = 0
    data_range: Tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            try:
                object.__setattr__(self, "optimizer", OptimizerSpec.from_dict(self.optimizer))
            except (TypeError, ValueError) as exc:
                raise ConfigError("optimizer", str(exc)) from None
        object.__setattr__(self, "data_range", tuple(float(v) for v in self.data_range))
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}, got {self.mode!r}")
        required = {
            "natural": (),
            "adv_fgsm": ("alpha", "adv_eps"),
            "adv_ifgsm": ("alpha", "adv_eps", "adv_steps"),
            "e2sad": ("alpha", "lambda", "eps1", "eps2"),
        }[self.mode]
        for key in required:
            if self._get(key) is None:
                raise ConfigError(key, f"required for mode {self.mode}")
        if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha", f"must lie in [0, 1], got {self.alpha}")
        if self.lam is not None and not self.lam >= 0.0:
            raise ConfigError("lambda", f"must be >= 0, got {self.lam}")
        for key in ("eps1", "eps2", "adv_eps"):
            v = self._get(key)
            if v is not None and not (math.isfinite(v) and v > 0):
                raise ConfigError(key, f"must be > 0, got {v}")
        if self.adv_steps is not None and (int(self.adv_steps) != self.adv_steps or self.adv_steps < 1):
            raise ConfigError("adv_steps", f"must be a positive integer, got {self.adv_steps}")
        if not 0.0 <= self.smoothing_delta < 1.0:
            raise ConfigError("smoothing_delta", f"must lie in [0, 1), got {self.smoothing_delta}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError("batch_size", f"must be a positive integer, got {self.batch_size}")
        if int(self.iterations) != self.iterations or self.iterations < 0:
            raise ConfigError("iterations", f"must be a non-negative integer, got {self.iterations}")
        if len(self.data_range) != 2 or not self.data_range[0] < self.data_range[1]:
            raise ConfigError("data_range", f"must be [lo, hi] with lo < hi, got {self.data_range}")

    def _get(self, key):
        return self.lam if key == "lambda" else getattr(self, key)

    def to_dict(self):
        d = {key: self._get(key) for key in CONFIG_KEYS}
        d["optimizer"] = self.optimizer.to_dict()
        d["data_range"] = list(self.data_range)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        unknown = sorted(set(d) - set(CONFIG_KEYS))
        if unknown:
            raise ConfigError(unknown[0], "unknown configuration key")
        kwargs = {("lam" if k == "lambda" else k): v for k, v in d.items()}
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from None

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)

    @property
    def loss_weights(self):
        """(alpha, lambda) as they enter the total loss for this mode."""
        if self.mode == "natural":
            return 1.0, 0.0
        if self.mode == "e2sad":
            return float(self.alpha), float(self.lam)
        return float(self.alpha), 0.0


# --------------------------------------------------------------------------
# label smoothing and loss pieces
# --------------------------------------------------------------------------


def smooth_labels(hard, delta, num_classes=None):
    """
    Soft targets: 1 - delta on the true class, delta spread evenly over the
    other ``num_classes - 1`` classes.
    """
    if isinstance(hard, Labels):
        indices = hard.indices
        num_classes = hard.num_classes if num_classes is None else num_classes
    else:
        indices = np.asarray(hard, dtype=np.int64)
    if num_classes is None or num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if not 0.0 <= delta < 1.0:
        raise ValueError(f"delta must lie in [0, 1), got {delta}")
    if delta >= (num_classes - 1) / num_classes:
        raise ValueError(f"delta={delta} would move the argmax away from the true class")
    if delta == 0:
        return Labels.one_hot(indices, num_classes)
    targets = np.full((len(indices), num_classes), delta / (num_classes - 1), dtype=DTYPE)
    targets[np.arange(len(indices)), indices] = 1.0 - delta
    return Labels(targets, indices)


def _targets(model, targets):
    if isinstance(targets, Labels):
        return targets
    return Labels.one_hot(targets, model.config.num_classes)


def batch_loss(model, x, targets):
    """Mean CE of ``model`` on ``x`` against the target distributions."""
    return SoftmaxCrossEntropy(_targets(model, targets).targets)(model.logits(x))[0]


def adv_training_loss(model, x_clean, x_adv, targets, alpha):
    if np.shape(x_clean) != np.shape(x_adv):
        raise ShapeError(f"clean {np.shape(x_clean)} and adversarial {np.shape(x_adv)} batches differ")
    t = _targets(model, targets)
    return alpha * batch_loss(model, x_clean, t) + (1 - alpha) * batch_loss(model, x_adv, t)


def e2sad_step1(model, x, targets, eps1, data_range=(0.0, 1.0)):
    """FGSM step of size eps1 on CE(targets, f(x)); targets may be smoothed."""
    x = np.asarray(x, dtype=DTYPE)
    loss = SoftmaxCrossEntropy(_targets(model, targets).targets)
    g = model.input_gradient(x, loss)
    return clip_to_range(x + eps1 * np.sign(g), data_range)


def e2sad_step2(model, x_adv1, eps2, data_range=(0.0, 1.0), reference="through"):
    """
    Sign step of size eps2 that increases CE(f(x_adv1), f(x)) at x = x_adv1.

    Only a data_range clip is applied; there is no eps-ball around the clean
    input. ``reference="through"`` differentiates both CE arguments at the
    evaluation point (equivalently the output entropy). ``"detached"`` holds
    f(x_adv1) fixed; its gradient at x = x_adv1 is softmax(z) - softmax(z) = 0,
    so that variant never moves.
    """
    x_adv1 = np.asarray(x_adv1, dtype=DTYPE)
    if reference == "through":
        loss = SelfDissimilarity()
    elif reference == "detached":
        loss = Dissimilarity(model.predict(x_adv1))
    else:
        raise ValueError(f"reference must be 'through' or 'detached', got {reference!r}")
    g = model.input_gradient(x_adv1, loss)
    return clip_to_range(x_adv1 + eps2 * np.sign(g), data_range)


def e2sad_objective(model, x_clean, x_adv1, x_adv2, targets, alpha, lam, need_grads=True):
    """
    Components of the e2SAD loss and (optionally) its parameter gradient.

    total = alpha * J(x) + (1 - alpha) * J(x_adv1) + lam * mean_i D_i with
    D_i = CE(f(x_adv1_i), f(x_adv2_i)); gradients reach theta through both
    arguments of D, the adversarial inputs are constants.
    """
    shapes = {np.shape(x_clean), np.shape(x_adv1), np.shape(x_adv2)}
    if len(shapes) != 1:
        raise ShapeError(f"batches are not aligned: {sorted(shapes)}")
    t = _targets(model, targets)
    m = len(t)
    ce = SoftmaxCrossEntropy(t.targets)
    z_c, cache_c = model.forward_cached(x_clean)
    z_a, cache_a = model.forward_cached(x_adv1)
    z_t, cache_t = model.forward_cached(x_adv2)
    j_clean, dz_c = ce(z_c)
    j_adv, dz_a = ce(z_a)
    per, dz_ref, dz_new = dissimilarity(z_a, z_t)
    d_mean = float(per.mean())
    parts = {
        "loss_clean": j_clean,
        "loss_adv": j_adv,
        "loss_dissim": d_mean,
        "loss_total": alpha * j_clean + (1 - alpha) * j_adv + lam * d_mean,
    }
    if not need_grads:
        return parts, None
    g_c = model.backward(cache_c, alpha * dz_c)[0]
    g_a = model.backward(cache_a, (1 - alpha) * dz_a + (lam / m) * dz_ref)[0]
    g_t = model.backward(cache_t, (lam / m) * dz_new)[0]
    grads = {k: g_c[k] + g_a[k] + g_t[k] for k in g_c}
    return parts, grads


def e2sad_total_loss(model, x_clean, x_adv1, x_adv2, targets, alpha, lam):
    return e2sad_objective(model, x_clean, x_adv1, x_adv2, targets, alpha, lam, need_grads=False)[0]["loss_total"]


def minmax_reg_objective(model, x_adv, targets, epsilon, batch_n=None):
    """
    J(x_adv) + (epsilon * N / 2) * ||dJ/dx_adv||_2, J the batch-mean CE and the
    norm taken over the whole flattened batch gradient. Not a training loss.
    """
    x_adv = np.asarray(x_adv, dtype=DTYPE)
    n = len(x_adv) if batch_n is None else batch_n
    loss = SoftmaxCrossEntropy(_targets(model, targets).targets)
    z, caches = model.forward_cached(x_adv)
    j, dz = loss(z)
    if epsilon == 0:
        return j
    dx = model.backward(caches, dz, need_params=False, need_input=True)[1]
    return j + 0.5 * epsilon * n * float(np.linalg.norm(dx.ravel()))


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@dataclass
class TrainReport:
    records: List[Dict[str, float]]
    model: Model
    config: TrainConfig
    input_grad_evals: int = 0
    wall_time: float = 0.0

    CSV_FIELDS = ("iteration", "loss_total", "loss_clean", "loss_adv", "loss_dissim")

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(self.CSV_FIELDS)
            for r in self.records:
                writer.writerow([r["iteration"]] + [repr(float(r[k])) for k in self.CSV_FIELDS[1:]])


def _weighted_sum(terms):
    """Sum of ``w * g`` over (w, g) pairs with w != 0, in the given order."""
    total = None
    for w, g in terms:
        if w == 0 or g is None:
            continue
        if total is None:
            total = {k: w * v for k, v in g.items()}
        else:
            for k, v in g.items():
                total[k] += w * v
    return total


def train_step(net, cfg, x, labels, step2_reference="through"):
    """
    Loss components and parameter gradient for one minibatch.

    The clean forward/backward pass is shared between the clean loss term and
    the first attack gradient (both use the same targets), so FGSM training and
    e2SAD spend one and two input-gradient evaluations per batch, and IFGSM
    training spends ``adv_steps``.
    """
    alpha, lam = cfg.loss_weights
    lo_hi = cfg.data_range
    ce = SoftmaxCrossEntropy(labels.targets)
    z_c, cache_c = net.forward_cached(x)
    j_clean, dz_c = ce(z_c)
    parts = {"loss_clean": j_clean, "loss_adv": 0.0, "loss_dissim": 0.0}

    if cfg.mode == "natural":
        g_c = net.backward(cache_c, dz_c, need_params=True)[0]
        parts["loss_total"] = j_clean
        return parts, g_c

    g_c, dx = net.backward(cache_c, dz_c, need_params=True, need_input=True)
    if cfg.mode == "adv_ifgsm":
        eps, k = cfg.adv_eps, int(cfg.adv_steps)
        a = eps / k
        x_adv = clamp_ball(x, x + a * np.sign(dx), eps, lo_hi)
        for _ in range(k - 1):
            dx = net.input_gradient(x_adv, ce)
            x_adv = clamp_ball(x, x_adv + a * np.sign(dx), eps, lo_hi)
    else:
        eps = cfg.adv_eps if cfg.mode == "adv_fgsm" else cfg.eps1
        x_adv = clip_to_range(x + eps * np.sign(dx), lo_hi)

    z_a, cache_a = net.forward_cached(x_adv)
    j_adv, dz_a = ce(z_a)
    parts["loss_adv"] = j_adv
    dz_adv = (1 - alpha) * dz_a
    extra = None

    if cfg.mode == "e2sad":
        m = len(x)
        if step2_reference == "through":
            _, dz_s = SelfDissimilarity()(z_a)
        else:
            _, dz_s = Dissimilarity(softmax(z_a))(z_a)
        dx2 = net.backward(cache_a, dz_s, need_params=False, need_input=True)[1]
        x_tilde = clip_to_range(x_adv + cfg.eps2 * np.sign(dx2), lo_hi)
        shared = np.array_equal(x_tilde, x_adv)
        z_t, cache_t = (z_a, cache_a) if shared else net.forward_cached(x_tilde)
        per, dz_ref, dz_new = dissimilarity(z_a, z_t)
        parts["loss_dissim"] = float(per.mean())
        if lam != 0:
            dz_adv = dz_adv + (lam / m) * dz_ref
            if shared:
                dz_adv = dz_adv + (lam / m) * dz_new
            else:
                extra = net.backward(cache_t, (lam / m) * dz_new, need_params=True)[0]

    g_a = None
    if (1 - alpha) != 0 or lam != 0:
        g_a = net.backward(cache_a, dz_adv, need_params=True)[0]
    grads = _weighted_sum([(alpha, g_c), (1.0, g_a), (1.0, extra)])
    if grads is None:
        grads = {k: np.zeros_like(v) for k, v in g_c.items()}
    parts["loss_total"] = alpha * j_clean + (1 - alpha) * j_adv + lam * parts["loss_dissim"]
    return parts, grads


def train(dataset, config: TrainConfig, model_config=None, init_model=None, log_every=100,
          count_gradients=False, step2_reference="through", progress=None):
    """
    Run ``config.iterations`` minibatch updates and return a ``TrainReport``.

    Deterministic in ``config.seed``: it seeds both the weight initialisation
    (unless ``init_model`` is given) and the batch order.
    """
    config.validate()
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if tuple(dataset.data_range) != tuple(config.data_range):
        raise ConfigError("data_range", f"dataset range {dataset.data_range} differs from config")
    if init_model is None:
        init_model = Model.init(model_config or mnist_cnn(), config.seed)
    model = init_model.copy()
    num_classes = model.config.num_classes
    net = CountingModel(model) if count_gradients else model
    batches = BatchIterator(dataset, config.batch_size, config.seed).stream()
    state = None
    alpha, lam = config.loss_weights
    records = []
    start = time.perf_counter()
    for it in range(config.iterations):
        xb, yb = next(batches)
        labels = smooth_labels(yb, config.smoothing_delta, num_classes)
        parts, grads = train_step(net, config, xb, labels, step2_reference)
        if not all(math.isfinite(v) for v in parts.values()):
            raise NumericError(f"non-finite loss at iteration {it}: {parts}")
        _, state = optimizer_step(model, grads, state, config.optimizer, inplace=True)
        if it % log_every == 0 or it == config.iterations - 1:
            rec = {"iteration": it, **parts}
            records.append(rec)
            log.info("iter %d total=%.5f clean=%.5f adv=%.5f dissim=%.5f", it,
                     parts["loss_total"], parts["loss_clean"], parts["loss_adv"], parts["loss_dissim"])
            if progress is not None:
                progress(rec)
    for name, p in model.params.items():
        if not np.all(np.isfinite(p)):
            raise NumericError(f"parameter {name} became non-finite")
    return TrainReport(records, model, config,
                       input_grad_evals=net.input_grad_calls if count_gradients else 0,
                       wall_time=time.perf_counter() - start)
