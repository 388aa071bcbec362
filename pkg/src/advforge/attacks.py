"""
l-inf gradient-sign attacks: FGSM, iterative FGSM and PGD.

All attacks are white-box and use the hard-label cross entropy of the model
under attack. Inputs are never modified in place.
"""

from dataclasses import dataclass, asdict
from typing import Optional, Tuple

import numpy as np

from .nn import DTYPE, Labels, ShapeError, SoftmaxCrossEntropy

FAMILIES = ("fgsm", "ifgsm", "pgd")


@dataclass(frozen=True)
class AttackSpec:
    family: str
    epsilon: float
    steps: int = 1
    random_start: bool = False
    seed: int = 0
    data_range: Tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "family", str(self.family).lower())
        object.__setattr__(self, "data_range", tuple(float(v) for v in self.data_range))
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}; expected one of {FAMILIES}")
        # epsilon == 0 is allowed: it is the "no attack" row of a matrix
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        if self.family == "fgsm" and self.steps != 1:
            raise ValueError("fgsm takes exactly one step")
        if self.family == "pgd" and not self.random_start:
            raise ValueError("pgd requires random_start=True")
        if self.family != "pgd" and self.random_start:
            raise ValueError("random_start is only defined for pgd")
        lo, hi = self.data_range
        if not lo < hi:
            raise ValueError(f"data_range must satisfy lo < hi, got {self.data_range}")

    @classmethod
    def fgsm(cls, epsilon, data_range=(0.0, 1.0)):
        return cls("fgsm", epsilon, 1, False, 0, data_range)

    @classmethod
    def ifgsm(cls, epsilon, steps, data_range=(0.0, 1.0)):
        return cls("ifgsm", epsilon, steps, False, 0, data_range)

    @classmethod
    def pgd(cls, epsilon, steps, seed=0, data_range=(0.0, 1.0)):
        return cls("pgd", epsilon, steps, True, seed, data_range)

    @property
    def step_size(self):
        return self.epsilon / self.steps

    @property
    def name(self):
        if self.family == "fgsm":
            return f"fgsm_eps{self.epsilon:g}"
        tag = f"{self.family}_eps{self.epsilon:g}_k{self.steps}"
        return tag + (f"_seed{self.seed}" if self.family == "pgd" else "")

    def to_dict(self):
        d = asdict(self)
        d["data_range"] = list(self.data_range)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _hard_targets(model, targets):
    if isinstance(targets, Labels):
        return targets.hard()
    return Labels.one_hot(targets, model.config.num_classes)


def clip_to_range(x, data_range):
    return np.clip(x, data_range[0], data_range[1])


def clamp_ball(x_orig, x, epsilon, data_range=(0.0, 1.0)):
    """Clip ``x`` elementwise into [max(lo, x_orig - eps), min(hi, x_orig + eps)]."""
    x_orig = np.asarray(x_orig, dtype=DTYPE)
    x = np.asarray(x, dtype=DTYPE)
    if x_orig.shape != x.shape:
        raise ShapeError(f"clamp_ball shape mismatch: {x_orig.shape} vs {x.shape}")
    lo = np.maximum(data_range[0], x_orig - epsilon)
    hi = np.minimum(data_range[1], x_orig + epsilon)
    return np.minimum(np.maximum(x, lo), hi)


def sign_step(model, x, loss_fn, step, data_range):
    """x + step * sign(grad_x loss), clipped to ``data_range``; sign(0) is 0."""
    g = model.input_gradient(x, loss_fn)
    return clip_to_range(x + step * np.sign(g), data_range)


def fgsm(model, x, targets, epsilon, data_range=(0.0, 1.0)):
    x = np.asarray(x, dtype=DTYPE)
    loss = SoftmaxCrossEntropy(_hard_targets(model, targets).targets)
    return sign_step(model, x, loss, epsilon, data_range)


def iterate_sign_steps(model, x_orig, x_start, loss_fn, epsilon, steps, data_range):
    """``steps`` sign steps of size eps/steps, each clamped to the eps-ball around ``x_orig``."""
    a = epsilon / steps
    x_adv = x_start
    for _ in range(steps):
        g = model.input_gradient(x_adv, loss_fn)
        x_adv = clamp_ball(x_orig, x_adv + a * np.sign(g), epsilon, data_range)
    return x_adv


def ifgsm(model, x, targets, epsilon, k, data_range=(0.0, 1.0)):
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.asarray(x, dtype=DTYPE)
    loss = SoftmaxCrossEntropy(_hard_targets(model, targets).targets)
    return iterate_sign_steps(model, x, x, loss, epsilon, k, data_range)


def random_start(x, epsilon, seed, data_range=(0.0, 1.0)):
    rng = np.random.default_rng(seed)
    noise = rng.uniform(-epsilon, epsilon, size=x.shape)
    return clip_to_range(x + noise, data_range)


def pgd(model, x, targets, epsilon, k, seed, data_range=(0.0, 1.0)):
    """Uniform random start in the eps-box, then k clamped sign steps."""
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.asarray(x, dtype=DTYPE)
    loss = SoftmaxCrossEntropy(_hard_targets(model, targets).targets)
    x0 = random_start(x, epsilon, seed, data_range)
    return iterate_sign_steps(model, x, x0, loss, epsilon, k, data_range)


def run_attack(model, x, targets, spec: AttackSpec):
    if spec.family == "fgsm":
        return fgsm(model, x, targets, spec.epsilon, spec.data_range)
    if spec.family == "ifgsm":
        return ifgsm(model, x, targets, spec.epsilon, spec.steps, spec.data_range)
    return pgd(model, x, targets, spec.epsilon, spec.steps, spec.seed, spec.data_range)


def attack_batches(model, x, targets, spec: AttackSpec, batch_size=256):
    """
    ``run_attack`` over a large set in chunks. PGD chunks draw their random
    start from (seed, chunk index) so results do not depend on memory limits
    other than ``batch_size``.
    """
    x = np.asarray(x, dtype=DTYPE)
    hard = _hard_targets(model, targets)
    out = np.empty_like(x)
    for b, start in enumerate(range(0, len(x), batch_size)):
        sl = slice(start, start + batch_size)
        chunk_spec = spec
        if spec.family == "pgd":
            chunk_spec = AttackSpec("pgd", spec.epsilon, spec.steps, True,
                                    int(np.random.SeedSequence([spec.seed, b]).generate_state(1)[0]),
                                    spec.data_range)
        out[sl] = run_attack(model, x[sl], hard[sl], chunk_spec)
    return out
