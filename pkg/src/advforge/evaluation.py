"""
Accuracy tables (white-box and substitute-transfer) and 2-D loss-surface
grids, with CSV/JSON writers.
"""

import csv
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .attacks import AttackSpec, attack_batches, clip_to_range
from .nn import DTYPE, Labels, ShapeError, SoftmaxCrossEntropy, log_softmax

CLEAN = "clean"


def predict_labels(model, images, batch_size=500):
    out = np.empty(len(images), dtype=np.int64)
    for start in range(0, len(images), batch_size):
        z = model.logits(images[start:start + batch_size])
        out[start:start + batch_size] = z.argmax(axis=1)  # first index wins ties
    return out


def accuracy(model, dataset, batch_size=500, images=None):
    """Fraction of examples whose argmax prediction equals the label."""
    x = dataset.images if images is None else images
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(predict_labels(model, x, batch_size) == dataset.labels))


def adversarial_images(model, dataset, spec: Optional[AttackSpec], batch_size=256):
    if spec is None or spec.epsilon == 0:
        return dataset.images
    return attack_batches(model, dataset.images, dataset.labels, spec, batch_size)


def accuracy_under_attack(model, dataset, spec: Optional[AttackSpec], batch_size=256):
    return accuracy(model, dataset, images=adversarial_images(model, dataset, spec, batch_size))


@dataclass
class EvalMatrix:
    rows: List[str]
    cols: List[str]
    cells: np.ndarray
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=DTYPE)
        if self.cells.shape != (len(self.rows), len(self.cols)):
            raise ShapeError(f"cells {self.cells.shape} vs {len(self.rows)}x{len(self.cols)}")
        if np.any((self.cells < 0) | (self.cells > 1)):
            raise ValueError("accuracy cells must lie in [0, 1]")

    def cell(self, row, col):
        return float(self.cells[self.rows.index(row), self.cols.index(col)])

    def to_csv(self, path, corner="attack"):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow([corner] + list(self.cols))
            for name, row in zip(self.rows, self.cells):
                writer.writerow([name] + [repr(float(v)) for v in row])

    def to_text(self):
        width = max(len(r) for r in self.rows + ["attack"])
        lines = [" " * width + "".join(f"{c:>14s}" for c in self.cols)]
        for name, row in zip(self.rows, self.cells):
            lines.append(f"{name:<{width}s}" + "".join(f"{v:14.4f}" for v in row))
        return "\n".join(lines)


def _check_shapes(models):
    shapes = {tuple(m.config.input_shape) for m in models}
    if len(shapes) > 1:
        raise ShapeError(f"models disagree on input shape: {sorted(shapes)}")


def whitebox_matrix(models: Dict[str, object], attack_specs: Sequence[AttackSpec], dataset,
                    batch_size=256, include_clean=True):
    """
    Rows are attacks (a leading ``clean`` row unless disabled), columns are
    models; each adversarial set is crafted against the column's own model.
    """
    _check_shapes(models.values())
    rows, cells = [], []
    specs = ([None] if include_clean else []) + list(attack_specs)
    for spec in specs:
        rows.append(CLEAN if spec is None else spec.name)
        cells.append([accuracy_under_attack(m, dataset, spec, batch_size) for m in models.values()])
    meta = {"n_examples": len(dataset), "attacks": [None if s is None else s.to_dict() for s in specs]}
    return EvalMatrix(rows, list(models), np.array(cells), meta)


def blackbox_transfer(substitute, target, spec: AttackSpec, dataset, batch_size=256):
    """Accuracy of ``target`` on adversarial examples crafted against ``substitute``."""
    _check_shapes([substitute, target])
    adv = adversarial_images(substitute, dataset, spec, batch_size)
    return accuracy(target, dataset, images=adv)


def transfer_matrix(substitutes: Dict[str, object], targets: Dict[str, object], spec: AttackSpec,
                    dataset, batch_size=256):
    """Rows are substitutes, columns targets; one adversarial set per substitute."""
    _check_shapes(list(substitutes.values()) + list(targets.values()))
    cells = []
    for sub in substitutes.values():
        adv = adversarial_images(sub, dataset, spec, batch_size)
        cells.append([accuracy(t, dataset, images=adv) for t in targets.values()])
    return EvalMatrix(list(substitutes), list(targets), np.array(cells),
                      {"n_examples": len(dataset), "attack": spec.to_dict()})


# --------------------------------------------------------------------------
# loss surfaces
# --------------------------------------------------------------------------


@dataclass
class SurfaceGrid:
    t1_values: np.ndarray
    t2_values: np.ndarray
    loss: np.ndarray
    direction_meta: Dict

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["t1", "t2", "loss"])
            for i, t1 in enumerate(self.t1_values):
                for j, t2 in enumerate(self.t2_values):
                    writer.writerow([repr(float(t1)), repr(float(t2)), repr(float(self.loss[i, j]))])

    def write_meta(self, path):
        with open(path, "w") as f:
            json.dump(self.direction_meta, f, indent=2, sort_keys=True)
            f.write("\n")


def surface_directions(x, x_adv, seed):
    """
    Per-example directions: g1 = sign(x_adv - x); g2 a seeded +-1 vector made
    orthogonal to g1 (Gram-Schmidt) and rescaled to ||g1||_2.
    """
    n = len(x)
    g1 = np.sign(x_adv - x).reshape(n, -1)
    r = np.random.default_rng(seed).choice([-1.0, 1.0], size=g1.shape)
    g1_sq = np.einsum("ij,ij->i", g1, g1)
    coef = np.divide(np.einsum("ij,ij->i", r, g1), g1_sq, out=np.zeros(n), where=g1_sq > 0)
    g2 = r - coef[:, None] * g1
    g2_norm = np.linalg.norm(g2, axis=1)
    scale = np.divide(np.sqrt(g1_sq), g2_norm, out=np.zeros(n), where=g2_norm > 0)
    g2 = g2 * scale[:, None]
    return g1.reshape(x.shape), g2.reshape(x.shape)


def summed_hard_loss(model, x, labels):
    hard = Labels.one_hot(labels, model.config.num_classes).targets
    return float(-(hard * log_softmax(model.logits(x))).sum())


def loss_surface(model, x, labels, direction_attack: AttackSpec, t_max=0.4, grid_steps=17, seed=0):
    """
    Summed hard-label CE over the batch at x + t1*g1 + t2*g2 (clipped to the
    data range) for t1, t2 on a ``grid_steps`` x ``grid_steps`` grid in [0, t_max].
    """
    x = np.asarray(x, dtype=DTYPE)
    if len(x) == 0:
        raise ValueError("batch is empty")
    labels = np.asarray(getattr(labels, "indices", labels), dtype=np.int64)
    x_adv = attack_batches(model, x, labels, direction_attack, batch_size=len(x))
    g1, g2 = surface_directions(x, x_adv, seed)
    t = np.linspace(0.0, t_max, grid_steps)
    loss = np.empty((grid_steps, grid_steps))
    for i, t1 in enumerate(t):
        for j, t2 in enumerate(t):
            xp = clip_to_range(x + t1 * g1 + t2 * g2, direction_attack.data_range)
            loss[i, j] = summed_hard_loss(model, xp, labels)
    meta = {
        "direction_attack": direction_attack.to_dict(),
        "g2_scheme": "rademacher, gram-schmidt against g1, rescaled to ||g1||_2",
        "orthogonalization_seed": int(seed),
        "t_max": float(t_max),
        "grid_steps": int(grid_steps),
        "batch_size": int(len(x)),
        "clipped_to": list(direction_attack.data_range),
    }
    return SurfaceGrid(t, t.copy(), loss, meta)
