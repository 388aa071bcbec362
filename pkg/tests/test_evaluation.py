import json

import numpy as np
import pytest

from advforge.attacks import AttackSpec
from advforge.data import Dataset
from advforge.evaluation import (EvalMatrix, accuracy, accuracy_under_attack, blackbox_transfer,
                                 loss_surface, summed_hard_loss, surface_directions, transfer_matrix,
                                 whitebox_matrix)
from advforge.nn import Model, ModelConfig, Dense, ShapeError, Softmax


@pytest.fixture
def small_set(rng):
    return Dataset(rng.random((12, 1, 28, 28)), rng.integers(0, 10, 12))


@pytest.fixture
def second_cnn(tiny_cnn):
    return Model.init(tiny_cnn.config, 99)


def test_accuracy_counts_argmax_matches(small_set, tiny_cnn):
    pred = tiny_cnn.logits(small_set.images).argmax(axis=1)
    assert accuracy(tiny_cnn, small_set) == np.mean(pred == small_set.labels)


def test_one_by_one_matrix_equals_direct_call(small_set, tiny_cnn):
    spec = AttackSpec.fgsm(0.3)
    m = whitebox_matrix({"m": tiny_cnn}, [spec], small_set, include_clean=False)
    assert m.cells.shape == (1, 1)
    assert m.cell(spec.name, "m") == accuracy_under_attack(tiny_cnn, small_set, spec)


def test_matrix_layout_and_csv_reproducible(small_set, tiny_cnn, second_cnn, tmp_path):
    specs = [AttackSpec.fgsm(0.3), AttackSpec.ifgsm(0.3, 3)]
    models = {"a": tiny_cnn, "b": second_cnn}
    m1 = whitebox_matrix(models, specs, small_set)
    m2 = whitebox_matrix(models, specs, small_set)
    assert m1.rows == ["clean", "fgsm_eps0.3", "ifgsm_eps0.3_k3"]
    assert m1.cols == ["a", "b"]
    m1.to_csv(tmp_path / "1.csv")
    m2.to_csv(tmp_path / "2.csv")
    assert (tmp_path / "1.csv").read_bytes() == (tmp_path / "2.csv").read_bytes()
    assert (tmp_path / "1.csv").read_text().splitlines()[0] == "attack,a,b"
    assert m1.cell("clean", "b") == accuracy(second_cnn, small_set)


def test_transfer_diagonal_equals_whitebox_cell(small_set, tiny_cnn):
    spec = AttackSpec.ifgsm(0.3, 4)
    wb = whitebox_matrix({"m": tiny_cnn}, [spec], small_set)
    assert blackbox_transfer(tiny_cnn, tiny_cnn, spec, small_set) == wb.cell(spec.name, "m")


def test_transfer_zero_eps_is_clean_accuracy(small_set, tiny_cnn, second_cnn):
    assert blackbox_transfer(tiny_cnn, second_cnn, AttackSpec.fgsm(0.0), small_set) == accuracy(second_cnn, small_set)


def test_transfer_matrix_rows_are_substitutes(small_set, tiny_cnn, second_cnn):
    spec = AttackSpec.fgsm(0.2)
    tm = transfer_matrix({"s": tiny_cnn}, {"s": tiny_cnn, "t": second_cnn}, spec, small_set)
    assert tm.cell("s", "t") == blackbox_transfer(tiny_cnn, second_cnn, spec, small_set)
    assert tm.cell("s", "s") == accuracy_under_attack(tiny_cnn, small_set, spec)


def test_incompatible_shapes_are_rejected(small_set, tiny_cnn):
    flat = Model.init(ModelConfig([Dense(10), Softmax()], (784,), 10), 0)
    with pytest.raises(ShapeError):
        whitebox_matrix({"a": tiny_cnn, "b": flat}, [], small_set)
    with pytest.raises(ShapeError):
        blackbox_transfer(flat, tiny_cnn, AttackSpec.fgsm(0.1), small_set)


def test_eval_matrix_validates_cells():
    with pytest.raises(ValueError):
        EvalMatrix(["r"], ["c"], [[1.5]])
    with pytest.raises(ShapeError):
        EvalMatrix(["r"], ["c", "d"], [[0.5]])


# -- surfaces --------------------------------------------------------------


def test_surface_directions_orthogonal_and_equal_norm(rng):
    x = rng.random((4, 1, 28, 28))
    x_adv = np.clip(x + 0.3 * rng.choice([-1.0, 0.0, 1.0], size=x.shape), 0, 1)
    g1, g2 = surface_directions(x, x_adv, seed=3)
    for a, b in zip(g1.reshape(4, -1), g2.reshape(4, -1)):
        assert abs(a @ b) <= 1e-9
        assert np.linalg.norm(b) == pytest.approx(np.linalg.norm(a), rel=1e-12)
    assert set(np.unique(g1)) <= {-1.0, 0.0, 1.0}


def test_surface_grid_corner_and_shape(small_set, tiny_cnn, tmp_path):
    x, y = small_set.images[:5], small_set.labels[:5]
    grid = loss_surface(tiny_cnn, x, y, AttackSpec.ifgsm(0.3, 3), seed=1)
    assert grid.loss.shape == (17, 17)
    assert grid.t1_values[0] == 0 and grid.t1_values[-1] == pytest.approx(0.4)
    assert abs(grid.loss[0, 0] - summed_hard_loss(tiny_cnn, x, y)) <= 1e-9
    assert np.all(np.isfinite(grid.loss)) and np.all(grid.loss >= 0)
    grid.to_csv(tmp_path / "a.csv")
    loss_surface(tiny_cnn, x, y, AttackSpec.ifgsm(0.3, 3), seed=1).to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "t1,t2,loss" and len(lines) == 1 + 17 * 17
    grid.write_meta(tmp_path / "m.json")
    meta = json.loads((tmp_path / "m.json").read_text())
    assert meta["orthogonalization_seed"] == 1 and meta["grid_steps"] == 17


def test_surface_t_max_and_resolution(small_set, tiny_cnn):
    grid = loss_surface(tiny_cnn, small_set.images[:2], small_set.labels[:2], AttackSpec.fgsm(0.1),
                        t_max=0.2, grid_steps=5)
    assert grid.t1_values.tolist() == pytest.approx([0, 0.05, 0.1, 0.15, 0.2])


def test_surface_rejects_empty_batch(tiny_cnn):
    with pytest.raises(ValueError):
        loss_surface(tiny_cnn, np.zeros((0, 1, 28, 28)), [], AttackSpec.fgsm(0.1))


def test_ties_are_broken_toward_first_class():
    ds = Dataset(np.full((2, 1, 28, 28), 0.5), [0, 1])
    flat = Model(ModelConfig([Dense(4), Softmax()], (1, 28, 28), 4),
                 {"0.dense.weight": np.zeros((784, 4)), "0.dense.bias": np.zeros(4)})
    assert accuracy(flat, ds) == 0.5
