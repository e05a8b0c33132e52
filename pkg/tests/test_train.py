import math

import numpy as np
import pytest

from mtda import autodiff as ad
from mtda.autodiff import ContractError, Tensor
from mtda.data import DataConfig, dataset_from_config
from mtda.model import DualBranchModel, ModelConfig
from mtda.nn import Module, param
from mtda.train import (
    AdamState,
    DivergenceError,
    TrainConfig,
    adam_step,
    bce_loss,
    consistency_loss,
    ema_update,
    evaluate,
    train_loop,
)

from .conftest import leaf


class Scalars(Module):
    def __init__(self, *values):
        self.w = param(np.array(values, dtype=np.float64))


# ---------------------------------------------------------------- BCE


def test_bce_at_half_is_ln2():
    s = leaf(np.full((2, 5, 3), 0.5))
    y = np.random.default_rng(0).integers(0, 2, (2, 5, 3))
    assert float(bce_loss(s, y, np.ones(3)).data) == pytest.approx(math.log(2), abs=1e-12)


def test_bce_frozen_torch_value():
    # torch.nn.functional.binary_cross_entropy, mean reduction
    s = leaf(np.array([[0.2, 0.9], [0.6, 0.3]]))
    y = np.array([[0.0, 1.0], [0.5, 0.0]])
    assert float(bce_loss(s, y, np.ones(2)).data) == pytest.approx(0.3496842971827103, abs=1e-12)
    assert float(bce_loss(s, y, np.array([1.0, 0.0])).data) == pytest.approx(0.46835086456714126, abs=1e-12)


def test_bce_zero_mask_is_zero_with_zero_grads():
    s = leaf(np.random.default_rng(1).uniform(0.1, 0.9, (3, 4)))
    loss = bce_loss(s, np.ones((3, 4)), np.zeros(4))
    ad.backward(loss)
    assert float(loss.data) == 0.0
    assert np.all(s.grad == 0)


def test_bce_masked_columns_have_exact_zero_grad():
    rng = np.random.default_rng(2)
    s = leaf(rng.uniform(0.1, 0.9, (2, 6, 4)))
    mask = np.array([[1, 0, 1, 0], [0, 0, 1, 1]], dtype=float)
    ad.backward(bce_loss(s, rng.random((2, 6, 4)), mask))
    for b in range(2):
        for k in range(4):
            if mask[b, k] == 0:
                assert np.all(s.grad[b, :, k] == 0)
            else:
                assert np.all(s.grad[b, :, k] != 0)


def test_bce_contract():
    with pytest.raises(ContractError):
        bce_loss(leaf(np.full((2, 2), 0.5)), np.ones((2, 3)), np.ones(2))
    with pytest.raises(ContractError):
        bce_loss(leaf(np.full((2, 2), 0.5)), np.full((2, 2), 2.0), np.ones(2))


# ---------------------------------------------------------------- EMA


def test_ema_decay_one_and_zero():
    t, s = Scalars(1.0, 2.0), Scalars(5.0, -3.0)
    ema_update(t, s, 1.0)
    np.testing.assert_array_equal(t.w.data, [1.0, 2.0])
    ema_update(t, s, 0.0)
    np.testing.assert_array_equal(t.w.data, [5.0, -3.0])


def test_ema_three_step_closed_form():
    d = 0.999
    t = Scalars(0.7)
    students = [1.0, -2.0, 4.0]
    for v in students:
        ema_update(t, Scalars(v), d)
    s1, s2, s3 = students
    expected = d**3 * 0.7 + (1 - d) * (d**2 * s1 + d * s2 + s3)
    assert t.w.data[0] == pytest.approx(expected, abs=1e-15)


def test_ema_tree_mismatch():
    with pytest.raises(ContractError):
        ema_update(Scalars(1.0), Scalars(1.0, 2.0), 0.9)


def test_ema_covers_buffers():
    cfg = ModelConfig(f_in=8, model_dim=8, heads=2, n_transformer_blocks=2, n_cnn_blocks=1, cnn_channels=[2], cnn_pool=[2])
    t, s = DualBranchModel(cfg, 0), DualBranchModel(cfg, 0)
    s(np.random.default_rng(0).standard_normal((2, 4, 8)) + 1)
    ema_update(t, s, 0.0)
    for (_, a), (_, b) in zip(t.named_buffers(), s.named_buffers()):
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- consistency


def test_consistency_examples():
    s = leaf(np.full((2, 3), 0.4))
    assert float(consistency_loss(s, np.full((2, 3), 0.4)).data) == 0.0
    assert float(consistency_loss(s, np.full((2, 3), 0.3)).data) == pytest.approx(0.01, abs=1e-15)
    with pytest.raises(ContractError):
        consistency_loss(s, np.zeros((3, 2)))


def test_teacher_receives_no_gradient():
    rng = np.random.default_rng(3)
    student, teacher = leaf(rng.random((4, 2))), leaf(rng.random((4, 2)))
    loss = consistency_loss(student, teacher)
    tape = ad.Tape.from_loss(loss)
    assert all(n is not teacher for n in tape.nodes)
    ad.backward(loss)
    assert teacher.grad is None
    np.testing.assert_allclose(student.grad, 2 * (student.data - teacher.data) / 8)


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_keeps_params():
    p = leaf(np.array([1.0, -2.0]))
    adam_step([p], [np.zeros(2)], AdamState(), lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_lr_sign():
    g = np.array([3.0, -1e-3, 250.0, -7.0])
    p = leaf(np.zeros(4))
    adam_step([p], [g], AdamState(), lr=0.01)
    np.testing.assert_allclose(p.data, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_matches_torch_trace():
    # torch.optim.Adam(lr=0.1) on 1.5 * (x - 2)^2 from x0 = 0.5
    ref = [0.5999999997777777, 0.6997609379330897, 0.7990971298243226, 0.8978010639939907, 0.995641831131145]
    p, st = leaf(np.array(0.5)), AdamState()
    for want in ref:
        adam_step([p], [3.0 * (p.data - 2.0)], st, lr=0.1)
        assert abs(float(p.data) - want) < 1e-12


def test_adam_skips_none_grads():
    a, b = leaf(np.ones(2)), leaf(np.ones(2))
    adam_step([a, b], [None, np.ones(2)], AdamState(), lr=0.1)
    np.testing.assert_array_equal(a.data, 1.0)
    assert np.all(b.data < 1.0)


# ---------------------------------------------------------------- training loop


TINY_DATA = DataConfig(t=20, f_in=16, n_classes_hard=2, n_classes_soft=2, n_train_hard=8, n_train_soft=8,
                       n_train_unlabeled=8, n_valid=4, n_test=4)


def tiny_model(seed=0):
    cfg = ModelConfig(f_in=16, model_dim=16, heads=2, n_transformer_blocks=2, n_cnn_blocks=1, cnn_channels=[8],
                      cnn_pool=[2], n_classes_hard=2, n_classes_soft=2)
    return DualBranchModel(cfg, seed)


def test_lr_zero_leaves_params_bitwise():
    model = tiny_model()
    before = {k: v.copy() for k, v in model.state_dict().items() if "running" not in k}
    res = train_loop(model, dataset_from_config(TINY_DATA, 0), TrainConfig(epochs=2, batch_size=8, lr=0.0), 0)
    for k, v in before.items():
        assert model.state_dict()[k].tobytes() == v.tobytes(), k
    # the teacher averages identical values, so its parameters stay put too
    for (_, tp), (_, sp) in zip(res.teacher.named_parameters(), model.named_parameters()):
        np.testing.assert_allclose(tp.data, sp.data, rtol=1e-6, atol=1e-7)


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        model = tiny_model(5)
        res = train_loop(model, dataset_from_config(TINY_DATA, 5), TrainConfig(epochs=2, batch_size=8), 5)
        runs.append((res.rows, model.state_dict()))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        assert runs[0][1][k].tobytes() == runs[1][1][k].tobytes()


def test_rows_and_teacher_frozen():
    model = tiny_model()
    res = train_loop(model, dataset_from_config(TINY_DATA, 1), TrainConfig(epochs=3, batch_size=8), 1)
    assert [r[0] for r in res.rows] == [1, 2, 3]
    assert all(np.isfinite(r[1]) and r[2] >= 0 for r in res.rows)
    assert all(p.grad is None for p in res.teacher.parameters())
    assert res.report.loss_curve == [(r[0], r[1], r[2]) for r in res.rows]
    again = evaluate(model, dataset_from_config(TINY_DATA, 1).splits["valid"], TrainConfig(), 0.2)
    assert (again.mpauc, again.event_f1) == (res.rows[-1][3], res.rows[-1][4])


def test_nan_input_diverges_with_step():
    ds = dataset_from_config(TINY_DATA, 2)
    ds.splits["train"][0].features[:] = np.nan
    with pytest.raises(DivergenceError) as exc:
        train_loop(tiny_model(), ds, TrainConfig(epochs=1, batch_size=32), 2)
    assert exc.value.step == 1
