import math
import zlib

import numpy as np
import pytest

from odtq import gradcore as gc
from odtq.exceptions import (ContractError, DegenerateInputError, ParseError, ShapeError,
                             TrainingDivergenceError)
from odtq.gradcore import Tensor

TRIALS = 20


def _away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return x + np.sign(x) * 0.1


# op name -> (builder(tensors) -> scalar, input shapes generator)
def _ops():
    w3 = np.array([0.3, -1.2, 0.7])
    return {
        "add": (lambda a, b: gc.sum_((a + b) * w3), [(4, 3), (3,)]),
        "sub": (lambda a, b: gc.sum_((a - b) * w3), [(4, 3), (4, 1)]),
        "neg": (lambda a: gc.sum_(-a * w3), [(2, 3)]),
        "mul": (lambda a, b: gc.sum_(a * b * w3), [(4, 3), (4, 3)]),
        "div": (lambda a, b: gc.sum_(a / (gc.exp(b) + 1.0)), [(3,), (3,)]),
        "relu": (lambda a: gc.sum_(gc.relu(a) * w3), [(5, 3)]),
        "tanh": (lambda a: gc.sum_(gc.tanh(a) * w3), [(5, 3)]),
        "sigmoid": (lambda a: gc.sum_(gc.sigmoid(a) * w3), [(5, 3)]),
        "softplus": (lambda a: gc.sum_(gc.softplus(a) * w3), [(5, 3)]),
        "exp": (lambda a: gc.sum_(gc.exp(a) * w3), [(2, 3)]),
        "log": (lambda a: gc.sum_(gc.log(gc.exp(a) + 0.5) * w3), [(2, 3)]),
        "abs": (lambda a: gc.sum_(gc.abs_(a) * w3), [(4, 3)]),
        "sum_axis": (lambda a: gc.sum_(gc.sum_(a, axis=0) * w3), [(4, 3)]),
        "mean": (lambda a: gc.sum_(gc.mean(a * a, axis=1)), [(4, 3)]),
        "matmul": (lambda a, b: gc.sum_(gc.tanh(gc.matmul(a, b))), [(4, 5), (5, 3)]),
        "batched_linear": (lambda x, w: gc.sum_(gc.tanh(gc.batched_linear(x, w))),
                           [(4, 3), (2, 3, 5)]),
        "reshape": (lambda a: gc.sum_(gc.reshape(a, (3, 4)) * np.arange(4.0)), [(4, 3)]),
        "concat": (lambda a, b: gc.sum_(gc.tanh(gc.concat([a, b], axis=1))), [(2, 3), (2, 2)]),
        "stack": (lambda a, b: gc.sum_(gc.stack([a, b], axis=1) * w3), [(2, 3), (2, 3)]),
        "index": (lambda a: gc.sum_(gc.tanh(a[:, 1:3])), [(4, 3)]),
        "gather_rows": (lambda t: gc.sum_(gc.tanh(gc.gather_rows(t, [0, 2, 2, 1]))), [(3, 4)]),
        "pick": (lambda a: gc.sum_(gc.pick(a, np.array([2, 0, 1]))), [(3, 3)]),
        "softmax_masked": (lambda a: gc.sum_(
            gc.softmax_masked(a, np.array([[1, 1, 0, 1]] * 3, bool)) * np.arange(4.0)),
            [(3, 4)]),
        "log_softmax_masked": (lambda a: gc.sum_(gc.pick(
            gc.log_softmax_masked(a, np.array([[1, 0, 1, 1]] * 2, bool)), np.array([0, 3]))),
            [(2, 4)]),
    }


@pytest.mark.parametrize("name", sorted(_ops()))
def test_op_gradients_match_finite_differences(name):
    build, shapes = _ops()[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = max(gc.check_grad(build, [_away_from_zero(rng, s) for s in shapes])
                for _ in range(TRIALS))
    assert worst < 1e-4


def test_softmax_masked_example():
    p = gc.softmax_masked(Tensor([2.0, 1.0, 0.5]), np.array([True, True, False])).data
    e2, e1 = math.exp(2), math.exp(1)
    assert p[0] == pytest.approx(e2 / (e2 + e1), abs=1e-15)
    assert p[1] == pytest.approx(e1 / (e2 + e1), abs=1e-15)
    assert p[2] == 0.0


def test_softmax_masked_sums_to_one(rng):
    for _ in range(50):
        x = rng.normal(scale=30, size=(5, 7))
        m = rng.random((5, 7)) < 0.6
        m[:, 0] = True
        p = gc.softmax_masked(Tensor(x), m).data
        assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-12)
        assert np.all(p[~m] == 0)


def test_all_masked_rejected():
    with pytest.raises(DegenerateInputError):
        gc.softmax_masked(Tensor([1.0, 2.0]), np.array([False, False]))


def test_softplus_and_identity_matmul(rng):
    assert gc.softplus(Tensor(0.0)).item() == pytest.approx(math.log(2), abs=1e-15)
    a = rng.normal(size=(3, 4))
    assert np.array_equal(gc.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_backward_square():
    x = Tensor([3.0], requires_grad=True)
    gc.sum_(x * x).backward()
    assert x.grad.tolist() == [6.0]


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        gc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with gc.no_grad():
        y = x * 2.0
    assert y.is_leaf and not y.requires_grad


def test_optimizer_zero_grad_keeps_params():
    s = gc.ParamStore()
    p = s.add("p", np.array([1.0, -2.0]))
    p.grad = np.zeros(2)
    gc.optimizer_step(s, 0.1)
    assert p.data.tolist() == [1.0, -2.0]


def test_optimizer_moves_against_gradient():
    s = gc.ParamStore()
    p = s.add("p", np.array(0.0))
    values = []
    for _ in range(30):
        p.grad = np.array(2.0)
        gc.optimizer_step(s, 0.01)
        values.append(float(p.data))
    assert all(b < a for a, b in zip([0.0] + values, values))


def test_optimizer_quadratic_bowl(rng):
    s = gc.ParamStore()
    target = rng.normal(size=5)
    p = s.add("p", rng.normal(size=5) * 3)

    def loss():
        d = p - target
        return gc.sum_(d * d)

    initial = loss().item()
    for _ in range(200):
        loss().backward()
        gc.optimizer_step(s, 0.1)
    assert loss().item() < 1e-3 * initial


def test_optimizer_bit_identical_runs():
    def run():
        r = np.random.default_rng(3)
        s = gc.ParamStore()
        w = s.add("w", r.normal(size=(4, 2)))
        x = r.normal(size=(8, 4))
        for _ in range(25):
            gc.sum_(gc.tanh(gc.matmul(Tensor(x), w))).backward()
            gc.optimizer_step(s, 0.05)
        return w.data.copy()

    assert np.array_equal(run(), run())


def test_optimizer_rejects_non_finite():
    s = gc.ParamStore()
    p = s.add("layer.w", np.ones(2))
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(TrainingDivergenceError, match="layer.w"):
        gc.optimizer_step(s, 0.1)


def test_checkpoint_round_trip(tmp_path, rng):
    arrays = {"a": rng.normal(size=(2, 3)), "scalar": np.array(4.5), "v": rng.normal(size=7)}
    gc.save_checkpoint(arrays, tmp_path / "c.ckpt")
    back = gc.load_checkpoint(tmp_path / "c.ckpt")
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape and np.array_equal(back[k], arrays[k])


def test_checkpoint_corruption(tmp_path):
    gc.save_checkpoint({"a": np.ones(4)}, tmp_path / "c.ckpt")
    raw = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ParseError):
        gc.load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-5])
    with pytest.raises(ParseError):
        gc.load_checkpoint(tmp_path / "short.ckpt")


def test_store_load_shape_check():
    s = gc.ParamStore()
    s.add("w", np.zeros((2, 2)))
    with pytest.raises(ContractError):
        s.load({"w": np.zeros(3)})
