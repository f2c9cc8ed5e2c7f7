"""Tests for the reverse-mode tensor engine and DVTM checkpoints."""

import numpy as np
import pytest

from trailersmith import tensor as T
from trailersmith.errors import (
    ArgumentError,
    DimensionError,
    FormatError,
    LengthError,
    StorageError,
    ValidationError,
)
from trailersmith.tensor import ParamStore, Tensor, decode_checkpoint, encode_checkpoint

TOLERANCE = 1e-6


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_arithmetic_with_broadcasting(gradcheck, rng):
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4,))}
    errors = gradcheck(lambda t: T.sum_((t["a"] - t["b"]) * t["a"] + 2.0 * t["b"]), params)
    assert max(errors.values()) < TOLERANCE


def test_batched_matmul(gradcheck, rng):
    params = {"a": rng.normal(size=(2, 3, 4)), "w": rng.normal(size=(4, 5))}
    errors = gradcheck(lambda t: T.sum_(T.tanh(t["a"] @ t["w"])), params)
    assert max(errors.values()) < TOLERANCE


def test_softmax_and_layer_norm(gradcheck, rng):
    params = {"x": rng.normal(size=(2, 5)), "w": rng.normal(size=(2, 5))}
    errors = gradcheck(lambda t: T.sum_(T.softmax(t["x"], axis=-1) * t["w"]), params)
    assert max(errors.values()) < TOLERANCE
    errors = gradcheck(lambda t: T.sum_(T.layer_norm(t["x"]) * t["w"]), params)
    assert max(errors.values()) < TOLERANCE


def test_sigmoid_log_and_mean(gradcheck, rng):
    params = {"x": rng.normal(size=(3, 4))}
    errors = gradcheck(lambda t: T.mean(T.log(T.sigmoid(t["x"])), axis=0)[1], params)
    assert max(errors.values()) < TOLERANCE


def test_layout_ops(gradcheck, rng):
    params = {"x": rng.normal(size=(2, 3, 4)), "y": rng.normal(size=(2, 1, 4))}

    def build(t):
        joined = T.concat([t["x"], t["y"]], axis=1)
        moved = T.reshape(T.transpose(joined, (0, 2, 1)), (2, 16))
        # repeated indices accumulate
        picked = moved[:, [0, 0, 5]]
        return T.sum_(picked * picked)

    assert max(gradcheck(build, params).values()) < TOLERANCE


def test_relu_and_clip_gradients_are_masked():
    x = Tensor([-1.0, 0.5, 2.0], requires_grad=True)
    T.sum_(T.relu(x)).backward()
    assert x.grad.tolist() == [0.0, 1.0, 1.0]
    x = Tensor([-1.0, 0.5, 2.0], requires_grad=True)
    T.sum_(T.clip(x, 0.0, 1.0)).backward()
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_shared_leaf_accumulates():
    x = Tensor(3.0, requires_grad=True)
    (x * x + x).backward()
    assert x.grad == pytest.approx(7.0)


def test_shape_errors():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(DimensionError):
        Tensor(np.ones(3)) + Tensor(np.ones(4))
    with pytest.raises(DimensionError):
        T.reshape(Tensor(np.ones(6)), (4, 2))
    with pytest.raises(ArgumentError):
        Tensor(np.ones(3), requires_grad=True).backward()
    with pytest.raises(ArgumentError):
        T.mean(Tensor(np.ones((0, 3))), axis=0)


def test_dropout_is_identity_at_inference():
    x = Tensor(np.ones((4, 4)))
    assert T.dropout(x, 0.5, None) is x
    dropped = T.dropout(x, 0.5, np.random.default_rng(1)).data
    assert set(np.unique(dropped)) <= {0.0, 2.0}
    with pytest.raises(ArgumentError):
        T.dropout(x, 1.0, None)


def test_sinusoidal_table():
    table = T.sinusoidal_table(5, 6)
    assert table.shape == (5, 6)
    assert np.allclose(table[0, 0::2], 0.0) and np.allclose(table[0, 1::2], 1.0)
    assert table[1, 0] == pytest.approx(np.sin(1.0))


def test_param_store_snapshot_is_read_only():
    store = ParamStore()
    store.add("w", np.ones((2, 2)))
    with pytest.raises(ValidationError):
        store.add("w", np.ones(1))
    snapshot = store.snapshot()
    with pytest.raises(ValueError):
        snapshot["w"][0, 0] = 5.0
    store["w"].data[0, 0] = 5.0
    store.load(snapshot)
    assert store["w"].data[0, 0] == 1.0
    assert store.parameter_count() == 4


def test_param_store_load_mismatch():
    store = ParamStore()
    store.add("w", np.ones((2, 2)))
    with pytest.raises(ValidationError):
        store.load({"v": np.ones((2, 2))})
    with pytest.raises(DimensionError):
        store.load({"w": np.ones(3)})


def test_checkpoint_round_trip(tmp_path):
    store = ParamStore()
    store.add("reduce.weight", np.arange(6.0).reshape(2, 3))
    store.add("reduce.bias", np.array([0.5, -0.25, 1e-300]))
    path = tmp_path / "nested" / "model.dvtm"
    T.save_checkpoint(path, store)
    loaded = T.load_checkpoint(path)
    assert list(loaded) == ["reduce.weight", "reduce.bias"]
    for name, tensor in store.items():
        assert np.array_equal(loaded[name], tensor.data)


def test_checkpoint_errors(tmp_path):
    payload = encode_checkpoint({"w": np.ones((3, 3))})
    assert payload[:4] == b"DVTM"
    with pytest.raises(FormatError):
        decode_checkpoint(b"NOPE" + payload[4:])
    with pytest.raises(LengthError):
        decode_checkpoint(payload[:-8])
    with pytest.raises(StorageError):
        T.load_checkpoint(tmp_path / "absent.dvtm")
