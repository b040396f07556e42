"""Initialization, MLP blocks, and the checkpoint format."""

import numpy as np
import pytest

from invfold.autodiff import Tensor
from invfold.errors import CheckpointMismatch, InvalidParameter
from invfold.nn import Linear, MlpBlock, load_checkpoint, restore_parameters, save_checkpoint, xavier_uniform
from invfold.rng import RandomStream


def test_xavier_bounds():
    w = xavier_uniform((50, 30), RandomStream(1, "init"))
    bound = np.sqrt(6.0 / 80)
    assert np.max(np.abs(w)) <= bound
    assert np.std(w) > bound / 4  # actually spread out, not collapsed


def test_linear_shapes():
    layer = Linear(5, 3, RandomStream(2, "lin"))
    out = layer(Tensor(np.ones((4, 5))))
    assert out.shape == (4, 3)
    out3 = layer(Tensor(np.ones((4, 2, 5))))
    assert out3.shape == (4, 2, 3)


def test_mlp_widths_validation():
    with pytest.raises(InvalidParameter):
        MlpBlock((8,), RandomStream(3, "m"))
    with pytest.raises(InvalidParameter):
        MlpBlock((8, 8), RandomStream(3, "m"), dropout=1.0)
    with pytest.raises(InvalidParameter):
        MlpBlock((8, 8), RandomStream(3, "m"), activation="swish")


def test_mlp_relu_mode():
    block = MlpBlock((4, 4, 2), RandomStream(4, "m"), activation="relu")
    out = block(Tensor(np.ones((3, 4))))
    assert out.shape == (3, 2)


def test_checkpoint_round_trip(tmp_path):
    params = {
        "a.w": Tensor(RandomStream(5, "c").gaussian((3, 4)), requires_grad=True),
        "b.bias": Tensor(np.arange(7, dtype=np.float64), requires_grad=True),
    }
    path = tmp_path / "model.ifc"
    save_checkpoint(params, path, meta={"seed": 11, "note": "test"})
    arrays, meta = load_checkpoint(path)
    assert meta == {"seed": 11, "note": "test"}
    for name, p in params.items():
        assert np.array_equal(arrays[name], p.data)


def test_restore_rejects_shape_mismatch(tmp_path):
    params = {"w": Tensor(np.zeros((2, 2)), requires_grad=True)}
    path = tmp_path / "model.ifc"
    save_checkpoint(params, path)
    arrays, _ = load_checkpoint(path)
    target = {"w": Tensor(np.zeros((3, 3)), requires_grad=True)}
    with pytest.raises(CheckpointMismatch):
        restore_parameters(target, arrays)


def test_restore_rejects_name_mismatch(tmp_path):
    params = {"w": Tensor(np.zeros((2, 2)), requires_grad=True)}
    path = tmp_path / "model.ifc"
    save_checkpoint(params, path)
    arrays, _ = load_checkpoint(path)
    target = {"other": Tensor(np.zeros((2, 2)), requires_grad=True)}
    with pytest.raises(CheckpointMismatch):
        restore_parameters(target, arrays)


def test_bad_magic(tmp_path):
    path = tmp_path / "junk.ifc"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(path)
