"""Parameter store and the flat tensor-file format."""

import struct

import numpy as np
import pytest

from wasr.errors import ContractViolation, DataError
from wasr.params import (
    OPT_MAGIC,
    PARAM_MAGIC,
    ParamStore,
    read_tensor_file,
    write_tensor_file,
)
from wasr.tensor import Tensor


def make_store():
    store = ParamStore()
    store.add("conv1.weight", Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True))
    store.add("conv1.bias", Tensor(np.array([0.5, -0.5, 0.25]), requires_grad=True))
    return store


def test_round_trip_preserves_values(tmp_path):
    store = make_store()
    path = tmp_path / "params.bin"
    store.save(path)

    other = ParamStore()
    other.add("conv1.weight", Tensor(np.zeros((3, 4)), requires_grad=True))
    other.add("conv1.bias", Tensor(np.zeros(3), requires_grad=True))
    other.load(path)

    np.testing.assert_array_equal(other["conv1.weight"].data, store["conv1.weight"].data)
    np.testing.assert_array_equal(other["conv1.bias"].data, store["conv1.bias"].data)


def test_file_layout_is_exactly_as_documented(tmp_path):
    path = tmp_path / "one.bin"
    write_tensor_file(path, [("w", np.array([[1.0, 2.0]]))], PARAM_MAGIC)
    raw = path.read_bytes()
    assert raw[:8] == b"WASRPRM1"
    name_len = struct.unpack("<I", raw[8:12])[0]
    assert name_len == 1
    assert raw[12:13] == b"w"
    rank = struct.unpack("<I", raw[13:17])[0]
    assert rank == 2
    extents = struct.unpack("<II", raw[17:25])
    assert extents == (1, 2)
    values = struct.unpack("<2d", raw[25:41])
    assert values == (1.0, 2.0)
    assert len(raw) == 41


def test_entries_written_in_insertion_order(tmp_path):
    path = tmp_path / "two.bin"
    write_tensor_file(
        path, [("b", np.zeros(1)), ("a", np.zeros(1))], OPT_MAGIC
    )
    names = [name for name, _ in read_tensor_file(path, OPT_MAGIC)]
    assert names == ["b", "a"]


def test_save_is_byte_deterministic(tmp_path):
    store = make_store()
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    store.save(p1)
    store.save(p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_wrong_magic_rejected(tmp_path):
    path = tmp_path / "opt.bin"
    write_tensor_file(path, [("m", np.zeros(2))], OPT_MAGIC)
    with pytest.raises(DataError, match="magic"):
        read_tensor_file(path, PARAM_MAGIC)


def test_truncated_file_reports_offset(tmp_path):
    path = tmp_path / "cut.bin"
    write_tensor_file(path, [("w", np.arange(4.0))], PARAM_MAGIC)
    whole = path.read_bytes()
    path.write_bytes(whole[:-5])
    with pytest.raises(DataError, match="truncated"):
        read_tensor_file(path, PARAM_MAGIC)


def test_load_rejects_shape_mismatch(tmp_path):
    path = tmp_path / "params.bin"
    make_store().save(path)
    other = ParamStore()
    other.add("conv1.weight", Tensor(np.zeros((4, 3)), requires_grad=True))
    other.add("conv1.bias", Tensor(np.zeros(3), requires_grad=True))
    with pytest.raises(DataError):
        other.load(path)


def test_load_rejects_name_set_mismatch(tmp_path):
    path = tmp_path / "params.bin"
    make_store().save(path)
    other = ParamStore()
    other.add("conv1.weight", Tensor(np.zeros((3, 4)), requires_grad=True))
    with pytest.raises(DataError):
        other.load(path)


def test_duplicate_name_rejected():
    store = make_store()
    with pytest.raises(ContractViolation):
        store.add("conv1.weight", Tensor(np.zeros(1), requires_grad=True))


def test_zero_grads_clears_accumulators():
    store = make_store()
    t = store["conv1.bias"]
    t.grad = np.ones(3)
    store.zero_grads()
    assert t.grad is None or not np.any(t.grad)
