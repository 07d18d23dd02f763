"""Named parameter storage and its flat binary file format.

File layout: magic bytes, then per entry a u32 little-endian name length,
the UTF-8 name, a u32 rank, u32 extents, and the values as f64 little-endian.
The same container serializes optimizer state under a different magic.
"""

import struct

import numpy as np

from .errors import ContractViolation, DataError
from .tensor import Tensor

PARAM_MAGIC = b"WASRPRM1"
OPT_MAGIC = b"WASROPT1"


class ParamStore:
    """Ordered map from dot-separated parameter paths to trainable tensors."""

    def __init__(self):
        self._entries = {}

    def add(self, name, tensor):
        if name in self._entries:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad:
            raise ContractViolation(f"parameter {name!r} must have requires_grad set")
        self._entries[name] = tensor
        return tensor

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries.keys())

    def items(self):
        return self._entries.items()

    def tensors(self):
        return list(self._entries.values())

    def zero_grads(self):
        for t in self._entries.values():
            t.grad = None

    def save(self, path, magic=PARAM_MAGIC):
        write_tensor_file(path, self.items(), magic=magic)

    def load(self, path, magic=PARAM_MAGIC):
        """Copy values from a saved file into the tensors already registered.

        The tensors keep their identity, so anything holding a reference to
        them (a wired-up network) sees the loaded values.
        """
        loaded = dict(read_tensor_file(path, magic=magic))
        missing = sorted(set(self._entries) - set(loaded))
        extra = sorted(set(loaded) - set(self._entries))
        if missing or extra:
            raise DataError(
                f"{path}: entry names do not match the store"
                f" (missing {missing!r}, unexpected {extra!r})"
            )
        for name, tensor in self._entries.items():
            arr = loaded[name]
            if arr.shape != tensor.data.shape:
                raise DataError(
                    f"{path}: {name!r} has shape {arr.shape}, store expects"
                    f" {tensor.data.shape}"
                )
            tensor.data[...] = arr


def write_tensor_file(path, named_arrays, magic=PARAM_MAGIC):
    """Write (name, array-or-Tensor) pairs in the flat binary format.

    Accepts any iterable of pairs, or a dict; insertion order is preserved
    in the file.
    """
    if isinstance(named_arrays, dict):
        named_arrays = named_arrays.items()
    with open(path, "wb") as fh:
        fh.write(magic)
        for name, value in named_arrays:
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def read_tensor_file(path, magic=PARAM_MAGIC):
    """Read the flat binary format back as (name, ndarray) pairs in file order."""
    out = []
    seen = set()
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(magic)] != magic:
        raise DataError(
            f"{path}: bad magic {blob[:len(magic)]!r}, expected {magic!r}"
        )
    offset = len(magic)

    def take(n, what):
        nonlocal offset
        if offset + n > len(blob):
            raise DataError(f"{path}: truncated while reading {what} at byte {offset}")
        chunk = blob[offset:offset + n]
        offset += n
        return chunk

    while offset < len(blob):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(8 * count, f"values of {name}"), dtype="<f8")
        if name in seen:
            raise DataError(f"{path}: duplicate entry {name!r}")
        seen.add(name)
        out.append((name, data.reshape(shape).astype(np.float64)))
    return out
