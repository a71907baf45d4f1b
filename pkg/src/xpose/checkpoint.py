"""Binary checkpoint and adversarial-example cache formats.

Both share one layout::

    magic (5 bytes) | u32-LE metadata length | UTF-8 JSON metadata | f32-LE blobs

Model checkpoints use magic ``ATLZ1`` and store every parameter tensor
(running BatchNorm moments included) in graph order. AE caches use
``ATAE1`` and store a single image batch.
"""

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .exceptions import ArchitectureMismatchError, BadMagicError, CheckpointError, TruncatedBlobError
from .graph import ModelGraph

__all__ = [
    "MODEL_MAGIC",
    "AE_MAGIC",
    "save",
    "load",
    "read_metadata",
    "save_adversarial",
    "load_adversarial",
    "atomic_write",
]

MODEL_MAGIC = b"ATLZ1"
AE_MAGIC = b"ATAE1"
_HEADER = struct.Struct("<I")


def atomic_write(path, data):
    """Write ``data`` (bytes or str) via a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack(magic, meta, arrays):
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [magic, _HEADER.pack(len(meta_bytes)), meta_bytes]
    parts.extend(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    return b"".join(parts)


def _unpack_header(raw, magic, path):
    if raw[: len(magic)] != magic:
        raise BadMagicError(f"{path}: bad magic {raw[:len(magic)]!r}, expected {magic!r}")
    start = len(magic) + _HEADER.size
    if len(raw) < start:
        raise TruncatedBlobError(f"{path}: truncated header")
    (n,) = _HEADER.unpack(raw[len(magic) : start])
    if len(raw) < start + n:
        raise TruncatedBlobError(f"{path}: truncated metadata ({len(raw) - start} of {n} bytes)")
    try:
        meta = json.loads(raw[start : start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable metadata: {exc}") from exc
    return meta, start + n


def _read_blob(raw, offset, name, shape, path):
    count = int(np.prod(shape, dtype=np.int64))
    end = offset + 4 * count
    if end > len(raw):
        raise TruncatedBlobError(
            f"{path}: blob for {name!r} truncated ({len(raw) - offset} of {4 * count} bytes)"
        )
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).astype(np.float32).reshape(shape)
    return arr, end


def save(model, path, **metadata):
    """Write ``model`` to ``path``.

    Extra keyword arguments (training seed, dataset id, accuracy, ...) are
    stored in the JSON metadata.
    """
    params = model.named_parameters()
    meta = dict(metadata)
    meta["architecture"] = model.describe()
    meta["params"] = [[name, list(arr.shape)] for name, arr in params]
    atomic_write(path, _pack(MODEL_MAGIC, meta, [arr for _, arr in params]))


def read_metadata(path):
    raw = Path(path).read_bytes()
    meta, _ = _unpack_header(raw, MODEL_MAGIC, path)
    return meta


def load(path, expected=None):
    """Rebuild the model stored at ``path``; returns ``(model, metadata)``.

    ``expected`` (a ModelGraph or its ``describe()`` dict) must match the
    stored architecture when given.
    """
    raw = Path(path).read_bytes()
    meta, offset = _unpack_header(raw, MODEL_MAGIC, path)
    arch = meta.get("architecture")
    if arch is None or "params" not in meta:
        raise CheckpointError(f"{path}: metadata lacks architecture or params")
    if expected is not None:
        want = expected.describe() if isinstance(expected, ModelGraph) else expected
        if want != arch:
            raise ArchitectureMismatchError(f"{path}: stored architecture {arch.get('name')!r} differs from expected")
    try:
        model = ModelGraph.from_description(arch)
    except (KeyError, TypeError, ValueError) as exc:
        raise ArchitectureMismatchError(f"{path}: cannot rebuild architecture: {exc}") from exc
    declared = [(name, tuple(shape)) for name, shape in meta["params"]]
    actual = [(name, arr.shape) for name, arr in model.named_parameters()]
    if declared != actual:
        raise ArchitectureMismatchError(f"{path}: parameter list does not match the architecture")
    for name, shape in declared:
        arr, offset = _read_blob(raw, offset, name, shape, path)
        model.set_parameter(name, arr)
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} unexpected trailing bytes")
    return model, meta


def save_adversarial(path, x_adv, labels, **metadata):
    meta = dict(metadata)
    meta["shape"] = list(x_adv.shape)
    meta["labels"] = [int(v) for v in labels]
    atomic_write(path, _pack(AE_MAGIC, meta, [x_adv]))


def load_adversarial(path):
    """Return ``(x_adv, labels, metadata)`` from an ATAE1 cache."""
    raw = Path(path).read_bytes()
    meta, offset = _unpack_header(raw, AE_MAGIC, path)
    x, offset = _read_blob(raw, offset, "x_adv", tuple(meta["shape"]), path)
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} unexpected trailing bytes")
    return x, np.asarray(meta["labels"], dtype=np.int64), meta
