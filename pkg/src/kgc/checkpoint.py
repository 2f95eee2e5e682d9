"""Binary checkpoint container.

Layout (all integers little-endian):

    bytes 0-3   magic "KGC1"
    bytes 4-7   u32 format version (currently 1)
    bytes 8-11  u32 entry count
    per entry:  u16 name length, utf-8 name,
                u8 ndim, ndim x u32 extents,
                row-major float32 little-endian payload

Model parameters live under the ``param/`` namespace, optimizer state
under ``opt/``.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"KGC1"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _write_entry(fh, name, array):
    encoded = name.encode("utf-8")
    arr = np.ascontiguousarray(array, dtype="<f4")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def _read_entry(fh):
    (name_len,) = struct.unpack("<H", fh.read(2))
    name = fh.read(name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise CheckpointError(f"truncated payload for entry {name!r}")
    return name, np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def save_checkpoint(path, params, optimizer_state=None):
    """Write parameter arrays (and optionally optimizer state) to ``path``."""
    entries = [("param/" + k, v) for k, v in params.items()]
    if optimizer_state:
        entries += [("opt/" + k, v) for k, v in optimizer_state.items()]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            _write_entry(fh, name, arr)


def load_checkpoint(path):
    """Read a checkpoint, returning (params, optimizer_state) dicts."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", fh.read(4))
        params, opt_state = {}, {}
        for _ in range(count):
            name, arr = _read_entry(fh)
            if name.startswith("param/"):
                params[name[len("param/"):]] = arr
            elif name.startswith("opt/"):
                opt_state[name[len("opt/"):]] = arr
            else:
                raise CheckpointError(f"entry {name!r} outside known namespaces")
    return params, opt_state
