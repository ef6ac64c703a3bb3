"""Binary checkpoint format: little-endian, magic + version, length-prefixed
(name, dtype, shape, raw data) records, CRC32 trailer.

The first record is a JSON metadata blob (spec echo, RNG state, iteration
counter, network kind). Round-trips are bit-exact, including momentum buffers
and batch-norm running statistics, so a resumed run reproduces an
uninterrupted one.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .network import CrossDomainNetwork, CrossDomainSpec, Network, NetworkSpec

MAGIC = b"HSICKPT\x00"
VERSION = 1
_META_NAME = "__meta__"
_JSON_DTYPE = "json"


def _pack_record(buf, name, dtype_str, shape, raw):
    name_b = name.encode("utf-8")
    dt_b = dtype_str.encode("ascii")
    buf += struct.pack("<H", len(name_b)) + name_b
    buf += struct.pack("<B", len(dt_b)) + dt_b
    buf += struct.pack("<B", len(shape))
    for dim in shape:
        buf += struct.pack("<I", dim)
    buf += struct.pack("<Q", len(raw)) + raw


def _pack_tensor(buf, name, arr):
    a = np.ascontiguousarray(arr)
    dt = a.dtype.newbyteorder("<")
    _pack_record(buf, name, dt.str, a.shape, a.astype(dt, copy=False).tobytes())


def _rng_state(rng):
    if rng is None:
        return None
    return rng.bit_generator.state


def _restore_rng(state):
    if state is None:
        return None
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


@dataclass
class Checkpoint:
    """A loaded checkpoint: the rebuilt network plus resume context."""

    network: object
    rng: object
    iteration: int
    kind: str


def save_checkpoint(network, path, rng=None, iteration=0):
    """Serialize a Network or CrossDomainNetwork (shared store written once)."""
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    if isinstance(network, CrossDomainNetwork):
        meta = {
            "kind": "cross",
            "branches": [b.spec.to_dict() for b in network.branches],
            "dtype": np.dtype(network.branches[0].dtype).newbyteorder("<").str,
            "iteration": iteration,
            "rng": _rng_state(rng),
        }
        _pack_record(buf, _META_NAME, _JSON_DTYPE, (),
                     json.dumps(meta, sort_keys=True, separators=(",", ":")).encode())
        for name, arr in network.branches[0].shared_state():
            _pack_tensor(buf, f"shared.{name}", arr)
        for i, branch in enumerate(network.branches):
            for name, arr in branch.private_state():
                _pack_tensor(buf, f"branch{i}.{name}", arr)
    elif isinstance(network, Network):
        meta = {
            "kind": "single",
            "spec": network.spec.to_dict(),
            "dtype": np.dtype(network.dtype).newbyteorder("<").str,
            "iteration": iteration,
            "rng": _rng_state(rng),
        }
        _pack_record(buf, _META_NAME, _JSON_DTYPE, (),
                     json.dumps(meta, sort_keys=True, separators=(",", ":")).encode())
        for name, arr in network.state():
            _pack_tensor(buf, name, arr)
    else:
        raise CheckpointError(f"cannot checkpoint object of type {type(network).__name__}")
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


def _parse_records(data):
    """Yield (name, dtype_str, shape, raw) until the CRC trailer."""
    off = len(MAGIC) + 4
    end = len(data) - 4
    while off < end:
        start = off
        try:
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + name_len].decode("utf-8")
            off += name_len
            (dt_len,) = struct.unpack_from("<B", data, off)
            off += 1
            dtype_str = data[off:off + dt_len].decode("ascii")
            off += dt_len
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off) if ndim else ()
            off += 4 * ndim
            (nbytes,) = struct.unpack_from("<Q", data, off)
            off += 8
        except struct.error as e:
            raise CheckpointError(f"truncated record header at offset {start}: {e}") from e
        if off + nbytes > end:
            raise CheckpointError(
                f"truncated record '{name}' at offset {start}: needs {nbytes} data bytes"
            )
        yield name, dtype_str, shape, data[off:off + nbytes]
        off += nbytes


def load_checkpoint(path):
    """Rebuild the network (and RNG/iteration) from a checkpoint file."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8:
        raise CheckpointError(f"file too short ({len(data)} bytes) to be a checkpoint")
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic bytes: not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (crc_stored,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError("CRC mismatch: checkpoint is corrupt or truncated")

    records = {}
    meta = None
    for name, dtype_str, shape, raw in _parse_records(data):
        if name == _META_NAME:
            if dtype_str != _JSON_DTYPE:
                raise CheckpointError("metadata record has wrong dtype tag")
            meta = json.loads(raw.decode("utf-8"))
        else:
            arr = np.frombuffer(raw, dtype=np.dtype(dtype_str)).reshape(shape)
            records[name] = arr
    if meta is None:
        raise CheckpointError("checkpoint has no metadata record")

    dtype = np.dtype(meta["dtype"])
    if meta["kind"] == "single":
        net = Network(NetworkSpec.from_dict(meta["spec"]), dtype=dtype)
        _fill(net.state(), records, prefix="")
        network = net
    elif meta["kind"] == "cross":
        spec = CrossDomainSpec.from_dict({"branches": meta["branches"]})
        first = Network(spec.branches[0], dtype=dtype)
        branches = [first]
        for sp in spec.branches[1:]:
            branches.append(Network(sp, dtype=dtype, shared_modules=first.modules))
        _fill(first.shared_state(), records, prefix="shared.")
        for i, branch in enumerate(branches):
            _fill(branch.private_state(), records, prefix=f"branch{i}.")
        network = CrossDomainNetwork(spec, branches)
    else:
        raise CheckpointError(f"unknown checkpoint kind '{meta['kind']}'")

    return Checkpoint(
        network=network,
        rng=_restore_rng(meta.get("rng")),
        iteration=int(meta["iteration"]),
        kind=meta["kind"],
    )


def _fill(state, records, prefix):
    for name, arr in state:
        key = prefix + name
        if key not in records:
            raise CheckpointError(f"checkpoint missing tensor '{key}'")
        src = records[key]
        if tuple(src.shape) != tuple(arr.shape):
            raise CheckpointError(
                f"tensor '{key}' has shape {tuple(src.shape)}, expected {tuple(arr.shape)}"
            )
        arr[...] = src.astype(arr.dtype, copy=False)
