"""Versioned tensor container: a text manifest followed by a float32 payload.

Layout::

    SELFVOS-CONTAINER 1
    meta <key> <json value>
    tensor <name> <d0,d1,...> float32 <byte offset> <byte length>
    end <payload byte length>
    <raw little-endian float32 payload>

The same container holds model parameters, optimizer moments and
probability dumps.
"""

import json
import os
from pathlib import Path

import numpy as np

from .nets import FORMAT_VERSION, ArchitectureDescriptor, ModelParams

MAGIC = "SELFVOS-CONTAINER"
CONTAINER_VERSION = 1
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def write_container(path, tensors, meta=None):
    lines = [f"{MAGIC} {CONTAINER_VERSION}"]
    for k, v in (meta or {}).items():
        if " " in k:
            raise ValueError(f"meta key {k!r} contains a space")
        lines.append(f"meta {k} {json.dumps(v, sort_keys=True)}")
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        if " " in name:
            raise ValueError(f"tensor name {name!r} contains a space")
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        shape = ",".join(str(int(s)) for s in np.shape(arr))
        lines.append(f"tensor {name} {shape} float32 {offset} {len(raw)}")
        blobs.append(raw)
        offset += len(raw)
    lines.append(f"end {offset}")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def read_container(path):
    """Return ``(tensors, meta)``; raises :class:`CheckpointError` on any malformation."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such container: {path}")
    data = path.read_bytes()
    meta, entries = {}, []
    pos = 0
    payload_len = None
    first = True
    while payload_len is None:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError(f"{path}: truncated header")
        line = data[pos:nl].decode("utf-8", errors="replace")
        pos = nl + 1
        if first:
            parts = line.split()
            if len(parts) != 2 or parts[0] != MAGIC:
                raise CheckpointError(f"{path}: not a selfvos container")
            if int(parts[1]) != CONTAINER_VERSION:
                raise CheckpointError(
                    f"{path}: container version {parts[1]} but this build reads version {CONTAINER_VERSION}")
            first = False
            continue
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, val = rest.partition(" ")
            meta[key] = json.loads(val)
        elif kind == "tensor":
            name, shape, dtype, off, length = rest.split(" ")
            if dtype != "float32":
                raise CheckpointError(f"{path}: tensor {name!r} has unsupported dtype {dtype}")
            shape = tuple(int(s) for s in shape.split(",")) if shape else ()
            entries.append((name, shape, int(off), int(length)))
        elif kind == "end":
            payload_len = int(rest)
        else:
            raise CheckpointError(f"{path}: bad header line {line!r}")
    payload = data[pos:]
    if len(payload) != payload_len:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, manifest declares {payload_len} (truncated?)")
    tensors = {}
    for name, shape, off, length in entries:
        n = int(np.prod(shape)) if shape else 1
        if length != n * _DTYPE.itemsize or off + length > payload_len:
            raise CheckpointError(f"{path}: tensor {name!r} extent is inconsistent with its shape")
        tensors[name] = np.frombuffer(payload, dtype=_DTYPE, count=n, offset=off).reshape(shape).astype(np.float32)
    return tensors, meta


def save_checkpoint(params, path, extra_meta=None):
    meta = {"version": params.version, "descriptor": params.descriptor.to_dict()}
    meta.update(extra_meta or {})
    write_container(path, params.tensors, meta)


def load_checkpoint(path, descriptor=None):
    """Load parameters; with ``descriptor`` given, shapes must match it exactly."""
    tensors, meta = read_container(path)
    version = meta.get("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version!r}, expected {FORMAT_VERSION!r}")
    stored = ArchitectureDescriptor.from_dict(meta["descriptor"])
    target = descriptor or stored
    expected = target.layer_shapes()
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, expected {shape}")
    extra = [k for k in tensors if k not in expected]
    if extra:
        raise CheckpointError(f"{path}: unexpected tensor {extra[0]!r}")
    params = ModelParams(target, {k: tensors[k] for k in expected}, version)
    params.validate()
    return params
