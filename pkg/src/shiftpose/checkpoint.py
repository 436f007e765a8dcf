"""Single-file binary checkpoints.

Layout: magic ``SSNC``, little-endian u32 format version, u64 header
length, a JSON header (graph spec, iteration, generator state, optimizer
metadata, blob index, free-form extras), then the raw blob payload.
Values serialize as 32-bit little-endian floats regardless of the
training dtype; loading restores them into whatever dtype the rebuilt
graph uses. Writes go to a temp file renamed into place.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .errors import CheckpointError

__all__ = ["MAGIC", "FORMAT_VERSION", "checkpoint_save", "checkpoint_load",
           "restore_graph_state", "rng_state", "restore_rng"]

MAGIC = b"SSNC"
FORMAT_VERSION = 1


def rng_state(rng):
    return rng.bit_generator.state


def restore_rng(state):
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def _collect_blobs(graph, optimizer=None):
    blobs = {}
    for name, p in graph.named_parameters():
        blobs[f"param.{name}"] = p.data
    for name, b in graph.named_buffers():
        blobs[f"buffer.{name}"] = b
    if optimizer is not None:
        blobs.update(optimizer.state_blobs())
    return blobs


def checkpoint_save(path, graph, optimizer=None, rng=None, iteration=0, extra=None):
    """Serialize graph parameters/buffers, optimizer state, and the
    generator state; returns the number of bytes written."""
    blobs = _collect_blobs(graph, optimizer)
    index = []
    payload = bytearray()
    for name in blobs:
        arr = np.ascontiguousarray(blobs[name], dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape),
                      "offset": len(payload), "nbytes": arr.nbytes})
        payload += arr.tobytes()
    header = {
        "graph": graph.spec(),
        "iteration": int(iteration),
        "rng_state": None if rng is None else rng_state(rng),
        "optimizer": None if optimizer is None else optimizer.meta(),
        "blobs": index,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header).encode()
    out = bytearray()
    out += MAGIC
    out += np.uint32(FORMAT_VERSION).tobytes()
    out += np.uint64(len(header_bytes)).tobytes()
    out += header_bytes
    out += payload

    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(out)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(out)


def checkpoint_load(path):
    """Parse and validate a checkpoint; returns (header, {blob name: array}).

    Rejects bad magic, unknown versions, and truncated files with the
    expected/actual byte counts.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise CheckpointError(f"truncated checkpoint: expected >= 16 bytes, got {len(raw)}")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unknown checkpoint version {version}, this build reads {FORMAT_VERSION}")
    header_len = int(np.frombuffer(raw[8:16], dtype="<u8")[0])
    if len(raw) < 16 + header_len:
        raise CheckpointError(
            f"truncated header: expected {16 + header_len} bytes, got {len(raw)}")
    header = json.loads(raw[16:16 + header_len].decode())
    payload = raw[16 + header_len:]
    expected = sum(b["nbytes"] for b in header["blobs"])
    if len(payload) != expected:
        raise CheckpointError(
            f"truncated payload: expected {expected} bytes, got {len(payload)}")
    blobs = {}
    for entry in header["blobs"]:
        start, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start:start + n], dtype="<f4")
        blobs[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header, blobs


def restore_graph_state(graph, blobs):
    """Copy parameter/buffer blobs into a graph rebuilt from the spec."""
    for name, p in graph.named_parameters():
        key = f"param.{name}"
        if key not in blobs:
            raise CheckpointError(f"missing parameter blob {key}")
        if tuple(blobs[key].shape) != tuple(p.shape):
            raise CheckpointError(
                f"blob {key}: shape {blobs[key].shape} does not match {p.shape}")
        p.data[...] = blobs[key].astype(p.dtype)
    for name, b in graph.named_buffers():
        key = f"buffer.{name}"
        if key in blobs:
            b[...] = blobs[key].astype(b.dtype)
