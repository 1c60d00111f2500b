"""Versioned binary checkpoints for networks, optimizer state and metadata.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"CAADCKPT"
    8       4     format version (uint32), currently 1
    12      8     header length H in bytes (uint64)
    20      H     UTF-8 JSON header
    20+H    P     parameter payload: float64 little-endian arrays, back to back
    20+H+P  4     CRC-32 of every preceding byte (uint32)

The header holds ``metadata`` (free-form JSON), ``modules`` (per-network
structure: kind, layer activations, shapes) and ``arrays``: an ordered list of
``{"name", "shape", "offset"}`` records, where ``offset`` counts bytes from the
start of the payload. ``P`` is the sum of all array sizes times 8.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError
from .features import IdentityExtractor, TinyCNN, _Conv3x3
from .neural import Dense, DenseNet, OptimizerState

MAGIC = b"CAADCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_CRC = struct.Struct("<I")
_F64 = np.dtype("<f8")


def pack(arrays: dict[str, np.ndarray], header: dict) -> bytes:
    """Serialise named float arrays plus a JSON-able header."""
    records, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=_F64)
        records.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    head = json.dumps({**header, "arrays": records}, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)) + head + b"".join(chunks)
    return body + _CRC.pack(zlib.crc32(body))


def unpack(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of :func:`pack`; validates magic, version, length and checksum."""
    if len(blob) < _PREFIX.size + _CRC.size:
        raise CheckpointError("checkpoint truncated")
    magic, version, head_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    body, (crc,) = blob[:-_CRC.size], _CRC.unpack(blob[-_CRC.size:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated)")
    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    payload = memoryview(body)[start + head_len:]
    arrays = {}
    expected = 0
    for rec in header.pop("arrays"):
        n = int(np.prod(rec["shape"], dtype=np.int64))
        lo, hi = rec["offset"], rec["offset"] + 8 * n
        if hi > len(payload):
            raise CheckpointError(f"array {rec['name']!r} runs past the end of the payload")
        arrays[rec["name"]] = np.frombuffer(payload[lo:hi], dtype=_F64).reshape(rec["shape"]).astype(np.float64)
        expected = max(expected, hi)
    if expected != len(payload):
        raise CheckpointError("payload length does not match the array table")
    return arrays, header


def _describe(module):
    if isinstance(module, DenseNet):
        return {"type": "dense", "activations": [l.activation for l in module.layers]}
    if isinstance(module, IdentityExtractor):
        return {"type": "identity", "dim": module.output_dim}
    if isinstance(module, TinyCNN):
        return {"type": "tiny_cnn", "input_shape": list(module.input_shape),
                "output_dim": module.output_dim, "channels": list(module.channels)}
    raise TypeError(f"cannot checkpoint {type(module).__name__}")


def _rebuild(desc, params):
    kind = desc["type"]
    if kind == "dense":
        layers = [Dense(params[2 * k], params[2 * k + 1], act) for k, act in enumerate(desc["activations"])]
        return DenseNet(layers)
    if kind == "identity":
        return IdentityExtractor(desc["dim"])
    if kind == "tiny_cnn":
        blocks = [_Conv3x3(params[2 * k], params[2 * k + 1]) for k in range(len(params) // 2)]
        return TinyCNN(desc["input_shape"], desc["output_dim"], desc["channels"], blocks=blocks)
    raise CheckpointError(f"unknown module type {kind!r}")


def save_weights(modules: dict, optimizers: dict[str, OptimizerState] | None = None,
                 metadata: dict | None = None) -> bytes:
    """Checkpoint bytes for named networks / extractors and optimizer states."""
    arrays, mods, opts = {}, {}, {}
    for name, module in modules.items():
        params = module.params
        mods[name] = {**_describe(module), "n_params": len(params)}
        for i, p in enumerate(params):
            arrays[f"{name}/{i}"] = p
    for name, st in (optimizers or {}).items():
        opts[name] = {"kind": st.kind, "learning_rate": st.learning_rate, "beta1": st.beta1,
                      "beta2": st.beta2, "eps": st.eps, "step_count": st.step_count,
                      "n_moments": len(st.m)}
        for i, (m, v) in enumerate(zip(st.m, st.v)):
            arrays[f"opt:{name}/m/{i}"] = m
            arrays[f"opt:{name}/v/{i}"] = v
    header = {"format": "caad-checkpoint", "metadata": metadata or {}, "modules": mods, "optimizers": opts}
    return pack(arrays, header)


def load_weights(blob: bytes):
    """Returns ``(modules, optimizers, metadata)``; nothing is returned on error."""
    arrays, header = unpack(blob)
    try:
        modules = {}
        for name, desc in header["modules"].items():
            params = [arrays[f"{name}/{i}"] for i in range(desc["n_params"])]
            modules[name] = _rebuild(desc, params)
        optimizers = {}
        for name, o in header.get("optimizers", {}).items():
            st = OptimizerState(kind=o["kind"], learning_rate=o["learning_rate"], beta1=o["beta1"],
                                beta2=o["beta2"], eps=o["eps"], step_count=o["step_count"])
            st.m = [arrays[f"opt:{name}/m/{i}"] for i in range(o["n_moments"])]
            st.v = [arrays[f"opt:{name}/v/{i}"] for i in range(o["n_moments"])]
            optimizers[name] = st
    except (KeyError, IndexError, ValueError, TypeError) as exc:
        raise CheckpointError(f"inconsistent checkpoint structure: {exc}") from exc
    return modules, optimizers, header.get("metadata", {})


def write_checkpoint(path, blob: bytes):
    """Write via a temporary file so a crash never leaves a half-written checkpoint."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def read_checkpoint(path):
    return load_weights(Path(path).read_bytes())
