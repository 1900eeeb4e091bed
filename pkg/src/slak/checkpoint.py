"""Binary checkpoints: magic, version, JSON header, float32 tensors, mask bitsets.

Layout (all little-endian)::

    b"SLAK" | u16 version | u32 header length | header (UTF-8 JSON) | payload

Header records give each tensor's identifier, shape and byte offset relative
to the start of the payload. Masks are stored one bit per weight, row-major,
padded to a whole byte.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, ConfigMismatchError, FormatError
from .model import Model
from .sparsity import Mask

MAGIC = b"SLAK"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


def _encode(model: Model, masks):
    records, chunks, pos = [], [], 0
    for kind, store in (("param", model.params), ("buffer", model.buffers)):
        for name, arr in store.items():
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            records.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": pos,
                            "nbytes": len(data)})
            chunks.append(data)
            pos += len(data)
    mask_records = []
    for name, m in (masks or {}).items():
        data = np.packbits(m.occupancy.ravel().astype(np.uint8)).tobytes()
        mask_records.append({"name": name, "shape": list(m.shape), "offset": pos, "nbytes": len(data),
                             "nnz": m.nnz})
        chunks.append(data)
        pos += len(data)
    header = {"config": model.config.to_dict(), "dtype": "<f4", "tensors": records, "masks": mask_records,
              "payload_bytes": pos}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hb)) + hb + b"".join(chunks)


def save_checkpoint(model: Model, masks, path):
    blob = _encode(model, masks)
    with open(path, "wb") as f:
        f.write(blob)
    return len(blob)


def load_checkpoint(path, expect_config: ModelConfig = None):
    """Returns (model, masks). Raises FormatError with a byte offset on damage."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _PREFIX.size:
        raise FormatError("file shorter than the fixed prefix", offset=len(blob))
    magic, version, hlen = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4)
    start = _PREFIX.size
    if start + hlen > len(blob):
        raise FormatError("header runs past end of file", offset=len(blob))
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
        config = ModelConfig.from_dict({k: tuple(v) if isinstance(v, list) else v
                                        for k, v in header["config"].items()})
        records, mask_records = header["tensors"], header["masks"]
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"corrupt header: {exc}", offset=start) from exc
    if expect_config is not None and expect_config != config:
        raise ConfigMismatchError("checkpoint config differs from the expected config", "config")
    base = start + hlen
    payload = blob[base:]

    def section(rec):
        off, nb = rec["offset"], rec["nbytes"]
        if off < 0 or off + nb > len(payload):
            raise FormatError(f"truncated payload for {rec['name']}", offset=base + min(off + nb, len(payload)))
        return payload[off:off + nb]

    model = Model(config)
    expected = {n: tuple(s) for n, s, _ in model.param_specs()}
    expected_buf = {n: tuple(s) for n, s, _ in model.buffer_specs()}
    for rec in records:
        shape = tuple(rec["shape"])
        table = expected if rec["kind"] == "param" else expected_buf
        if table.get(rec["name"]) != shape:
            raise FormatError(f"unexpected tensor {rec['name']} with shape {shape}", offset=base + rec["offset"])
        data = section(rec)
        if len(data) != 4 * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"size mismatch for {rec['name']}", offset=base + rec["offset"])
        arr = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
        (model.params if rec["kind"] == "param" else model.buffers)[rec["name"]] = arr
    missing = (set(expected) - set(model.params)) | (set(expected_buf) - set(model.buffers))
    if missing:
        raise FormatError(f"missing tensors {sorted(missing)[:3]}", offset=base)
    masks = {}
    for rec in mask_records:
        shape = tuple(rec["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        if rec["nbytes"] != (n + 7) // 8:
            raise FormatError(f"bitset size mismatch for {rec['name']}", offset=base + rec["offset"])
        bits = np.unpackbits(np.frombuffer(section(rec), dtype=np.uint8), count=n)
        m = Mask(bits.reshape(shape))
        if m.nnz != rec["nnz"]:
            raise FormatError(f"mask {rec['name']} nnz {m.nnz} differs from header {rec['nnz']}",
                              offset=base + rec["offset"])
        masks[rec["name"]] = m
    if len(payload) != header.get("payload_bytes", len(payload)):
        raise FormatError("payload length differs from header", offset=len(blob))
    return model, masks
