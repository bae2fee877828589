"""Binary checkpoint format.

Layout (all integers little-endian ``uint32``)::

    magic      8 bytes  b"EVOCKPT\\0"
    version    u32      currently 1
    cfg_len    u32      length of the JSON NetConfig that follows
    cfg_json   bytes    UTF-8, keys sorted, no whitespace
    count      u32      number of tensor records
    record*    name_len u32, name (UTF-8), ndim u32, dims u32 * ndim,
               values as little-endian float64, row-major

Records appear in the model's canonical parameter order.  Values are always
stored as float64 regardless of training precision.
"""
import json
import struct

import numpy as np

from endovo.errors import ConfigurationError, ValidationError
from endovo.model import NetConfig, check_params, param_shapes

MAGIC = b"EVOCKPT\0"
VERSION = 1


def encode_checkpoint(cfg: NetConfig, params, extra=None):
    check_params(params, cfg)
    meta = {"net": cfg.to_dict()}
    if extra:
        meta["extra"] = extra
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(params))]
    for name in param_shapes(cfg):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(data):
    """Return ``(NetConfig, params, extra)`` from checkpoint bytes."""
    view = memoryview(data)
    if bytes(view[:8]) != MAGIC:
        raise ValidationError("not an endovo checkpoint (bad magic)")
    pos = 8

    def u32(n=1):
        nonlocal pos
        if pos + 4 * n > len(view):
            raise ValidationError("truncated checkpoint")
        vals = struct.unpack_from(f"<{n}I", view, pos)
        pos += 4 * n
        return vals

    version, cfg_len = u32(2)
    if version != VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    meta = json.loads(bytes(view[pos:pos + cfg_len]).decode("utf-8"))
    pos += cfg_len
    try:
        cfg = NetConfig.from_dict(meta["net"])
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"bad NetConfig in checkpoint: {exc}") from None
    (count,) = u32()
    params = {}
    for _ in range(count):
        (nlen,) = u32()
        name = bytes(view[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        (ndim,) = u32()
        shape = u32(ndim) if ndim else ()
        size = int(np.prod(shape, dtype=np.int64))
        if pos + 8 * size > len(view):
            raise ValidationError(f"truncated tensor {name!r}")
        arr = np.frombuffer(view, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        params[name] = arr.astype(cfg.dtype)
    if pos != len(view):
        raise ValidationError(f"{len(view) - pos} trailing bytes in checkpoint")
    check_params(params, cfg)
    return cfg, params, meta.get("extra", {})


def save_checkpoint(path, cfg, params, extra=None):
    data = encode_checkpoint(cfg, params, extra)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data)
