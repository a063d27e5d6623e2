"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"NIFF"  u32 version  u32 meta_len  meta (UTF-8 JSON)  u32 n_records
    n_records x [u16 name_len  name  u8 dtype_len  dtype (numpy str, e.g. "<f4")
                 u8 ndim  ndim x u64 shape  u64 n_bytes  payload (row-major)]
"""
from __future__ import annotations

import io
import json
import struct

import numpy as np

MAGIC = b"NIFF"
VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(path, tensors: dict, metadata: dict):
    buf = io.BytesIO()
    meta = json.dumps(metadata, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        arr = arr.astype(dt, copy=False)
        dstr = dt.str.encode()
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<B", len(dstr)) + dstr)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload = arr.tobytes()
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path):
    """Return ``(tensors, metadata)``."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a NIFF checkpoint")
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads version {VERSION}")
    metadata = json.loads(r.take(meta_len).decode())
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (dlen,) = r.unpack("<B")
        dtype = np.dtype(r.take(dlen).decode())
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        (nbytes,) = r.unpack("<Q")
        if nbytes != int(np.prod(shape)) * dtype.itemsize:
            raise CheckpointError(f"{path}: record {name!r} has inconsistent size")
        tensors[name] = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape).copy()
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after last record")
    return tensors, metadata


# ------------------------------------------------------------- model state

def model_tensors(model, optimizer=None) -> dict:
    out = {f"param.{n}": p for n, p in model.named_parameters()}
    out.update({f"buffer.{n}": b for n, b in model.named_buffers()})
    for n, layer, _ in model.niff_layers():
        if layer.bank_override is not None:
            out[f"bank.{n}"] = layer.bank_override
    if optimizer is not None:
        out.update({f"momentum.{n}": v for n, v in optimizer.state.items()})
    return out


def load_model_tensors(model, tensors: dict, optimizer=None):
    """Copy checkpoint tensors into ``model`` in place, all-or-nothing."""
    targets = {f"param.{n}": p for n, p in model.named_parameters()}
    targets.update({f"buffer.{n}": b for n, b in model.named_buffers()})
    niff = {n: layer for n, layer, _ in model.niff_layers()}
    momentum = {}
    for name, arr in tensors.items():
        if name in targets:
            if targets[name].shape != arr.shape or targets[name].dtype != arr.dtype:
                raise CheckpointError(f"record {name!r}: {arr.dtype}{arr.shape} does not fit "
                                      f"{targets[name].dtype}{targets[name].shape}")
        elif name.startswith("bank.") and name[5:] in niff:
            pass
        elif name.startswith("momentum.") and optimizer is not None:
            momentum[name[9:]] = arr
        elif name.startswith("momentum."):
            pass
        else:
            raise CheckpointError(f"unknown record {name!r} for this model")
    missing = set(targets) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint lacks {len(missing)} records, e.g. {sorted(missing)[0]!r}")
    for name, arr in tensors.items():
        if name in targets:
            targets[name][...] = arr
        elif name.startswith("bank."):
            niff[name[5:]].bank_override = arr.copy()
    if optimizer is not None:
        optimizer.state = {k: v.copy() for k, v in momentum.items()}
