"""Binary model checkpoints.

Layout (all integers little-endian)::

    b"SSEG"  u32 version
    u32 text_len  text          # utf-8: network description, then [model] and [optim] sections
    u32 array_count
    repeated: u16 name_len  name  u8 dtype_code  u8 ndim  u32 dims[ndim]  payload

Parameters are stored as little-endian float32 (code 1). float64 (code 2) and
int64 (code 3) are accepted so any in-memory model round-trips bit for bit.
Adam moments, when present, are stored as arrays named ``optim.m.<key>`` and
``optim.v.<key>``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import atomic_write
from .errors import FormatError
from .networks import ModelParams, NetworkSpec
from .training import OptimState

MAGIC = b"SSEG"
VERSION = 1

_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODE_OF = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.int64): 3}
_OPTIM_SCALARS = ("lr", "beta1", "beta2", "eps", "decay", "milestone", "step")


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: ModelParams
    optim: OptimState | None = None
    meta: dict[str, str] = field(default_factory=dict)


def _text(ckpt: Checkpoint) -> str:
    p = ckpt.params
    lines = [ckpt.spec.to_text().rstrip("\n"), "[model]", f"mode {p.mode}", f"leak {p.leak!r}", f"threshold {p.threshold!r}"]
    for k, v in ckpt.meta.items():
        if not k or any(c.isspace() for c in k) or "\n" in str(v):
            raise FormatError(f"meta entry {k!r} cannot be stored")
        lines.append(f"meta.{k} {v}")
    if ckpt.optim is not None:
        lines.append("[optim]")
        lines += [f"{name} {getattr(ckpt.optim, name)!r}" for name in _OPTIM_SCALARS]
    return "\n".join(lines) + "\n"


def _write_array(buf, name: str, arr: np.ndarray) -> None:
    code = _CODE_OF.get(arr.dtype)
    if code is None:
        raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)) + raw)
    buf.write(struct.pack("<BB", code, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())


def dumps(ckpt: Checkpoint) -> bytes:
    arrays = dict(ckpt.params.tensors)
    if ckpt.optim is not None:
        for k, v in ckpt.optim.m.items():
            arrays[f"optim.m.{k}"] = v
        for k, v in ckpt.optim.v.items():
            arrays[f"optim.v.{k}"] = v
    text = _text(ckpt).encode()
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(text)) + text)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        _write_array(buf, name, np.asarray(arr))
    return buf.getvalue()


def save(path: str | Path, ckpt: Checkpoint) -> None:
    atomic_write(path, dumps(ckpt))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    (tlen,) = r.unpack("<I")
    text = r.take(tlen).decode()
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, ndim = r.unpack("<BB")
        if code not in _CODES:
            raise FormatError(f"{name}: unknown dtype code {code}")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        dt = _CODES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(r.take(size), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(data):
        raise FormatError("trailing bytes after checkpoint payload")
    return _assemble(text, arrays)


def _assemble(text: str, arrays: dict[str, np.ndarray]) -> Checkpoint:
    net, _, rest = text.partition("[model]\n")
    model, _, optim_text = rest.partition("[optim]\n")
    spec = NetworkSpec.from_text(net)
    fields = {}
    meta = {}
    for line in model.splitlines():
        key, _, value = line.partition(" ")
        if key.startswith("meta."):
            meta[key[5:]] = value
        else:
            fields[key] = value
    try:
        tensors = {k: v for k, v in arrays.items() if not k.startswith("optim.")}
        params = ModelParams(fields["mode"], tensors, float(fields["leak"]), float(fields["threshold"]))
    except KeyError as exc:
        raise FormatError(f"checkpoint model section lacks {exc}") from None
    optim = None
    if optim_text:
        vals = dict(line.split(" ", 1) for line in optim_text.splitlines() if line)
        optim = OptimState(**{k: (int(vals[k]) if k == "step" else float(vals[k])) for k in _OPTIM_SCALARS})
        optim.m = {k[8:]: v for k, v in arrays.items() if k.startswith("optim.m.")}
        optim.v = {k[8:]: v for k, v in arrays.items() if k.startswith("optim.v.")}
    return Checkpoint(spec, params, optim, meta)


def load(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_bytes())
