"""Quantized model file: a ``GQM1`` model followed by one ``GQQ1`` section per parameter.

Section layout (little-endian): magic ``GQQ1``, u16 name length, name, u8 role
(0 weight, 1 activation), u8 bits, f32 s, i32 z, i32 n, i32 p, u8 stage,
u8 flags (bit0 v present, bit1 u present), u32 element count, then the
present payloads as f32.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from genq.errors import FormatError
from genq.nnkit.serialize import Reader, model_bytes, parse_model
from genq.quant.core import STAGES, QuantParam
from genq.quant.qmodel import QuantizedModel

QPARAM_MAGIC = b"GQQ1"
_ROLES = ("weight", "activation")


def _section(name: str, q: QuantParam) -> bytes:
    raw = name.encode()
    flags = (1 if q.v is not None else 0) | (2 if q.u is not None else 0)
    count = q.v.size if q.v is not None else (q.u.size if q.u is not None else 0)
    out = io.BytesIO()
    out.write(QPARAM_MAGIC)
    out.write(struct.pack("<H", len(raw)) + raw)
    out.write(struct.pack("<BBfiiiBBI", _ROLES.index(q.role), q.bits, q.s, q.z, q.n, q.p,
                          STAGES.index(q.stage), flags, count))
    for arr in (q.v, q.u):
        if arr is not None:
            out.write(np.asarray(arr, "<f4").tobytes())
    return out.getvalue()


def save_quantized(qm: QuantizedModel, path) -> None:
    parts = [model_bytes(qm.model)]
    parts += [_section(k, q) for k, q in qm.weights.items()]
    parts += [_section(k, q) for k, q in qm.acts.items()]
    Path(path).write_bytes(b"".join(parts))


def load_quantized(path) -> QuantizedModel:
    r = Reader(Path(path).read_bytes(), str(path))
    model = parse_model(r, stop_magic=QPARAM_MAGIC)
    weights, acts = {}, {}
    shapes = {layer.name: layer.weight.shape for layer in model.weight_layers()}
    while not r.done:
        if r.take(4) != QPARAM_MAGIC:
            raise FormatError(f"{path}: expected {QPARAM_MAGIC!r} section")
        (nlen,) = r.unpack("H")
        name = r.take(nlen).decode(errors="replace")
        role, bits, s, z, n, p, stage, flags, count = r.unpack("BBfiiiBBI")
        if role >= len(_ROLES) or stage >= len(STAGES):
            raise FormatError(f"{path}: bad role/stage code in section {name!r}")
        v = r.array((count,)) if flags & 1 else None
        u = r.array((count,)) if flags & 2 else None
        if role == 0:
            if name not in shapes:
                raise FormatError(f"{path}: quantization section for unknown layer {name!r}")
            v = v.reshape(shapes[name]) if v is not None else None
            u = u.reshape(shapes[name]) if u is not None else None
        try:
            q = QuantParam(bits, float(s), z, n, p, _ROLES[role], STAGES[stage], v=v, u=u)
        except Exception as exc:
            raise FormatError(f"{path}: invalid parameters in section {name!r}: {exc}") from exc
        (weights if role == 0 else acts)[name] = q
    if set(weights) != set(shapes):
        raise FormatError(f"{path}: weight sections do not cover every layer")
    bits_w = {q.bits for q in weights.values()}
    bits_a = {q.bits for q in acts.values()} or bits_w
    return QuantizedModel(model, min(bits_w), min(bits_a), weights, acts)
