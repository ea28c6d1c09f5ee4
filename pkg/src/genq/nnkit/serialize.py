"""Binary model (``GQM1``) and tensor (``GQT1``) files. All fields little-endian."""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from genq.errors import FormatError
from genq.nnkit.layers import ARCHS, Model, build_model

MODEL_MAGIC = b"GQM1"
TENSOR_MAGIC = b"GQT1"
MODEL_VERSION = 1


class Reader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def peek(self, n: int) -> bytes:
        return self.buf[self.pos:self.pos + n]

    @property
    def done(self) -> bool:
        return self.pos >= len(self.buf)

    def array(self, dims) -> np.ndarray:
        count = int(np.prod(dims)) if len(dims) else 1
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)


def write_array(out: io.BufferedIOBase, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float32)
    out.write(struct.pack("<B", arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(arr.astype("<f4").tobytes())


def read_array(r: Reader) -> np.ndarray:
    (rank,) = r.unpack("B")
    dims = r.unpack(f"{rank}I")
    return r.array(dims)


def model_bytes(model: Model) -> bytes:
    out = io.BytesIO()
    out.write(MODEL_MAGIC)
    out.write(struct.pack("<H", MODEL_VERSION))
    tag = model.arch.encode()
    out.write(struct.pack("<B", len(tag)) + tag)
    for name, arr in model.state().items():
        raw = name.encode()
        out.write(struct.pack("<H", len(raw)) + raw)
        write_array(out, arr)
    return out.getvalue()


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(model_bytes(model))


def parse_model(r: Reader, stop_magic: bytes | None = None) -> Model:
    if r.take(4) != MODEL_MAGIC:
        raise FormatError(f"{r.what}: bad magic, expected {MODEL_MAGIC!r}")
    (version,) = r.unpack("H")
    if version != MODEL_VERSION:
        raise FormatError(f"{r.what}: unsupported model version {version}")
    (tlen,) = r.unpack("B")
    arch = r.take(tlen).decode(errors="replace")
    if arch not in ARCHS:
        raise FormatError(f"{r.what}: unknown architecture tag {arch!r}")
    state: dict[str, np.ndarray] = {}
    while not r.done and (stop_magic is None or r.peek(4) != stop_magic):
        (nlen,) = r.unpack("H")
        name = r.take(nlen).decode(errors="replace")
        state[name] = read_array(r)
    model = build_model(arch, seed=0)
    expected = model.state()
    missing = [k for k in expected if k not in state]
    if missing:
        raise FormatError(f"{r.what}: missing records {missing[:3]}{'...' if len(missing) > 3 else ''}")
    unknown = [k for k in state if k not in expected]
    if unknown:
        raise FormatError(f"{r.what}: unexpected records {unknown[:3]}")
    for k, arr in state.items():
        if arr.shape != expected[k].shape:
            raise FormatError(f"{r.what}: record {k} has shape {arr.shape}, expected {expected[k].shape}")
    model.load_state(state)
    return model


def load_model(path) -> Model:
    return parse_model(Reader(Path(path).read_bytes(), str(path)))


def save_tensor(arr: np.ndarray, path) -> None:
    out = io.BytesIO()
    out.write(TENSOR_MAGIC)
    write_array(out, arr)
    Path(path).write_bytes(out.getvalue())


def load_tensor(path) -> np.ndarray:
    r = Reader(Path(path).read_bytes(), str(path))
    if r.take(4) != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {TENSOR_MAGIC!r}")
    arr = read_array(r)
    if not r.done:
        raise FormatError(f"{path}: trailing bytes after tensor payload")
    return arr
