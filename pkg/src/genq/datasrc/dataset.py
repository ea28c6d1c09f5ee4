"""Labelled image stacks and the ``GQD1`` dataset file."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from genq.errors import ContractError, FormatError

DATASET_MAGIC = b"GQD1"

CLASS_NAMES = (
    "red disk", "orange square", "yellow triangle", "lime cross", "green ring",
    "cyan disk", "azure square", "blue triangle", "purple cross", "magenta ring",
)

PROVENANCES = ("synthetic", "external", "real-scarce")


@dataclass
class Dataset:
    images: np.ndarray                  # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray                  # (N,) int64
    class_names: tuple[str, ...] = CLASS_NAMES
    provenance: str = "synthetic"
    ids: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ContractError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) < 1:
            raise ContractError("a dataset needs at least one image")
        if self.labels.min() < 0 or self.labels.max() >= len(self.class_names):
            raise ContractError("label outside the class range")
        if self.provenance not in PROVENANCES:
            raise ContractError(f"unknown provenance {self.provenance!r}")
        self.ids = (np.arange(len(self.labels), dtype=np.int64) if self.ids is None
                    else np.asarray(self.ids, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], self.class_names,
                       self.provenance, self.ids[index])

    def select_ids(self, ids) -> "Dataset":
        pos = {int(i): k for k, i in enumerate(self.ids)}
        return self.subset([pos[int(i)] for i in ids])

    @staticmethod
    def concat(parts: list["Dataset"], renumber: bool = True) -> "Dataset":
        first = parts[0]
        ids = None if renumber else np.concatenate([p.ids for p in parts])
        return Dataset(np.concatenate([p.images for p in parts]),
                       np.concatenate([p.labels for p in parts]),
                       first.class_names, first.provenance, ids)


def dataset_bytes(ds: Dataset) -> bytes:
    n, c, h, w = ds.images.shape
    out = io.BytesIO()
    out.write(DATASET_MAGIC)
    out.write(struct.pack("<IBHH", n, c, h, w))
    out.write(ds.labels.astype("<u2").tobytes())
    out.write(ds.images.astype("<f4").tobytes())
    meta = json.dumps({"class_names": list(ds.class_names), "provenance": ds.provenance,
                       "ids": ds.ids.tolist()}, separators=(",", ":")).encode()
    out.write(struct.pack("<I", len(meta)) + meta)
    return out.getvalue()


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def parse_dataset(buf: bytes, what: str = "dataset") -> Dataset:
    if buf[:4] != DATASET_MAGIC:
        raise FormatError(f"{what}: bad magic, expected {DATASET_MAGIC!r}")
    head = 4 + struct.calcsize("<IBHH")
    if len(buf) < head:
        raise FormatError(f"{what}: truncated header")
    n, c, h, w = struct.unpack("<IBHH", buf[4:head])
    lab_end = head + 2 * n
    img_end = lab_end + 4 * n * c * h * w
    if len(buf) < img_end:
        raise FormatError(f"{what}: truncated payload ({len(buf)} of {img_end} bytes)")
    labels = np.frombuffer(buf[head:lab_end], dtype="<u2").astype(np.int64)
    images = np.frombuffer(buf[lab_end:img_end], dtype="<f4").astype(np.float32).reshape(n, c, h, w)
    class_names, provenance, ids = CLASS_NAMES, "synthetic", None
    if len(buf) > img_end:
        # optional metadata trailer: u32 length + JSON
        if len(buf) < img_end + 4:
            raise FormatError(f"{what}: truncated metadata trailer")
        (mlen,) = struct.unpack("<I", buf[img_end:img_end + 4])
        raw = buf[img_end + 4:img_end + 4 + mlen]
        if len(raw) != mlen or len(buf) != img_end + 4 + mlen:
            raise FormatError(f"{what}: malformed metadata trailer")
        try:
            meta = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{what}: metadata is not JSON ({exc})") from exc
        class_names = tuple(meta.get("class_names", CLASS_NAMES))
        provenance = meta.get("provenance", "synthetic")
        ids = meta.get("ids")
    return Dataset(images, labels, class_names, provenance, ids)


def load_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes(), str(path))
