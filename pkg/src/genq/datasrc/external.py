"""Client for an external text-to-image service speaking JSON over HTTP.

Protocol: ``POST <endpoint>/generate`` with ``{prompt, seed, guidance_scale,
steps}``; the reply is ``{width, height, pixels}`` where ``pixels`` is base64
of little-endian float32 RGB in row-major (H, W, 3) order.
"""
from __future__ import annotations

import base64
import binascii
import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import httpx
import numpy as np

from genq.datasrc.dataset import CLASS_NAMES, Dataset
from genq.datasrc.prompts import build_prompt, sample_prompt
from genq.errors import ContractError, TransportError

ENDPOINT_ENV = "GENQ_ENDPOINT"
DEFAULT_GUIDANCE = 3.5
TARGET = 32


@dataclass(frozen=True)
class GenRequest:
    prompt: str
    seed: int
    guidance_scale: float = DEFAULT_GUIDANCE
    steps: int = 50

    def __post_init__(self):
        if not self.guidance_scale > 0:
            raise ContractError(f"guidance scale must be positive, got {self.guidance_scale}")
        if self.steps < 1:
            raise ContractError(f"steps must be positive, got {self.steps}")
        if not 0 <= self.seed < 2 ** 64:
            raise ContractError("seed must fit in u64")

    @property
    def request_id(self) -> str:
        digest = hashlib.sha1(f"{self.seed}\0{self.prompt}".encode()).hexdigest()
        return f"gen-{digest[:12]}"

    def payload(self) -> dict:
        return {"prompt": self.prompt, "seed": self.seed,
                "guidance_scale": self.guidance_scale, "steps": self.steps}


def resolve_endpoint(configured: str | None = None) -> str:
    endpoint = os.environ.get(ENDPOINT_ENV) or configured
    if not endpoint:
        raise ContractError(f"no generation endpoint configured (set {ENDPOINT_ENV})")
    return endpoint.rstrip("/")


def _area_matrix(src: int, dst: int) -> np.ndarray:
    """Row i averages the source cells overlapping target cell i, weighted by overlap."""
    edges = np.arange(dst + 1) * (src / dst)
    lo, hi = edges[:-1, None], edges[1:, None]
    j = np.arange(src)[None, :]
    overlap = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None)
    return overlap / (src / dst)


def area_resize(img: np.ndarray, size: int = TARGET) -> np.ndarray:
    """(3, H, W) -> (3, size, size) by area averaging."""
    _, h, w = img.shape
    if (h, w) == (size, size):
        return img.astype(np.float32)
    rows, cols = _area_matrix(h, size), _area_matrix(w, size)
    return np.einsum("ih,chw,jw->cij", rows, img.astype(np.float64), cols).astype(np.float32)


def decode_image(body, request_id: str) -> np.ndarray:
    try:
        width, height = int(body["width"]), int(body["height"])
        raw = base64.b64decode(body["pixels"], validate=True)
    except (KeyError, TypeError, ValueError, binascii.Error) as exc:
        raise TransportError(f"malformed image payload: {exc}", request_id) from exc
    if width < 1 or height < 1 or len(raw) != width * height * 3 * 4:
        raise TransportError(f"payload holds {len(raw)} bytes for a {width}x{height} RGB image",
                             request_id)
    pixels = np.frombuffer(raw, dtype="<f4").reshape(height, width, 3)
    if not np.isfinite(pixels).all():
        raise TransportError("non-finite pixel values", request_id)
    return np.clip(pixels.transpose(2, 0, 1), 0.0, 1.0)


def generate_external(req: GenRequest, endpoint: str | None = None,
                      client: httpx.Client | None = None, timeout: float = 60.0) -> np.ndarray:
    """One image as a (3, 32, 32) float32 array."""
    url = resolve_endpoint(endpoint) + "/generate"
    rid = req.request_id
    own = client is None
    client = client or httpx.Client(timeout=timeout)
    try:
        resp = client.post(url, json=req.payload(), headers={"X-Request-ID": rid})
    except httpx.HTTPError as exc:
        raise TransportError(f"request to {url} failed: {exc}", rid) from exc
    finally:
        if own:
            client.close()
    if resp.status_code != 200:
        raise TransportError(f"{url} answered HTTP {resp.status_code}", rid)
    try:
        body = resp.json()
    except ValueError as exc:
        raise TransportError("response is not JSON", rid) from exc
    return area_resize(decode_image(body, rid))


def generate_pool(per_class: int, seed: int, endpoint: str | None = None,
                  class_names=CLASS_NAMES, style_token: str | None = None,
                  guidance_scale: float = DEFAULT_GUIDANCE, steps: int = 50,
                  parallel: int = 4, timeout: float = 60.0) -> Dataset:
    """Ask the service for ``per_class`` images of every class, classes interleaved."""
    if per_class < 1:
        raise ContractError("per_class must be positive")
    endpoint = resolve_endpoint(endpoint)
    jobs = []
    for k in range(per_class):
        for c, name in enumerate(class_names):
            spec = sample_prompt(name, seed * 1_000_003 + k, style_token)
            jobs.append((c, GenRequest(build_prompt(spec), (seed * 1_000_003 + k) % 2 ** 64,
                                       guidance_scale, steps)))
    with httpx.Client(timeout=timeout) as client, \
            ThreadPoolExecutor(max_workers=max(1, parallel)) as pool:
        images = list(pool.map(lambda job: generate_external(job[1], endpoint, client), jobs))
    return Dataset(np.stack(images), np.array([c for c, _ in jobs]), tuple(class_names),
                   provenance="external")
