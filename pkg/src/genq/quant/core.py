"""Uniform quantization primitives and per-tensor step calibration."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from genq.errors import ContractError, ParameterError, StageError

CALIBRATED = "calibrated"
RECONSTRUCTED = "reconstructed"
QAT = "qat-finetuned"
STAGES = (CALIBRATED, RECONSTRUCTED, QAT)

# candidate step multipliers: k/100 for k = 21..120; contains 1.0 exactly
GRID = np.arange(21, 121, dtype=np.float64) / 100.0


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Nearest integer, ties away from zero, exact for every finite float."""
    x = np.asarray(x)
    f = np.floor(x)
    d = x - f
    up = (d > 0.5) | ((d == 0.5) & (x > 0))
    return f + up


def int_bounds(bits: int) -> tuple[int, int]:
    """Unsigned asymmetric range ``[0, 2**bits - 1]``."""
    if not 2 <= bits <= 8:
        raise ParameterError(f"bits must be in 2..8, got {bits}")
    return 0, (1 << bits) - 1


def zero_point(minimum: float, s: float, n: int, p: int) -> int:
    return int(np.clip(-round_half_away(np.float32(minimum) / np.float32(s)), n, p))


@dataclass
class QuantParam:
    bits: int
    s: float
    z: int
    n: int
    p: int
    role: str = "weight"
    stage: str = CALIBRATED
    v: np.ndarray | None = None
    u: np.ndarray | None = None
    error: float = field(default=0.0, compare=False)

    def __post_init__(self):
        if not self.s > 0 or not np.isfinite(self.s):
            raise ParameterError(f"step size must be positive, got {self.s}")
        if not self.n < self.p:
            raise ParameterError(f"need n < p, got n={self.n}, p={self.p}")
        if not self.n <= self.z <= self.p:
            raise ParameterError(f"zero-point {self.z} outside [{self.n}, {self.p}]")
        if self.role not in ("weight", "activation"):
            raise ParameterError(f"unknown role {self.role!r}")
        if self.stage not in STAGES:
            raise ParameterError(f"unknown stage {self.stage!r}")

    @classmethod
    def for_tensor(cls, w: np.ndarray, s: float, bits: int, role: str = "weight") -> "QuantParam":
        n, p = int_bounds(bits)
        return cls(bits, float(np.float32(s)), zero_point(float(np.min(w)), s, n, p), n, p, role)

    @property
    def lo(self) -> float:
        return float(np.float32(self.s) * (self.n - self.z))

    @property
    def hi(self) -> float:
        return float(np.float32(self.s) * (self.p - self.z))

    def rounding_bits(self) -> np.ndarray:
        """Frozen up/down decision: 1 where the learned rounding goes up."""
        if self.v is None:
            raise StageError("no rounding variable; run reconstruction first")
        return (self.v >= 0).astype(np.float32)


def integer_code(w: np.ndarray, q: QuantParam) -> np.ndarray:
    """Pre-clip integer level (before adding the zero-point) for ``q.stage``."""
    s = np.float32(q.s)
    x = np.asarray(w, dtype=np.float32) / s
    if q.stage == CALIBRATED:
        return round_half_away(x)
    bits = q.rounding_bits()
    if bits.shape != x.shape:
        raise ContractError(f"rounding variable shape {bits.shape} != weight shape {x.shape}")
    base = np.floor(x) + bits
    if q.stage == QAT:
        if q.u is None:
            raise StageError("QAT stage without offset u")
        base = base + round_half_away(np.asarray(q.u, dtype=np.float32) / s)
    return base


def quantize(w: np.ndarray, q: QuantParam) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(w_int, w_q)`` for ``w`` under ``q``.

    ``w_int = clip(code + z, n, p)`` with the rounding rule of ``q.stage``,
    and ``w_q = s * (w_int - z)``.
    """
    if not q.s > 0:
        raise ParameterError(f"step size must be positive, got {q.s}")
    w_int = np.clip(integer_code(w, q) + q.z, q.n, q.p)
    w_q = (np.float32(q.s) * (w_int - q.z)).astype(np.float32)
    return w_int.astype(np.int32), w_q


def _grid_errors(w: np.ndarray, base: float, n: int, p: int, fixed_z: int | None):
    steps = (GRID * base).astype(np.float32)
    errs = np.empty(len(steps))
    zs = np.empty(len(steps), dtype=np.int64)
    wmin = float(np.min(w))
    for k, s in enumerate(steps):
        z = fixed_z if fixed_z is not None else zero_point(wmin, s, n, p)
        w_int = np.clip(round_half_away(w / s) + z, n, p)
        d = s * (w_int - z) - w
        errs[k] = float(np.dot(d, d))
        zs[k] = z
    return steps, zs, errs


def calibrate_step(w: np.ndarray, bits: int, role: str = "weight",
                   nonnegative: bool = False) -> QuantParam:
    """Grid-search the step size minimizing ``||w_q - w||^2``.

    The 100 candidates are ``k/100 * range/(p - n)`` for k = 21..120, where
    ``range`` spans ``[min(w, 0), max(w, 0)]``. With ``nonnegative`` the
    zero-point is pinned to ``n``. The achieved squared error is stored on
    the returned parameter as ``error``.
    """
    w = np.asarray(w, dtype=np.float32).reshape(-1)
    if w.size == 0:
        raise ContractError("cannot calibrate an empty tensor")
    n, p = int_bounds(bits)
    lo, hi = min(float(w.min()), 0.0), max(float(w.max()), 0.0)
    if hi - lo == 0.0:
        return QuantParam(bits, 1.0 / (p - n), n if nonnegative else 0, n, p, role, error=0.0)
    steps, zs, errs = _grid_errors(w, (hi - lo) / (p - n), n, p, n if nonnegative else None)
    k = int(np.argmin(errs))
    return QuantParam(bits, float(steps[k]), int(zs[k]), n, p, role, error=float(errs[k]))


def nearest_rounding_v(w: np.ndarray, q: QuantParam) -> np.ndarray:
    """Rounding variable whose frozen decision reproduces nearest rounding."""
    x = np.asarray(w, dtype=np.float32) / np.float32(q.s)
    up = round_half_away(x) - np.floor(x)
    return np.where(up > 0, 1.0, -1.0).astype(np.float32)
