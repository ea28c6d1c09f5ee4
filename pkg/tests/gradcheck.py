"""Central finite-difference checks shared by the unit and acceptance suites."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from genq.nnkit import ops
from genq.nnkit.autograd import Tape, Tensor, backward
from genq.quant.core import QAT, QuantParam, nearest_rounding_v
from genq.quant.fakequant import qat_weight, soft_rounding_weight

PROBES = 100
EPS = 1e-6
RTOL = 1e-3
ATOL = 1e-7


@dataclass
class Case:
    name: str
    inputs: list[np.ndarray]
    fn: object                      # list[Tensor] -> Tensor
    reference: object = None        # list[np.ndarray] -> np.ndarray, forward used for FD


def _loss(out: Tensor, proj: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(out, Tensor(proj, dtype=np.float64)))


def check(case: Case, seed: int = 0, probes: int = PROBES) -> tuple[int, int, float]:
    """Return (failures, probes, worst relative error) for one case."""
    gen = np.random.default_rng(seed)
    xs = [np.array(x, dtype=np.float64) for x in case.inputs]
    params = [Tensor(x, requires_grad=True, dtype=np.float64) for x in xs]
    with Tape() as tape:
        out = case.fn(params)
        proj = gen.standard_normal(out.shape)
        loss = _loss(out, proj)
    grads = backward(tape, loss, params)

    forward = case.reference or (lambda arrs: case.fn([Tensor(a, dtype=np.float64) for a in arrs]).data)

    def value(arrs):
        return float(np.sum(np.asarray(forward(arrs), dtype=np.float64) * proj))

    sizes = np.array([x.size for x in xs])
    fails, worst = 0, 0.0
    for _ in range(probes):
        which = int(gen.choice(len(xs), p=sizes / sizes.sum()))
        flat = int(gen.integers(xs[which].size))
        plus = [x.copy() for x in xs]
        minus = [x.copy() for x in xs]
        plus[which].reshape(-1)[flat] += EPS
        minus[which].reshape(-1)[flat] -= EPS
        fd = (value(plus) - value(minus)) / (2 * EPS)
        an = float(grads[which].reshape(-1)[flat])
        err = abs(an - fd)
        scale = max(abs(an), abs(fd))
        if err > RTOL * scale + ATOL:
            fails += 1
        worst = max(worst, err / scale if scale > 0 else err)
    return fails, probes, worst


def _away_from_zero(gen, shape, margin=0.05):
    x = gen.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _qparam(w: np.ndarray, bits: int = 4) -> QuantParam:
    lo, hi = min(w.min(), 0.0), max(w.max(), 0.0)
    return QuantParam.for_tensor(w, (hi - lo) / ((1 << bits) - 1), bits)


def cases(seed: int = 0) -> list[Case]:
    g = np.random.default_rng(seed)
    n = g.standard_normal
    labels = g.integers(0, 5, size=6)

    # soft rounding: keep floor(w/s) away from the clip range edges
    w_soft = n((4, 5)) * 0.3
    q_soft = _qparam(w_soft)
    w_qat = n((3, 6)) * 0.3
    q_qat = _qparam(w_qat)
    q_qat = QuantParam(q_qat.bits, q_qat.s, q_qat.z, q_qat.n, q_qat.p, stage=QAT,
                       v=nearest_rounding_v(w_qat, q_qat), u=np.zeros_like(w_qat))
    base = np.floor(w_qat / q_qat.s) + q_qat.rounding_bits() + q_qat.z
    # start strictly inside (n, p): codes sitting on a bound get nudged inward
    target = np.clip(base, q_qat.n + 0.3, q_qat.p - 0.3) + g.uniform(-0.2, 0.2, w_qat.shape)
    u0 = (target - base) * q_qat.s

    def qat_surrogate(arrs):
        (u,) = arrs
        t = base + u / q_qat.s
        return q_qat.s * (np.clip(t, q_qat.n, q_qat.p) - q_qat.z)

    return [
        Case("add", [n((3, 4)), n((4,))], lambda t: ops.add(*t)),
        Case("sub", [n((3, 4)), n((3, 1))], lambda t: ops.sub(*t)),
        Case("mul", [n((2, 3, 4)), n((3, 4))], lambda t: ops.mul(*t)),
        Case("matmul", [n((2, 3, 4)), n((4, 5))], lambda t: ops.matmul(*t)),
        Case("linear", [n((5, 6)), n((3, 6)), n((3,))], lambda t: ops.linear(*t)),
        Case("sum", [n((3, 4, 2))], lambda t: ops.sum(t[0], axis=1)),
        Case("mean", [n((3, 4, 2))], lambda t: ops.mean(t[0], axis=(0, 2), keepdims=True)),
        Case("reshape", [n((3, 4))], lambda t: ops.reshape(t[0], (2, 6))),
        Case("transpose", [n((2, 3, 4))], lambda t: ops.transpose(t[0], (2, 0, 1))),
        Case("index", [n((5, 3))], lambda t: ops.index(t[0], np.array([0, 2, 2, 4]))),
        Case("concat", [n((2, 3)), n((1, 3))], lambda t: ops.concat(list(t), axis=0)),
        Case("relu", [_away_from_zero(g, (4, 5))], lambda t: ops.relu(t[0])),
        Case("gelu", [n((4, 5)) * 2], lambda t: ops.gelu(t[0])),
        Case("softmax", [n((3, 5))], lambda t: ops.softmax(t[0], axis=-1)),
        Case("cross_entropy", [n((6, 5))], lambda t: ops.cross_entropy(t[0], labels)),
        Case("conv2d", [n((2, 3, 6, 6)), n((4, 3, 3, 3)), n((4,))],
             lambda t: ops.conv2d(t[0], t[1], t[2], stride=2, padding=1)),
        Case("batchnorm_train", [n((4, 3, 3, 3)), n((3,)), n((3,))],
             lambda t: ops.batchnorm_train(t[0], t[1], t[2], 1e-5)[0]),
        Case("batchnorm_eval", [n((2, 3, 2, 2)), n((3,)), n((3,))],
             lambda t: ops.batchnorm_eval(t[0], t[1], t[2], np.array([0.1, -0.2, 0.3]),
                                          np.array([1.5, 0.5, 2.0]), 1e-5)),
        Case("layernorm", [n((3, 4, 8)), n((8,)), n((8,))], lambda t: ops.layernorm(*t)),
        Case("attention", [n((2, 2, 4, 3)), n((2, 2, 4, 3)), n((2, 2, 4, 3))],
             lambda t: ops.attention(*t)[0]),
        Case("soft_rounding", [n(w_soft.shape)],
             lambda t: soft_rounding_weight(w_soft, q_soft, t[0])),
        Case("qat_ste", [u0], lambda t: qat_weight(w_qat, q_qat, t[0]), qat_surrogate),
    ]
