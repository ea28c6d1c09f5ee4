"""Per-sample scores used to pick in-distribution synthetic images."""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from genq.errors import ContractError, RoutingError, ScoringError
from genq.nnkit.autograd import Tensor
from genq.nnkit.layers import Context, Model

ENERGY_FORMS = ("sum", "logsumexp")
KDE_GRID = 512
MIN_BANDWIDTH = 1e-3


def energy_scores(logits: np.ndarray, alpha: float = 1.0, form: str = "sum",
                  ids: Sequence[int] | None = None) -> np.ndarray:
    """Energy of each row of ``logits`` (lower means more in-distribution).

    ``sum``: ``-alpha * sum_i exp(-f_i / alpha)``.
    ``logsumexp``: ``-alpha * log sum_i exp(f_i / alpha)``.
    Both factor out the extremal exponent and run in float64.
    """
    f = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if not alpha > 0:
        raise ContractError(f"temperature must be positive, got {alpha}")
    if f.shape[1] < 2:
        raise ContractError("energy needs at least two classes")
    if form not in ENERGY_FORMS:
        raise ContractError(f"unknown energy form {form!r}")
    bad = ~np.isfinite(f).all(axis=1)
    if bad.any():
        row = int(np.argmax(bad))
        who = ids[row] if ids is not None else row
        raise ScoringError(f"non-finite logit for sample {who}")
    if form == "sum":
        e = -f / alpha
        m = e.max(axis=1, keepdims=True)
        return -alpha * np.exp(m[:, 0]) * np.exp(e - m).sum(axis=1)
    e = f / alpha
    m = e.max(axis=1, keepdims=True)
    return -alpha * (m[:, 0] + np.log(np.exp(e - m).sum(axis=1)))


def energy_score(logits: np.ndarray, alpha: float = 1.0, form: str = "sum") -> float:
    return float(energy_scores(np.asarray(logits)[None, :], alpha, form)[0])


# -- BatchNorm statistics ----------------------------------------------------

BNStats = list[tuple[np.ndarray, np.ndarray]]


def bn_reference(model: Model) -> BNStats:
    """Running mean and standard deviation of every BN layer."""
    return [(bn.running_mean.astype(np.float64), np.sqrt(bn.running_var.astype(np.float64)))
            for bn in model.bn_layers()]


def bn_observe(model: Model, batch: np.ndarray) -> BNStats:
    """Batch mean and biased std entering every BN layer, running stats untouched.

    The pass runs in float64 so leave-one-out differences are not swamped by
    rounding noise.
    """
    if not model.bn_layers():
        raise RoutingError(f"{model.arch} has no BatchNorm layers")
    ctx = Context(train=True, update_stats=False)
    model.forward(Tensor(batch, dtype=np.float64), ctx)
    return [ctx.bn_observed[bn.name] for bn in model.bn_layers()]


def bn_distance(observed: BNStats, reference: BNStats) -> float:
    """Sum over layers of ``||mu_s - mu|| + ||sigma_s - sigma||``."""
    if len(observed) != len(reference):
        raise ContractError(f"{len(observed)} observed layers vs {len(reference)} reference layers")
    total = 0.0
    for k, ((mu_s, sd_s), (mu, sd)) in enumerate(zip(observed, reference)):
        if np.shape(mu_s) != np.shape(mu) or np.shape(sd_s) != np.shape(sd):
            raise ContractError(f"layer {k}: channel count mismatch {np.shape(mu_s)} vs {np.shape(mu)}")
        total += float(np.linalg.norm(np.asarray(mu_s, np.float64) - mu))
        total += float(np.linalg.norm(np.asarray(sd_s, np.float64) - sd))
    return total


def bn_sensitivities(batch: np.ndarray, model: Model) -> np.ndarray:
    """Leave-one-out change in BN distance for every image of ``batch``."""
    batch = np.asarray(batch)
    if len(batch) < 2:
        raise ContractError("BN sensitivity needs a batch of at least two images")
    ref = bn_reference(model)
    full = bn_distance(bn_observe(model, batch), ref)
    out = np.empty(len(batch))
    for i in range(len(batch)):
        rest = np.delete(batch, i, axis=0)
        out[i] = full - bn_distance(bn_observe(model, rest), ref)
    return out


def bn_sensitivity(batch: np.ndarray, model: Model, i: int) -> float:
    batch = np.asarray(batch)
    if len(batch) < 2:
        raise ContractError("BN sensitivity needs a batch of at least two images")
    if not 0 <= i < len(batch):
        raise ContractError(f"image index {i} outside batch of {len(batch)}")
    ref = bn_reference(model)
    full = bn_distance(bn_observe(model, batch), ref)
    return full - bn_distance(bn_observe(model, np.delete(batch, i, axis=0)), ref)


# -- patch similarity --------------------------------------------------------

class PatchEntropy(NamedTuple):
    value: float
    bandwidth: float


def patch_similarity(o: np.ndarray) -> np.ndarray:
    """Cosine similarity between every pair of patch vectors (rows of ``o``)."""
    o = np.asarray(o, dtype=np.float64)
    norms = np.linalg.norm(o, axis=1)
    if (norms == 0).any():
        raise ScoringError(f"patch {int(np.argmin(norms))} has zero norm")
    unit = o / norms[:, None]
    gamma = np.clip(unit @ unit.T, -1.0, 1.0)
    gamma = 0.5 * (gamma + gamma.T)
    np.fill_diagonal(gamma, 1.0)
    return gamma


def scott_bandwidth(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return max(sd * values.size ** (-0.2), MIN_BANDWIDTH)


def patch_entropy(gamma: np.ndarray) -> PatchEntropy:
    """Differential entropy (nats) of a Gaussian KDE over all entries of ``gamma``.

    Integrated with the trapezoid rule on 512 points spanning three
    bandwidths beyond the data range.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.ndim != 2 or gamma.shape[0] != gamma.shape[1] or gamma.shape[0] < 2:
        raise ContractError(f"need an N x N similarity matrix with N >= 2, got {gamma.shape}")
    vals = gamma.reshape(-1)
    h = scott_bandwidth(vals)
    grid = np.linspace(vals.min() - 3 * h, vals.max() + 3 * h, KDE_GRID)
    # collapse duplicates: the KDE only depends on the multiset of values
    uniq, counts = np.unique(vals, return_counts=True)
    z = (grid[:, None] - uniq[None, :]) / h
    dens = (np.exp(-0.5 * z * z) @ counts) / (vals.size * h * np.sqrt(2 * np.pi))
    integrand = np.where(dens > 0, dens * np.log(np.where(dens > 0, dens, 1.0)), 0.0)
    return PatchEntropy(float(-np.trapezoid(integrand, grid)), h)


def patch_features(model: Model, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Final transformer block output per image, class token dropped: (N, patches, D)."""
    if model.bn_layers():
        raise RoutingError(f"{model.arch} has BatchNorm layers; use BN-sensitivity filtering")
    site = model.feature_site
    if site is None:
        raise RoutingError(f"{model.arch} has no transformer blocks")
    out = []
    for i in range(0, len(images), batch_size):
        ctx = Context(capture=(site,))
        model.forward(images[i:i + batch_size], ctx)
        out.append(ctx.captured[site][:, 1:, :])
    return np.concatenate(out)
