"""Selection rules and the two-stage filtering pipeline."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from genq.datasrc.dataset import Dataset
from genq.errors import ContractError, RoutingError
from genq.filter.scores import (bn_sensitivities, energy_scores, patch_entropy,
                                patch_features, patch_similarity, KDE_GRID, MIN_BANDWIDTH)
from genq.nnkit.layers import Model
from genq.nnkit.serialize import model_bytes
from genq.nnkit.train import predict

CSV_HEADER = ("sample_id", "class", "energy", "stage2_score", "kept")
# leave-one-out differences below this are float noise and count as ties
SENSITIVITY_DECIMALS = 9


@dataclass
class ScoredSample:
    sample_id: int
    label: int
    energy: float
    stage2: float | None = None
    kept: bool = True


@dataclass
class FilterReport:
    records: list[ScoredSample]
    r1: float = 0.0
    r2: float = 0.0
    alpha: float = 1.0
    energy_form: str = "sum"
    stage2_kind: str = "none"
    batch_size: int | None = None
    bandwidths: list[float] = field(default_factory=list)

    @property
    def kept_ids(self) -> list[int]:
        return [r.sample_id for r in self.records if r.kept]

    def kept_dataset(self, pool: Dataset) -> Dataset:
        return pool.select_ids(self.kept_ids)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in self.records:
                w.writerow([r.sample_id, r.label, repr(float(r.energy)),
                            "" if r.stage2 is None else repr(float(r.stage2)), int(r.kept)])

    def write_manifest(self, path) -> None:
        Path(path).write_text("".join(f"{i}\n" for i in self.kept_ids))

    def sidecar(self, model: Model | None = None) -> dict:
        meta = {"r1": self.r1, "r2": self.r2, "alpha": self.alpha,
                "energy_form": self.energy_form, "stage2": self.stage2_kind,
                "batch_size": self.batch_size, "pool": len(self.records),
                "kept": len(self.kept_ids)}
        if self.stage2_kind == "patch_entropy":
            bw = np.asarray(self.bandwidths)
            meta["bandwidth"] = {"rule": "scott", "floor": MIN_BANDWIDTH, "grid": KDE_GRID,
                                 "min": float(bw.min()) if bw.size else None,
                                 "max": float(bw.max()) if bw.size else None}
        if model is not None:
            meta["model_sha256"] = hashlib.sha256(model_bytes(model)).hexdigest()
        return meta

    def write_sidecar(self, path, model: Model | None = None) -> None:
        Path(path).write_text(json.dumps(self.sidecar(model), indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> list[int]:
    return [int(line) for line in Path(path).read_text().split()]


def keep_count(n: int, r: float) -> int:
    if not 0 <= r < 1:
        raise ContractError(f"filtering ratio must lie in [0, 1), got {r}")
    return math.ceil(n * (1 - r) - 1e-9)


def _keep_per_class(records: list[ScoredSample], key, r: float) -> set[int]:
    """Ids of the ``ceil(n_c (1-r))`` records of each class ranked first by ``key``."""
    by_class: dict[int, list[ScoredSample]] = {}
    for rec in records:
        by_class.setdefault(rec.label, []).append(rec)
    keep: set[int] = set()
    for group in by_class.values():
        group = sorted(group, key=lambda rec: (key(rec), rec.sample_id))
        keep.update(rec.sample_id for rec in group[:keep_count(len(group), r)])
    return keep


def score_energy(pool: Dataset, model: Model, alpha: float = 1.0,
                 form: str = "sum") -> list[ScoredSample]:
    logits = predict(model, pool.images)
    energy = energy_scores(logits, alpha, form, ids=pool.ids)
    return [ScoredSample(int(i), int(c), float(e)) for i, c, e in zip(pool.ids, pool.labels, energy)]


def energy_filter(records: list[ScoredSample], r: float) -> FilterReport:
    """Per class, keep the lowest-energy share ``1 - r``; ties go to the lower id."""
    if not records:
        raise ContractError("cannot filter an empty pool")
    keep = _keep_per_class(records, lambda rec: rec.energy, r)
    for rec in records:
        rec.kept = rec.sample_id in keep
    return FilterReport(records, r1=r)


def bn_filter(pool: Dataset, records: list[ScoredSample], model: Model, r: float = 0.5,
              batch_size: int = 64) -> FilterReport:
    """Within arrival-order batches drop the ``ceil(B r)`` most BN-sensitive images.

    ``records`` must align with ``pool``; only records still marked kept
    take part, and their ``stage2`` field receives the sensitivity.
    """
    if batch_size < 2:
        raise ContractError("BN filtering needs batches of at least two images")
    if not model.bn_layers():
        raise RoutingError(f"{model.arch} has no BatchNorm layers; use patch filtering")
    keep_count(1, r)
    live = [k for k, rec in enumerate(records) if rec.kept]
    for start in range(0, len(live), batch_size):
        chunk = live[start:start + batch_size]
        if len(chunk) < 2:
            # a lone trailing image has no leave-one-out partner
            records[chunk[0]].stage2 = 0.0
            continue
        sens = np.round(bn_sensitivities(pool.images[chunk], model), SENSITIVITY_DECIMALS)
        for k, s in zip(chunk, sens):
            records[k].stage2 = float(s) + 0.0
        drop = len(chunk) - keep_count(len(chunk), r)
        order = sorted(chunk, key=lambda k: (records[k].stage2, records[k].sample_id))
        for k in order[len(order) - drop:] if drop else []:
            records[k].kept = False
    return FilterReport(records, r2=r, stage2_kind="bn_sensitivity", batch_size=batch_size)


def patch_filter(pool: Dataset, records: list[ScoredSample], model: Model,
                 r: float = 0.5) -> FilterReport:
    """Per class, keep the highest patch-entropy share ``1 - r`` of the surviving records."""
    if model.bn_layers():
        raise RoutingError(f"{model.arch} has BatchNorm layers; use BN-sensitivity filtering")
    keep_count(1, r)
    live = [k for k, rec in enumerate(records) if rec.kept]
    bandwidths = []
    if live:
        feats = patch_features(model, pool.images[live])
        for k, o in zip(live, feats):
            ent = patch_entropy(patch_similarity(o))
            records[k].stage2 = ent.value
            bandwidths.append(ent.bandwidth)
        keep = _keep_per_class([records[k] for k in live], lambda rec: -rec.stage2, r)
        for k in live:
            records[k].kept = records[k].sample_id in keep
    return FilterReport(records, r2=r, stage2_kind="patch_entropy", bandwidths=bandwidths)


def run_pipeline(pool: Dataset, model: Model, r1: float = 0.5, r2: float = 0.5,
                 alpha: float = 1.0, form: str = "sum", batch_size: int = 64) -> FilterReport:
    """Energy filtering, then BN sensitivity (BN models) or patch entropy (BN-free models)."""
    records = score_energy(pool, model, alpha, form)
    energy_filter(records, r1)
    if model.bn_layers():
        report = bn_filter(pool, records, model, r2, batch_size)
    else:
        report = patch_filter(pool, records, model, r2)
    report.r1, report.alpha, report.energy_form = r1, alpha, form
    return report
