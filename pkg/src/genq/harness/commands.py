"""Experiment runners behind the CLI sub-commands."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from genq import rng
from genq.datasrc.dataset import Dataset, load_dataset, save_dataset
from genq.datasrc.external import generate_pool
from genq.datasrc.synth import corrupt, synth_dataset
from genq.errors import ConfigError, GenqError, TransportError
from genq.filter.pipeline import FilterReport, run_pipeline
from genq.harness.config import ExperimentConfig, TrainConfig
from genq.harness.report import Report
from genq.nnkit.layers import Model, build_model
from genq.nnkit.serialize import load_model, save_model
from genq.nnkit.train import train_float
from genq.quant.qat import qat_finetune
from genq.quant.qmodel import QuantizedModel, calibrate_activations, evaluate
from genq.quant.reconstruct import reconstruct_all
from genq.quant.serialize import save_quantized

log = logging.getLogger(__name__)

CORRUPT_ID_BASE = 1_000_000
COMMANDS = ("train", "synth", "filter", "ptq", "qat", "ablate", "transfer")


class BudgetExceeded(GenqError):
    """A command ran past its wall-clock budget."""


@dataclass
class RunContext:
    cfg: ExperimentConfig
    out: Path
    report: Report

    def path(self, stem: str, seed: int, suffix: str) -> Path:
        tag = f"-s{seed}" if len(self.cfg.seeds) > 1 else ""
        return self.out / f"{stem}{tag}{suffix}"


# -- data --------------------------------------------------------------------

def holdout_set(cfg: ExperimentConfig, seed: int) -> Dataset:
    return synth_dataset(cfg.train.test_per_class, rng.derive(seed, "test-data"))


def _take(ds: Dataset, n: int) -> Dataset:
    return ds.subset(np.arange(min(n, len(ds))))


def build_pool(cfg: ExperimentConfig, seed: int, size: int | None = None) -> Dataset:
    """Candidate pool mixing clean and corrupted images in a seeded arrival order.

    Corrupted candidates carry ids offset by ``CORRUPT_ID_BASE`` so audits can
    tell them apart. ``size`` takes a prefix of the full ``pool.n_gen`` pool.
    """
    p = cfg.pool
    n_clean = int(round(p.n_gen * p.clean_fraction))
    n_bad = p.n_gen - n_clean
    clean = None
    if p.source == "external":
        try:
            g = cfg.gen
            clean = generate_pool(math.ceil(n_clean / 10), rng.derive(seed, "pool-clean"),
                                  g.endpoint, style_token=g.style_token,
                                  guidance_scale=g.guidance_scale, steps=g.steps,
                                  parallel=g.parallel, timeout=g.timeout)
        except TransportError as exc:
            if p.fallback is None:
                raise
            log.warning("external generation failed (%s); falling back to synthesis", exc)
    if clean is None:
        clean = synth_dataset(math.ceil(n_clean / 10), rng.derive(seed, "pool-clean"))
    parts = [_take(clean, n_clean)]
    if n_bad:
        src = _take(synth_dataset(math.ceil(n_bad / 10), rng.derive(seed, "pool-corrupt")), n_bad)
        bad = corrupt(src, p.severity, rng.derive(seed, "corrupt"))
        bad.ids = bad.ids + CORRUPT_ID_BASE
        parts.append(bad)
    pool = Dataset.concat(parts, renumber=False)
    pool.provenance = parts[0].provenance
    order = rng.stream(seed, "pool-order").permutation(len(pool))
    if size is not None:
        order = order[:size]
    return pool.subset(order)


def clean_fraction(ids) -> float:
    ids = np.asarray(ids)
    return float(np.mean(ids < CORRUPT_ID_BASE)) if ids.size else 0.0


def load_pool(cfg: ExperimentConfig, seed: int) -> Dataset:
    return load_dataset(cfg.paths.pool) if cfg.paths.pool else build_pool(cfg, seed)


# -- models ------------------------------------------------------------------

def _train_cfg(cfg: ExperimentConfig, arch: str) -> TrainConfig:
    return cfg.train if arch == cfg.arch else cfg.train_b


def train_model(arch: str, tcfg: TrainConfig, seed: int, history: list | None = None) -> Model:
    model_seed = tcfg.seed if tcfg.seed is not None else seed
    model = build_model(arch, rng.derive(model_seed, "init"))
    data = synth_dataset(tcfg.per_class, rng.derive(model_seed, "train-data"))
    return train_float(model, data, tcfg.epochs, tcfg.lr, rng.derive(model_seed, "order"),
                       history=history)


def obtain_model(run: RunContext, arch: str, seed: int) -> Model:
    """Load the configured model file, or train (and cache) a baseline."""
    cfg = run.cfg
    given = cfg.paths.model if arch == cfg.arch else cfg.paths.model_b
    if given:
        return load_model(given)
    tcfg = _train_cfg(cfg, arch)
    key = hashlib.sha256(json.dumps([arch, asdict(tcfg)], sort_keys=True).encode()).hexdigest()[:12]
    model_seed = tcfg.seed if tcfg.seed is not None else seed
    cache = run.out / "models" / f"{arch}-s{model_seed}-{key}.gqm"
    if cache.exists():
        return load_model(cache)
    cache.parent.mkdir(parents=True, exist_ok=True)
    model = train_model(arch, tcfg, seed)
    save_model(model, cache)
    return model


# -- building blocks ---------------------------------------------------------

def filter_pool(cfg: ExperimentConfig, pool: Dataset, model: Model,
                r1: float | None = None, r2: float | None = None) -> FilterReport:
    f = cfg.filter
    return run_pipeline(pool, model, f.r1 if r1 is None else r1, f.r2 if r2 is None else r2,
                        f.alpha, f.energy_form, f.batch_size)


def ptq(cfg: ExperimentConfig, model: Model, calib: Dataset, seed: int) -> QuantizedModel:
    qm = QuantizedModel.calibrate(model, cfg.w_bits, cfg.a_bits)
    calibrate_activations(qm, calib)
    return reconstruct_all(qm, calib, cfg.quant.recon_iters, seed=rng.derive(seed, "recon"))


def calibration_set(cfg: ExperimentConfig, pool: Dataset, model: Model, seed: int,
                    size: int | None = None) -> tuple[Dataset, FilterReport]:
    report = filter_pool(cfg, pool, model)
    kept = report.kept_dataset(pool)
    size = cfg.n_keep if size is None else size
    if len(kept) < size:
        raise ConfigError(f"filtering kept {len(kept)} images, fewer than the {size} requested")
    return _take(kept, size), report


# -- commands ----------------------------------------------------------------

def cmd_train(run: RunContext, seed: int) -> None:
    cfg = run.cfg
    history: list = []
    model = train_model(cfg.arch, cfg.train, seed, history)
    save_model(model, run.path("model", seed, ".gqm"))
    for row in history:
        run.report.add(seed, "train", f"loss@epoch={row['epoch']}", row["loss"])
    run.report.add(seed, "train", "float_acc", evaluate(model, holdout_set(cfg, seed)))


def cmd_synth(run: RunContext, seed: int) -> None:
    pool = build_pool(run.cfg, seed)
    save_dataset(pool, run.path("pool", seed, ".gqd"))
    run.report.add(seed, "synth", "pool_size", len(pool))
    run.report.add(seed, "synth", "clean_fraction", clean_fraction(pool.ids))


def _write_filter(run: RunContext, seed: int, report: FilterReport, model: Model) -> None:
    report.write_csv(run.path("filter", seed, ".csv"))
    report.write_sidecar(run.path("filter", seed, ".json"), model)
    report.write_manifest(run.path("manifest", seed, ".txt"))


def cmd_filter(run: RunContext, seed: int) -> None:
    cfg = run.cfg
    model = obtain_model(run, cfg.arch, seed)
    pool = load_pool(cfg, seed)
    report = filter_pool(cfg, pool, model)
    _write_filter(run, seed, report, model)
    run.report.add(seed, "filter", "pool_size", len(pool))
    run.report.add(seed, "filter", "kept", len(report.kept_ids))
    run.report.add(seed, "filter", "kept_clean_fraction", clean_fraction(report.kept_ids))


def _ptq_rows(run: RunContext, seed: int) -> tuple[Model, QuantizedModel, Dataset, float, float]:
    cfg = run.cfg
    model = obtain_model(run, cfg.arch, seed)
    test = holdout_set(cfg, seed)
    float_acc = evaluate(model, test)
    run.report.add(seed, "float", "accuracy", float_acc)
    pool = load_pool(cfg, seed)
    sizes = cfg.quant.calib_sizes or [cfg.n_keep]
    full, report = calibration_set(cfg, pool, model, seed, max(sizes))
    _write_filter(run, seed, report, model)
    tag = f"W{cfg.w_bits}A{cfg.a_bits}"
    qm = calib = acc = None
    for size in sizes:
        calib = _take(full, size)
        qm = ptq(cfg, model, calib, seed)
        acc = evaluate(qm, test)
        run.report.add(seed, "ptq", f"{tag}_acc@calib={size}", acc, acc - float_acc)
    save_quantized(qm, run.path(f"quantized-{tag}", seed, ".gqm"))
    return model, qm, calib, float_acc, acc


def cmd_ptq(run: RunContext, seed: int) -> None:
    _ptq_rows(run, seed)


def cmd_qat(run: RunContext, seed: int) -> None:
    cfg = run.cfg
    _, qm, calib, _, ptq_acc = _ptq_rows(run, seed)
    history: list = []
    qat_finetune(qm, calib, cfg.qat.epochs, cfg.qat.lr, rng.derive(seed, "qat"),
                 cfg.qat.batch_size, history=history)
    for row in history:
        run.report.add(seed, "qat", f"loss@epoch={row['epoch']}", row["loss"])
    acc = evaluate(qm, holdout_set(cfg, seed))
    run.report.add(seed, "qat", f"W{cfg.w_bits}A{cfg.a_bits}_acc", acc, acc - ptq_acc)
    save_quantized(qm, run.path(f"qat-W{cfg.w_bits}A{cfg.a_bits}", seed, ".gqm"))


def ablation_pool_size(n_keep: int, r: float, r_other: float) -> int:
    return math.ceil(n_keep / ((1 - r) * (1 - r_other)) - 1e-9)


def check_ablation(cfg: ExperimentConfig) -> None:
    f = cfg.filter
    need = max(max(ablation_pool_size(cfg.n_keep, r, f.r2), ablation_pool_size(cfg.n_keep, f.r1, r))
               for r in cfg.ablate.ratios)
    if need > cfg.pool.n_gen:
        raise ConfigError(f"ablation needs a pool of {need} images at the highest ratio; "
                          f"pool.n_gen is {cfg.pool.n_gen}")


def cmd_ablate(run: RunContext, seed: int) -> None:
    cfg = run.cfg
    model = obtain_model(run, cfg.arch, seed)
    test = holdout_set(cfg, seed)
    full = build_pool(cfg, seed)
    stage2 = "bn_sensitivity" if model.bn_layers() else "patch_entropy"
    for stage in ("energy", stage2):
        for r in cfg.ablate.ratios:
            r1, r2 = (r, cfg.filter.r2) if stage == "energy" else (cfg.filter.r1, r)
            pool = _take(full, ablation_pool_size(cfg.n_keep, r1, r2))
            report = filter_pool(cfg, pool, model, r1, r2)
            kept = _take(report.kept_dataset(pool), cfg.n_keep)
            run.report.add(seed, f"audit:{stage}", f"clean_fraction@r={r}", clean_fraction(kept.ids))
            if cfg.ablate.quantize:
                acc = evaluate(ptq(cfg, model, kept, seed), test)
                run.report.add(seed, stage, f"ptq_acc@r={r}", acc)


def cmd_transfer(run: RunContext, seed: int) -> None:
    cfg = run.cfg
    archs = (cfg.arch, cfg.arch_b)
    models = {a: obtain_model(run, a, seed) for a in archs}
    test = holdout_set(cfg, seed)
    pool = load_pool(cfg, seed)
    calib = {a: calibration_set(cfg, pool, models[a], seed)[0] for a in archs}
    for a in archs:
        run.report.add(seed, "float", f"accuracy[{a}]", evaluate(models[a], test))
    tag = f"W{cfg.w_bits}A{cfg.a_bits}"
    for quant_arch in archs:
        diag = evaluate(ptq(cfg, models[quant_arch], calib[quant_arch], seed), test)
        for filter_arch in archs:
            acc = diag if filter_arch == quant_arch else \
                evaluate(ptq(cfg, models[quant_arch], calib[filter_arch], seed), test)
            run.report.add(seed, "transfer", f"{tag}_acc[filter={filter_arch}|quant={quant_arch}]",
                           acc, acc - diag)


RUNNERS = {"train": cmd_train, "synth": cmd_synth, "filter": cmd_filter, "ptq": cmd_ptq,
           "qat": cmd_qat, "ablate": cmd_ablate, "transfer": cmd_transfer}


def run_command(name: str, cfg: ExperimentConfig, out) -> Report:
    """Run ``name`` for every configured seed, write ``report-<name>.csv`` and enforce the budget."""
    if name not in RUNNERS:
        raise ConfigError(f"unknown command {name!r}")
    if name == "ablate":
        check_ablation(cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    run = RunContext(cfg, out, Report(f"{cfg.name}:{name}"))
    (out / f"config-{name}.json").write_text(cfg.dumps())
    start = time.perf_counter()
    for seed in cfg.seeds:
        RUNNERS[name](run, seed)
        run.report.write(out / f"report-{name}.csv")
    elapsed = time.perf_counter() - start
    if elapsed > cfg.budget_seconds:
        raise BudgetExceeded(f"{name} took {elapsed:.1f}s, over the {cfg.budget_seconds:.0f}s budget")
    return run.report
