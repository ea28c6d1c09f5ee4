import json

import numpy as np
import pytest

from genq.errors import ConfigError, FormatError
from genq.harness import HEADER, ExperimentConfig, Report, loads, parse_report, read_report
from genq.harness.cli import main
from genq.harness.commands import (CORRUPT_ID_BASE, build_pool, check_ablation, clean_fraction,
                                   run_command)
from genq.harness.config import from_dict

TINY = {
    "version": 1, "name": "tiny", "n_keep": 32, "bits": [4, 4],
    "train": {"per_class": 20, "test_per_class": 5, "epochs": 1},
    "train_b": {"per_class": 10, "test_per_class": 5, "epochs": 1},
    "pool": {"n_gen": 160}, "quant": {"recon_iters": 5}, "qat": {"epochs": 1},
    "ablate": {"ratios": [0.1, 0.5], "quantize": False},
}


def write_config(tmp_path, **over):
    data = json.loads(json.dumps(TINY))
    for key, value in over.items():
        if isinstance(value, dict):
            data.setdefault(key, {}).update(value)
        else:
            data[key] = value
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    return path


# -- config ------------------------------------------------------------------

def test_config_round_trip():
    cfg = loads(json.dumps(TINY))
    assert loads(cfg.dumps()) == cfg
    assert cfg.w_bits == 4 and cfg.pool.n_gen == 160 and cfg.filter.alpha == 1.0


def test_defaults_match_recipe():
    cfg = ExperimentConfig()
    assert (cfg.filter.r1, cfg.filter.r2, cfg.filter.batch_size) == (0.5, 0.5, 64)
    assert cfg.qat.lr == 1e-3 and cfg.gen.guidance_scale == 3.5


@pytest.mark.parametrize("data,match", [
    ({"version": 1, "bitz": [4, 4]}, "unknown key"),
    ({"version": 1, "filter": {"r3": 0.1}}, "filter.r3"),
    ({"bits": [4, 4]}, "version"),
    ({"version": 2}, "version"),
    ({"version": 1, "bits": [5, 4]}, "bits"),
    ({"version": 1, "arch": "resnet"}, "arch"),
    ({"version": 1, "filter": {"r1": 1.0}}, "r1"),
    ({"version": 1, "n_keep": 900}, "n_keep"),
    ({"version": 1, "n_keep": "ten"}, "integer"),
    ({"version": 1, "seeds": []}, "seed"),
])
def test_config_rejections(data, match):
    with pytest.raises(ConfigError, match=match):
        from_dict(data)


def test_config_invalid_json():
    with pytest.raises(ConfigError):
        loads("{nope")


# -- reports -----------------------------------------------------------------

def test_report_csv_round_trip(tmp_path):
    rep = Report("exp")
    rep.add(0, "ptq", "acc", 0.5, -0.01)
    rep.add(1, "ptq", "acc", 0.25)
    rep.write(tmp_path / "r.csv")
    rows = read_report(tmp_path / "r.csv")
    assert [(r.seed, r.value, r.delta) for r in rows] == [(0, 0.5, -0.01), (1, 0.25, None)]
    assert (tmp_path / "r.timings.json").exists()
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == ",".join(HEADER)


@pytest.mark.parametrize("text", [
    "", "a,b\n", ",".join(HEADER) + "\n", ",".join(HEADER) + "\nx,0,s,m\n",
    ",".join(HEADER) + "\nx,zero,s,m,1.0,\n", ",".join(HEADER) + "\nx,0,s,m,nan,\n",
])
def test_report_schema_check(text):
    with pytest.raises(FormatError):
        parse_report(text)


# -- pools -------------------------------------------------------------------

def test_pool_mix_and_prefix():
    cfg = loads(json.dumps(TINY))
    pool = build_pool(cfg, 3)
    assert len(pool) == 160 and clean_fraction(pool.ids) == 0.5
    assert (pool.ids >= CORRUPT_ID_BASE).sum() == 80
    np.testing.assert_array_equal(build_pool(cfg, 3, size=40).ids, pool.ids[:40])
    assert not np.array_equal(build_pool(cfg, 4).ids, pool.ids)


def test_external_source_falls_back_to_synthesis(monkeypatch):
    monkeypatch.setenv("GENQ_ENDPOINT", "http://127.0.0.1:9")
    data = json.loads(json.dumps(TINY))
    data["pool"]["source"] = "external"
    data["gen"] = {"timeout": 2.0}
    cfg = from_dict(data)
    assert len(build_pool(cfg, 0)) == 160
    data["pool"]["fallback"] = None
    from genq.errors import TransportError
    with pytest.raises(TransportError):
        build_pool(from_dict(data), 0)


def test_ablation_pool_checked_upfront():
    data = json.loads(json.dumps(TINY))
    data["ablate"]["ratios"] = [0.9]
    with pytest.raises(ConfigError, match="pool"):
        check_ablation(from_dict(data))


# -- CLI ---------------------------------------------------------------------

def _rows(out, command):
    return (out / f"report-{command}.csv").read_text()


@pytest.mark.parametrize("command", ["train", "synth", "filter", "ptq", "qat", "ablate"])
def test_commands_are_reproducible(tmp_path, command, capsys):
    cfg = write_config(tmp_path)
    assert main([command, "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main([command, "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    first = _rows(tmp_path / "a", command)
    assert first == _rows(tmp_path / "b", command)
    assert len(parse_report(first)) >= 1


def test_transfer_grid(tmp_path):
    cfg = write_config(tmp_path, seeds=[0, 1])
    assert main(["transfer", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = [r for r in read_report(tmp_path / "o" / "report-transfer.csv") if r.stage == "transfer"]
    assert len(rows) == 8
    diag = [r for r in rows if "filter=tiny-cnn|quant=tiny-cnn" in r.metric or
            "filter=tiny-vit|quant=tiny-vit" in r.metric]
    assert all(r.delta == 0.0 for r in diag)


def test_transfer_diagonal_replays_ptq(tmp_path):
    cfg = write_config(tmp_path)
    main(["ptq", "--config", str(cfg), "--out", str(tmp_path / "o")])
    main(["transfer", "--config", str(cfg), "--out", str(tmp_path / "o")])
    ptq = [r for r in read_report(tmp_path / "o" / "report-ptq.csv") if r.stage == "ptq"][0]
    cell = [r for r in read_report(tmp_path / "o" / "report-transfer.csv")
            if r.metric.endswith("[filter=tiny-cnn|quant=tiny-cnn]")][0]
    assert cell.value == ptq.value


def test_ablate_row_counts(tmp_path):
    cfg = write_config(tmp_path, seeds=[0, 1], ablate={"quantize": True})
    assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = read_report(tmp_path / "o" / "report-ablate.csv")
    for stage in ("energy", "bn_sensitivity"):
        picked = [r for r in rows if r.stage == stage]
        assert len(picked) == 2 * 2 and all(0 <= r.value <= 1 for r in picked)


def test_vit_filter_reports_patch_entropy(tmp_path):
    cfg = write_config(tmp_path, arch="tiny-vit", train={"per_class": 10})
    assert main(["filter", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    meta = json.loads((tmp_path / "o" / "filter.json").read_text())
    assert meta["stage2"] == "patch_entropy" and meta["bandwidth"]["rule"] == "scott"


def test_identity_filter_manifest_is_pool(tmp_path):
    cfg = write_config(tmp_path, filter={"r1": 0.0, "r2": 0.0}, n_keep=10)
    assert main(["filter", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    ids = [int(x) for x in (tmp_path / "o" / "manifest.txt").read_text().split()]
    pool = build_pool(loads(cfg.read_text()), 0)
    assert ids == pool.ids.tolist()


def test_qat_zero_epochs_matches_ptq(tmp_path):
    cfg = write_config(tmp_path, qat={"epochs": 0})
    assert main(["qat", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = read_report(tmp_path / "o" / "report-qat.csv")
    ptq = [r.value for r in rows if r.stage == "ptq"]
    qat = [r for r in rows if r.stage == "qat"]
    assert qat[-1].value == ptq[-1] and qat[-1].delta == 0.0


def test_seed_override_and_pool_file(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["synth", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "o")]) == 0
    rows = read_report(tmp_path / "o" / "report-synth.csv")
    assert {r.seed for r in rows} == {5}
    cfg2 = write_config(tmp_path, paths={"pool": str(tmp_path / "o" / "pool.gqd")})
    assert main(["filter", "--config", str(cfg2), "--out", str(tmp_path / "p")]) == 0


def test_exit_codes(tmp_path, capsys):
    assert main(["ptq", "--config", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"version": 1, "nope": 1}')
    assert main(["ptq", "--config", str(bad)]) == 2
    assert main(["explode", "--config", str(bad)]) == 2
    cfg = write_config(tmp_path, paths={"model": str(tmp_path / "absent.gqm")})
    assert main(["filter", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert "genq" in capsys.readouterr().err


def test_budget_is_enforced(tmp_path):
    from genq.harness.commands import BudgetExceeded
    cfg = loads(json.dumps({**TINY, "budget_seconds": 1e-6}))
    with pytest.raises(BudgetExceeded):
        run_command("synth", cfg, tmp_path)
    assert main(["synth", "--config", str(write_config(tmp_path, budget_seconds=1e-6)),
                 "--out", str(tmp_path / "o")]) == 3
