import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

import oracles
from genq.datasrc.dataset import Dataset
from genq.datasrc.synth import corrupt, synth_dataset
from genq.errors import ContractError, RoutingError, ScoringError
from genq.filter import (CSV_HEADER, ScoredSample, bn_distance, bn_filter, bn_observe,
                         bn_reference, bn_sensitivities, bn_sensitivity, energy_filter,
                         energy_score, energy_scores, keep_count, patch_entropy, patch_filter,
                         patch_similarity, read_manifest, run_pipeline, score_energy)
from genq.nnkit.serialize import model_bytes


# -- energy ------------------------------------------------------------------

def test_energy_examples():
    assert energy_score(np.zeros(10), 1.0) == pytest.approx(-10.0)
    assert energy_score(np.array([1.0, 2.0]), 1.0) == pytest.approx(-0.503215, abs=1e-6)
    assert energy_score(np.zeros(2), 2.0) == pytest.approx(-4.0)


def test_logsumexp_form():
    f = np.array([1.0, 2.0, 3.0])
    assert energy_score(f, 2.0, "logsumexp") == pytest.approx(-2 * math.log(sum(math.exp(x / 2) for x in f)))


def test_energy_is_stable_for_large_logits():
    assert np.isfinite(energy_score(np.array([800.0, -800.0]), 1.0, "logsumexp"))
    assert energy_score(np.array([800.0, 700.0]), 1.0) == pytest.approx(
        -(math.exp(-800) + math.exp(-700)), rel=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=12), st.floats(0.5, 5.0), st.data())
def test_energy_rises_with_any_logit(f, alpha, data):
    f = np.array(f)
    i = data.draw(st.integers(0, len(f) - 1))
    g = f.copy()
    g[i] += 0.5
    assert energy_score(g, alpha) > energy_score(f, alpha)
    assert energy_score(f, alpha) < 0
    assert energy_score(f, alpha) == pytest.approx(oracles.naive_energy(f, alpha), rel=1e-9)


@pytest.mark.parametrize("logits,alpha", [(np.zeros(1), 1.0), (np.zeros(3), 0.0), (np.zeros(3), -1.0)])
def test_energy_preconditions(logits, alpha):
    with pytest.raises(ContractError):
        energy_score(logits, alpha)


def test_non_finite_logit_names_sample():
    logits = np.zeros((3, 4))
    logits[1, 2] = np.nan
    with pytest.raises(ScoringError, match="sample 17"):
        energy_scores(logits, ids=[5, 17, 30])


def _records(scores, labels=None):
    labels = labels if labels is not None else [0] * len(scores)
    return [ScoredSample(i, c, e) for i, (c, e) in enumerate(zip(labels, scores))]


def test_energy_filter_hand_sort():
    report = energy_filter(_records([-3.0, -1.0, -2.0]), 1 / 3)
    assert report.kept_ids == [0, 2]


def test_energy_filter_per_class_selection(gen):
    labels = np.repeat(np.arange(3), 10)
    scores = gen.standard_normal(30)
    report = energy_filter(_records(scores, labels), 0.5)
    for c in range(3):
        kept = [r.energy for r in report.records if r.label == c and r.kept]
        dropped = [r.energy for r in report.records if r.label == c and not r.kept]
        assert len(kept) == 5 and max(kept) <= min(dropped)


def test_energy_filter_identity_and_ties():
    recs = _records([1.0, 1.0, 1.0, 1.0])
    assert energy_filter(recs, 0.0).kept_ids == [0, 1, 2, 3]
    assert energy_filter(recs, 0.5).kept_ids == [0, 1]


def test_energy_filter_errors():
    with pytest.raises(ContractError):
        energy_filter([], 0.5)
    with pytest.raises(ContractError):
        energy_filter(_records([1.0]), 1.0)


def test_keep_count():
    assert keep_count(10, 0.5) == 5
    assert keep_count(3, 1 / 3) == 2
    assert keep_count(7, 0.5) == 4


# -- BN statistics -----------------------------------------------------------

def test_bn_distance_examples():
    ref = [(np.zeros(2), np.ones(2))]
    assert bn_distance(ref, ref) == 0.0
    assert bn_distance([(np.array([3.0, 4.0]), np.ones(2))], ref) == pytest.approx(5.0)
    two_ref = ref + [(np.zeros(1), np.ones(1))]
    two_obs = [(np.array([3.0, 4.0]), np.ones(2)), (np.zeros(1), np.array([3.0]))]
    assert bn_distance(two_obs, two_ref) == pytest.approx(7.0)


def test_bn_distance_is_symmetric_and_matches_naive(gen):
    for _ in range(20):
        a = [(gen.standard_normal(4), gen.random(4)) for _ in range(3)]
        b = [(gen.standard_normal(4), gen.random(4)) for _ in range(3)]
        assert bn_distance(a, b) == pytest.approx(bn_distance(b, a))
        assert bn_distance(a, b) == pytest.approx(oracles.naive_bn_distance(a, b), rel=1e-12)


def test_bn_distance_channel_mismatch():
    with pytest.raises(ContractError):
        bn_distance([(np.zeros(2), np.ones(2))], [(np.zeros(3), np.ones(3))])
    with pytest.raises(ContractError):
        bn_distance([], [(np.zeros(3), np.ones(3))])


def test_bn_observation_leaves_running_stats(cnn, test_data):
    before = model_bytes(cnn)
    bn_observe(cnn, test_data.images[:8])
    assert model_bytes(cnn) == before


def test_identical_batch_has_zero_sensitivity(cnn, test_data):
    batch = np.repeat(test_data.images[:1], 16, axis=0)
    assert np.abs(bn_sensitivities(batch, cnn)).max() <= 1e-6


def test_sensitivity_recomputes_from_two_distances(cnn, test_data):
    ref = bn_reference(cnn)
    batch = test_data.images[:4]
    full = bn_distance(bn_observe(cnn, batch), ref)
    for i in range(4):
        expected = full - bn_distance(bn_observe(cnn, np.delete(batch, i, axis=0)), ref)
        assert bn_sensitivity(batch, cnn, i) == pytest.approx(expected, rel=1e-12)


def test_pair_batch_matches_two_distances(cnn, test_data):
    ref = bn_reference(cnn)
    pair = test_data.images[:2]
    full = bn_distance(bn_observe(cnn, pair), ref)
    for i in range(2):
        alone = bn_distance(bn_observe(cnn, pair[1 - i:2 - i]), ref)
        assert bn_sensitivity(pair, cnn, i) == pytest.approx(full - alone, rel=1e-12)
    with pytest.raises(ContractError):
        bn_sensitivity(test_data.images[:1], cnn, 0)


def test_sensitivity_permutes_with_batch(cnn, test_data):
    batch = test_data.images[:6]
    perm = np.array([3, 0, 5, 1, 4, 2])
    np.testing.assert_allclose(bn_sensitivities(batch[perm], cnn), bn_sensitivities(batch, cnn)[perm],
                               rtol=1e-9, atol=1e-12)


def test_sensitivity_preconditions(cnn, vit, test_data):
    with pytest.raises(ContractError):
        bn_sensitivity(test_data.images[:3], cnn, 3)
    with pytest.raises(RoutingError):
        bn_sensitivity(test_data.images[:3], vit, 0)


def _pool(images, labels=None):
    labels = np.zeros(len(images), int) if labels is None else labels
    return Dataset(images, labels)


def test_bn_filter_drops_most_sensitive(cnn, test_data):
    pool = _pool(test_data.images[:4], test_data.labels[:4])
    recs = [ScoredSample(i, int(c), 0.0) for i, c in zip(pool.ids, pool.labels)]
    report = bn_filter(pool, recs, cnn, r=0.5, batch_size=4)
    sens = bn_sensitivities(pool.images, cnn)
    assert sorted(report.kept_ids) == sorted(np.argsort(sens)[:2].tolist())


def test_bn_filter_identical_pool_keeps_lowest_ids(cnn, test_data):
    pool = _pool(np.repeat(test_data.images[:1], 8, axis=0))
    recs = [ScoredSample(i, 0, 0.0) for i in range(8)]
    report = bn_filter(pool, recs, cnn, 0.5, batch_size=8)
    assert report.kept_ids == [0, 1, 2, 3]
    assert all(r.stage2 == 0.0 for r in report.records)


def test_bn_filter_identity_and_small_pool(cnn, test_data):
    pool = _pool(test_data.images[:5])
    recs = [ScoredSample(i, 0, 0.0) for i in range(5)]
    assert bn_filter(pool, recs, cnn, 0.0, batch_size=64).kept_ids == [0, 1, 2, 3, 4]
    assert all(r.stage2 is not None for r in recs)


# -- patch similarity and entropy --------------------------------------------

def test_patch_similarity_examples():
    g = patch_similarity(np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 2.0]]))
    assert g[0, 1] == pytest.approx(1 / math.sqrt(2), abs=1e-5)
    assert g[0, 2] == 0.0
    np.testing.assert_array_equal(np.diag(g), 1.0)


def test_patch_similarity_properties(gen):
    for _ in range(20):
        o = gen.standard_normal((6, 4))
        g = patch_similarity(o)
        assert np.array_equal(g, g.T) and g.min() >= -1 and g.max() <= 1
        np.testing.assert_allclose(g, oracles.naive_cosine_matrix(o.tolist()), rtol=1e-12, atol=1e-14)


def test_zero_patch_is_named():
    with pytest.raises(ScoringError, match="patch 1"):
        patch_similarity(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_constant_similarity_entropy_is_kernel_entropy():
    h = patch_entropy(np.ones((4, 4)))
    assert h.bandwidth == 1e-3
    phi = lambda x: math.exp(-0.5 * (x / h.bandwidth) ** 2) / (h.bandwidth * math.sqrt(2 * math.pi))
    truncated = quad(lambda x: -phi(x) * math.log(phi(x)), -3 * h.bandwidth, 3 * h.bandwidth,
                     points=[0.0])[0]
    assert h.value == pytest.approx(truncated, abs=1e-5)
    assert h.value == pytest.approx(0.5 * math.log(2 * math.pi * math.e * h.bandwidth ** 2), abs=0.02)


def test_spread_beats_point_mass_at_equal_bandwidth(gen):
    spread = patch_similarity(gen.standard_normal((6, 3)))
    assert patch_entropy(spread).value > patch_entropy(np.ones((6, 6))).value


def test_entropy_invariant_under_patch_permutation(gen):
    o = gen.standard_normal((7, 5))
    perm = gen.permutation(7)
    assert patch_entropy(patch_similarity(o[perm])).value == pytest.approx(
        patch_entropy(patch_similarity(o)).value, rel=1e-12)


def test_entropy_matches_scipy_kde(gen):
    for _ in range(10):
        g = patch_similarity(gen.standard_normal((8, 4)))
        assert patch_entropy(g).value == pytest.approx(oracles.naive_patch_entropy(g), rel=1e-9)


def test_entropy_needs_two_patches():
    with pytest.raises(ContractError):
        patch_entropy(np.ones((1, 1)))


def test_patch_filter_routes_and_selects(cnn, vit, test_data):
    pool = _pool(test_data.images[:20], test_data.labels[:20])
    recs = [ScoredSample(int(i), int(c), 0.0) for i, c in zip(pool.ids, pool.labels)]
    with pytest.raises(RoutingError):
        patch_filter(pool, recs, cnn, 0.5)
    report = patch_filter(pool, recs, vit, 0.5)
    kept = [r.stage2 for r in report.records if r.kept]
    dropped = [r.stage2 for r in report.records if not r.kept]
    assert np.mean(kept) >= np.mean(dropped)
    assert len(report.bandwidths) == 20
    recs = [ScoredSample(int(i), int(c), 0.0) for i, c in zip(pool.ids, pool.labels)]
    assert patch_filter(pool, recs, vit, 0.0).kept_ids == list(range(20))


def test_patch_filter_prefers_diverse_image(vit):
    flat = np.full((1, 3, 32, 32), 0.5, np.float32)
    busy = synth_dataset(1, 3).images[:1]
    pool = _pool(np.concatenate([flat, busy]))
    recs = [ScoredSample(0, 0, 0.0), ScoredSample(1, 0, 0.0)]
    report = patch_filter(pool, recs, vit, 0.5)
    assert report.kept_ids == [1]


# -- pipeline ----------------------------------------------------------------

def test_pipeline_identity(cnn, test_data):
    pool = test_data.subset(np.arange(30))
    report = run_pipeline(pool, cnn, 0.0, 0.0)
    assert report.kept_ids == list(range(30))


def test_pipeline_routing(cnn, vit, test_data):
    pool = test_data.subset(np.arange(20))
    assert run_pipeline(pool, cnn, 0.5, 0.5).stage2_kind == "bn_sensitivity"
    assert run_pipeline(pool, vit, 0.5, 0.5).stage2_kind == "patch_entropy"


def test_pipeline_count(vit):
    pool = synth_dataset(40, 8)
    report = run_pipeline(pool, vit, 0.5, 0.5)
    kept_labels = pool.select_ids(report.kept_ids).labels
    assert np.bincount(kept_labels, minlength=10).tolist() == [10] * 10
    assert len(report.kept_ids) == math.ceil(len(pool) * 0.25)


def test_pipeline_is_idempotent_on_its_output(vit):
    pool = synth_dataset(8, 21)
    first = run_pipeline(pool, vit, 0.5, 0.0)
    kept = pool.select_ids(first.kept_ids)
    again = run_pipeline(kept, vit, 0.0, 0.0)
    assert again.kept_ids == first.kept_ids


def test_energy_separates_corrupted_images(cnn):
    clean = synth_dataset(10, 31)
    bad = corrupt(synth_dataset(10, 32), 5, 1)
    e_clean = np.mean([r.energy for r in score_energy(clean, cnn)])
    e_bad = np.mean([r.energy for r in score_energy(bad, cnn)])
    assert e_bad > e_clean


def test_report_files(tmp_path, cnn, test_data):
    pool = test_data.subset(np.arange(20))
    report = run_pipeline(pool, cnn, 0.5, 0.5)
    report.write_csv(tmp_path / "f.csv")
    report.write_manifest(tmp_path / "m.txt")
    report.write_sidecar(tmp_path / "f.json", cnn)
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER) and len(lines) == 21
    assert read_manifest(tmp_path / "m.txt") == report.kept_ids
    import json
    meta = json.loads((tmp_path / "f.json").read_text())
    assert meta["r1"] == 0.5 and meta["alpha"] == 1.0 and len(meta["model_sha256"]) == 64
