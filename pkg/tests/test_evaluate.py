import dataclasses as dc
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geovista.config import TrainConfig
from geovista.evaluate import (EmbeddingTable, ProbeError, baseline_embeddings, default_ridge,
                               extract_embeddings, extraction_set, fit_probe, grouped_mean, pca,
                               r_squared, random_split, region_holdout_split, ridge_fit,
                               tract_vision_means)
from geovista.geo import pairwise_distance_km
from geovista.training import build_joint_model, joint_train

import oracles
from conftest import small_model_config


# ---------------------------------------------------------------------- R2

def test_r2_examples():
    assert r_squared([0, 1, 2], [0, 1, 1]) == pytest.approx(0.5, abs=1e-15)
    y = np.array([1.0, 4.0, 2.0])
    assert r_squared(y, y) == 1.0
    assert r_squared(y, np.full(3, y.mean())) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        r_squared([1.0, 1.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        r_squared([1.0], [1.0])


# ------------------------------------------------------------------- probes

def test_hand_solved_probe():
    x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    coef, b = ridge_fit(x, np.array([1.0, 2.0, 3.0]), 0.0)
    np.testing.assert_allclose(coef, [1.0, 2.0], atol=1e-12)
    assert b == pytest.approx(0.0, abs=1e-12)


def test_exact_linear_target_gives_r2_one(rng):
    x = rng.normal(size=(60, 4))
    y = x @ np.array([0.5, -1.0, 2.0, 0.1]) + 3.0
    res = fit_probe(x, y, np.arange(40), np.arange(40, 60), lam=0.0)
    assert res.r2_test == pytest.approx(1.0, abs=1e-9)
    assert res.n_train == 40 and res.split == "random"


def test_noise_target_does_not_generalise(rng):
    x = rng.normal(size=(400, 3))
    y = rng.normal(size=400)
    assert fit_probe(x, y, np.arange(300), np.arange(300, 400)).r2_test <= 0.05


def test_singular_design_at_zero_ridge(rng):
    x = rng.normal(size=(20, 2))
    x = np.hstack([x, x[:, :1]])
    with pytest.raises(ProbeError, match="positive ridge"):
        ridge_fit(x, rng.normal(size=20), 0.0)
    coef, _ = ridge_fit(x, rng.normal(size=20), 1e-3)
    assert np.isfinite(coef).all()


def test_overlapping_split_rejected(rng):
    with pytest.raises(ProbeError):
        fit_probe(rng.normal(size=(10, 2)), rng.normal(size=10), [0, 1, 2], [2, 3])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**16))
def test_probe_affine_invariance(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(50, 4))
    y = x @ rng.normal(size=4) + rng.normal(scale=0.5, size=50)
    a = rng.normal(size=(4, 4)) + 3 * np.eye(4)
    tr, te = np.arange(35), np.arange(35, 50)
    r0 = fit_probe(x, y, tr, te, lam=0.0).r2_test
    r1 = fit_probe(x @ a + rng.normal(size=4), y, tr, te, lam=0.0).r2_test
    assert r1 == pytest.approx(r0, abs=1e-8)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**16), st.floats(0.0, 10.0))
def test_ridge_matches_normal_equations(seed, lam):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(50, 10))
    y = rng.normal(size=50)
    coef, b = ridge_fit(x, y, lam)
    ref_coef, ref_b = oracles.ridge_normal_equations(x, y, lam)
    np.testing.assert_allclose(coef, ref_coef, atol=1e-8)
    assert b == pytest.approx(ref_b, abs=1e-8)


def test_default_ridge_scale():
    x = np.array([[1.0, 0.0], [-1.0, 2.0]])
    assert default_ridge(x) == pytest.approx(1e-3 * (2 + 2) / 2)
    assert default_ridge(10 * x) == pytest.approx(100 * default_ridge(x))


def test_splits(small_world):
    tr, te = random_split(np.arange(100), 0.2, seed=1)
    assert len(te) == 20 and not np.intersect1d(tr, te).size
    np.testing.assert_array_equal(te, random_split(np.arange(100), 0.2, seed=1)[1])
    a, b = region_holdout_split(small_world)
    assert len(a) + len(b) == small_world.n_tracts and len(b) > 0
    assert small_world.in_holdout()[b].all()


def test_grouped_mean():
    labels, pooled = grouped_mean(np.array([[1.0], [3.0], [10.0]]), np.array([7, 7, 2]))
    np.testing.assert_array_equal(labels, [2, 7])
    np.testing.assert_array_equal(pooled, [[10.0], [2.0]])


# ---------------------------------------------------------------------- PCA

def test_pca_diagonal_covariance():
    x = np.array([[s * a, t * b] for s in (-1, 1) for t in (-1, 1)
                  for a, b in [(np.sqrt(2), 1.0)]])
    res = pca(x, 2)
    np.testing.assert_allclose(res.explained_ratio, [2 / 3, 1 / 3], atol=1e-12)
    np.testing.assert_allclose(res.components, np.eye(2), atol=1e-12)


def test_pca_line():
    t = np.linspace(-1, 1, 11)
    res = pca(np.column_stack([t, -2 * t]), 1)
    assert res.explained_ratio[0] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(res.components[0], [-1, 2] / np.sqrt(5), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**16), st.integers(1, 10))
def test_pca_properties_and_oracle(seed, k):
    x = np.random.default_rng(seed).normal(size=(50, 10)) * np.arange(1, 11)
    res = pca(x, k)
    np.testing.assert_allclose(res.components @ res.components.T, np.eye(k), atol=1e-10)
    assert np.all(np.diff(res.explained_ratio) <= 1e-15) and res.explained_ratio.sum() <= 1 + 1e-12
    comps, ratios = oracles.pca_reference(x, k)
    np.testing.assert_allclose(res.components, comps, atol=1e-8)
    np.testing.assert_allclose(res.explained_ratio, ratios, atol=1e-8)


def test_pca_full_rank_reconstructs(rng):
    x = rng.normal(size=(30, 5))
    res = pca(x, 5)
    np.testing.assert_allclose(res.scores @ res.components + res.mean, x, atol=1e-8)


def test_pca_rank_deficient_warns(rng):
    x = rng.normal(size=(20, 2)) @ rng.normal(size=(2, 4))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = pca(x, 4)
    assert res.components.shape == (2, 4) and caught
    with pytest.raises(ValueError):
        pca(x, 5)


# --------------------------------------------------------------- baselines

def test_baselines(small_world):
    tab = baseline_embeddings(small_world, "tab")
    np.testing.assert_array_equal(tab.vectors, small_world.features)
    vis = baseline_embeddings(small_world, "vis_mean")
    cat = baseline_embeddings(small_world, "concat")
    assert cat.dim == small_world.config.features + small_world.config.channels
    np.testing.assert_array_equal(cat.vectors, np.hstack([tab.vectors, vis.vectors]))
    with pytest.raises(ProbeError, match="missing checkpoint"):
        baseline_embeddings(small_world, "late_fusion")
    with pytest.raises(ValueError):
        baseline_embeddings(small_world, "nope")


def test_vis_mean_of_constant_field(small_world):
    flat = dc.replace(small_world, vision=np.full_like(small_world.vision, 0.25))
    means, fallback = tract_vision_means(flat)
    np.testing.assert_allclose(means, 0.25, atol=1e-15)
    assert not fallback.any()


def test_vis_mean_matches_cell_loop(small_world):
    means, _ = tract_vision_means(small_world)
    t = 30
    cells = small_world.vision[small_world.cell_tract == t]
    np.testing.assert_allclose(means[t], cells.mean(axis=0), atol=1e-12)


# ------------------------------------------------------------------ tables

def test_embedding_table_round_trip(tmp_path, rng):
    t = EmbeddingTable(np.array([4, 1, 9]), rng.normal(size=(3, 2)), "unit")
    t.write(tmp_path / "e.tsv")
    back = EmbeddingTable.read(tmp_path / "e.tsv")
    np.testing.assert_array_equal(back.ids, t.ids)
    np.testing.assert_array_equal(back.vectors, t.vectors)
    assert back.tag == "unit"
    with pytest.raises(ValueError):
        EmbeddingTable(np.array([1, 1]), np.zeros((2, 2)), "dup")
    other = EmbeddingTable(np.array([9, 4, 1]), np.ones((3, 1)), "o")
    assert t.concat(other).dim == 3


# -------------------------------------------------------------- extraction

@pytest.fixture(scope="module")
def trained(small_pools):
    _, train, val, sc = small_pools
    cfg = TrainConfig(epochs=3, regions_per_epoch=16, batch_size=4, warmup_epochs=1, seed=0)
    model = build_joint_model(small_model_config(), cfg, sc)
    return joint_train(model, train, val, cfg).model


def test_extraction_covers_each_tract_once(small_world, trained):
    es = extraction_set(small_world, 8, tracts=range(0, 144, 7))
    emb = extract_embeddings(trained, es, batch_size=5)
    np.testing.assert_array_equal(emb.ids, np.arange(0, 144, 7))
    again = extract_embeddings(trained, es, batch_size=3)
    np.testing.assert_allclose(again.vectors, emb.vectors, atol=1e-12)
    with pytest.raises(IndexError):
        extraction_set(small_world, 8, tracts=[500])


def test_extraction_averages_covering_regions(small_world, trained):
    single = extract_embeddings(trained, extraction_set(small_world, 8, [70]))
    shifts = ((0.0, 0.0), (2.5, 0.0))
    multi = extract_embeddings(trained, extraction_set(small_world, 8, [70], shifts))
    parts = [extract_embeddings(trained, extraction_set(small_world, 8, [70], (s,)))
             for s in shifts]
    np.testing.assert_allclose(multi.vectors, (parts[0].vectors + parts[1].vectors) / 2,
                               atol=1e-12)
    np.testing.assert_array_equal(parts[0].vectors, single.vectors)


def test_embedding_locality_under_patch_perturbation(small_world, trained):
    """Perturbing a patch near a tract moves its embedding more, on average,
    than perturbing one far away."""
    near, far = [], []
    for t in (20, 66, 120):
        es = extraction_set(small_world, 8, [t])
        r = es.regions[0]
        base = extract_embeddings(trained, es).vectors[0]
        d = pairwise_distance_km(r.patch_lonlat, r.tab_lonlat[es.row[0]][None], r.lat0)[:, 0]
        for i in np.nonzero((d < 10.0) | (d > 20.0))[0]:
            p = r.patches.copy()
            p[i] += 1.0
            moved = extract_embeddings(trained, dc.replace(es, regions=[dc.replace(r, patches=p)]))
            (near if d[i] < 10.0 else far).append(np.linalg.norm(moved.vectors[0] - base))
    assert len(near) > 5 and len(far) > 5
    assert np.mean(near) > np.mean(far) > 0.0
