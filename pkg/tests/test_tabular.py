import dataclasses as dc

import numpy as np
import pytest

from geovista import core
from geovista.core import Tensor, gradcheck
from geovista.geo import GeoPoint, TractPolygon
from geovista.tabular import (FeatureTokenizer, TabularMAE, TabularTransformer, TractRecord,
                              TractTable, mask_rows, pad_index, tokenize)

from conftest import toy_model_config


def toy_tab(seed=0, **kw):
    cfg = dc.replace(toy_model_config().tab, **kw)
    return TabularTransformer(cfg, np.random.default_rng(seed))


def probe(out, seed=0):
    r = np.random.default_rng(seed).normal(size=out.shape)
    return core.sum_all(core.mul(out, Tensor(r)))


def rows(n, seed=1, b=1):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(b, n, 3)), rng.normal(size=(b, n, 5))


# ------------------------------------------------------------ tokenizer

def test_tokenizer_contract(rng):
    tok = FeatureTokenizer(3, 8, rng)
    x = rng.normal(size=3)
    out = tokenize(x, tok).data
    assert out.shape == (3, 8)
    np.testing.assert_array_equal(tokenize(np.zeros(3), tok).data, tok.bias.data)
    zero = tokenize(np.zeros(3), tok).data
    np.testing.assert_allclose(tokenize(2 * x, tok).data - zero, 2 * (out - zero), atol=1e-13)


def test_tokenizer_gradcheck(rng):
    tok = FeatureTokenizer(3, 4, rng)
    x = rng.normal(size=(2, 5, 3))
    assert gradcheck(lambda: probe(tok(x)), tok.parameters()) < 1e-6


# ----------------------------------------------------------- column stage

def test_column_stage_rows_independent():
    tab = toy_tab()
    x, _ = rows(2)
    x[0, 1] = x[0, 0]
    z2 = tab.column_encode(tab.tokenizer(x)).data
    z1 = tab.column_encode(tab.tokenizer(x[:, :1])).data
    assert z2.shape == (1, 2, 3, 8)
    np.testing.assert_allclose(z2[0, 0], z1[0, 0], atol=1e-14)
    np.testing.assert_allclose(z2[0, 1], z2[0, 0], atol=1e-14)


def test_column_stage_gradcheck():
    tab = toy_tab()
    x, _ = rows(2)
    params = tab.tokenizer.parameters() + [p for b in tab.col_blocks for p in b.parameters()]
    assert gradcheck(lambda: probe(tab.column_encode(tab.tokenizer(x))), params) < 1e-4


def test_row_reduce_contract():
    tab = toy_tab()
    x, _ = rows(3)
    z = tab.column_encode(tab.tokenizer(x))
    assert tab.row_reduce(z).shape == (1, 3, 16)
    tab.reduce.weight.data[...] = 0.0
    tab.reduce.bias.data[...] = 0.5
    np.testing.assert_array_equal(tab.row_reduce(z).data, 0.5)


def test_row_reduce_identical_slices(rng):
    tab = toy_tab()
    z = rng.normal(size=(1, 2, 3, 8))
    z[0, 1] = z[0, 0]
    r = tab.row_reduce(Tensor(z)).data
    np.testing.assert_array_equal(r[0, 0], r[0, 1])


# -------------------------------------------------------------- row stage

def test_single_row_attention_is_identity_weighted():
    tab = toy_tab()
    x, u = rows(1)
    z = tab.encode(x, tab.encode_positions(u))
    w = tab.row_blocks[0].attn.last_weights
    assert z.shape == (1, 1, 16)
    np.testing.assert_array_equal(w, 1.0)


def test_row_stage_permutation_equivariance():
    tab = toy_tab()
    x, u = rows(5)
    perm = np.array([3, 0, 4, 1, 2])
    a = tab.encode(x, tab.encode_positions(u)).data
    b = tab.encode(x[:, perm], tab.encode_positions(u[:, perm])).data
    np.testing.assert_allclose(b[0], a[0, perm], atol=1e-12)


def test_row_attention_ablation_rows_do_not_interact():
    tab = toy_tab(row_attention=False)
    assert all(b.attn is None for b in tab.row_blocks)
    x, u = rows(4)
    a = tab.encode(x, tab.encode_positions(u)).data
    x2 = x.copy()
    x2[0, 2] += 1.0
    b = tab.encode(x2, tab.encode_positions(u)).data
    keep = [0, 1, 3]
    np.testing.assert_array_equal(a[0, keep], b[0, keep])
    assert not np.allclose(a[0, 2], b[0, 2])


def test_row_attention_changes_other_rows_when_enabled():
    tab = toy_tab()
    x, u = rows(4)
    x2 = x.copy()
    x2[0, 2] += 1.0
    a = tab.encode(x, tab.encode_positions(u)).data
    b = tab.encode(x2, tab.encode_positions(u)).data
    assert not np.allclose(a[0, 0], b[0, 0])


def test_encodings_flag():
    assert toy_tab(use_encodings=False).encode_positions(np.zeros((1, 2, 5))) is None


def test_padding_rows_do_not_leak():
    tab = toy_tab()
    x, u = rows(4)
    valid = np.array([[True, True, True, False]])
    a = tab.encode(x, tab.encode_positions(u), valid).data
    x2 = x.copy()
    x2[0, 3] = 50.0
    b = tab.encode(x2, tab.encode_positions(u), valid).data
    np.testing.assert_array_equal(a[0, :3], b[0, :3])


# --------------------------------------------------------------- masking

def test_mask_rows_contract():
    plan = mask_rows(4, 0.5, seed=2)
    assert len(plan.masked) == 2
    np.testing.assert_array_equal(plan.masked, mask_rows(4, 0.5, seed=2).masked)
    with pytest.raises(ValueError):
        mask_rows(1, 0.5, seed=0)


def test_pad_index():
    idx, ok = pad_index([np.array([2, 0]), np.array([1])])
    np.testing.assert_array_equal(idx, [[2, 0], [1, -1]])
    np.testing.assert_array_equal(ok, [[True, True], [True, False]])


def encode_decode(tab, x, u, plan):
    e = tab.encode_positions(u)
    vis = plan.visible[None]
    z = tab.encode(x[:, plan.visible], core.gather_rows(e, vis))
    return tab.decode(z, vis, x.shape[1], e)


def test_masked_row_values_never_reach_the_decoder():
    tab = toy_tab()
    x, u = rows(6)
    plan = mask_rows(6, 0.5, seed=4)
    a = encode_decode(tab, x, u, plan).data
    x2 = x.copy()
    x2[0, plan.masked] = np.random.default_rng(9).normal(size=(3, 3))
    b = encode_decode(tab, x2, u, plan).data
    np.testing.assert_array_equal(a, b)
    assert a.shape == (1, 6, 3)


def test_decoder_zero_head_gives_bias():
    tab = toy_tab()
    x, u = rows(4)
    tab.decoder.head.weight.data[...] = 0.0
    tab.decoder.head.bias.data[...] = [1.0, 2.0, 3.0]
    out = encode_decode(tab, x, u, mask_rows(4, 0.5, seed=0)).data
    np.testing.assert_array_equal(out, np.broadcast_to([1.0, 2.0, 3.0], out.shape))


def test_masked_prediction_depends_on_own_position():
    tab = toy_tab(dec_row_attention=False)
    x, u = rows(5)
    plan = mask_rows(5, 0.6, seed=1)
    a = encode_decode(tab, x, u, plan).data
    u2 = u.copy()
    t = plan.masked[0]
    u2[0, t, 2:] += 0.5  # change only the geometry summary of one masked tract
    e2 = tab.encode_positions(u2)
    vis = plan.visible[None]
    z = tab.encode(x[:, plan.visible], core.gather_rows(tab.encode_positions(u), vis))
    b = tab.decode(z, vis, 5, e2).data
    others = [i for i in range(5) if i != t]
    np.testing.assert_array_equal(a[0, others], b[0, others])
    assert not np.allclose(a[0, t], b[0, t])


def test_full_pipeline_permutation_equivariance():
    tab = toy_tab()
    x, u = rows(6)
    plan = mask_rows(6, 0.5, seed=3)
    perm = np.random.default_rng(0).permutation(6)
    inv = np.argsort(perm)
    a = encode_decode(tab, x, u, plan).data
    plan_p = mask_rows(6, 0.5, seed=3)
    plan_p.visible = inv[plan.visible]
    b = encode_decode(tab, x[:, perm], u[:, perm], plan_p).data
    np.testing.assert_allclose(b[0], a[0, perm], atol=1e-12)


def test_tabular_transformer_gradcheck():
    tab = toy_tab()
    x, u = rows(5, b=2)
    vis = np.array([[0, 2, 4], [1, 3, -1]])
    ok = vis >= 0
    valid = np.array([[True] * 5, [True] * 4 + [False]])
    mask = np.zeros((2, 5), dtype=bool)
    mask[0, [1, 3]] = mask[1, [0, 2]] = True
    xv = np.stack([x[0, vis[0]], x[1, np.where(ok[1], vis[1], 0)]])

    def loss():
        e = tab.encode_positions(u)
        z = tab.encode(xv, core.gather_rows(e, np.where(ok, vis, 0)), ok)
        return core.masked_l1(tab.decode(z, vis, 5, e, valid), x + 0.37, mask)

    assert gradcheck(loss, tab.parameters(), max_entries=30) < 1e-4


# ---------------------------------------------------- tabular-only MAE

def test_tabular_mae_row_independent(rng):
    mae = TabularMAE(toy_model_config().tab, rng)
    x = rng.normal(size=(4, 3))
    m = np.zeros((4, 3), dtype=bool)
    m[:, 1] = True
    a = mae(x, m).data
    x2 = x.copy()
    x2[2] += 1
    b = mae(x2, m).data
    np.testing.assert_array_equal(a[[0, 1, 3]], b[[0, 1, 3]])
    x3 = x.copy()
    x3[:, 1] = 7.0  # masked feature values are replaced by the mask token
    np.testing.assert_array_equal(mae(x3, m).data, a)


def test_tabular_mae_gradcheck(rng):
    mae = TabularMAE(toy_model_config().tab, rng)
    x = rng.normal(size=(3, 3))
    m = np.array([[1, 0, 0], [0, 1, 1], [0, 0, 1]], dtype=bool)
    assert gradcheck(lambda: probe(mae(x, m)), mae.parameters(), max_entries=30) < 1e-4


# ------------------------------------------------------------- records

def test_tract_table_unique_ids():
    sq = np.array([[0, 0], [0.01, 0], [0.01, 0.01], [0, 0.01]])
    rec = TractRecord(1, np.zeros(3), GeoPoint(0.005, 0.005), TractPolygon(sq))
    assert TractTable([rec]).features.shape == (1, 3)
    with pytest.raises(ValueError):
        TractTable([rec, rec])
