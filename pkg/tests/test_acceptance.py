"""Acceptance criteria, one test each; every test records a PASS/FAIL line.

The training-heavy criteria (4 to 8) read from a JSON cache keyed by the
configs and the package sources (``GEOVISTA_CACHE``, default
``.cache/results``); ``scripts/run_desk.py`` and ``scripts/run_suite.py``
fill the same cache. A cold run trains everything and takes roughly 40 min
on one core.
"""

import dataclasses as dc
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from geovista import core
from geovista.config import TrainConfig, WorldConfig
from geovista.data import generate_world, prepare_region, sample_region
from geovista.evaluate import pca, ridge_fit
from geovista.experiments import seed_suite
from geovista.geo import GeoPoint, TractPolygon, distance_bias, geometry_summary
from geovista.tabular import TabularMAE
from geovista.training import (Checkpoint, InputScaling, JointModel, collate, draw_masks,
                               joint_forward, joint_loss, load_checkpoint, lr_at,
                               model_from_checkpoint, save_checkpoint)
from geovista.vision import patchify_array, unpatchify_array, vision_loss

import oracles
from conftest import toy_model_config

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "scripts"))
from run_desk import desk_result  # noqa: E402

CACHE = Path(os.environ.get("GEOVISTA_CACHE", ROOT / ".cache" / "results"))
SEEDS = (0, 1, 2)
LINES: list[str] = []


def record(n: int, title: str, ok: bool, detail: str, seconds: float | None = None) -> None:
    t = "" if seconds is None else f" [{seconds:.1f}s]"
    line = f"{'PASS' if ok else 'FAIL'}  criterion {n}: {title}: {detail}{t}"
    LINES.append(line)
    print(line)
    assert ok, line


# ------------------------------------------------------------ toy fixtures

def toy_world_config() -> WorldConfig:
    return WorldConfig(tracts_x=4, tracts_y=4, tract_km=8.0, cell_km=1.0, channels=2, features=3,
                       length_scales_km=(8.0, 10.0, 9.0, 12.0), target_radius_km=8.0,
                       region_km=16.0, grid=16)


@pytest.fixture(scope="module")
def toy_batch():
    world = generate_world(toy_world_config(), seed=0)
    regions = [prepare_region(sample_region(world, c), 8) for c in [(-3.0, 2.0), (4.0, -5.0)]]
    return collate(regions), InputScaling.fit(regions, 16.0)


def toy_joint(scaling, seed=0, **fusion):
    return JointModel(toy_model_config(**fusion), np.random.default_rng(seed), scaling,
                      freeze_vit=False)


def family(name: str) -> str:
    table = [("vit.f_vis", "f_vis positional MLP"), ("vit.decoder.head", "vision decoder head"),
             ("vit.decoder", "vision decoder"), ("vit.", "ViT encoder"),
             ("tabt.tokenizer", "feature tokenizer"), ("tabt.col_blocks", "column blocks"),
             ("tabt.row_blocks", "row blocks"), ("tabt.f_tab", "f_tab positional MLP"),
             ("tabt.decoder.head", "tabular decoder head"), ("tabt.decoder", "tabular decoder"),
             ("tabt.", "tabular norms and row reduce"),
             ("fusion.", "fusion blocks")]
    for prefix, fam in table:
        if name.startswith(prefix):
            return fam
    return "other"


# ------------------------------------------------------------- criterion 1

def test_criterion_1_gradient_integrity(toy_batch):
    t0 = time.time()
    batch, scaling = toy_batch
    model = toy_joint(scaling)
    masks = draw_masks(batch, 0.5, 0.5, np.random.default_rng(3))

    def loss():
        parts, _ = joint_loss(model, batch, masks, lam=0.7, beta=0.5)
        return parts.joint

    groups: dict[str, list] = {}
    for name, p in model.named_parameters():
        groups.setdefault(family(name), []).append(p)
    gains = [p for b in model.fusion.layers for cb in (b.vis_from_tab, b.tab_from_vis)
             for p in [cb.attn.gains]]
    groups["fusion gains alpha_h"] = gains
    errs = {fam: core.gradcheck(loss, ps, max_entries=6) for fam, ps in groups.items()}

    mae = TabularMAE(toy_model_config().tab, np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=(4, 3))
    m = np.array([[1, 0, 0], [0, 1, 1], [0, 0, 1], [1, 1, 0]], dtype=bool)
    r = np.random.default_rng(4).normal(size=(4, 3))
    errs["tabular-only MAE"] = core.gradcheck(
        lambda: core.sum_all(core.mul(mae(x, m), core.Tensor(r))), mae.parameters(),
        max_entries=10)
    worst = max(errs, key=errs.get)
    expected = {"ViT encoder", "vision decoder", "vision decoder head", "f_vis positional MLP",
                "feature tokenizer", "column blocks", "row blocks", "f_tab positional MLP",
                "tabular decoder head", "fusion blocks", "fusion gains alpha_h"}
    missing = expected - set(errs)
    dt = time.time() - t0
    ok = errs[worst] < 1e-4 and not missing and dt < 300
    record(1, "gradient integrity", ok,
           f"{len(errs)} module families, max rel err {errs[worst]:.2e} ({worst})"
           + (f"; missing {sorted(missing)}" if missing else ""), dt)


# ------------------------------------------------------------- criterion 2

def km_ring(xy):
    xy = np.asarray(xy, dtype=float)
    return xy / 111.19492664455873


def test_criterion_2_closed_forms():
    t0 = time.time()
    origin = GeoPoint(0.0, 0.0)
    square = geometry_summary(TractPolygon(km_ring([[0, 0], [1, 0], [1, 1], [0, 1]])), origin)
    hexagon = geometry_summary(TractPolygon(km_ring(oracles.regular_polygon(6))), origin)
    ell = geometry_summary(TractPolygon(km_ring([[0, 0], [1, 0], [1, 0.5], [0.5, 0.5],
                                                 [0.5, 1], [0, 1]])), origin)
    checks = {
        "square kappa": abs(square.compactness - math.pi / 4) <= 1e-12,
        "convex rho": abs(hexagon.hull_ratio - 1.0) <= 1e-12 and square.hull_ratio == 1.0,
        "L-shape rho": abs(ell.hull_ratio - 6 / 7) <= 1e-9,
        "phi(d0)": distance_bias(10.0) == 0.0,
        "phi(0)": abs(distance_bias(0.0) - math.tanh(10.0 / 25.0)) <= 1e-12,
        "lr endpoints": (lr_at(0, 3e-4, 10, 100) == 0.0 and lr_at(10, 3e-4, 10, 100) == 3e-4
                         and lr_at(100, 3e-4, 10, 100) == 0.0),
    }
    bad = [k for k, v in checks.items() if not v]
    dt = time.time() - t0
    record(2, "closed-form correctness", not bad and dt < 60,
           f"{len(checks) - len(bad)}/{len(checks)} exact checks"
           + (f"; failed {bad}" if bad else ""), dt)


# ------------------------------------------------------------- criterion 3

def test_criterion_3_mae_mechanics(toy_batch, tmp_path):
    t0 = time.time()
    batch, scaling = toy_batch
    model = toy_joint(scaling)
    masks = draw_masks(batch, 0.5, 0.5, np.random.default_rng(5))
    checks = {}

    # masked-only losses: changing predictions on visible entries changes nothing
    out = joint_forward(model, batch, masks)
    vp = out.vis_pred.data.copy()
    vp[~masks.vis_masked] += 7.0
    checks["vision loss ignores visible"] = (
        vision_loss(core.Tensor(vp), batch.patches, masks.vis_masked, 0.5).item()
        == vision_loss(out.vis_pred, batch.patches, masks.vis_masked, 0.5).item())
    tp = out.tab_pred.data.copy()
    tp[~masks.tab_masked] -= 3.0
    checks["tabular loss ignores visible"] = (
        core.masked_l1(core.Tensor(tp), batch.tab_x, masks.tab_masked).item()
        == core.masked_l1(out.tab_pred, batch.tab_x, masks.tab_masked).item())
    # masked inputs never reach the reconstructions of visible or masked entries
    b2 = dc.replace(batch, patches=batch.patches.copy(), tab_x=batch.tab_x.copy())
    b2.patches[masks.vis_masked] = 99.0
    b2.tab_x[masks.tab_masked] = -99.0
    out2 = joint_forward(model, b2, masks)
    checks["masked inputs unseen"] = (np.array_equal(out.vis_pred.data, out2.vis_pred.data)
                                      and np.array_equal(out.tab_pred.data, out2.tab_pred.data))

    img = np.random.default_rng(6).normal(size=(3, 16, 16, 2))
    checks["patchify round trip"] = np.array_equal(
        unpatchify_array(patchify_array(img, 8), 16, 16, 2, 8), img)

    ck = Checkpoint("joint", model.cfg, TrainConfig(freeze_vit=False), model.state_dict(), scaling)
    save_checkpoint(tmp_path / "m.ckpt", ck)
    back = model_from_checkpoint(load_checkpoint(tmp_path / "m.ckpt"))
    same = all(back.state_dict()[k].tobytes() == v.tobytes() for k, v in ck.params.items())
    out3 = joint_forward(back, batch, masks)
    checks["checkpoint round trip"] = same and np.array_equal(out3.vis_pred.data,
                                                              out.vis_pred.data)

    zero = toy_joint(scaling, gain_init=0.0)
    plain = toy_joint(scaling, use_bias=False)
    plain.load_state_dict(zero.state_dict())
    za, zb = joint_forward(zero, batch, masks), joint_forward(plain, batch, masks)
    checks["alpha=0 equals unbiased"] = (za.phi is not None and zb.phi is None
                                         and np.array_equal(za.z_tab.data, zb.z_tab.data)
                                         and np.array_equal(za.vis_pred.data, zb.vis_pred.data)
                                         and np.array_equal(za.tab_pred.data, zb.tab_pred.data))
    bad = [k for k, v in checks.items() if not v]
    dt = time.time() - t0
    record(3, "MAE mechanics", not bad and dt < 120,
           f"{len(checks) - len(bad)}/{len(checks)} bitwise checks"
           + (f"; failed {bad}" if bad else ""), dt)


# ------------------------------------------------------------- criterion 4

def test_criterion_4_training_sanity():
    res = desk_result(str(ROOT / "configs" / "desk.cfg"), 0, CACHE)
    a, b = res["joint_initial"], res["joint_final"]
    drops = {"pretrain": 1 - res["pretrain_final"]["loss"] / res["pretrain_initial"]["loss"],
             "joint L_vis": 1 - b["vis"] / a["vis"], "joint L_tab": 1 - b["tab"] / a["tab"]}
    minutes = res["seconds"]["total"] / 60
    ok = min(drops.values()) >= 0.5 and minutes < 45 and res["n_tracts"] >= 1500
    record(4, "training sanity", ok,
           f"{res['n_tracts']} tracts; val loss drops "
           + ", ".join(f"{k} {v:.0%}" for k, v in drops.items())
           + f"; desk run {minutes:.1f} min")


# -------------------------------------------------------- criteria 5 to 8

@pytest.fixture(scope="module")
def suite():
    return {s: seed_suite(s, CACHE) for s in SEEDS}


def med(suite, label, key="r2_random"):
    return float(np.median([suite[s][label][key] for s in SEEDS]))


def med_base(suite, kind, key="r2_random"):
    return float(np.median([suite[s]["baselines"][kind][key] for s in SEEDS]))


def test_criterion_5_ordering_random_holdout(suite):
    geo, cat = med(suite, "geovista"), med_base(suite, "concat")
    tab, vis = med_base(suite, "tab"), med_base(suite, "vis_mean")
    ok = geo - cat >= 0.02 and cat - max(tab, vis) >= 0.02
    record(5, "qualitative ordering", ok,
           f"median R2 fused {geo:.3f} > concat {cat:.3f} > max(tab {tab:.3f}, vis {vis:.3f})")


def test_criterion_6_region_holdout(suite):
    geo, cat = med(suite, "geovista", "r2_holdout"), med_base(suite, "concat", "r2_holdout")
    record(6, "region-holdout direction", geo >= cat,
           f"median held-out-box R2 fused {geo:.3f} vs concat {cat:.3f}")


def test_criterion_7_ablation_directions(suite):
    base = med(suite, "geovista")
    dirs = {"row attn off": med(suite, "row_attn=no"),
            "encodings+bias off": med(suite, "encodings=none"),
            "tab mask 0.75": med(suite, "tab_mask=0.75")}
    bad = [k for k, v in dirs.items() if not v < base]
    record(7, "ablation directions", not bad,
           f"default {base:.3f}; " + ", ".join(f"{k} {v:.3f}" for k, v in dirs.items())
           + (f"; wrong direction: {bad}" if bad else ""))


def test_criterion_8_attention_locality(suite):
    ratios = [suite[s]["geovista"]["locality"]["ratio"] for s in SEEDS]
    m = float(np.median(ratios))
    record(8, "attention locality", m >= 1.5,
           f"median mass ratio within 10 km vs uniform {m:.2f} (seeds "
           + ", ".join(f"{r:.2f}" for r in ratios) + ")")


# ------------------------------------------------------------- criterion 9

def test_criterion_9_oracle_equivalence():
    t0 = time.time()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(50, 10)) * rng.uniform(0.5, 3.0, size=10)
        y = x @ rng.normal(size=10) + rng.normal(size=50)
        lam = float(rng.uniform(0.0, 5.0))
        coef, b = ridge_fit(x, y, lam)
        rc, rb = oracles.ridge_normal_equations(x, y, lam)
        worst = max(worst, float(np.abs(coef - rc).max()), abs(b - rb))
        res = pca(x, 10)
        comps, ratios = oracles.pca_reference(x, 10)
        worst = max(worst, float(np.abs(res.components - comps).max()),
                    float(np.abs(res.explained_ratio - ratios).max()))
    record(9, "oracle equivalence", worst <= 1e-8,
           f"20 random 50x10 instances, max abs diff {worst:.1e}", time.time() - t0)
