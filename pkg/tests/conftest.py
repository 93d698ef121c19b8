import dataclasses as dc

import numpy as np
import pytest

from geovista.config import FusionConfig, ModelConfig, TabConfig, TrainConfig, ViTConfig, WorldConfig
from geovista.data import generate_world, make_splits
from geovista.training import InputScaling, build_pool


def toy_model_config(**fusion) -> ModelConfig:
    """16x16x2 raster with P=8, D_v=16; three features; one block per stage."""
    return ModelConfig(
        vit=ViTConfig(patch=8, grid=16, channels=2, dim=16, depth=1, heads=2,
                      dec_dim=8, dec_depth=1, dec_heads=2, mlp_ratio=2.0),
        tab=TabConfig(features=3, col_dim=8, col_depth=1, col_heads=2, dim=16, row_depth=1,
                      row_heads=2, mlp_ratio=2.0),
        fusion=FusionConfig(heads_tab_from_vis=4, heads_vis_from_tab=2, mlp_ratio=2.0,
                            **fusion))


def small_world_config(**kw) -> WorldConfig:
    base = WorldConfig(tracts_x=12, tracts_y=12, tract_km=10.0, region_km=40.0, grid=32,
                       length_scales_km=(20.0, 30.0, 25.0, 35.0), target_radius_km=15.0)
    return dc.replace(base, **kw)


def small_model_config() -> ModelConfig:
    return ModelConfig(
        vit=ViTConfig(grid=32, dim=16, depth=1, heads=2, dec_dim=16, dec_depth=1, dec_heads=2,
                      mlp_ratio=2.0),
        tab=TabConfig(col_dim=4, col_depth=1, col_heads=2, dim=16, row_depth=1, row_heads=2,
                      mlp_ratio=2.0),
        fusion=FusionConfig(heads_tab_from_vis=4, mlp_ratio=2.0))


@pytest.fixture(scope="session")
def small_world():
    return generate_world(small_world_config(), seed=3)


@pytest.fixture(scope="session")
def small_pools(small_world):
    man = make_splits(small_world, 40, seed=3)
    train = build_pool(small_world, man.train, 8)
    val = build_pool(small_world, man.val, 8, limit=4)
    return man, train, val, InputScaling.fit(train.regions, small_world.config.region_km)


@pytest.fixture
def toy_cfg():
    return toy_model_config()


@pytest.fixture
def tiny_train_cfg():
    return TrainConfig(epochs=2, regions_per_epoch=8, batch_size=4, warmup_epochs=1, seed=5,
                       val_regions=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
