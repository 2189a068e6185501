import numpy as np
import pytest

from rtta.cli import pretrain, source_dataset, target_splits
from rtta.config import parse_config
from rtta.models import ModelSpec, build_model


@pytest.fixture(scope="session")
def desk_cfg():
    return parse_config("")


@pytest.fixture(scope="session")
def desk_source(desk_cfg):
    return source_dataset(desk_cfg)


@pytest.fixture(scope="session")
def desk_model(desk_cfg):
    """Source-pretrained CNN on the default synthetic data (treat as read-only)."""
    return pretrain(desk_cfg)


@pytest.fixture(scope="session")
def desk_splits(desk_cfg):
    return target_splits(desk_cfg)


@pytest.fixture
def tiny_mlp():
    ckpt = build_model(ModelSpec.mlp((4, 6, 3)), seed=3)
    rng = np.random.default_rng(0)
    for st in ckpt.bn.values():
        st.running_mean = rng.normal(0, 0.3, st.running_mean.shape)
        st.running_var = rng.uniform(0.5, 2.0, st.running_var.shape)
    return ckpt
