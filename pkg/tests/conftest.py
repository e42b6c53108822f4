import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from blockpunch.graph import load_model
from blockpunch.runtime.kernels import BACKENDS

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "blockpunch" / "fixtures"


@pytest.fixture(scope="session")
def yolo():
    return load_model(FIXTURES / "yolov4.model")


@pytest.fixture(scope="session")
def toy():
    return load_model(FIXTURES / "toy4.model")


@pytest.fixture(scope="session")
def micro():
    return load_model(FIXTURES / "micro.model")


@pytest.fixture(params=sorted(BACKENDS))
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def prune_and_pack(model, rate=2.0, seed=0):
    """Random weights projected to ``rate`` and packed; returns (masked weights, packed)."""
    from blockpunch.graph import WeightTensor, random_weights
    from blockpunch.pruner import BlockConfig, CompressionTarget, allocate_budgets, project_mask
    from blockpunch.runtime.packed import encode, reorder_blocks

    cfg = BlockConfig()
    weights = random_weights(model, seed)
    budgets = allocate_budgets(model, CompressionTarget(rate), cfg)
    masked, packed = {}, {}
    for lid, w in weights.items():
        mask = project_mask(w, cfg, budgets[lid].units, lid)
        masked[lid] = WeightTensor.from_gemm(lid, w.dims, np.where(mask.dense(), w.gemm_view, 0))
        packed[lid] = reorder_blocks(encode(w, mask, cfg))
    return masked, packed


@pytest.fixture(scope="session")
def micro_packed(micro):
    return prune_and_pack(micro)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import lines

    found = lines()
    if found:
        terminalreporter.section("acceptance criteria")
        for line in found:
            terminalreporter.write_line(line)
