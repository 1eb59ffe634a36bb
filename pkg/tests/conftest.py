import numpy as np
import pytest

from smjls import clvq_train, maglev_preset
from smjls.harness import ExperimentConfig
from smjls.riccati import build_branch_tree


@pytest.fixture(scope="session")
def maglev():
    return maglev_preset()


@pytest.fixture(scope="session")
def small_grids(maglev):
    """Fast codebooks (nu=8) used by structural tests."""
    return {
        (i, 8): clvq_train(maglev.sojourns[i], 8, iters=100_000, seed=40 + i)
        for i in range(2)
    }


@pytest.fixture(scope="session")
def small_tree(maglev, small_grids):
    return build_branch_tree(
        maglev,
        [small_grids[(0, 8)], small_grids[(1, 8)]],
        horizon=0.02,
        max_depth=8,
        dt=1e-4,
    )


@pytest.fixture()
def tiny_config(tmp_path):
    return ExperimentConfig(
        grid_sizes=[5],
        mc_runs=40,
        clvq_iters=20_000,
        distortion_samples=2_000,
        out_dir=str(tmp_path / "out"),
        seed=7,
    )
