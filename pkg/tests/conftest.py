import pytest
import torch

from trajalign.config import make_config
from trajalign.synth import generate_world

torch.set_num_threads(1)

# small but structurally complete model for fast tests
TINY = {
    "d": 16,
    "S": 4,
    "nif_layers": 1,
    "nif_heads": 2,
    "nif_ff": 32,
    "agg_heads": 2,
    "head_hidden": 32,
    "batch_tuples": 32,
    "pretrain_svis_per_traj": 8,
    "finetune_trajs_per_anchor": 4,
    "L": 64,
    "seed": 3,
}


@pytest.fixture(scope="session")
def tiny_world():
    return generate_world(11, grid_n=4, n_trajectories=24, n_svis=60, max_hops=10)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_world):
    return tiny_world.to_dataset(0.002)


@pytest.fixture
def tiny_cfg():
    return make_config(TINY)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number} {title}: {'PASS' if passed else 'FAIL'} ({detail})"
    print(ACCEPTANCE[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
