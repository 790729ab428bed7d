import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fedmask.nn import LayerLayout, init_params  # noqa: E402


@pytest.fixture
def small_layout():
    return LayerLayout.mlp(5, 7, 3)


@pytest.fixture
def small_model(small_layout):
    return init_params(small_layout, np.random.default_rng(7))


def blob_config(**overrides):
    """Small, fast federation used across harness tests."""
    from fedmask.config import config_from_dict

    data = dict(
        strategy="masked", rounds=3, n_clients=4, alpha=0.5, master_seed=1,
        record_timing=False, hidden=8,
        train={"local_epochs": 1, "batch_size": 16},
        dataset={"blobs": {"num_classes": 3, "per_class": 30, "test_per_class": 20,
                           "dim": 16, "spread": 0.5, "seed": 1, "image_shape": [4, 4]}},
    )
    for k, v in overrides.items():
        data[k] = v
    return config_from_dict(data)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; also printed in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
