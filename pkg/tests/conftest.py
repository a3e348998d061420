"""Test fixtures for the Byzantine DSGD simulator."""

import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "src")))

from byzantine_dsgd.models import LossSpec, RunConfig
from byzantine_dsgd.sim_models import RunTrace, StabilityRecord, StabilityTrace, TraceRecord

# Small enough that a full run takes well under a second.
SMALL_CONFIG: Dict[str, Any] = {
    "steps": 20,
    "seed": 3,
    "batch_size": 4,
    "record_every": 5,
    "graph": {"kind": "complete", "n_agents": 5},
    "byzantine": {"count": 1},
    "aggregation": {"rule": "ios", "weights": "uniform"},
    "attack": {"kind": "signflip"},
    "loss": {"kind": "softmax"},
    "schedule": {"kind": "cvx", "k0": 10.0},
    "data": {"classes": 3, "dim": 4, "Z": 20, "test_count": 50},
}

SMALL_TOML = """
steps = 20
seed = 3
batch_size = 4
record_every = 5

[graph]
kind = "complete"
n_agents = 5

[byzantine]
count = 1

[aggregation]
rule = "ios"
weights = "uniform"

[attack]
kind = "signflip"

[loss]
kind = "softmax"

[schedule]
kind = "cvx"
k0 = 10.0

[data]
classes = 3
dim = 4
Z = 20
test_count = 50
"""


def merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out


@pytest.fixture
def configs_dir():
    """Return the path to the shipped example configs."""
    return Path(__file__).parent.parent / "configs"


@pytest.fixture
def make_config() -> Callable[..., RunConfig]:
    """Return a factory for small run configs with nested overrides."""

    def factory(**overrides: Any) -> RunConfig:
        return RunConfig.parse_obj(merge(SMALL_CONFIG, overrides))

    return factory


@pytest.fixture
def small_config(make_config):
    """Return the default small run config."""
    return make_config()


@pytest.fixture
def config_file(tmp_path):
    """Write the small config to a TOML file and return its path."""
    path = tmp_path / "small.toml"
    path.write_text(SMALL_TOML)
    return path


@pytest.fixture
def rng():
    """Return a seeded generator for test data."""
    return np.random.default_rng(20240611)


@pytest.fixture(params=["strongly_convex", "softmax", "mlp"])
def loss_spec(request):
    """Return a resolved loss spec of every kind."""
    return LossSpec(kind=request.param, lam=0.3, hidden=5, input_dim=4, classes=3)


def make_trace(
    ks: List[int],
    H: Optional[List[float]] = None,
    train: Optional[List[float]] = None,
    test: Optional[List[float]] = None,
) -> RunTrace:
    """Build a trace with the given per-step metrics (zeros by default)."""
    n = len(ks)
    H = H if H is not None else [0.0] * n
    train = train if train is not None else [0.0] * n
    test = test if test is not None else [0.0] * n
    return RunTrace(
        records=[
            TraceRecord(
                k=k, xbar=np.zeros(2), H=h, avg_loss_train=tr, avg_loss_test=te, acc_test=0.5
            )
            for k, h, tr, te in zip(ks, H, train, test)
        ]
    )


def make_stability(ks: List[int], deltas: List[float]) -> StabilityTrace:
    return StabilityTrace(
        records=[StabilityRecord(k=k, delta=d, eta=d) for k, d in zip(ks, deltas)]
    )
