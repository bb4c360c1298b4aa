import copy
import os
from pathlib import Path

import numpy as np
import pytest
import yaml

from flsim.config import validate_config
from flsim.datasets import gen_synthetic
from flsim.hessian import importance_weights
from flsim.latency import ComputeConfig
from flsim.learner import Architecture, LayerSpec, TrainingHyperparams, hidden_preactivations, init_model, mlp
from flsim.modem import ChannelConfig
from flsim.planner import PlannerInputs
from flsim.seeding import Purpose, stream

BASE_CONFIG = {
    "n_clients": 3,
    "rounds": 3,
    "seed": 7,
    "scheme": "layerwise",
    "hp": {"eta": 0.05, "tau": 2, "batch_size": 8},
    "channel": {"es_n0": 20.0},
    "compute": {"cycles_per_sample": 1e5},
    "dataset": {"kind": "synthetic", "classes": 3, "dims": 8, "train_size": 120, "test_size": 60},
    "model": {"name": "mlp", "hidden": [6]},
    "importance_batch": 32,
    "train_eval_samples": 60,
}


def tiny_cnn(activation: str = "relu") -> Architecture:
    """7x7 single-channel input, a stride-2 conv with overlapping windows, a second conv and a dense head (86 params)."""
    layers = (
        LayerSpec("CV1", "conv", 1, 2, kernel=3, stride=2),
        LayerSpec("CV2", "conv", 2, 3, kernel=2, stride=1),
        LayerSpec("FC1", "dense", 12, 3),
    )
    return Architecture("tiny_cnn", (1, 7, 7), layers, activation)


def tiny_mlp(activation: str = "relu") -> Architecture:
    return mlp([6, 8, 4], "tiny_mlp", activation)


ARCHITECTURES = {"tiny_mlp": (tiny_mlp, 6, 4), "tiny_cnn": (tiny_cnn, 49, 3)}


def kink_margin(model, batch) -> float:
    """Distance of the closest hidden pre-activation from the ReLU kink."""
    return min(float(np.min(np.abs(z))) for z in hidden_preactivations(model, batch))


@pytest.fixture
def tiny_problem():
    """Factory: (model, batch) for an architecture key, seed and activation."""

    def make(key: str = "tiny_mlp", seed: int = 0, activation: str = "relu", n: int = 8, noise: float = 1.0):
        builder, dims, classes = ARCHITECTURES[key]
        model = init_model(builder(activation), stream(seed, Purpose.INIT))
        batch = gen_synthetic(classes, dims, n, seed, margin=2.0, noise=noise)
        return model, batch

    return make


@pytest.fixture
def kink_free_problems(tiny_problem):
    """Factory: the first `count` ReLU problems whose pre-activations stay `margin` away from 0."""

    def make(key: str, count: int = 5, margin: float = 1e-2, limit: int = 500):
        found = []
        for seed in range(limit):
            model, batch = tiny_problem(key, seed, n=4)
            if kink_margin(model, batch) >= margin:
                found.append((model, batch))
                if len(found) == count:
                    return found
        pytest.fail(f"only {len(found)} kink-free seeds for {key} in {limit} tries")

    return make


def random_planner_inputs(rng: np.random.Generator, l: int, n_bits: int = 16) -> PlannerInputs:
    sizes = tuple(int(s) for s in rng.integers(10, 5000, size=l))
    ranges = rng.uniform(0.01, 0.5, size=l)
    steps = tuple(float(r / ((1 << n_bits) - 1)) for r in ranges)
    return PlannerInputs(
        grad_sq_sum=float(rng.uniform(0.5, 50.0)),
        importance=importance_weights(rng.uniform(0.0, 1.0, size=l)),
        layer_sizes=sizes,
        layer_steps=steps,
        hp=TrainingHyperparams(eta=0.01, tau=5, L_smooth=1.0, sigma_sq=0.1, n_clients=10),
        channel=ChannelConfig(es_n0=float(rng.uniform(5.0, 40.0)), n_bits=n_bits),
        compute=ComputeConfig(samples=100),
    )


@pytest.fixture
def planner_inputs():
    """Factory: random planner instance with `l` layers."""
    return random_planner_inputs


@pytest.fixture
def make_config():
    """Factory: the tiny synthetic experiment config with top-level or per-section overrides."""

    def make(**overrides):
        data = copy.deepcopy(BASE_CONFIG)
        for key, value in overrides.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key].update(value)
            else:
                data[key] = value
        return validate_config(data)

    return make


@pytest.fixture
def mnist_dir() -> Path:
    """Directory holding the MNIST IDX files; tests using it skip when FLSIM_MNIST_DIR is unset."""
    path = os.environ.get("FLSIM_MNIST_DIR")
    if not path or not Path(path).is_dir():
        pytest.skip("FLSIM_MNIST_DIR not set")
    return Path(path)


@pytest.fixture
def tiny_config(tmp_path) -> Path:
    """The tiny synthetic experiment written out as a YAML config file."""
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(copy.deepcopy(BASE_CONFIG)))
    return path
