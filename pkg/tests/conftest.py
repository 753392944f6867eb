import numpy as np
import pytest
import torch

from dckd.encoder import FeaturePyramid


def central_difference(fn, x, h=1e-6):
    """Numerical gradient of scalar ``fn`` w.r.t. tensor ``x`` by central differences."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, g = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = float(fn(x))
        flat[i] = old - h
        down = float(fn(x))
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b):
    a, b = torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)
    return ((a - b).norm() / b.norm().clamp_min(1e-300)).item()


class IdentityEncoder:
    """Splits the last axis of a (B, L, D) tensor into L feature levels."""

    def __init__(self, weights):
        self.weights = tuple(weights)

    def __call__(self, x):
        return FeaturePyramid([x[:, i] for i in range(x.shape[1])], self.weights)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _isolated_runs(tmp_path, monkeypatch):
    monkeypatch.setenv("DCKD_RUNS", str(tmp_path / "runs"))


TINY = [
    "data.train_count=6", "data.eval_count=2", "data.image_size=32",
    "teacher.pretrain_iterations=20", "train.total_iterations=24", "train.batch_size=2",
    "dcr.num_negatives=2", "dcr.initial_step=4",
]


def tiny_config(*extra):
    """A config small enough to train in well under a second."""
    from dckd.config import load_config

    return load_config(None, TINY + list(extra))
