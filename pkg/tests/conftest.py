import dataclasses

import numpy as np
import pytest
from hypothesis import settings

from longtail_synergy.config import ExperimentConfig, load_config
from longtail_synergy.cli import resolve_config_path

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(epochs=4, t_th=2, **train_kw) -> ExperimentConfig:
    """The bundled smoke config, shortened."""
    cfg = load_config(resolve_config_path("smoke"))
    tc = dataclasses.replace(cfg.train.with_epochs(epochs), t_th=t_th, **train_kw)
    return cfg.replace(train=tc).validate()


def central_diff(f, x, h=1e-6):
    """Numerical gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))
