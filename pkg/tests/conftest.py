import numpy as np
import pytest


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_config(**attack):
    """A desk-scale configuration that trains in a few seconds."""
    from beta_attack.config import from_dict

    return from_dict({
        "dataset": {"n_sensors": 6, "n_steps": 3000, "window": 20, "stride": 5,
                    "injection": {"rate": 0.004}},
        "model": {"dim": 8, "max_neighbors": 3, "head_widths": [32], "epochs": 30},
        "surrogate": {"dim": 4, "head_widths": [16], "epochs": 30},
        "explainer": {"epochs": 15, "max_segments": 24},
        "attack": {"budget": 2, "budgets": [1, 2], "ablation_budgets": [1, 2], "targets": [0, 3],
                   "eval_stride": 20, "measures": ["eigenvector", "degree"], **attack},
        "run": {"seeds": [0]},
    })


@pytest.fixture(scope="session")
def small_world():
    from beta_attack import pipeline

    return pipeline.prepare_seed(small_config(), 0)
