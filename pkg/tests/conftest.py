import numpy as np
import pytest

from fedpeft import tensor as T
from fedpeft.models import ModelSpec, build_model


def numeric_grad(f, arr: np.ndarray, coords, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` at flat ``coords``."""
    flat = arr.reshape(-1)
    out = np.empty(len(coords))
    for k, i in enumerate(coords):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        out[k] = (hi - lo) / (2 * eps)
    return out


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)``."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_model_grads(model, x, y, names=None, max_coords=12, seed=0):
    """Worst relative error between backprop and finite differences over ``names``."""
    names = names or model.registry.names(trainable=True)

    def loss_value():
        with T.no_grad():
            return float(T.cross_entropy_loss(model(x), y).item())

    model.zero_grad()
    T.backward(T.cross_entropy_loss(model(x), y))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in names:
        p = model.params[n]
        coords = rng.choice(p.size, size=min(max_coords, p.size), replace=False)
        analytic = p.grad.reshape(-1)[coords]
        numeric = numeric_grad(loss_value, p.data, coords)
        worst = max(worst, rel_error(analytic, numeric))
    model.zero_grad()
    return worst


TINY_VIT = ModelSpec("vit", image_size=8, patch_size=4, embed_dim=8, mlp_hidden_dim=16,
                     depth=2, num_heads=2, num_classes=3)


@pytest.fixture
def tiny_spec():
    return TINY_VIT


@pytest.fixture
def tiny_vit():
    return build_model(TINY_VIT, seed=3, dtype=np.float64)


@pytest.fixture
def tiny_batch():
    rng = np.random.default_rng(11)
    return rng.standard_normal((4, 3, 8, 8)), np.array([0, 2, 1, 2])


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
