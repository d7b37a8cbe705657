"""Compiled and numpy kernels must agree; skipped when the extension is not built."""
import numpy as np
import pytest

from longtail_synergy import _kernels

backends = _kernels.backends()
needs_compiled = pytest.mark.skipif("compiled" not in backends, reason="compiled extension not built")


def _pair(name, *args):
    py = getattr(backends["python"], name)(*args)
    cc = getattr(backends["compiled"], name)(*args)
    return py, cc


def _close(a, b, tol=1e-12):
    if isinstance(a, tuple):
        for x, y in zip(a, b):
            _close(x, y, tol)
    else:
        np.testing.assert_allclose(np.asarray(a), np.asarray(b), rtol=tol, atol=tol, equal_nan=True)


def test_backend_name():
    assert _kernels.BACKEND in ("python", "compiled")


@needs_compiled
@pytest.mark.parametrize("seed", range(10))
def test_parity(seed):
    rng = np.random.default_rng(seed)
    b = int(rng.integers(2, 20))
    z = rng.standard_normal((b, 5))
    y = rng.integers(0, 3, size=b).astype(np.int64)
    _close(*_pair("scl_fwd_bwd", z, y, 0.2))
    logits = rng.uniform(-1, 1, size=(b, 4))
    _close(*_pair("ldam_fwd_bwd", logits, y, rng.uniform(0, 0.5, 4), 30.0))
    x = rng.standard_normal((b, 6))
    c = rng.standard_normal((b, 3, 6))
    g = rng.dirichlet(np.ones(3), size=b)
    _close(*_pair("center_fwd_bwd", x, c, g))
    t, r, f = (rng.standard_normal((b, 4, 3)) for _ in range(3))
    r[0, :, 0] = 0.0  # exercise the norm floor
    _close(*_pair("mv_fwd_bwd", t, r, f, 1e-12))
    _close(*_pair("icd", x, y, 5))


@needs_compiled
def test_parity_no_positive_anchor():
    z = np.eye(3)
    _close(*_pair("scl_fwd_bwd", z, np.arange(3, dtype=np.int64), 0.1))


def test_env_var_forces_numpy_backend():
    import os
    import subprocess
    import sys

    code = "import longtail_synergy._kernels as k; print(k.BACKEND)"
    env = dict(os.environ, LTS_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
