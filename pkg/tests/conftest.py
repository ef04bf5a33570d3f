import numpy as np
import pytest

from partrf import engine
from partrf.engine import Value


@pytest.fixture(autouse=True)
def _f64_mode():
    """Gradient-check precision by default; training tests opt into f32."""
    engine.set_default_dtype(np.float64)
    yield
    engine.set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def numeric_grad(f, x0: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    x = np.array(x0, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def assert_close(a: np.ndarray, b: np.ndarray, rtol: float = 1e-4, atol: float = 1e-7):
    a, b = np.broadcast_arrays(np.asarray(a, dtype=np.float64),
                               np.asarray(b, dtype=np.float64))
    scale = np.maximum(np.abs(a), np.abs(b))
    bad = np.abs(a - b) > (rtol * scale + atol)
    assert not bad.any(), (
        f"mismatch at {np.argwhere(bad)[:5]}: "
        f"{a[bad][:5]} vs {b[bad][:5]} (rtol={rtol}, atol={atol})")


def grad_check(make_scalar, arrays: dict, h: float = 1e-5,
               rtol: float = 1e-4, atol: float = 1e-7):
    """Compare reverse-mode gradients against central differences.

    Args:
        make_scalar: dict[str, Value] -> scalar Value; rebuilt per evaluation
            so finite differencing sees a pure function.
        arrays: leaf inputs by name.
    """
    leaves = {k: Value(np.array(v), requires_grad=True) for k, v in arrays.items()}
    out = make_scalar(leaves)
    engine.backward(out)
    for name in arrays:
        def f(x, _name=name):
            vals = {k: Value(np.array(v)) for k, v in arrays.items()}
            vals[_name] = Value(x)
            return float(make_scalar(vals).data)

        expected = numeric_grad(f, np.array(arrays[name], dtype=np.float64), h=h)
        got = leaves[name].grad
        if got is None:
            got = np.zeros_like(expected)
        assert_close(got, expected, rtol=rtol, atol=atol)
