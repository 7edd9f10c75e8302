import numpy as np
import pytest

from flexconv import backend


@pytest.fixture(params=(["native", "reference"] if backend.have_native() else ["reference"]))
def kernel_backend(request):
    """Run a test once per available kernel backend."""
    with backend.use(request.param):
        yield request.param


def rel_err(analytic, numeric) -> float:
    """Vector relative error with a unit floor, the gradcheck convention."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def central_diff(fn, arr, h=1e-5):
    """Dense central finite differences of scalar fn over every entry of arr."""
    arr = np.asarray(arr, dtype=np.float64)
    out = np.empty_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        plus = arr.copy()
        plus[idx] += h
        minus = arr.copy()
        minus[idx] -= h
        out[idx] = (fn(plus) - fn(minus)) / (2.0 * h)
    return out


def quantized_cloud(rng, n, d, scale_bits=10, span=64):
    """Locations on a dyadic lattice: exact under integer translation, so
    bitwise invariance tests are meaningful in floating point."""
    return rng.integers(0, span * 2 ** scale_bits, size=(n, d)).astype(np.float64) / 2 ** scale_bits
