"""Compiled kernel vs numpy reference: bit-for-bit equivalence."""
import numpy as np
import pytest

from pimtrain import _kernels
from pimtrain._kernels import _macref

pytestmark = pytest.mark.skipif(
    not _kernels.have_compiled(), reason="compiled kernel not built")

from pimtrain._kernels import _mackern  # noqa: E402


def rand_case(rng, scheme, rows=17, n_out=5, groups=3, n_group=16,
              b_imc=5, b_w=4, b_a=4, m=1):
    n_in = groups * n_group
    lv = 2 ** (b_w - 1) - 1
    acodes = rng.integers(0, 2 ** b_a, (rows, n_in))
    wcodes = rng.integers(-lv, lv + 1, (n_out, n_in))
    return acodes, wcodes, dict(n_group=n_group, b_imc=b_imc, b_w=b_w,
                                b_a=b_a, m=m)


@pytest.mark.parametrize("scheme", [0, 1, 2])
@pytest.mark.parametrize("m", [1, 2, 4])
def test_ideal_path_identical(scheme, m):
    rng = np.random.default_rng(scheme * 10 + m)
    acodes, wcodes, kw = rand_case(rng, scheme, m=m)
    v_ref, c_ref = _macref.mac_layer(scheme, acodes, wcodes,
                                     capture_codes=True, **kw)
    v_c, c_c = _mackern.mac_layer(scheme, acodes, wcodes,
                                  capture_codes=True, **kw)
    assert np.array_equal(v_ref, v_c)
    assert np.array_equal(c_ref, c_c)


@pytest.mark.parametrize("scheme", [0, 1, 2])
def test_nonideal_path_identical(scheme):
    rng = np.random.default_rng(scheme + 41)
    acodes, wcodes, kw = rand_case(rng, scheme, b_imc=6)
    n_out = wcodes.shape[0]
    # wiggly monotone curves, one per pair of outputs
    codes = np.arange(2 ** 6, dtype=np.float64)
    curves = np.stack([
        codes * g + o + 0.8 * np.sin(codes / 5.0 + p)
        for g, o, p in zip([1.01, 0.98, 1.0], [0.4, -1.2, 0.0], [0, 2, 4])
    ])
    curve_idx = (np.arange(n_out) // 2 % 3).astype(np.int64)
    per = _macref.conversions_per_group(scheme, kw["b_w"], kw["b_a"], kw["m"])
    noise = rng.normal(0, 0.35, (acodes.shape[0], n_out, 3 * per))
    v_ref, c_ref = _macref.mac_layer(scheme, acodes, wcodes, curves=curves,
                                     curve_idx=curve_idx, noise=noise,
                                     capture_codes=True, **kw)
    v_c, c_c = _mackern.mac_layer(scheme, acodes, wcodes, curves=curves,
                                  curve_idx=curve_idx, noise=noise,
                                  capture_codes=True, **kw)
    assert np.array_equal(v_ref, v_c)
    assert np.array_equal(c_ref, c_c)


def test_thread_count_invariance():
    rng = np.random.default_rng(7)
    acodes, wcodes, kw = rand_case(rng, 2, rows=64)
    ref, _ = _mackern.mac_layer(2, acodes, wcodes, n_threads=1, **kw)
    for t in (2, 4):
        v, _ = _mackern.mac_layer(2, acodes, wcodes, n_threads=t, **kw)
        assert np.array_equal(ref, v)


def test_threaded_repeats_are_stable():
    # regression: per-thread scratch must not be shared between threads
    rng = np.random.default_rng(8)
    acodes = rng.integers(0, 16, (1500, 144))
    wcodes = rng.integers(-7, 8, (16, 144))
    kw = dict(n_group=144, b_imc=4, b_w=4, b_a=4, m=1)
    ref, _ = _macref.mac_layer(2, acodes, wcodes, **kw)
    for _ in range(5):
        v, _ = _mackern.mac_layer(2, acodes, wcodes, n_threads=4, **kw)
        assert np.array_equal(ref, v)


def test_backend_forcing():
    assert _kernels.backend_name() in ("compiled", "numpy")
    _kernels.force_backend("numpy")
    assert _kernels.backend_name() == "numpy"
    _kernels.force_backend("auto")
    assert _kernels.backend_name() == "compiled"
    with pytest.raises(ValueError):
        _kernels.force_backend("fortran")
