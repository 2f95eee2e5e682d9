"""Backend parity: the numba and numpy kernel paths must agree (the
similarity kernels bit-for-bit, the rest to float tolerance)."""

import numpy as np
import pytest

from kgc import kernels

BACKENDS = sorted(kernels.implementations())
needs_both = pytest.mark.skipif(len(BACKENDS) < 2,
                                reason="numba backend unavailable")


def impls(name):
    return [kernels.implementations()[b][name] for b in BACKENDS]


def test_active_backend_reflects_environment():
    assert kernels.active_backend() in BACKENDS


@needs_both
def test_scatter_add_parity():
    rng = np.random.default_rng(0)
    idx = rng.integers(0, 10, size=50)
    vals = rng.normal(size=(50, 4))
    outs = []
    for fn in impls("scatter_add_rows"):
        out = np.zeros((10, 4))
        fn(out, idx, vals)
        outs.append(out)
    np.testing.assert_allclose(outs[0], outs[1], rtol=1e-12)


@needs_both
def test_segment_max_parity_and_empty_segments():
    rng = np.random.default_rng(1)
    vals = rng.normal(size=20)
    segs = rng.integers(0, 6, size=20)
    segs[segs == 3] = 2  # leave segment 3 empty
    results = [fn(vals, segs, 6) for fn in impls("segment_max")]
    np.testing.assert_array_equal(results[0], results[1])
    assert results[0][3] == 0.0  # empty segment convention


@needs_both
def test_rowwise_dot_parity():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(30, 7)), rng.normal(size=(30, 7))
    r = [fn(a, b) for fn in impls("rowwise_dot")]
    np.testing.assert_allclose(r[0], r[1], rtol=1e-12)


@needs_both
def test_conv_parity():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 2, 9))
    k = rng.normal(size=(5, 2, 3))
    g = rng.normal(size=(4, 5, 9))
    fwd = [fn(x, k) for fn in impls("conv_tworow_forward")]
    np.testing.assert_allclose(fwd[0], fwd[1], rtol=1e-12)
    dk = [fn(g, x, 3) for fn in impls("conv_tworow_grad_kernels")]
    np.testing.assert_allclose(dk[0], dk[1], rtol=1e-12)
    dx = [fn(g, k) for fn in impls("conv_tworow_grad_input")]
    np.testing.assert_allclose(dx[0], dx[1], rtol=1e-12)


@needs_both
def test_similarity_kernels_bit_identical_across_backends():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(40, 33)).astype(np.float32)
    norms = [fn(x) for fn in impls("row_norms")]
    np.testing.assert_array_equal(norms[0], norms[1])

    unit = x.astype(np.float64) / norms[0][:, None]
    tiles = [fn(unit[:17], unit[17:]) for fn in impls("sim_tile")]
    np.testing.assert_array_equal(tiles[0], tiles[1])


def test_sim_tile_matches_sequential_python_loop_bitwise():
    """The kernel contract: per-pair similarity is the k-sequential dot."""
    rng = np.random.default_rng(5)
    unit = rng.normal(size=(12, 21))
    tile = kernels.sim_tile(unit[:5], unit[5:])
    for i in range(5):
        for j in range(7):
            acc = 0.0
            for k in range(21):
                acc += unit[i, k] * unit[5 + j, k]
            assert tile[i, j] == acc  # bitwise


def test_row_norms_match_sequential_python_loop_bitwise():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(9, 140)).astype(np.float32)
    norms = kernels.row_norms(x)
    for i in range(9):
        acc = 0.0
        for k in range(140):
            v = float(x[i, k])
            acc += v * v
        assert norms[i] == np.sqrt(acc)
