import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from caad.exceptions import DataError
from caad.features import IdentityExtractor, TinyCNN, extract, global_average_pool, make_extractor

from gradcheck import check_all, random_case


def naive_conv_stride2(x, w, b):
    """Direct 3x3 / stride 2 / pad 1 convolution followed by relu, one loop per output value."""
    c_in, h, wd = x.shape
    c_out = w.shape[0]
    xp = np.zeros((c_in, h + 2, wd + 2))
    xp[:, 1:-1, 1:-1] = x
    ho, wo = (h - 1) // 2 + 1, (wd - 1) // 2 + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(c_in):
                    for ki in range(3):
                        for kj in range(3):
                            acc += w[o, c, ki, kj] * xp[c, 2 * i + ki, 2 * j + kj]
                out[o, i, j] = max(acc, 0.0)
    return out


def test_identity_extractor_passes_through():
    e = IdentityExtractor(3)
    np.testing.assert_array_equal(extract(e, [0.1, -0.2, 0.3]), [0.1, -0.2, 0.3])
    assert e.params == []
    with pytest.raises(DataError):
        e.extract(np.zeros(4))


def test_tiny_cnn_matches_direct_convolution():
    rng = np.random.default_rng(5)
    net = TinyCNN((1, 8, 8), output_dim=4, channels=(3, 5), rng=rng)
    for blk in net.blocks:
        blk.bias[:] = rng.normal(scale=0.1, size=blk.bias.shape)
    x = rng.normal(size=(1, 8, 8))
    a = x
    for blk in net.blocks:
        a = naive_conv_stride2(a, blk.weight, blk.bias)
    expected = a.mean(axis=(1, 2))
    np.testing.assert_allclose(extract(net, x), expected, rtol=0, atol=1e-10)


def test_constant_final_map_pools_to_constant():
    net = TinyCNN((1, 8, 8), output_dim=3, channels=(2,), rng=0)
    last = net.blocks[-1]
    last.weight[:] = 0.0
    last.bias[:] = 1.7
    np.testing.assert_allclose(extract(net, np.random.default_rng(0).normal(size=(1, 8, 8))), [1.7] * 3)


def test_tiny_cnn_output_dim_and_shape_errors():
    net = make_extractor("tiny_cnn", input_shape=(1, 12, 12), output_dim=6, channels=(4,), rng=0)
    feats, _ = net.extract(np.zeros((5, 1, 12, 12)))
    assert feats.shape == (5, 6)
    with pytest.raises(DataError, match=r"\(1, 12, 12\)"):
        net.extract(np.zeros((2, 1, 10, 10)))
    with pytest.raises(ValueError):
        make_extractor("resnet", input_shape=(3,))


def test_tiny_cnn_is_deterministic_for_frozen_weights():
    net = TinyCNN((2, 8, 8), output_dim=4, rng=1)
    x = np.random.default_rng(2).normal(size=(3, 2, 8, 8))
    np.testing.assert_array_equal(extract(net, x), extract(net, x))
    np.testing.assert_array_equal(extract(net, x), extract(net.copy(), x))


def test_gap_examples():
    m = np.random.default_rng(0).normal(size=(3, 1, 1))
    np.testing.assert_array_equal(global_average_pool(m), m[:, 0, 0])
    assert global_average_pool(np.full((1, 4, 4), 2.0))[0] == 2.0
    r = np.random.default_rng(1).normal(size=(3, 5, 5))
    oracle = [sum(r[c].ravel()) / 25 for c in range(3)]
    np.testing.assert_allclose(global_average_pool(r), oracle, rtol=1e-14)
    with pytest.raises(DataError):
        global_average_pool(np.zeros((2, 0, 3)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 4, 3), elements=st.floats(-1e3, 1e3)), st.randoms(use_true_random=False))
def test_gap_is_invariant_to_spatial_permutation(fmap, rnd):
    perm = list(range(12))
    rnd.shuffle(perm)
    shuffled = fmap.reshape(2, 12)[:, perm].reshape(2, 4, 3)
    np.testing.assert_allclose(global_average_pool(shuffled), global_average_pool(fmap), rtol=1e-12, atol=1e-9)


@pytest.mark.parametrize("seed", range(6))
def test_gradients_through_tiny_cnn(seed):
    rng = np.random.default_rng(100 + seed)
    f, params, grads = random_case(rng, "deviation", True)
    ok, worst_rel, worst_abs = check_all(f, params, grads, rng)
    assert ok, (worst_rel, worst_abs)
