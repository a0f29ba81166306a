import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raaf.exceptions import DimensionError
from raaf.glimpse import GlimpseNetwork, Retina, extract_retina, location_to_pixel
from raaf.gradcheck import run_check

locations = st.tuples(st.floats(-1, 1), st.floats(-1, 1))


def brute_force_retina(frame, loc, window, n_scales, k):
    """Independent crop-and-mean: loops over cells, zero outside the frame."""
    H, W = frame.shape
    h, w = window
    pr = int(np.floor((loc[0] + 1) / 2 * (H - 1) + 0.5))
    pc = int(np.floor((loc[1] + 1) / 2 * (W - 1) + 0.5))
    out = np.zeros((n_scales, h, w))
    for s in range(n_scales):
        f = k**s
        hs, ws = h * f, w * f
        top, left = pr - hs // 2, pc - ws // 2
        for i in range(h):
            for j in range(w):
                total = 0.0
                for di in range(f):
                    for dj in range(f):
                        r, c = top + i * f + di, left + j * f + dj
                        if 0 <= r < H and 0 <= c < W:
                            total += frame[r, c]
                out[s, i, j] = total / (f * f)
    return out


def test_center_location_hits_middle_cell():
    frame = np.arange(35.0).reshape(7, 5)
    patch = extract_retina(frame, (0.0, 0.0), window=(1, 1), n_scales=1)
    assert patch[0, 0, 0] == frame[3, 2]
    patch = extract_retina(frame, (0.0, 0.0), window=(3, 3), n_scales=1)
    assert np.array_equal(patch[0], frame[2:5, 1:4])


def test_corner_overhang_is_zero_filled():
    frame = np.arange(1.0, 26.0).reshape(5, 5)
    patch = extract_retina(frame, (-1.0, -1.0), window=(3, 3), n_scales=1)[0]
    assert not patch[0].any() and not patch[:, 0].any()
    assert np.array_equal(patch[1:, 1:], frame[:2, :2])


def test_two_scales_match_block_means():
    frame = np.arange(63.0).reshape(9, 7)
    for loc in [(0.0, 0.0), (0.5, -0.3), (-1.0, 1.0), (1.0, 1.0)]:
        got = extract_retina(frame, loc, window=(2, 2), n_scales=2, scale_factor=2)
        assert np.array_equal(got, brute_force_retina(frame, loc, (2, 2), 2, 2))


@settings(max_examples=60, deadline=None)
@given(locations, st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31))
def test_retina_matches_brute_force(loc, h, w, n_scales, seed):
    frame = np.random.default_rng(seed).normal(size=(11, 9))
    got = extract_retina(frame, loc, window=(h, w), n_scales=n_scales, scale_factor=2)
    np.testing.assert_allclose(got, brute_force_retina(frame, loc, (h, w), n_scales, 2), atol=1e-12)
    assert got.shape == (n_scales, h, w)


def test_non_finite_location():
    with pytest.raises(DimensionError):
        extract_retina(np.zeros((5, 5)), (np.nan, 0.0))
    with pytest.raises(DimensionError):
        location_to_pixel([[np.inf, 0.0]], 5, 5)


def test_out_of_range_location_is_clamped():
    assert location_to_pixel([[3.0, -7.0]], 9, 5).tolist() == [[8, 0]]


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(-3, 3), st.integers(-2, 2), st.integers(0, 2**31))
def test_translation_consistency(half, dr, dc, seed):
    H, W = 41, 33
    frame = np.random.default_rng(seed).normal(size=(H, W))
    shifted = np.roll(frame, (dr, dc), axis=(0, 1))
    # pixel centers far from the border, converted back to exact normalized coordinates
    pr, pc = 20, 16
    to_loc = lambda r, c: (2 * r / (H - 1) - 1, 2 * c / (W - 1) - 1)
    a = extract_retina(frame, to_loc(pr, pc), window=(half, half), n_scales=1)
    b = extract_retina(shifted, to_loc(pr + dr, pc + dc), window=(half, half), n_scales=1)
    assert np.array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(locations)
def test_zero_frame_gives_zero_retina(loc):
    assert not extract_retina(np.zeros((13, 9)), loc, window=(4, 2), n_scales=3).any()


@settings(max_examples=40, deadline=None)
@given(st.lists(locations, min_size=1, max_size=6), st.integers(1, 5), st.integers(1, 3))
def test_patch_size_independent_of_location(locs, h, n_scales):
    retina = Retina(h, 2, n_scales, 2)
    frames = np.ones((1, 10, 6))
    out = retina.extract(frames, np.array(locs), np.zeros(len(locs), dtype=np.intp))
    assert out.shape == (len(locs), n_scales, h, 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_retina_backward_is_adjoint(seed):
    rng = np.random.default_rng(seed)
    retina = Retina(3, 2, 3, 2)
    frames = rng.normal(size=(2, 9, 7))
    loc = rng.uniform(-1.2, 1.2, size=(5, 2))
    index = rng.integers(0, 2, size=5)
    g = rng.normal(size=(5, 3, 3, 2))
    lhs = np.sum(retina.extract(frames, loc, index) * g)
    rhs = np.sum(frames * retina.backward(g, loc, index, (9, 7), 2))
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


# ---------------------------------------------------------------- glimpse network


def test_zero_weights_give_relu_of_bias():
    net = GlimpseNetwork(6, 4, 4, 5, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    for p in net.params:
        p.value[...] = 0.0 if p.value.ndim == 2 else rng.normal(size=p.shape)
    g1, _ = net.forward(rng.normal(size=(3, 6)), rng.uniform(-1, 1, size=(3, 2)))
    assert np.array_equal(g1, np.tile(np.maximum(net.out_b.value, 0), (3, 1)))


def test_where_pathway_is_live():
    net = GlimpseNetwork(6, 8, 8, 10, np.random.default_rng(2))
    net.out_b.value[...] = 1.0
    rho = np.tile(np.random.default_rng(3).normal(size=(1, 6)), (2, 1))
    g, _ = net.forward(rho, np.array([[0.5, -0.5], [-0.5, 0.5]]))
    assert not np.array_equal(g[0], g[1])


def test_mismatched_branch_sizes():
    with pytest.raises(DimensionError):
        GlimpseNetwork(6, 4, 5, 5)


def test_glimpse_is_stateless_across_batch_order():
    net = GlimpseNetwork(12, 6, 6, 7, np.random.default_rng(4))
    rng = np.random.default_rng(5)
    rho, loc = rng.normal(size=(8, 2, 3, 2)), rng.uniform(-1, 1, size=(8, 2))
    perm = rng.permutation(8)
    g, _ = net.forward(rho, loc)
    gp, _ = net.forward(rho[perm], loc[perm])
    assert np.array_equal(g[perm], gp)
    g_one = np.vstack([net.forward(rho[k : k + 1], loc[k : k + 1])[0] for k in range(8)])
    np.testing.assert_allclose(g, g_one, rtol=0, atol=1e-13)


def test_output_dimension_and_finiteness():
    net = GlimpseNetwork(12, 128, 128, 220, np.random.default_rng(6))
    g, _ = net.forward(np.random.default_rng(7).normal(size=(3, 12)), np.zeros((3, 2)))
    assert g.shape == (3, 220) and np.all(np.isfinite(g))


def test_glimpse_gradients_match_finite_differences():
    result = run_check("glimpse_network", trials=20, seed=11)
    assert result.max_error < 1e-5, result
