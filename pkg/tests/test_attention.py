import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stridenet.attention import (
    MASK_NEG,
    AttentionParams,
    WindowGeometry,
    cyclic_shift,
    gather_position_bias,
    msa_cost,
    relative_position_index,
    shift_attention_mask,
    window_attention,
    window_partition,
    window_reverse,
    wmsa_cost,
)

from conftest import check_grad


def random_params(rng, c, heads, window, bias_scale=0.5):
    return AttentionParams(
        rng.normal(size=(c, 3 * c)), rng.normal(size=3 * c),
        rng.normal(size=(c, c)), rng.normal(size=c),
        rng.normal(scale=bias_scale, size=((2 * window - 1) ** 2, heads)), heads, window,
    )


@st.composite
def geometries(draw):
    m = draw(st.integers(1, 5))
    return m * draw(st.integers(1, 4)), m * draw(st.integers(1, 4)), m, draw(st.integers(1, 3))


class TestGeometry:
    def test_rejects_non_divisible(self):
        with pytest.raises(ValueError, match="divisible"):
            WindowGeometry(10, 14, 7)

    def test_rejects_bad_shift(self):
        with pytest.raises(ValueError):
            WindowGeometry(14, 14, 7, shift=2)

    def test_counts(self):
        g = WindowGeometry(56, 56, 7, 3)
        assert (g.num_windows, g.tokens_per_window) == (64, 49)


class TestPartition:
    def test_56_grid(self):
        assert window_partition(np.zeros((56, 56, 2)), 7).shape == (64, 49, 2)

    def test_single_window_is_flatten(self, rng):
        x = rng.normal(size=(4, 4, 3))
        np.testing.assert_array_equal(window_partition(x, 4).data[0], x.reshape(16, 3))

    def test_window_contents(self):
        x = np.arange(16.0).reshape(4, 4, 1)
        wins = window_partition(x, 2).data[..., 0]
        np.testing.assert_array_equal(wins[0], [0, 1, 4, 5])
        np.testing.assert_array_equal(wins[1], [2, 3, 6, 7])
        np.testing.assert_array_equal(wins[3], [10, 11, 14, 15])

    @given(geometries(), st.integers(0, 2**31))
    def test_bijection(self, geom, seed):
        h, w, m, c = geom
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(h, w, c))
        g = WindowGeometry(h, w, m)
        np.testing.assert_array_equal(window_reverse(window_partition(x, m), g).data, x)
        y = rng.normal(size=(g.num_windows, m * m, c))
        np.testing.assert_array_equal(window_partition(window_reverse(y, g), m).data, y)

    def test_reverse_28_grid(self, rng):
        y = rng.normal(size=(16, 49, 3))
        g = WindowGeometry(28, 28, 7)
        np.testing.assert_array_equal(window_partition(window_reverse(y, g), 7).data, y)

    def test_reverse_count_mismatch(self):
        with pytest.raises(ValueError):
            window_reverse(np.zeros((3, 49, 2)), WindowGeometry(14, 14, 7))

    def test_batched(self, rng):
        x = rng.normal(size=(2, 8, 8, 3))
        np.testing.assert_array_equal(window_partition(x, 4).data[1], window_partition(x[1], 4).data)


class TestCyclicShift:
    def test_zero_identity(self, rng):
        x = rng.normal(size=(4, 4, 2))
        np.testing.assert_array_equal(cyclic_shift(x, 0, 0).data, x)

    def test_inverse_pair(self, rng):
        x = rng.normal(size=(14, 14, 2))
        np.testing.assert_array_equal(cyclic_shift(cyclic_shift(x, -3, -3), 3, 3).data, x)

    def test_corner_wraps(self):
        x = np.zeros((4, 4, 1))
        x[0, 0] = 1.0
        out = cyclic_shift(x, -1, -1).data
        assert out[3, 3, 0] == 1.0 and out.sum() == 1.0

    @given(st.integers(-9, 9), st.integers(-9, 9), st.integers(-9, 9), st.integers(-9, 9))
    def test_additive_and_preserving(self, a, b, c, d):
        x = np.arange(5 * 6 * 2, dtype=float).reshape(5, 6, 2)
        once = cyclic_shift(x, a + c, b + d).data
        twice = cyclic_shift(cyclic_shift(x, a, b), c, d).data
        np.testing.assert_array_equal(once, twice)
        np.testing.assert_array_equal(np.sort(once.ravel()), np.sort(x.ravel()))

    def test_definition(self, rng):
        x = rng.normal(size=(5, 6, 1))
        out = cyclic_shift(x, 2, -1).data
        for y, xx in itertools.product(range(5), range(6)):
            assert out[y, xx, 0] == x[(y - 2) % 5, (xx + 1) % 6, 0]


class TestRelativePosition:
    def test_m1(self):
        np.testing.assert_array_equal(relative_position_index(1), [[0]])

    def test_m2(self):
        idx = relative_position_index(2)
        assert idx.shape == (4, 4)
        assert np.all(np.diag(idx) == 4)
        assert idx.min() >= 0 and idx.max() <= 8

    def test_m7_table(self):
        idx = relative_position_index(7)
        assert idx.shape == (49, 49)
        assert len(np.unique(idx)) == (2 * 7 - 1) ** 2 == 169

    @pytest.mark.parametrize("m", [2, 3, 4])
    def test_same_displacement_same_bias(self, m, rng):
        table = rng.normal(size=((2 * m - 1) ** 2, 2))
        bias = gather_position_bias(table, m).data
        coords = [(i // m, i % m) for i in range(m * m)]
        seen = {}
        for i, j in itertools.product(range(m * m), repeat=2):
            disp = (coords[i][0] - coords[j][0], coords[i][1] - coords[j][1])
            if disp in seen:
                np.testing.assert_array_equal(bias[:, i, j], seen[disp])
            seen[disp] = bias[:, i, j]
        assert len(seen) == (2 * m - 1) ** 2


def region_oracle(h, w, m, s):
    """Mask pairs where exactly one token wrapped around an edge during the shift."""
    wrapped_y = np.arange(h) >= h - s
    wrapped_x = np.arange(w) >= w - s
    out = []
    for wy in range(h // m):
        for wx in range(w // m):
            ys, xs = np.meshgrid(np.arange(wy * m, (wy + 1) * m), np.arange(wx * m, (wx + 1) * m),
                                 indexing="ij")
            key = wrapped_y[ys.ravel()] * 2 + wrapped_x[xs.ravel()]
            out.append(np.where(key[:, None] == key[None, :], 0.0, MASK_NEG))
    return np.stack(out)


class TestShiftMask:
    def test_no_shift_zero(self):
        assert not shift_attention_mask(WindowGeometry(14, 14, 7, 0)).any()

    def test_14_grid(self):
        mask = shift_attention_mask(WindowGeometry(14, 14, 7, 3))
        assert mask.shape == (4, 49, 49)
        assert not mask[0].any()
        assert mask[1].any() and mask[2].any() and mask[3].any()
        assert set(np.unique(mask)) == {0.0, MASK_NEG}

    @pytest.mark.parametrize("h,w,m", [(14, 14, 7), (8, 12, 4), (6, 6, 3), (8, 8, 2)])
    def test_matches_oracle(self, h, w, m):
        mask = shift_attention_mask(WindowGeometry(h, w, m, m // 2))
        np.testing.assert_array_equal(mask, region_oracle(h, w, m, m // 2))

    def test_symmetric_zero_diagonal(self):
        mask = shift_attention_mask(WindowGeometry(14, 21, 7, 3))
        np.testing.assert_array_equal(mask, mask.transpose(0, 2, 1))
        assert not np.einsum("wii->wi", mask).any()


class TestWindowAttention:
    def test_single_token(self, rng):
        c = 3
        p = random_params(rng, c, 1, 1)
        p.bias_table.data[:] = 0.0
        x = rng.normal(size=(2, 1, c))
        out, attn = window_attention(x, p, return_weights=True)
        assert np.all(attn.data == 1.0)
        v = x @ p.qkv_weight.data[:, 2 * c:] + p.qkv_bias.data[2 * c:]
        np.testing.assert_allclose(out.data, v @ p.proj_weight.data + p.proj_bias.data, atol=1e-12)

    def test_identical_keys_uniform(self, rng):
        c, m = 4, 3
        p = random_params(rng, c, 2, m)
        p.bias_table.data[:] = 0.0
        p.qkv_weight.data[:, c:2 * c] = 0.0  # keys depend only on the bias
        _, attn = window_attention(rng.normal(size=(2, m * m, c)), p, return_weights=True)
        np.testing.assert_allclose(attn.data, 1.0 / (m * m), atol=1e-12)

    def test_hand_two_tokens(self):
        # a 2x2 window whose last two tokens are masked out leaves a 2-token problem
        ln3 = math.log(3)
        p = AttentionParams(
            np.array([[1.0, -ln3, 2.0]]), np.array([0.0, ln3, 1.0]),
            np.eye(1), np.zeros(1), np.zeros((9, 1)), 1, 2,
        )
        x = np.array([[[1.0], [0.0], [0.5], [0.5]]])
        mask = np.zeros((1, 4, 4))
        mask[:, :, 2:] = MASK_NEG
        out, attn = window_attention(x, p, mask, return_weights=True)
        # q = [1, 0], k = [0, ln3], v = [3, 1]
        np.testing.assert_allclose(attn.data[0, 0, 0, :2], [0.25, 0.75], atol=1e-12)
        assert out.data[0, 0, 0] == pytest.approx(0.25 * 3 + 0.75 * 1, abs=1e-12)

    def test_rows_stochastic_with_mask(self, rng):
        geom = WindowGeometry(8, 8, 4, 2)
        mask = shift_attention_mask(geom)
        p = random_params(rng, 6, 3, 4)
        x = window_partition(rng.normal(size=(8, 8, 6)), 4)
        _, attn = window_attention(x, p, mask, return_weights=True)
        np.testing.assert_allclose(attn.data.sum(-1), 1.0, atol=1e-6)
        assert attn.data.min() >= 0
        assert attn.data[np.broadcast_to(mask[:, None] == MASK_NEG, attn.shape)].max() < 1e-30

    def test_heads_must_divide(self, rng):
        with pytest.raises(ValueError):
            random_params(rng, 5, 2, 2)

    def test_bias_table_shape_checked(self, rng):
        with pytest.raises(ValueError):
            AttentionParams(np.zeros((4, 12)), np.zeros(12), np.zeros((4, 4)), np.zeros(4),
                            np.zeros((8, 2)), 2, 2)

    def test_gradient(self, rng):
        c, heads, m = 4, 2, 2
        arrays = [
            rng.normal(size=(1, m * m, c)), rng.normal(size=(c, 3 * c)), rng.normal(size=3 * c),
            rng.normal(size=(c, c)), rng.normal(size=c), rng.normal(size=((2 * m - 1) ** 2, heads)),
        ]
        proj = rng.normal(size=(1, m * m, c))

        def build(ts):
            p = AttentionParams(*ts[1:], heads, m)
            return (window_attention(ts[0], p) * proj).sum()

        check_grad(build, arrays)


class TestCost:
    def test_msa_56(self):
        assert msa_cost(56, 56, 96) == 115_605_504 + 1_888_223_232 == 2_003_828_736

    def test_wmsa_56(self):
        assert wmsa_cost(56, 56, 96, 7) == 115_605_504 + 29_503_488 == 145_108_992

    def test_unit(self):
        assert msa_cost(1, 1, 1) == 6

    def test_doubling_channels(self):
        hw, c = 49, 5
        t1, t2 = 4 * hw * c * c, 2 * hw * hw * c
        assert msa_cost(7, 7, 2 * c) == 4 * t1 + 2 * t2

    def test_global_window_equal(self):
        assert wmsa_cost(7, 7, 32, 7) == msa_cost(7, 7, 32)

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 64))
    def test_windowed_never_more(self, m, a, b, c):
        h, w = m * a, m * b
        wm, gm = wmsa_cost(h, w, c, m), msa_cost(h, w, c)
        assert wm <= gm
        assert (wm == gm) == (m * m == h * w)

    def test_exact_integers_no_float(self):
        assert isinstance(msa_cost(10**4, 10**4, 3), int)

    def test_overflow_rejected(self):
        with pytest.raises(OverflowError):
            msa_cost(10**5, 10**5, 10**3)

    def test_invalid(self):
        with pytest.raises(ValueError):
            msa_cost(0, 4, 4)
        with pytest.raises(ValueError):
            wmsa_cost(10, 10, 4, 3)
