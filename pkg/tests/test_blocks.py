"""Block-level tests: shapes, parameter traversal, attention behavior, and
finite-difference gradients through composite blocks."""

import numpy as np
import pytest

import irdet.autograd as ag
from irdet.autograd import Tensor, grad_check
from irdet.blocks import CSPBlock, ConvBNAct, CoordAttention, SPPF, cascade_ca
from irdet.errors import InvalidArgumentError


def rng():
    return np.random.default_rng(99)


def randx(shape, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal(shape).astype(np.float32))


class TestConvBNAct:
    def test_shapes_stride1_stride2(self):
        blk1 = ConvBNAct(rng(), 3, 8, k=3, stride=1)
        blk2 = ConvBNAct(rng(), 3, 8, k=3, stride=2)
        x = randx((2, 3, 16, 16))
        assert blk1.forward(x, training=False).shape == (2, 8, 16, 16)
        assert blk2.forward(x, training=False).shape == (2, 8, 8, 8)

    def test_param_count(self):
        blk = ConvBNAct(rng(), 4, 6, k=3)
        # conv 6*4*9 + gamma 6 + beta 6
        assert blk.param_count() == 216 + 12

    def test_running_stats_update_only_in_training(self):
        blk = ConvBNAct(rng(), 2, 4)
        x = randx((2, 2, 8, 8))
        before = blk.stats.mean.copy()
        blk.forward(x, training=False)
        np.testing.assert_array_equal(blk.stats.mean, before)
        blk.forward(x, training=True)
        assert not np.array_equal(blk.stats.mean, before)


class TestCSPAndSPPF:
    def test_csp_shape_and_channels(self):
        blk = CSPBlock(rng(), 16, 32, n=1)
        x = randx((1, 16, 8, 8))
        assert blk.forward(x, training=False).shape == (1, 32, 8, 8)

    def test_csp_rejects_too_narrow(self):
        with pytest.raises(InvalidArgumentError):
            CSPBlock(rng(), 4, 1)

    def test_sppf_preserves_shape(self):
        blk = SPPF(rng(), 32)
        x = randx((1, 32, 8, 8))
        assert blk.forward(x, training=False).shape == (1, 32, 8, 8)

    def test_sppf_enlarges_receptive_field(self):
        # A single bright pixel should influence a whole neighborhood after
        # three chained 5x5 pools.
        blk = SPPF(rng(), 8)
        x = np.zeros((1, 8, 16, 16), dtype=np.float32)
        base = blk.forward(Tensor(x), training=False).data
        x[0, :, 8, 8] = 10.0
        out = blk.forward(Tensor(x), training=False).data
        changed = np.abs(out - base).sum(axis=(0, 1))
        ys, xs = np.nonzero(changed > 1e-6)
        assert ys.min() <= 2 and ys.max() >= 14


class TestCoordAttention:
    def test_preserves_shape_nonsquare(self):
        blk = CoordAttention(rng(), 16)
        x = randx((2, 16, 6, 10))
        assert blk.forward(x, training=False).shape == (2, 16, 6, 10)

    def test_reduced_channels_floor(self):
        assert CoordAttention(rng(), 64, reduction=8).cr == 8
        assert CoordAttention(rng(), 16, reduction=8).cr == 4
        assert CoordAttention(rng(), 8, reduction=8).cr == 4

    def test_channel_mismatch_raises(self):
        blk = CoordAttention(rng(), 16)
        with pytest.raises(InvalidArgumentError, match="16"):
            blk.forward(randx((1, 8, 4, 4)), training=False)

    def test_output_is_damped_input(self):
        # Gates are sigmoids, so |out| < |x| elementwise and signs survive.
        blk = CoordAttention(rng(), 8)
        x = randx((1, 8, 5, 7), seed=3)
        out = blk.forward(x, training=False).data
        assert np.all(np.abs(out) <= np.abs(x.data) + 1e-7)
        nz = np.abs(x.data) > 1e-6
        assert np.all(np.sign(out[nz]) == np.sign(x.data[nz]))

    def test_gates_vary_along_their_axis(self):
        # A row-localized stimulus must modulate rows differently.
        blk = CoordAttention(rng(), 8)
        x = np.ones((1, 8, 8, 8), dtype=np.float32) * 0.1
        x[0, :, 2, :] = 3.0
        out = blk.forward(Tensor(x), training=False).data
        ratio = out / x
        assert ratio[0, 0].std(axis=0).mean() > 1e-4

    def test_cascade_matches_sequential_application(self):
        blocks = [CoordAttention(rng(), 8) for _ in range(3)]
        # Distinct parameters per block.
        r = np.random.default_rng(5)
        blocks = [CoordAttention(r, 8) for _ in range(3)]
        x = randx((1, 8, 6, 6), seed=9)
        manual = blocks[2].forward(blocks[1].forward(blocks[0].forward(x, False), False), False)
        chained = cascade_ca(x, blocks, training=False)
        np.testing.assert_array_equal(manual.data, chained.data)

    def test_cascaded_blocks_have_independent_params(self):
        r = np.random.default_rng(5)
        blocks = [CoordAttention(r, 8) for _ in range(3)]
        w0 = blocks[0].h_gate.data
        w1 = blocks[1].h_gate.data
        assert not np.array_equal(w0, w1)

    def test_gradients_through_block(self):
        blk = CoordAttention(np.random.default_rng(2), 8)

        def fn(t):
            return ag.tsum(blk.forward(t, training=True) ** 2.0)

        x0 = Tensor(np.random.default_rng(4).standard_normal((1, 8, 4, 5)))
        assert grad_check(fn, x0) < 1e-3


class TestModuleTraversal:
    def test_named_params_deterministic_and_unique(self):
        blk = CSPBlock(np.random.default_rng(0), 8, 16, n=2)
        names = [n for n, _ in blk.named_params()]
        assert len(names) == len(set(names))
        blk2 = CSPBlock(np.random.default_rng(0), 8, 16, n=2)
        names2 = [n for n, _ in blk2.named_params()]
        assert names == names2
        for (_, a), (_, b) in zip(blk.named_params(), blk2.named_params()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_different_seed_different_weights(self):
        a = ConvBNAct(np.random.default_rng(0), 3, 4)
        b = ConvBNAct(np.random.default_rng(1), 3, 4)
        assert not np.array_equal(a.weight.data, b.weight.data)

    def test_buffers_listed_separately(self):
        blk = ConvBNAct(np.random.default_rng(0), 3, 4)
        buffers = dict(blk.named_buffers())
        assert set(buffers) == {"stats.running_mean", "stats.running_var"}
        params = dict(blk.named_params())
        assert set(params) == {"weight", "gamma", "beta"}

    def test_set_requires_grad(self):
        blk = ConvBNAct(np.random.default_rng(0), 3, 4)
        blk.set_requires_grad(False)
        assert all(not t.requires_grad for t in blk.params())
        blk.set_requires_grad(True)
        assert all(t.requires_grad for t in blk.params())
