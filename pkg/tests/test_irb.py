import numpy as np
import numpy.testing as npt
import pytest

from dermswin.embedding import TokenSequence
from dermswin.errors import ConfigError
from dermswin.gradcheck import check_gradients
from dermswin.init import ones_param, zeros_param
from dermswin.irb import (
    FFNParams,
    IRBParams,
    block_output,
    ffn,
    init_ffn_params,
    init_irb_params,
    irb,
)
from dermswin.tensor import ShapeError, Tensor, backward


def rand_seq(grid, d, seed, batch=2, has_cls=False):
    t = grid[0] * grid[1] + (1 if has_cls else 0)
    data = np.random.default_rng(seed).standard_normal((batch, t, d))
    return TokenSequence(Tensor(data), grid, has_cls=has_cls)


def delta_kernel(k, channels):
    kern = np.zeros((k, k, channels))
    kern[k // 2, k // 2, :] = 1.0
    return kern


class TestFFN:
    def test_zero_weights_zero_output(self):
        params = FFNParams(Tensor(np.zeros((4, 8))), Tensor(np.zeros(8)),
                           Tensor(np.zeros((8, 4))), Tensor(np.zeros(4)))
        x = np.random.default_rng(0).standard_normal((2, 3, 4))
        npt.assert_array_equal(ffn(Tensor(x), params).data, np.zeros((2, 3, 4)))

    def test_identity_weights_large_bias_asymptote(self):
        # With W1=W2=I and a big positive b1, GELU sits on its identity
        # asymptote, so the output collapses to x + b1.
        d = 4
        params = FFNParams(Tensor(np.eye(d)), Tensor(np.full(d, 30.0)),
                           Tensor(np.eye(d)), Tensor(np.zeros(d)))
        x = np.random.default_rng(1).standard_normal((2, 3, d))
        npt.assert_allclose(ffn(Tensor(x), params).data, x + 30.0, atol=1e-12)

    def test_width_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            FFNParams(Tensor(np.zeros((4, 8))), Tensor(np.zeros(8)),
                      Tensor(np.zeros((8, 5))), Tensor(np.zeros(5)))

    def test_gradients(self):
        params = init_ffn_params(4, 8, np.random.default_rng(2), dtype=np.float64)
        for p in (params.w1, params.b1, params.w2, params.b2):
            p.requires_grad = True
        x = Tensor(np.random.default_rng(3).standard_normal((2, 3, 4)), requires_grad=True)
        probe = Tensor(np.random.default_rng(4).standard_normal((2, 3, 4)))

        def f():
            return (ffn(x, params) * probe).sum()

        checked = [("x", x), ("w1", params.w1), ("b1", params.b1),
                   ("w2", params.w2), ("b2", params.b2)]
        result = check_gradients(f, checked, tol=1e-5)
        assert result.passed, result.worst()


class TestIRBParams:
    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError, match="odd"):
            IRBParams(Tensor(np.zeros((4, 8))), Tensor(np.zeros(8)),
                      Tensor(np.zeros((2, 2, 8))), Tensor(np.zeros((8, 4))), Tensor(np.zeros(4)))

    def test_projection_must_restore_dim(self):
        with pytest.raises(ShapeError, match="restore"):
            IRBParams(Tensor(np.zeros((4, 8))), Tensor(np.zeros(8)),
                      Tensor(np.zeros((3, 3, 8))), Tensor(np.zeros((8, 6))), Tensor(np.zeros(6)))

    def test_derived_fields(self):
        params = init_irb_params(4, 2, 3, np.random.default_rng(5))
        assert params.dim == 4
        assert params.expansion == 2
        assert params.kernel_size == 3


class TestIRB:
    def test_zero_projection_is_identity(self):
        params = init_irb_params(4, 2, 3, np.random.default_rng(6), dtype=np.float64)
        params.project_w = Tensor(np.zeros((8, 4)))
        params.project_b = Tensor(np.zeros(4))
        seq = rand_seq((4, 4), 4, seed=7)
        out = irb(seq, params)
        npt.assert_array_equal(out.tokens.data, seq.tokens.data)

    def test_inverse_maps_linear_mode_doubles_input(self):
        # Exact algebra: diagonal powers of two invert exactly in binary
        # floating point, and the delta kernel makes dwconv the identity,
        # so with activations off IRB(x) = x + pinv(p(x)) = 2x bit for bit.
        d = 4
        scale = np.diag([2.0, 4.0, 0.5, 1.0])
        params = IRBParams(
            Tensor(scale), Tensor(np.zeros(d)),
            Tensor(delta_kernel(3, d)),
            Tensor(np.diag(1.0 / np.diag(scale))), Tensor(np.zeros(d)),
        )
        seq = rand_seq((2, 2), d, seed=8)
        out = irb(seq, params, use_activation=False)
        npt.assert_array_equal(out.tokens.data, 2.0 * seq.tokens.data)

    def test_inner_skip_flag(self):
        params = init_irb_params(4, 2, 3, np.random.default_rng(9), dtype=np.float64)
        seq = rand_seq((2, 2), 4, seed=10)
        with_skip = irb(seq, params, inner_skip=True)
        without = irb(seq, params, inner_skip=False)
        npt.assert_allclose(with_skip.tokens.data - seq.tokens.data, without.tokens.data,
                            atol=1e-12)

    @pytest.mark.parametrize("grid,d,r,k", [
        ((2, 2), 4, 1, 1),
        ((4, 4), 4, 2, 3),
        ((2, 4), 6, 4, 3),
        ((4, 4), 8, 4, 5),
    ])
    def test_shape_preserved(self, grid, d, r, k):
        params = init_irb_params(d, r, k, np.random.default_rng(11), dtype=np.float64)
        seq = rand_seq(grid, d, seed=12, batch=3)
        out = irb(seq, params)
        assert out.tokens.shape == seq.tokens.shape
        assert out.grid == seq.grid

    def test_token_count_mismatch_rejected(self):
        params = init_irb_params(4, 2, 3, np.random.default_rng(13))
        bad = TokenSequence(Tensor(np.zeros((1, 15, 4))), (4, 4))
        with pytest.raises(ShapeError):
            irb(bad, params)

    def test_cls_token_takes_pointwise_path_only(self):
        # Class token output must not depend on kernel weights and must not
        # leak into spatial tokens through the conv.
        d, r = 4, 2
        rng = np.random.default_rng(14)
        params = init_irb_params(d, r, 3, rng, dtype=np.float64)
        seq = rand_seq((2, 2), d, seed=15, has_cls=True)
        out1 = irb(seq, params)
        params.dw_kernel = Tensor(params.dw_kernel.data + 10.0)
        out2 = irb(seq, params)
        npt.assert_array_equal(out1.tokens.data[:, 0], out2.tokens.data[:, 0])
        assert not np.array_equal(out1.tokens.data[:, 1:], out2.tokens.data[:, 1:])
        assert out1.tokens.shape == seq.tokens.shape

    def test_conv_locality_before_residual(self):
        # Linear mode, r=1, k=3, no inner skip: one output token reaches only
        # its 3x3 spatial neighborhood.
        d = 3
        rng = np.random.default_rng(16)
        params = init_irb_params(d, 1, 3, rng, dtype=np.float64)
        x = Tensor(np.random.default_rng(17).standard_normal((1, 16, d)), requires_grad=True)
        seq = TokenSequence(x, (4, 4))
        out = irb(seq, params, use_activation=False, inner_skip=False)
        backward(out.tokens[0, 1 * 4 + 1].sum())  # probe token (1,1)
        g = x.grad.reshape(4, 4, d)
        inside = np.zeros((4, 4), dtype=bool)
        inside[0:3, 0:3] = True
        assert np.abs(g[~inside]).max() == 0.0
        assert np.abs(g[inside]).max() > 0.0

    @pytest.mark.parametrize("has_cls", [False, True])
    def test_gradients(self, has_cls):
        d = 8
        params = init_irb_params(d, 2, 3, np.random.default_rng(18), dtype=np.float64)
        for name in ("expand_w", "expand_b", "dw_kernel", "project_w", "project_b"):
            getattr(params, name).requires_grad = True
        grid = (4, 4)
        t = 17 if has_cls else 16
        x = Tensor(np.random.default_rng(19).standard_normal((1, t, d)), requires_grad=True)
        probe = Tensor(np.random.default_rng(20).standard_normal((1, t, d)))

        def f():
            seq = TokenSequence(x, grid, has_cls=has_cls)
            return (irb(seq, params).tokens * probe).sum()

        checked = [("x", x)] + [(n, getattr(params, n)) for n in
                                ("expand_w", "expand_b", "dw_kernel", "project_w", "project_b")]
        result = check_gradients(f, checked, tol=1e-4)
        assert result.passed, result.worst()


class TestBlockOutput:
    def test_zero_weights_add_layer_norm(self):
        d = 4
        params = IRBParams(Tensor(np.zeros((d, 2 * d))), Tensor(np.zeros(2 * d)),
                           Tensor(np.zeros((3, 3, 2 * d))), Tensor(np.zeros((2 * d, d))),
                           Tensor(np.zeros(d)))
        seq = rand_seq((2, 2), d, seed=21)
        gamma, beta = ones_param(d, dtype=np.float64), zeros_param(d, dtype=np.float64)
        out = block_output(seq, gamma, beta, params, kind="irb")
        from dermswin.ops import layer_norm

        want = seq.tokens.data + layer_norm(seq.tokens, gamma, beta).data
        npt.assert_array_equal(out.tokens.data, want)

    def test_zero_input_zero_beta_gives_zero(self):
        d = 4
        params = init_irb_params(d, 2, 3, np.random.default_rng(22), dtype=np.float64)
        seq = TokenSequence(Tensor(np.zeros((2, 4, d))), (2, 2))
        out = block_output(seq, ones_param(d, dtype=np.float64), zeros_param(d, dtype=np.float64), params)
        npt.assert_array_equal(out.tokens.data, np.zeros((2, 4, d)))

    def test_ffn_kind_swaps_sublayer_only(self):
        d = 4
        seq = rand_seq((2, 2), d, seed=23)
        gamma, beta = ones_param(d, dtype=np.float64), zeros_param(d, dtype=np.float64)
        fparams = init_ffn_params(d, 2 * d, np.random.default_rng(24), dtype=np.float64)
        out = block_output(seq, gamma, beta, fparams, kind="ffn")
        assert out.tokens.shape == seq.tokens.shape
        from dermswin.ops import layer_norm

        want = seq.tokens.data + ffn(layer_norm(seq.tokens, gamma, beta), fparams).data
        npt.assert_array_equal(out.tokens.data, want)

    def test_unknown_kind_rejected(self):
        seq = rand_seq((2, 2), 4, seed=25)
        with pytest.raises(ConfigError, match="kind"):
            block_output(seq, ones_param(4), zeros_param(4), None, kind="mlp")

    def test_gradients_end_to_end(self):
        d = 4
        params = init_irb_params(d, 2, 3, np.random.default_rng(26), dtype=np.float64)
        for name in ("expand_w", "expand_b", "dw_kernel", "project_w", "project_b"):
            getattr(params, name).requires_grad = True
        gamma = ones_param(d, dtype=np.float64)
        beta = zeros_param(d, dtype=np.float64)
        gamma.requires_grad = True
        beta.requires_grad = True
        x = Tensor(np.random.default_rng(27).standard_normal((2, 4, d)), requires_grad=True)
        probe = Tensor(np.random.default_rng(28).standard_normal((2, 4, d)))

        def f():
            seq = TokenSequence(x, (2, 2))
            return (block_output(seq, gamma, beta, params).tokens * probe).sum()

        checked = [("x", x), ("gamma", gamma), ("beta", beta)] + \
                  [(n, getattr(params, n)) for n in
                   ("expand_w", "expand_b", "dw_kernel", "project_w", "project_b")]
        result = check_gradients(f, checked, tol=1e-4)
        assert result.passed, result.worst()
