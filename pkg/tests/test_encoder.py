import numpy as np
import pytest

from oracles import encoder_reference, fd_gradient, rel_err
from wsodkit.encoder import (
    EncoderConfig,
    attention_maps,
    encode,
    encoder_backward,
    encoder_forward,
    init_encoder_params,
)

SMALL = EncoderConfig(feature_dim=8, heads=2, layers=2, n_max=6, ffn_ratio=2.0)


def make(cfg=SMALL, seed=0):
    rng = np.random.default_rng(seed)
    params = init_encoder_params(cfg, rng)
    return params, rng


class TestConfig:
    def test_heads_must_divide_dim(self):
        with pytest.raises(ValueError):
            EncoderConfig(feature_dim=10, heads=4)

    def test_needs_layers(self):
        with pytest.raises(ValueError):
            EncoderConfig(layers=0)


class TestForward:
    def test_shape_preserved(self, rng):
        params, _ = make()
        for n in (1, 3, 6):
            x = rng.normal(size=(n, 8))
            assert encode(x, params, SMALL).shape == (n, 8)

    def test_rejects_too_many_proposals(self, rng):
        params, _ = make()
        with pytest.raises(ValueError):
            encode(rng.normal(size=(7, 8)), params, SMALL)

    def test_rejects_wrong_dim(self, rng):
        params, _ = make()
        with pytest.raises(ValueError):
            encode(rng.normal(size=(3, 9)), params, SMALL)

    def test_rejects_non_finite(self, rng):
        params, _ = make()
        x = rng.normal(size=(3, 8))
        x[1, 2] = np.nan
        with pytest.raises(ValueError):
            encode(x, params, SMALL)

    def test_zero_projections_pass_residual_only(self, rng):
        params, _ = make()
        for l in range(SMALL.layers):
            params[f"enc.{l}.attn.wo"] = np.zeros((8, 8))
            params[f"enc.{l}.attn.bo"] = np.zeros(8)
            params[f"enc.{l}.ffn.w2"] = np.zeros((SMALL.ffn_dim, 8))
            params[f"enc.{l}.ffn.b2"] = np.zeros(8)
        x = rng.normal(size=(4, 8))
        out = encode(x, params, SMALL)
        np.testing.assert_allclose(out, x + params["enc.pos"][:4], atol=1e-12)

    def test_single_proposal_attention_is_one(self, rng):
        params, _ = make()
        x = rng.normal(size=(1, 8))
        _, cache = encoder_forward(x, params, SMALL)
        for attn in attention_maps(cache):
            np.testing.assert_allclose(attn, 1.0)

    def test_attention_rows_are_distributions(self, rng):
        params, _ = make()
        x = rng.normal(size=(5, 8))
        _, cache = encoder_forward(x, params, SMALL)
        for attn in attention_maps(cache):
            assert np.all(attn >= 0)
            np.testing.assert_allclose(attn.sum(axis=2), 1.0, atol=1e-12)

    def test_matches_straight_line_reference(self):
        cfg = EncoderConfig(feature_dim=8, heads=2, layers=2, n_max=4)
        for seed in range(5):
            rng = np.random.default_rng(seed)
            params = init_encoder_params(cfg, rng)
            x = rng.normal(size=(4, 8))
            ours = encode(x, params, cfg)
            ref = np.array(encoder_reference(x, params, cfg.layers, cfg.heads))
            np.testing.assert_allclose(ours, ref, rtol=1e-12, atol=1e-12)

    def test_permutation_equivariance_only_without_positions(self, rng):
        params, _ = make()
        x = rng.normal(size=(5, 8))
        perm = np.array([3, 0, 4, 1, 2])
        # with zero position embeddings: permuting rows permutes the output
        params_zero = dict(params)
        params_zero["enc.pos"] = np.zeros_like(params["enc.pos"])
        out = encode(x, params_zero, SMALL)
        out_perm = encode(x[perm], params_zero, SMALL)
        np.testing.assert_allclose(out_perm, out[perm], atol=1e-10)
        # with learned (nonzero) positions the same permutation changes the output
        out2 = encode(x, params, SMALL)
        out2_perm = encode(x[perm], params, SMALL)
        assert not np.allclose(out2_perm, out2[perm], atol=1e-6)


class TestBackward:
    def test_zero_upstream_zero_grads(self, rng):
        params, _ = make()
        x = rng.normal(size=(3, 8))
        _, cache = encoder_forward(x, params, SMALL)
        dfeat, grads = encoder_backward(np.zeros((3, 8)), cache, params, SMALL)
        assert not dfeat.any()
        assert all(not g.any() for g in grads.values())

    def test_single_token_attention_logit_grads_vanish(self, rng):
        params, _ = make()
        x = rng.normal(size=(1, 8))
        _, cache = encoder_forward(x, params, SMALL)
        _, grads = encoder_backward(rng.normal(size=(1, 8)), cache, params, SMALL)
        for l in range(SMALL.layers):
            assert np.allclose(grads[f"enc.{l}.attn.wq"], 0.0)
            assert np.allclose(grads[f"enc.{l}.attn.wk"], 0.0)
            assert np.allclose(grads[f"enc.{l}.attn.bq"], 0.0)
            assert np.allclose(grads[f"enc.{l}.attn.bk"], 0.0)

    @pytest.mark.parametrize("seed", range(4))
    def test_finite_difference_all_parameters(self, seed):
        cfg = EncoderConfig(feature_dim=8, heads=2, layers=2, n_max=4)
        rng = np.random.default_rng(seed)
        params = init_encoder_params(cfg, rng)
        x = rng.normal(size=(4, 8))
        upstream = rng.normal(size=(4, 8))

        _, cache = encoder_forward(x, params, cfg)
        dfeat, grads = encoder_backward(upstream, cache, params, cfg)

        def objective():
            return float((upstream * encode(x, params, cfg)).sum())

        for name in sorted(params):
            fd = fd_gradient(objective, params[name], h=1e-5)
            worst = max(
                rel_err(f, a) for f, a in zip(fd.ravel(), grads[name].ravel())
            )
            assert worst < 1e-4, f"{name}: rel err {worst:.3e}"

        fd_x = fd_gradient(objective, x, h=1e-5)
        worst = max(rel_err(f, a) for f, a in zip(fd_x.ravel(), dfeat.ravel()))
        assert worst < 1e-4
