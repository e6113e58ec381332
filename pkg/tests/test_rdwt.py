"""Wavelet front-end tests: frozen goldens from independent oracles,
exactness invariants, shift-equivariance, and per-parameter gradient checks."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import rdwtnet.ndarr as nd
import rdwtnet.rdwt as rw
from rdwtnet.errors import ConfigError, DimensionError
from rdwtnet.ndarr import Tensor

# frozen from the hand-rolled interpolation oracle below (db4 low-pass,
# stretch 1.5, 12 taps, l1-normalized)
GOLDEN_DB4_S15_K12 = np.array(
    [
        -0.00392660759840532,
        0.006813793700339012,
        0.011931835711516516,
        0.011427518435127192,
        -0.042391605313697296,
        -0.04965701151336471,
        -0.010368700163875063,
        0.15238204139540165,
        0.24412790251706057,
        0.26486888320110197,
        0.14519686409190544,
        0.05690723635820486,
    ]
)


def resample_oracle(proto, s, out_len, eps=1e-15):
    """Independent straight-line interpolation oracle (plain loops)."""

    def p(i):
        return proto[i] if 0 <= i < len(proto) else 0.0

    vals = []
    for j in range(out_len):
        t = j / s
        i0 = int(np.floor(t))
        frac = t - i0
        vals.append((1 - frac) * p(i0) + frac * p(i0 + 1))
    v = np.array(vals)
    return v / (np.abs(v).sum() + eps)


# ---------------------------------------------------------------------------
# scale map
# ---------------------------------------------------------------------------


class TestScales:
    def test_midpoint(self):
        s = rw.scales(np.array([0.0]), 1.0, 4.0)
        np.testing.assert_allclose(s.data, [2.5], atol=1e-15)

    def test_limits(self):
        s = rw.scales(np.array([1e4, -1e4]), 1.0, 4.0)
        np.testing.assert_allclose(s.data, [4.0, 1.0], atol=1e-12)

    def test_seed_inversion(self):
        z = rw.scale_to_logit(1.5, 1.0, 4.0)
        assert abs(z - (-np.log(5.0))) < 1e-12
        s = rw.scales(np.array([z]), 1.0, 4.0)
        np.testing.assert_allclose(s.data, [1.5], atol=1e-12)

    def test_kappa_must_be_positive(self):
        with pytest.raises(ConfigError):
            rw.scales(np.zeros(2), 0.0, 4.0)

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=6))
    @settings(max_examples=100, deadline=None)
    def test_range(self, zs):
        s = rw.scales(np.array(zs), 4.0, 4.0)
        assert (s.data >= 1.0).all() and (s.data <= 4.0).all()

    def test_anchor_logits_map_to_rational_scales(self):
        cfg = rw.RdwtConfig()
        params = rw.RdwtParams.create(cfg)
        s = params.scales()
        np.testing.assert_allclose(
            s.data, [1.5, 5 / 3, 7 / 4, 9 / 5], atol=1e-12
        )


# ---------------------------------------------------------------------------
# filter resampling
# ---------------------------------------------------------------------------


class TestResample:
    def test_l1_normalization(self):
        v = rw.resample_filter(nd.tensor([1.0, 1.0, 2.0]), 1.0, 3)
        np.testing.assert_allclose(v.data, [0.25, 0.25, 0.5], atol=1e-12)

    def test_unit_scale_is_identity_before_normalization(self):
        proto = np.array([0.3, -1.2, 0.5, 2.0])
        raw = rw._resample_raw(nd.tensor(proto), 1.0, 4)
        np.testing.assert_array_equal(raw.data, proto)

    def test_db4_golden_vector(self):
        got = rw.resample_filter(nd.tensor(rw.DB4_DEC_LOW), 1.5, 12)
        oracle = resample_oracle(list(rw.DB4_DEC_LOW), 1.5, 12)
        np.testing.assert_allclose(oracle, GOLDEN_DB4_S15_K12, atol=1e-15)
        np.testing.assert_allclose(got.data, GOLDEN_DB4_S15_K12, atol=1e-12)

    def test_taps_beyond_support_are_zero(self):
        v = rw._resample_raw(nd.tensor(rw.DB4_DEC_LOW), 1.5, 32)
        # support of the stretched 8-tap prototype ends by 8 * 1.5 = 12
        np.testing.assert_array_equal(v.data[12:], np.zeros(20))

    def test_l1_norm_close_to_one(self):
        for s in (1.0, 1.37, 2.5, 3.9):
            v = rw.resample_filter(nd.tensor(rw.DB4_DEC_LOW), s, 32)
            assert abs(np.abs(v.data).sum() - 1.0) <= 1e-9

    def test_all_zero_filter_normalizes_to_zeros(self):
        v = rw.resample_filter(nd.tensor(np.zeros(8)), 2.0, 32)
        np.testing.assert_array_equal(v.data, np.zeros(32))

    def test_gradients_wrt_proto_and_scale(self):
        rng = np.random.default_rng(3)
        proto = nd.tensor(rng.normal(size=8), requires_grad=True)
        s = nd.tensor(1.7234, requires_grad=True)  # generic, off any knot
        w = nd.tensor(rng.normal(size=16))

        def f():
            return nd.sum_(rw.resample_filter(proto, s, 16) * w)

        report = nd.grad_check(f, [("proto", proto), ("s", s)], step=1e-5, tol=1e-4)
        assert report.passed, report.format_table()


# ---------------------------------------------------------------------------
# analyze / shrink / synthesize
# ---------------------------------------------------------------------------


class TestAnalyze:
    def test_identity_annihilator_prototypes(self):
        params = rw.identity_params()
        rng = np.random.default_rng(0)
        x = nd.tensor(rng.normal(size=(2, 40)))
        stack = rw.analyze(x, params)
        for d in stack.details:
            np.testing.assert_array_equal(d.data, np.zeros((2, 40)))
        np.testing.assert_allclose(stack.approx.data, x.data, atol=1e-13)

    def test_zero_input_gives_zero_bands(self):
        params = rw.RdwtParams.create(rw.RdwtConfig())
        stack = rw.analyze(nd.tensor(np.zeros((3, 64))), params)
        np.testing.assert_array_equal(stack.approx.data, np.zeros((3, 64)))
        for d in stack.details:
            np.testing.assert_array_equal(d.data, np.zeros((3, 64)))

    def test_band_shapes_match_input(self):
        params = rw.RdwtParams.create(rw.RdwtConfig())
        x = nd.tensor(np.random.default_rng(1).normal(size=(4, 3, 50)))
        stack = rw.analyze(x, params)
        assert stack.approx.data.shape == (4, 3, 50)
        assert len(stack.details) == 4
        for d in stack.details:
            assert d.data.shape == (4, 3, 50)

    def test_impulse_response_is_the_highpass_filter(self):
        # one level, no stretch: the detail band reproduces the normalized
        # high-pass filter laid out forward, centered at the impulse
        cfg = rw.RdwtConfig(levels=1, filter_len=8)
        params = rw.RdwtParams.create(cfg)
        params.z.data[:] = -1e4  # scale exactly 1
        t0 = 32
        x = np.zeros((1, 64))
        x[0, t0] = 1.0
        stack = rw.analyze(nd.tensor(x), params)
        h = rw.resample_filter(params.proto_high(), 1.0, 8).data
        expected_norm = rw.DB4_DEC_HIGH / (np.abs(rw.DB4_DEC_HIGH).sum() + 1e-15)
        np.testing.assert_allclose(h, expected_norm, atol=1e-12)
        d = stack.details[0].data[0]
        lo = t0 - 3  # identity tap of an 8-tap "same" kernel is (K-1)//2 = 3
        np.testing.assert_allclose(d[lo : lo + 8], h, atol=1e-12)
        np.testing.assert_array_equal(d[:lo], np.zeros(lo))
        np.testing.assert_array_equal(d[lo + 8 :], np.zeros(64 - lo - 8))

    def test_input_shorter_than_filter_rejected(self):
        params = rw.RdwtParams.create(rw.RdwtConfig())
        with pytest.raises(DimensionError):
            rw.analyze(nd.tensor(np.zeros((1, 16))), params)


class TestShrink:
    @pytest.mark.parametrize(
        "d,tau,expected",
        [(1.0, 0.3, 0.7), (-0.2, 0.3, 0.0), (-1.0, 0.25, -0.75), (0.0, 0.5, 0.0)],
    )
    def test_examples(self, d, tau, expected):
        out = rw.shrink(nd.tensor([d]), tau)
        np.testing.assert_allclose(out.data, [expected], atol=1e-15)


class TestLevelMasks:
    def test_eval_mode_keeps_everything(self):
        m = rw.level_masks(4, 0.5, "per_batch", training=False)
        np.testing.assert_array_equal(m, np.ones(4))

    def test_zero_probability_keeps_everything(self):
        m = rw.level_masks(4, 0.0, "per_batch", training=True)
        np.testing.assert_array_equal(m, np.ones(4))

    def test_keep_rate(self):
        rng = np.random.default_rng(0)
        draws = np.stack(
            [
                rw.level_masks(4, 0.5, "per_batch", training=True, rng=rng)
                for _ in range(10_000)
            ]
        )
        rates = draws.mean(axis=0)
        np.testing.assert_allclose(rates, 0.5, atol=0.02)

    def test_per_sample_shape(self):
        rng = np.random.default_rng(1)
        m = rw.level_masks(4, 0.3, "per_sample", training=True, rng=rng, n_samples=6)
        assert m.shape == (6, 4)

    def test_invalid_probability(self):
        with pytest.raises(ConfigError):
            rw.level_masks(4, 1.0, "per_batch", training=True)


class TestSynthesize:
    def test_identity_configuration_reconstructs_exactly(self):
        params = rw.identity_params()
        rng = np.random.default_rng(2)
        x = nd.tensor(rng.normal(size=(3, 48)))
        params.theta.data[:] = rng.normal(size=4)  # any tau
        params.alpha.data[:] = rng.normal(size=4)  # any alpha
        y = rw.rdwt_forward(x, params)
        assert np.abs(y.data - x.data).max() <= 1e-12

    def test_zero_gains_return_approximation(self):
        params = rw.RdwtParams.create(rw.RdwtConfig())
        params.alpha.data[:] = 0.0
        x = nd.tensor(np.random.default_rng(3).normal(size=(2, 40)))
        stack = rw.analyze(x, params)
        y = rw.synthesize(stack, params.alpha, params.taus())
        np.testing.assert_array_equal(y.data, stack.approx.data)

    def test_single_level_matches_direct_composition(self):
        # independent oracle: two convolutions and an add, no library reuse
        cfg = rw.RdwtConfig(levels=1)
        params = rw.RdwtParams.create(cfg)
        params.theta.data[:] = -1e3  # tau exactly 0
        params.alpha.data[:] = 1.0
        rng = np.random.default_rng(4)
        x = rng.normal(size=64)
        s = float(params.scales().data[0])
        h_low = resample_oracle(list(rw.DB4_DEC_LOW), s, cfg.filter_len)
        h_high = resample_oracle(list(rw.DB4_DEC_HIGH), s, cfg.filter_len)

        def conv_same(sig, h):
            k = len(h)
            pl = k // 2
            out = np.zeros(len(sig))
            for n in range(len(sig)):
                for j in range(k):
                    src = n + (k - 1 - j) - pl
                    if 0 <= src < len(sig):
                        out[n] += h[j] * sig[src]
            return out

        expected = conv_same(x, h_low) + conv_same(x, h_high)
        y = rw.rdwt_forward(nd.tensor(x.reshape(1, 64)), params)
        assert np.abs(y.data[0] - expected).max() <= 1e-12

    def test_mask_length_mismatch_rejected(self):
        params = rw.RdwtParams.create(rw.RdwtConfig())
        x = nd.tensor(np.random.default_rng(5).normal(size=(1, 40)))
        stack = rw.analyze(x, params, masks=np.ones(3))
        with pytest.raises(DimensionError):
            rw.synthesize(stack, params.alpha, params.taus())

    def test_dead_zone_returns_approximation_exactly(self):
        params = rw.RdwtParams.create(rw.RdwtConfig(), tau_init=2.0)
        rng = np.random.default_rng(6)
        x = nd.tensor(0.01 * rng.normal(size=(2, 40)))
        stack = rw.analyze(x, params)
        for d in stack.details:
            assert np.abs(d.data).max() < 2.0
        y = rw.synthesize(stack, params.alpha, params.taus())
        np.testing.assert_array_equal(y.data, stack.approx.data)

    def test_per_sample_masks_zero_selected_trials(self):
        params = rw.RdwtParams.create(rw.RdwtConfig(levels=2))
        rng = np.random.default_rng(7)
        x = nd.tensor(rng.normal(size=(2, 1, 40)))
        masks = np.array([[1.0, 1.0], [0.0, 0.0]])
        stack = rw.analyze(x, params, masks=masks)
        y = rw.synthesize(stack, params.alpha, params.taus())
        np.testing.assert_array_equal(y.data[1], stack.approx.data[1])
        assert np.abs(y.data[0] - stack.approx.data[0]).max() > 0


# ---------------------------------------------------------------------------
# shift-equivariance and linearity
# ---------------------------------------------------------------------------


def _shift_zero_fill(x, n):
    out = np.zeros_like(x)
    out[..., n:] = x[..., :-n]
    return out


class TestShiftEquivariance:
    @pytest.mark.parametrize("shift", [1, 5, 17])
    def test_interior_window(self, shift):
        # s_max = 2 keeps the resampled filters at 16 taps so the interior
        # window [L*K, T - L*K) of a length-256 signal is non-empty
        cfg = rw.RdwtConfig(levels=4, s_max=2.0)
        assert cfg.filter_len == 16
        params = rw.RdwtParams.create(cfg, tau_init=0.1)
        rng = np.random.default_rng(8)
        x = rng.normal(size=(2, 256))
        y1 = rw.rdwt_forward(nd.tensor(x), params).data
        y2 = rw.rdwt_forward(nd.tensor(_shift_zero_fill(x, shift)), params).data
        lo = cfg.levels * cfg.filter_len
        hi = 256 - cfg.levels * cfg.filter_len
        diff = y2[:, lo:hi] - _shift_zero_fill(y1, shift)[:, lo:hi]
        assert np.abs(diff).max() <= 1e-9


class TestLinearity:
    def test_superposition_below_threshold(self):
        params = rw.RdwtParams.create(rw.RdwtConfig())
        params.theta.data[:] = -1e3  # tau exactly 0: whole map is linear
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 64))
        y = rng.normal(size=(2, 64))
        a, b = 1.7, -0.6
        lhs = rw.rdwt_forward(nd.tensor(a * x + b * y), params).data
        rhs = (
            a * rw.rdwt_forward(nd.tensor(x), params).data
            + b * rw.rdwt_forward(nd.tensor(y), params).data
        )
        assert np.abs(lhs - rhs).max() <= 1e-10


# ---------------------------------------------------------------------------
# regularizer
# ---------------------------------------------------------------------------


class TestRegularize:
    def test_spread_counts_ordered_pairs(self):
        s = nd.tensor(np.full(4, 2.0))
        cfg = rw.RegConfig(
            lambda_bar=0.0, lambda_z=0.0, lambda_spread=1.0, k_barrier=1.0, gamma=1.0
        )
        r = rw.regularize(nd.tensor(np.zeros(4)), np.zeros(4), s, cfg)
        assert abs(r.item() - 12.0) < 1e-12

    def test_anchor_term_zero_at_anchor(self):
        z = np.array([0.3, -0.4, 1.1, 0.0])
        cfg = rw.RegConfig(lambda_bar=0.0, lambda_z=1.0, lambda_spread=0.0)
        s = rw.scales(z, 4.0, 4.0)
        r = rw.regularize(nd.tensor(z), z.copy(), s, cfg)
        assert abs(r.item()) < 1e-15

    def test_golden_value_at_rational_seeds(self):
        # independent summation oracle, evaluated with plain loops
        s_vals = [1.5, 5 / 3, 7 / 4, 9 / 5]
        s_max = 4.0
        bar = sum(np.exp(-(si - 1)) + np.exp(-(s_max - si)) for si in s_vals)
        spr = sum(
            np.exp(-abs(s_vals[l] - s_vals[j]))
            for l in range(4)
            for j in range(4)
            if l != j
        )
        golden = bar + spr  # anchor term is 0 at the seed
        assert abs(golden - 12.661998418649407) < 1e-12

        cfg = rw.RegConfig(
            lambda_bar=1.0, lambda_z=1.0, lambda_spread=1.0, k_barrier=1.0, gamma=1.0
        )
        z = rw.scale_to_logit(np.array(s_vals), 4.0, s_max)
        r = rw.regularize(nd.tensor(z), z.copy(), nd.tensor(s_vals), cfg, s_max=s_max)
        assert abs(r.item() - golden) < 1e-12

    def test_spread_strictly_decreases_with_gap(self):
        cfg = rw.RegConfig(lambda_bar=0.0, lambda_z=0.0, lambda_spread=1.0, gamma=2.0)
        vals = []
        for gap in (0.1, 0.4, 0.9, 1.6):
            s = nd.tensor([2.0, 2.0 + gap])
            vals.append(rw.regularize(nd.tensor(np.zeros(2)), np.zeros(2), s, cfg).item())
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_barrier_strictly_increases_toward_boundaries(self):
        cfg = rw.RegConfig(lambda_bar=1.0, lambda_z=0.0, lambda_spread=0.0, k_barrier=10.0)

        def barrier_at(s_val):
            s = nd.tensor([s_val])
            return rw.regularize(nd.tensor(np.zeros(1)), np.zeros(1), s, cfg).item()

        down = [barrier_at(v) for v in (2.5, 1.8, 1.3, 1.05)]
        up = [barrier_at(v) for v in (2.5, 3.2, 3.7, 3.95)]
        assert all(a < b for a, b in zip(down, down[1:]))
        assert all(a < b for a, b in zip(up, up[1:]))

    def test_gradient_wrt_z(self):
        rng = np.random.default_rng(10)
        cfg = rw.RdwtConfig()
        params = rw.RdwtParams.create(cfg)
        params.z.data += rng.uniform(0.01, 0.05, size=4)  # off the anchors
        reg_cfg = rw.RegConfig()

        def f():
            s = params.scales()
            return rw.regularize(params.z, params.z_mu, s, reg_cfg, s_max=cfg.s_max)

        report = nd.grad_check(f, [("z", params.z)], step=1e-5, tol=1e-4)
        assert report.passed, report.format_table()


# ---------------------------------------------------------------------------
# hybrid fusion
# ---------------------------------------------------------------------------


class TestHybridFuse:
    def test_symmetric_logits_average(self):
        f = rw.FusionParams()
        x = nd.tensor([[1.0, 2.0]])
        y = nd.tensor([[3.0, 6.0]])
        out = rw.hybrid_fuse(x, y, f)
        np.testing.assert_allclose(out.data, [[2.0, 4.0]], atol=1e-12)

    def test_saturated_logits_pick_raw(self):
        f = rw.FusionParams(nd.tensor([40.0, -40.0], requires_grad=True))
        rng = np.random.default_rng(11)
        x = nd.tensor(rng.normal(size=(2, 8)))
        y = nd.tensor(rng.normal(size=(2, 8)))
        out = rw.hybrid_fuse(x, y, f)
        np.testing.assert_allclose(out.data, x.data, atol=1e-12)

    def test_equal_inputs_fixed_point(self):
        f = rw.FusionParams(nd.tensor([0.7, -1.3], requires_grad=True))
        x = nd.tensor(np.random.default_rng(12).normal(size=(3, 5)))
        out = rw.hybrid_fuse(x, x, f)
        np.testing.assert_allclose(out.data, x.data, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        f = rw.FusionParams()
        with pytest.raises(DimensionError):
            rw.hybrid_fuse(nd.tensor(np.zeros((2, 3))), nd.tensor(np.zeros((2, 4))), f)

    @given(st.floats(-30, 30), st.floats(-30, 30), st.floats(-20, 20))
    @settings(max_examples=100, deadline=None)
    def test_softmax_shift_invariance(self, e0, e1, c):
        a = rw.FusionParams(nd.tensor([e0, e1], requires_grad=True))
        b = rw.FusionParams(nd.tensor([e0 + c, e1 + c], requires_grad=True))
        np.testing.assert_allclose(a.betas().data, b.betas().data, atol=1e-12)


# ---------------------------------------------------------------------------
# ensemble
# ---------------------------------------------------------------------------


class TestEnsemble:
    def test_single_branch_equals_branch_forward(self):
        params = rw.RdwtParams.create(rw.RdwtConfig())
        ens = rw.EnsembleParams([params])
        x = nd.tensor(np.random.default_rng(13).normal(size=(2, 40)))
        np.testing.assert_array_equal(
            rw.ensemble_forward(x, ens).data, rw.rdwt_forward(x, params).data
        )

    def test_two_identical_branches_eval(self):
        cfg = rw.RdwtConfig()
        a = rw.RdwtParams.create(cfg)
        b = rw.RdwtParams.create(cfg)
        ens = rw.EnsembleParams([a, b])
        x = nd.tensor(np.random.default_rng(14).normal(size=(1, 40)))
        one = rw.rdwt_forward(x, a)
        two = rw.ensemble_forward(x, ens)
        np.testing.assert_allclose(two.data, one.data, atol=1e-12)

    def test_uniform_logits_give_arithmetic_mean(self):
        cfg = rw.RdwtConfig()
        branches = [rw.RdwtParams.create(cfg, tau_init=t) for t in (0.05, 0.2, 0.6)]
        for i, b in enumerate(branches):
            b.alpha.data[:] = 1.0 + 0.3 * i
        ens = rw.EnsembleParams(branches)
        x = nd.tensor(np.random.default_rng(15).normal(size=(2, 40)))
        fused = rw.ensemble_forward(x, ens)
        mean = np.mean([rw.rdwt_forward(x, b).data for b in branches], axis=0)
        np.testing.assert_allclose(fused.data, mean, atol=1e-12)

    def test_zero_branches_rejected(self):
        with pytest.raises(ConfigError):
            rw.EnsembleParams([])

    def test_train_mode_is_seeded_and_reproducible(self):
        cfg = rw.RdwtConfig()
        ens = rw.EnsembleParams.create(cfg, n_branches=2)
        x = nd.tensor(np.random.default_rng(16).normal(size=(2, 40)))
        y1 = rw.ensemble_forward(x, ens, training=True, rng=np.random.default_rng(5))
        y2 = rw.ensemble_forward(x, ens, training=True, rng=np.random.default_rng(5))
        np.testing.assert_array_equal(y1.data, y2.data)


# ---------------------------------------------------------------------------
# gradient correctness of the whole front end
# ---------------------------------------------------------------------------


class TestGradients:
    def test_rdwt_parameter_groups_match_finite_differences(self):
        rng = np.random.default_rng(17)
        cfg = rw.RdwtConfig()
        params = rw.RdwtParams.create(cfg, tau_init=0.05)
        # move scales off the rational anchors: the filter map is only
        # piecewise-smooth in s and FD straddles the knots exactly there
        params.z.data += rng.uniform(0.01, 0.05, size=cfg.levels)
        x = nd.tensor(rng.normal(size=(1, 32)))
        w = nd.tensor(rng.normal(size=(1, 32)))

        def f():
            return nd.sum_(rw.rdwt_forward(x, params) * w)

        report = nd.grad_check(
            f, params.named_parameters(), step=1e-5, tol=1e-4
        )
        assert report.passed, report.format_table()

    def test_fusion_and_branch_logit_gradients(self):
        rng = np.random.default_rng(18)
        cfg = rw.RdwtConfig()
        ens = rw.EnsembleParams.create(cfg, n_branches=2)
        for b in ens.branches:
            b.z.data += rng.uniform(0.01, 0.05, size=cfg.levels)
        fusion = rw.FusionParams()
        x = nd.tensor(rng.normal(size=(1, 40)))
        w = nd.tensor(rng.normal(size=(1, 40)))

        def f():
            y = rw.ensemble_forward(x, ens)
            return nd.sum_(rw.hybrid_fuse(x, y, fusion) * w)

        report = nd.grad_check(
            f,
            [("eta", fusion.eta), ("branch_logits", ens.branch_logits)],
            step=1e-5,
            tol=1e-4,
        )
        assert report.passed, report.format_table()
