"""Tests for the learned-gain recursions."""
import numpy as np
import pytest
import torch

from lakf.errors import DomainError, ModeMismatchError, NumericError
from lakf.geometry import BBox, StateMode, boxes_from_array
from lakf.learned_filters import (
    FeatureBundle,
    NetworkConfig,
    RecursionState,
    Variant,
    apply_gain,
    build_network,
    collate,
    compose_gain,
    compute_features,
    filter_batch,
    init_recursion,
    knet_step,
    predict_recursion,
    reset,
    run_learned_filter,
    siknet_step,
    sknet_step,
)
from lakf.linear_models import LinearModelConfig, build_measurement

H_T = torch.from_numpy(build_measurement().T.copy())


def box_sequence(length=10):
    t = np.arange(length, dtype=np.float64)
    arr = np.stack([100 + 3 * t, 200 - 2 * t, np.full(length, 0.45), 120 + t], axis=1)
    return boxes_from_array(arr, StateMode.XYAH)


def predicted_state(net):
    y1 = torch.tensor([[100.0, 200.0, 0.5, 120.0]], dtype=torch.float64)
    return predict_recursion(init_recursion(y1), net.transition)


class TestComputeFeatures:
    """Test feature assembly."""

    def test_equal_inputs(self):
        x = torch.arange(8, dtype=torch.float64)
        y = torch.arange(4, dtype=torch.float64)
        f = compute_features(x, y, x, x, y, y)
        assert torch.count_nonzero(f.z1) == 0
        assert torch.count_nonzero(f.z2) == 0
        for k in range(3):
            assert torch.equal(f.z3[:, k], x)
            assert torch.equal(f.z4[:, k], y)

    def test_state_evolution_difference(self):
        ones = torch.ones(8, dtype=torch.float64)
        zeros = torch.zeros(8, dtype=torch.float64)
        f = compute_features(ones, torch.zeros(4, dtype=torch.float64), x_post_prev2=zeros, x_prior_prev=ones)
        assert f.z1[0, 0] == 1.0
        assert f.z1[0, 1] == 0.0

    def test_first_step_convention(self):
        x = torch.randn(8, dtype=torch.float64)
        y = torch.randn(4, dtype=torch.float64)
        f = compute_features(x, y)
        assert f.z1.shape == (8, 2) and f.z2.shape == (4, 2)
        assert f.z3.shape == (8, 3) and f.z4.shape == (4, 3)
        assert torch.count_nonzero(f.z1) == 0 and torch.count_nonzero(f.z2) == 0
        assert torch.equal(f.z3, x.unsqueeze(-1).expand(8, 3))


class TestGainComposition:
    """Test K = G1 H^T G2 and the gain update."""

    def test_identity_factors(self):
        K = compose_gain(torch.eye(8, dtype=torch.float64), torch.eye(4, dtype=torch.float64), H_T)
        assert K.shape == (8, 4)
        assert torch.equal(K, H_T)

    def test_zero_gain_is_identity(self):
        x_prior = torch.tensor([[1.0, 0.5, 2.0, 0.0, 0.4, 0.0, 80.0, 1.0]], dtype=torch.float64)
        out = apply_gain(x_prior, torch.zeros(1, 8, 4, dtype=torch.float64),
                         torch.tensor([[5.0, -3.0, 0.1, 2.0]], dtype=torch.float64))
        assert torch.equal(out, x_prior)

    def test_sizes_clamped(self):
        x_prior = torch.tensor([[1.0, 0.0, 2.0, 0.0, 0.4, 0.0, 80.0, 0.0]], dtype=torch.float64)
        K = H_T.unsqueeze(0).clone()
        out = apply_gain(x_prior, K, torch.tensor([[0.0, 0.0, -1.0, -100.0]], dtype=torch.float64))
        assert out[0, 4] == pytest.approx(1e-4)
        assert out[0, 6] == pytest.approx(1e-4)


class TestBuildNetwork:
    """Test the network factory."""

    def test_kf_has_no_network(self):
        with pytest.raises(DomainError):
            build_network(Variant.KF)

    def test_seeded_initialization(self, small_config):
        a = build_network("siknet", small_config, seed=3)
        b = build_network("siknet", small_config, seed=3)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
            assert pa.dtype == torch.float64

    def test_hidden_counts(self, small_config):
        assert build_network("knet", small_config).n_hidden == 1
        assert build_network("sknet", small_config).n_hidden == 2
        assert len(reset(build_network("siknet", small_config), batch=3).hidden[0]) == 3

    @pytest.mark.parametrize("variant", ["knet", "sknet"])
    def test_baseline_gain_ignores_feature_scale(self, small_config, variant):
        net = build_network(variant, small_config, seed=2)
        gen = torch.Generator().manual_seed(0)
        z1 = torch.randn(1, 8, 2, generator=gen, dtype=torch.float64)
        z2 = torch.randn(1, 4, 2, generator=gen, dtype=torch.float64)
        z3 = torch.zeros(1, 8, 3, dtype=torch.float64)
        z4 = torch.zeros(1, 4, 3, dtype=torch.float64)
        hidden = net.init_hidden(1)
        with torch.no_grad():
            small, _ = net.gain(FeatureBundle(z1, z2, z3, z4), hidden)
            large, _ = net.gain(FeatureBundle(50 * z1, 50 * z2, z3, z4), hidden)
        torch.testing.assert_close(small, large, rtol=1e-10, atol=1e-12)


class TestSteps:
    """Test single learned updates."""

    def test_smoke_step(self, small_net):
        state = predicted_state(small_net)
        y = torch.tensor([[103.0, 198.0, 0.5, 121.0]], dtype=torch.float64)
        new_state, net_state, diag = {
            Variant.KNET: knet_step, Variant.SKNET: sknet_step, Variant.SIKNET: siknet_step,
        }[small_net.variant](state, reset(small_net), y)
        assert diag.K.shape == (1, 8, 4)
        assert torch.isfinite(new_state.x_post).all()
        assert new_state.t == 2
        assert all(torch.isfinite(h).all() for h in net_state.hidden)

    def test_wrong_variant(self, small_config):
        net = build_network("knet", small_config)
        with pytest.raises(ModeMismatchError):
            siknet_step(predicted_state(net), reset(net), torch.ones(1, 4, dtype=torch.float64))

    def test_requires_prediction(self, small_config):
        net = build_network("sknet", small_config)
        state = init_recursion(torch.tensor([[1.0, 1.0, 0.5, 2.0]], dtype=torch.float64))
        with pytest.raises(DomainError):
            sknet_step(state, reset(net), torch.ones(1, 4, dtype=torch.float64))

    def test_non_finite_reports_step(self, small_config):
        net = build_network("knet", small_config)
        with torch.no_grad():
            net.head.output_layer.bias.fill_(float("nan"))
        with pytest.raises(NumericError) as exc_info:
            knet_step(predicted_state(net), reset(net), torch.ones(1, 4, dtype=torch.float64))
        assert exc_info.value.step == 2


class TestReset:
    """Test hidden-state reset."""

    def test_zero_and_idempotent(self, small_config):
        net = build_network("siknet", small_config)
        once = reset(net)
        twice = reset(once)
        for a, b in zip(once.hidden, twice.hidden):
            assert torch.equal(a, b)
            assert torch.count_nonzero(a) == 0

    def test_parameters_untouched(self, small_config):
        net = build_network("sknet", small_config)
        before = [p.detach().clone() for p in net.parameters()]
        reset(net)
        assert all(torch.equal(a, b) for a, b in zip(before, net.parameters()))


class TestRunLearnedFilter:
    """Test the per-sequence learned filter."""

    def test_single_measurement(self, small_net):
        steps = run_learned_filter(box_sequence(1), small_net, small_net.config.linear_config())
        assert len(steps) == 1 and steps[0].predicted is None

    def test_untrained_smoke(self, small_net):
        steps = run_learned_filter(box_sequence(10), small_net, small_net.config.linear_config())
        assert len(steps) == 10
        for step in steps[1:]:
            assert np.all(np.isfinite(step.updated.to_array()))
            assert step.updated.h > 0 and step.updated.p3 > 0

    def test_deterministic(self, small_net):
        cfg = small_net.config.linear_config()
        a = run_learned_filter(box_sequence(8), small_net, cfg)
        b = run_learned_filter(box_sequence(8), small_net, cfg)
        assert [s.updated for s in a] == [s.updated for s in b]

    def test_mode_mismatch(self, small_net):
        with pytest.raises(ModeMismatchError):
            run_learned_filter(box_sequence(3), small_net, LinearModelConfig(mode="XYWH"))

    def test_normalized_network_needs_image_size(self):
        net = build_network("siknet", NetworkConfig(hidden_dim=8, normalize_inputs=True))
        with pytest.raises(DomainError):
            run_learned_filter(box_sequence(3), net, net.config.linear_config())
        steps = run_learned_filter(box_sequence(3), net, net.config.linear_config(), img_size=(1920, 1080))
        assert len(steps) == 3

    def test_empty_rejected(self, small_net):
        with pytest.raises(DomainError):
            run_learned_filter([], small_net, small_net.config.linear_config())


class TestFilterBatch:
    """Test the batched recursion against the sequential one."""

    def test_ragged_batch_matches_sequential(self, small_net, semi_sim):
        trajs = [semi_sim[0].slice(0, 9), semi_sim[1].slice(0, 14), semi_sim[2]]
        batch = collate(trajs, StateMode.XYAH)
        with torch.no_grad():
            out = filter_batch(small_net, batch.meas, batch.lengths)
        cfg = small_net.config.linear_config()
        for i, traj in enumerate(trajs):
            steps = run_learned_filter(boxes_from_array(traj.meas, StateMode.XYAH), small_net, cfg)
            expected = np.stack([s.updated.to_array() for s in steps])
            np.testing.assert_allclose(out.posterior[i, :len(traj)].numpy(), expected, rtol=1e-10, atol=1e-9)
            priors = np.stack([s.predicted.to_array() for s in steps[1:]])
            np.testing.assert_allclose(out.prior[i, 1:len(traj)].numpy(), priors, rtol=1e-10, atol=1e-9)

    def test_mask(self, small_net, semi_sim):
        batch = collate([semi_sim[0].slice(0, 5), semi_sim[1]], StateMode.XYAH)
        assert batch.mask.sum(dim=1).tolist() == [5, len(semi_sim[1])]
        assert torch.equal(batch.meas[0, 5], batch.meas[0, 4])

    def test_state_isolation_between_rows(self, small_config, semi_sim):
        net = build_network("siknet", small_config)
        batch = collate(semi_sim[:3], StateMode.XYAH)
        with torch.no_grad():
            together = filter_batch(net, batch.meas)
            alone = filter_batch(net, batch.meas[1:2])
        torch.testing.assert_close(together.posterior[1], alone.posterior[0])
