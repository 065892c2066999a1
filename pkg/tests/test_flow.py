import numpy as np
import pytest

from afflow.autodiff import Tensor
from afflow.encoder import ArtifactEncoder
from afflow.flow import (LOG_2PI, ActNorm, FlowConfig, InvConv1x1, NacCoupling,
                         RafFlow, Split, flatten_latents, squeeze2, unsqueeze2)
from afflow.model import ArtifactFlowModel, ModelConfig

from conftest import dense_jacobian


def _sigmoid_inv(p):
    return np.log(p / (1.0 - p))


def _randomize(flow: RafFlow, rng):
    for steps, split in flow.levels:
        for step in steps:
            step.actnorm.s.data = rng.uniform(0.5, 2.0, step.actnorm.channels)
            step.actnorm.b.data = rng.normal(0.0, 0.3, step.actnorm.channels)
            step.actnorm.initialized = True
            step.coupling.conv3.w.data = rng.normal(0.0, 0.2, step.coupling.conv3.w.shape)
        if split is not None:
            split.prior.w.data = rng.normal(0.0, 0.1, split.prior.w.shape)
    return flow


class TestSqueeze:
    def test_ramp_block_order(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        out = squeeze2(x)
        assert out.shape == (1, 4, 2, 2)
        np.testing.assert_array_equal(out.data[0, 0], [[0, 2], [8, 10]])    # TL
        np.testing.assert_array_equal(out.data[0, 1], [[1, 3], [9, 11]])    # TR
        np.testing.assert_array_equal(out.data[0, 2], [[4, 6], [12, 14]])   # BL
        np.testing.assert_array_equal(out.data[0, 3], [[5, 7], [13, 15]])   # BR

    def test_roundtrip(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 8, 8)))
        np.testing.assert_array_equal(unsqueeze2(squeeze2(x)).data, x.data)

    def test_single_channel_expansion(self):
        out = squeeze2(Tensor(np.zeros((1, 1, 16, 16))))
        assert out.shape == (1, 4, 8, 8)

    def test_odd_extents_rejected(self):
        with pytest.raises(ValueError, match="even"):
            squeeze2(Tensor(np.zeros((1, 1, 5, 4))))


class TestActNorm:
    def test_defaults_are_identity_with_zero_logdet(self, rng):
        layer = ActNorm(3)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        y, logdet = layer.forward(x)
        np.testing.assert_array_equal(y.data, x.data)
        assert logdet.item() == 0.0

    def test_data_dependent_init_normalizes(self, rng):
        layer = ActNorm(2)
        x = 3.0 + 2.0 * rng.standard_normal((16, 2, 8, 8))
        y, _ = layer.forward(Tensor(x), update_init=True)
        assert layer.initialized
        np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-8)
        np.testing.assert_allclose(y.data.var(axis=(0, 2, 3)), 1.0, atol=1e-8)

    def test_logdet_closed_form(self):
        layer = ActNorm(2)
        layer.s.data = np.array([2.0, 0.5])
        _, logdet = layer.forward(Tensor(np.zeros((1, 2, 2, 2))))
        assert abs(logdet.item() - 4.0 * (np.log(2.0) + np.log(0.5))) < 1e-14
        assert abs(logdet.item()) < 1e-14

    def test_inverse_exact(self, rng):
        layer = ActNorm(3)
        layer.s.data = rng.uniform(0.5, 2.0, 3)
        layer.b.data = rng.normal(size=3)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        y, _ = layer.forward(x)
        assert np.max(np.abs(layer.inverse(y).data - x.data)) < 1e-12

    def test_zero_scale_rejected(self):
        layer = ActNorm(2)
        layer.s.data = np.array([1.0, 0.0])
        with pytest.raises(ValueError, match="zero scale"):
            layer.forward(Tensor(np.zeros((1, 2, 2, 2))))


class TestInvConv:
    def test_identity_weight(self, rng):
        layer = InvConv1x1(3, rng)
        layer.w.data = np.eye(3)
        x = Tensor(rng.normal(size=(1, 3, 4, 4)))
        y, logdet = layer.forward(x)
        np.testing.assert_allclose(y.data, x.data, atol=1e-15)
        assert abs(logdet.item()) < 1e-12

    def test_orthogonal_init_has_zero_logdet(self, rng):
        layer = InvConv1x1(4, rng)
        assert abs(np.linalg.slogdet(layer.w.data)[1]) < 1e-12
        _, logdet = layer.forward(Tensor(rng.normal(size=(1, 4, 2, 2))))
        assert abs(logdet.item()) < 1e-10

    def test_logdet_matches_dense_jacobian(self, rng):
        layer = InvConv1x1(4, rng)
        layer.w.data = rng.normal(size=(4, 4)) + 0.5 * np.eye(4)

        def flat_map(v):
            y, _ = layer.forward(Tensor(v.reshape(1, 4, 2, 2)))
            return y.data.ravel().copy()

        x0 = rng.normal(size=16)
        _, logdet = layer.forward(Tensor(x0.reshape(1, 4, 2, 2)))
        _, expected = np.linalg.slogdet(dense_jacobian(flat_map, x0))
        assert abs(logdet.item() - expected) < 1e-6

    def test_inverse_exact(self, rng):
        layer = InvConv1x1(4, rng)
        x = Tensor(rng.normal(size=(2, 4, 3, 3)))
        y, _ = layer.forward(x)
        assert np.max(np.abs(layer.inverse(y).data - x.data)) < 1e-12


class TestNacCoupling:
    def test_lambda_zero_zero_subnet_is_identity(self, rng):
        layer = NacCoupling(4, 2, 8, lam=0.0, eps_inv=0.05, rng=rng)
        x = Tensor(rng.normal(size=(1, 4, 4, 4)))
        cond = Tensor(rng.normal(size=(1, 2, 4, 4)))
        y, logdet = layer.forward(x, cond)
        np.testing.assert_array_equal(y.data, x.data)
        np.testing.assert_array_equal(logdet.data, np.zeros(1))

    def test_forward_inverse_roundtrip(self, rng):
        layer = NacCoupling(4, 3, 8, lam=0.6, eps_inv=0.05, rng=rng)
        layer.conv3.w.data = rng.normal(0.0, 0.5, layer.conv3.w.shape)
        layer.conv3.b.data = rng.normal(0.0, 0.5, layer.conv3.b.shape)
        x = Tensor(rng.normal(size=(2, 4, 4, 4)))
        cond = Tensor(rng.normal(size=(2, 3, 4, 4)))
        y, _ = layer.forward(x, cond)
        assert np.max(np.abs(layer.inverse(y, cond).data - x.data)) < 1e-8

    def test_scalar_hand_computation(self, rng):
        # C=2, 1x1 spatial: m=0.3, g=0.4, lam=0.5, x_b=1.0
        # y_b = 0.3 + 1.0 - 0.5*(1.0*0.4) = 1.1; logdet = log(1 - 0.2)
        eps = 0.05
        layer = NacCoupling(2, 1, 4, lam=0.5, eps_inv=eps, rng=rng)
        layer.conv3.b.data = np.array([0.3, _sigmoid_inv((0.4 - eps) / (1.0 - 2.0 * eps))])
        x = Tensor(np.array([0.2, 1.0]).reshape(1, 2, 1, 1))
        cond = Tensor(np.zeros((1, 1, 1, 1)))
        y, logdet = layer.forward(x, cond)
        assert abs(y.data[0, 0, 0, 0] - 0.2) < 1e-15     # passthrough half
        assert abs(y.data[0, 1, 0, 0] - 1.1) < 1e-12
        assert abs(logdet.item() - np.log(0.8)) < 1e-12

    def test_gate_stays_in_safe_interval(self, rng):
        eps = 0.05
        layer = NacCoupling(4, 2, 8, lam=0.9, eps_inv=eps, rng=rng)
        layer.conv3.w.data = rng.normal(0.0, 10.0, layer.conv3.w.shape)  # saturate
        x = Tensor(rng.normal(size=(1, 4, 4, 4)))
        cond = Tensor(rng.normal(size=(1, 2, 4, 4)))
        _, gate = layer._heads(Tensor(x.data[:, :2]), cond)
        assert np.all(gate.data > eps - 1e-12)
        assert np.all(gate.data < 1.0 - eps + 1e-12)

    def test_logdet_matches_dense_jacobian(self, rng):
        layer = NacCoupling(4, 2, 8, lam=0.5, eps_inv=0.05, rng=rng)
        layer.conv3.w.data = rng.normal(0.0, 0.4, layer.conv3.w.shape)
        cond = Tensor(rng.normal(size=(1, 2, 2, 2)))

        def flat_map(v):
            y, _ = layer.forward(Tensor(v.reshape(1, 4, 2, 2)), cond)
            return y.data.ravel().copy()

        x0 = rng.normal(size=16)
        _, logdet = layer.forward(Tensor(x0.reshape(1, 4, 2, 2)), cond)
        _, expected = np.linalg.slogdet(dense_jacobian(flat_map, x0))
        assert abs(logdet.item() - expected) < 1e-6

    def test_odd_channels_rejected(self, rng):
        with pytest.raises(ValueError, match="even"):
            NacCoupling(3, 2, 8, lam=0.1, eps_inv=0.05, rng=rng)


class TestSplit:
    def test_zero_init_prior_is_standard_normal(self, rng):
        split = Split(4, rng)
        x = Tensor(np.zeros((1, 4, 3, 3)))
        kept, z_out, logp = split.forward(x)
        n = z_out.size
        assert abs(logp.item() - (-(n / 2.0) * LOG_2PI)) < 1e-12

    def test_halves_shapes(self, rng):
        split = Split(4, rng)
        kept, z_out, _ = split.forward(Tensor(np.zeros((2, 4, 3, 3))))
        assert kept.shape == (2, 2, 3, 3)
        assert z_out.shape == (2, 2, 3, 3)

    def test_unsplit_roundtrip(self, rng):
        split = Split(4, rng)
        split.prior.w.data = rng.normal(0.0, 0.2, split.prior.w.shape)
        x = Tensor(rng.normal(size=(1, 4, 3, 3)))
        kept, z_out, _ = split.forward(x)
        np.testing.assert_array_equal(split.inverse(kept, z_out, 0.0, None).data, x.data)

    def test_tau_zero_samples_prior_mean(self, rng):
        split = Split(4, rng)
        split.prior.w.data = rng.normal(0.0, 0.2, split.prior.w.shape)
        split.prior.b.data = rng.normal(0.0, 0.2, split.prior.b.shape)
        kept = Tensor(rng.normal(size=(1, 2, 3, 3)))
        mean, _ = split._prior_stats(kept)
        out = split.inverse(kept, None, 0.0, None)
        np.testing.assert_array_equal(out.data[:, 2:], mean.data)


class TestFlowConfig:
    def test_lambda_schedule_global_step_index(self, rng):
        cfg = FlowConfig(levels=2, steps=2, lambda0=0.3, decay_a=0.5, hidden=4)
        flow = RafFlow(cfg, cond_channels=2, rng=rng)
        lams = [step.coupling.lam for steps, _ in flow.levels for step in steps]
        np.testing.assert_allclose(lams, [0.3, 0.15, 0.075, 0.0375])

    def test_decay_one_is_constant(self, rng):
        flow = RafFlow(FlowConfig(levels=2, steps=3, lambda0=0.2, hidden=4),
                       cond_channels=2, rng=rng)
        lams = {step.coupling.lam for steps, _ in flow.levels for step in steps}
        assert lams == {0.2}

    def test_invertibility_bound_rejected_at_construction(self):
        with pytest.raises(ValueError, match="invertibility"):
            FlowConfig(lambda0=1.06, eps_inv=0.05)
        with pytest.raises(ValueError, match="invertibility"):
            FlowConfig(lambda0=25.0, eps_inv=0.05)  # beyond 1/eps_inv
        FlowConfig(lambda0=1.0, eps_inv=0.05)  # 1.0 * 0.95 < 1: fine

    @pytest.mark.parametrize("kwargs", [
        dict(levels=0), dict(steps=0), dict(decay_a=0.0), dict(decay_a=1.5),
        dict(lambda0=-0.1), dict(eps_inv=0.0), dict(eps_inv=0.6),
    ])
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(ValueError):
            FlowConfig(**kwargs)


def _identity_flow(rng, levels=2, steps=2, cond_channels=4):
    cfg = FlowConfig(levels=levels, steps=steps, lambda0=0.0, hidden=4)
    flow = RafFlow(cfg, cond_channels=cond_channels, rng=rng)
    for steps_l, _ in flow.levels:
        for step in steps_l:
            step.invconv.w.data = np.eye(step.invconv.channels)
    return flow


def _zero_cond(levels, n, h, w, channels=4):
    return [Tensor(np.zeros((n, channels, h // 2 ** l, w // 2 ** l))) for l in range(levels)]


class TestFlowComposition:
    def test_identity_params_rearrangement_zero_logdet(self, rng):
        flow = _identity_flow(rng)
        y = rng.normal(size=(1, 1, 16, 16))
        cond = _zero_cond(2, 1, 16, 16)
        latents, logdet, _ = flow.forward(Tensor(y), cond)
        assert abs(logdet.data[0]) < 1e-12
        # latent entries are exactly a permutation of the input entries
        np.testing.assert_array_equal(np.sort(flatten_latents(latents).ravel()),
                                      np.sort(y.ravel()))

    def test_identity_single_level_is_squeeze(self, rng):
        flow = _identity_flow(rng, levels=1, steps=2)
        y = Tensor(rng.normal(size=(1, 1, 8, 8)))
        latents, _, _ = flow.forward(y, _zero_cond(1, 1, 8, 8))
        np.testing.assert_array_equal(latents[0].data, squeeze2(y).data)

    def test_forward_inverse_roundtrip_random_params(self, rng):
        cfg = FlowConfig(levels=2, steps=3, lambda0=0.3, hidden=8)
        flow = _randomize(RafFlow(cfg, cond_channels=3, rng=rng), rng)
        y = Tensor(rng.normal(size=(2, 1, 16, 16)))
        cond = [Tensor(rng.normal(size=(2, 3, 16, 16))),
                Tensor(rng.normal(size=(2, 3, 8, 8)))]
        latents, _, _ = flow.forward(y, cond)
        recon = flow.inverse(latents, cond)
        assert np.max(np.abs(recon.data - y.data)) < 1e-6

    def test_total_logdet_matches_dense_jacobian(self, rng):
        cfg = FlowConfig(levels=1, steps=2, lambda0=0.3, hidden=8)
        flow = _randomize(RafFlow(cfg, cond_channels=2, rng=rng), rng)
        cond = [Tensor(rng.normal(size=(1, 2, 8, 8)))]

        def flat_map(v):
            latents, _, _ = flow.forward(Tensor(v.reshape(1, 1, 8, 8)), cond)
            return flatten_latents(latents).ravel().copy()

        y0 = rng.normal(size=64)
        _, logdet, _ = flow.forward(Tensor(y0.reshape(1, 1, 8, 8)), cond)
        _, expected = np.linalg.slogdet(dense_jacobian(flat_map, y0))
        assert abs(logdet.data[0] - expected) < 1e-5

    def test_volume_bookkeeping_latent_count(self, rng):
        cfg = FlowConfig(levels=3, steps=1, lambda0=0.1, hidden=4)
        flow = RafFlow(cfg, cond_channels=2, rng=rng)
        y = Tensor(rng.normal(size=(2, 1, 16, 16)))
        cond = [Tensor(np.zeros((2, 2, 16 // 2 ** l, 16 // 2 ** l))) for l in range(3)]
        latents, _, _ = flow.forward(y, cond)
        assert flatten_latents(latents).shape == (2, 256)
        shapes = flow.latent_shapes(2, 16, 16)
        assert [z.shape for z in latents] == shapes

    def test_inverse_of_zero_latents_identity_params_is_zero_image(self, rng):
        flow = _identity_flow(rng)
        cond = _zero_cond(2, 1, 16, 16)
        out = flow.inverse(None, cond, tau=0.0)
        np.testing.assert_array_equal(out.data, np.zeros((1, 1, 16, 16)))

    def test_conditioning_changes_output(self, rng):
        cfg = FlowConfig(levels=2, steps=2, lambda0=0.3, hidden=8)
        flow = _randomize(RafFlow(cfg, cond_channels=3, rng=rng), rng)
        cond_a = [Tensor(rng.normal(size=(1, 3, 16, 16))),
                  Tensor(rng.normal(size=(1, 3, 8, 8)))]
        cond_b = [Tensor(c.data + rng.normal(size=c.shape)) for c in cond_a]
        out_a = flow.inverse(None, cond_a, tau=0.0)
        out_b = flow.inverse(None, cond_b, tau=0.0)
        assert np.max(np.abs(out_a.data - out_b.data)) > 1e-6

    def test_mismatched_latent_shape_rejected(self, rng):
        flow = _identity_flow(rng)
        cond = _zero_cond(2, 1, 16, 16)
        latents, _, _ = flow.forward(Tensor(np.zeros((1, 1, 16, 16))), cond)
        bad = latents[:-1] + [Tensor(np.zeros((1, 8, 2, 2)))]
        with pytest.raises(ValueError, match="shape"):
            flow.inverse(bad, cond)

    def test_indivisible_input_rejected(self, rng):
        flow = _identity_flow(rng)
        with pytest.raises(ValueError, match="divisible"):
            flow.forward(Tensor(np.zeros((1, 1, 10, 10))), _zero_cond(2, 1, 10, 10))


class TestModelNll:
    def _identity_model(self, lam=0.0):
        cfg = ModelConfig(flow=FlowConfig(levels=2, steps=2, lambda0=lam, hidden=8),
                          ace_features=4, ace_blocks=1, init_seed=0)
        model = ArtifactFlowModel(cfg)
        for steps_l, _ in model.flow.levels:
            for step in steps_l:
                step.invconv.w.data = np.eye(step.invconv.channels)
        return model

    def test_zero_image_closed_form(self):
        model = self._identity_model()
        x = Tensor(np.zeros((1, 1, 16, 16)))
        loss = model.nll(x, x)
        assert abs(loss.item() - 0.5 * LOG_2PI) < 1e-12
        assert abs(loss.item() - 0.9189385332046727) < 1e-10

    def test_scaling_input_changes_prior_term_exactly(self, rng):
        model = self._identity_model()
        x = Tensor(np.zeros((1, 1, 16, 16)))
        y = rng.normal(size=(1, 1, 16, 16))
        n = y.size
        base = model.nll(Tensor(y), x).item()
        doubled = model.nll(Tensor(2.0 * y), x).item()
        # identity flow: z = rearrangement of y, logdet 0, so the change is
        # purely the standard-normal term: (2 - 0.5) * sum(y^2) / n
        assert abs((doubled - base) - 1.5 * np.sum(y * y) / n) < 1e-10

    def test_compensating_actnorm_adds_log2_per_dim(self, rng):
        # scale y by 2 but set every actnorm of the first level to s=1/2:
        # the first level renormalizes, deeper levels see identical input,
        # so the loss changes by exactly +log 2 per dimension via the log-det
        model_id = self._identity_model()
        model_scaled = self._identity_model()
        first_steps, _ = model_scaled.flow.levels[0]
        first_steps[0].actnorm.s.data = np.full(4, 0.5)
        y = rng.normal(size=(1, 1, 16, 16))
        x = Tensor(np.zeros((1, 1, 16, 16)))
        base = model_id.nll(Tensor(y), x).item()
        scaled = model_scaled.nll(Tensor(2.0 * y), x).item()
        assert abs(scaled - (base + np.log(2.0))) < 1e-10

    def test_restore_is_deterministic_at_tau_zero(self, rng):
        cfg = ModelConfig(flow=FlowConfig(levels=2, steps=2, lambda0=0.2, hidden=8),
                          ace_features=4, ace_blocks=1, init_seed=3)
        model = ArtifactFlowModel(cfg)
        model.mark_actnorm_initialized()
        x = rng.uniform(0, 1, (1, 1, 16, 16))
        np.testing.assert_array_equal(model.restore(x), model.restore(x))

    def test_restore_shape_and_range(self, rng):
        cfg = ModelConfig(flow=FlowConfig(levels=2, steps=2, lambda0=0.2, hidden=8),
                          ace_features=4, ace_blocks=1, init_seed=3)
        model = ArtifactFlowModel(cfg)
        x = rng.uniform(0, 1, (2, 1, 16, 16))
        out = model.restore(x)
        assert out.shape == (2, 1, 16, 16)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_tau_sampling_needs_rng(self, rng):
        cfg = ModelConfig(flow=FlowConfig(levels=1, steps=1, lambda0=0.0, hidden=4),
                          ace_features=4, ace_blocks=1, init_seed=0)
        model = ArtifactFlowModel(cfg)
        with pytest.raises(ValueError, match="RNG"):
            model.restore(rng.uniform(0, 1, (1, 1, 8, 8)), tau=0.5)

    def test_gradients_flow_to_encoder_and_flow(self, rng):
        # at step 1 the zero-initialized coupling heads block the cond path,
        # so encoder gradients are checked after one optimizer step
        from afflow.optim import Adam

        cfg = ModelConfig(flow=FlowConfig(levels=2, steps=2, lambda0=0.2, hidden=8),
                          ace_features=4, ace_blocks=1, init_seed=1)
        model = ArtifactFlowModel(cfg)
        opt = Adam(model.named_params(), lr=1e-3)
        x = Tensor(rng.uniform(0, 1, (2, 1, 16, 16)))
        y = Tensor(rng.uniform(0, 1, (2, 1, 16, 16)))
        model.nll(y, x, update_init=True).backward()
        assert opt.step()
        opt.zero_grad()

        model.nll(y, x).backward()
        grads = {name: p.grad for name, p in model.named_params().items()}
        assert all(g is not None for g in grads.values())
        assert np.linalg.norm(grads["ace.head.w"]) > 0.0
        assert np.linalg.norm(grads["flow.level0.step0.coupling.conv1.w"]) > 0.0
