import numpy as np
import pytest
import torch

from phynowcast.errors import ArityError, DimensionError
from phynowcast.phydnet import ModelConfig, PhyDNet, stack_intensity

from oracles import (
    central_difference_grad,
    conv2d,
    conv_transpose2d,
    group_norm,
    leaky,
    relative_error,
    sigmoid,
)

TOY = dict(latent_channels=2, encoder_width=2, convlstm_widths=(3, 2), tau_in=3, tau_out=4)


def toy(variant="advdiff", seed=0, **kw):
    cfg = ModelConfig(variant=variant, seed=seed, **{**TOY, **kw})
    return PhyDNet(cfg).double()


def frames(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(*shape, generator=g, dtype=torch.float64)


def randomise(model, seed=0, scale=0.5):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


# -- numpy forward-pass oracle ---------------------------------------------------


def oracle_step(P, cfg, frame, h_p, h_r, lstm_h, lstm_c):
    C = cfg.latent_channels
    gw = lambda n: P[n]  # noqa: E731
    x = frame[None]
    x = conv2d(x, gw("encoder.net.0.weight"), gw("encoder.net.0.bias"), stride=2, pad=1)
    x = leaky(group_norm(x, 2, gw("encoder.net.1.weight"), gw("encoder.net.1.bias")))
    x = conv2d(x, gw("encoder.net.3.weight"), gw("encoder.net.3.bias"), stride=2, pad=1)
    enc = leaky(group_norm(x, 2, gw("encoder.net.4.weight"), gw("encoder.net.4.bias")))

    bank = gw("phycell.bank.kernels")
    u = conv2d(h_p, gw("phycell.advect.weight"), pad=2)
    terms = []
    for c in range(C):
        terms.append(conv2d((u[0] * h_p[c])[None], bank[3][None, None], pad=1)[0])
        terms.append(conv2d((u[1] * h_p[c])[None], bank[1][None, None], pad=1)[0])
        terms.append(conv2d(h_p[c][None], bank[6][None, None], pad=1)[0])
        terms.append(conv2d(h_p[c][None], bank[2][None, None], pad=1)[0])
    d = group_norm(np.stack(terms), C, gw("phycell.norm.weight"), gw("phycell.norm.bias"))
    tilde = h_p + conv2d(d, gw("phycell.combine.weight"))
    K = sigmoid(conv2d(tilde, gw("phycell.gain_pred.weight"), gw("phycell.gain_pred.bias"), pad=1)
                + conv2d(enc, gw("phycell.gain_input.weight"), pad=1))
    h_p_new = (1 - K) * tilde + K * enc

    inp = enc
    new_h, new_c = [], []
    for n, width in enumerate(cfg.convlstm_widths):
        z = conv2d(np.concatenate([inp, lstm_h[n]]), gw(f"convlstm.cells.{n}.gates.weight"),
                   gw(f"convlstm.cells.{n}.gates.bias"), pad=1)
        i, f, o, g = (z[k * width:(k + 1) * width] for k in range(4))
        c_ = sigmoid(f) * lstm_c[n] + sigmoid(i) * np.tanh(g)
        h_ = sigmoid(o) * np.tanh(c_)
        new_h.append(h_)
        new_c.append(c_)
        inp = h_
    h_r_new = h_r + conv2d(inp, gw("convlstm.project.weight"), gw("convlstm.project.bias"))

    y = conv_transpose2d(h_p_new + h_r_new, gw("decoder.net.0.weight"), gw("decoder.net.0.bias"))
    y = leaky(group_norm(y, 2, gw("decoder.net.1.weight"), gw("decoder.net.1.bias")))
    y = np.clip(conv_transpose2d(y, gw("decoder.net.3.weight"), gw("decoder.net.3.bias")), 0, 1)
    logits = conv2d(y, gw("prob_conv.weight"), gw("prob_conv.bias"), pad=1)
    e = np.exp(logits - logits.max(0))
    prob = e[1] / e.sum(0)
    return y[0], prob, h_p_new, h_r_new, new_h, new_c


def test_step_matches_numpy_oracle():
    model = randomise(toy(icloss_enabled=True), seed=3, scale=0.4)
    with torch.no_grad():
        model.decoder.net[3].bias.fill_(0.5)  # keep the clamp mostly inactive
    P = {k: v.numpy() for k, v in model.state_dict().items()}
    cfg = model.config
    C, H = cfg.latent_channels, 8
    h_p, h_r = np.zeros((C, H, H)), np.zeros((C, H, H))
    lh = [np.zeros((w, H, H)) for w in cfg.convlstm_widths]
    lc = [np.zeros((w, H, H)) for w in cfg.convlstm_widths]
    mem = None
    with torch.no_grad():
        for t in range(2):
            f = frames(1, 1, 32, 32, seed=t)
            bundle, mem = model.step(f, mem)
            y, prob, h_p, h_r, lh, lc = oracle_step(P, cfg, f[0, 0].numpy(), h_p, h_r, lh, lc)
            np.testing.assert_allclose(bundle.intensity[0, 0].numpy(), y, atol=1e-9)
            np.testing.assert_allclose(bundle.prob[0, 0].numpy(), prob, atol=1e-9)
            np.testing.assert_allclose(mem.h_p[0].numpy(), h_p, atol=1e-9)
            np.testing.assert_allclose(mem.h_r[0].numpy(), h_r, atol=1e-9)
    assert 0.05 < float((bundle.intensity > 0).double().mean())


def test_zero_parameter_model_from_cold_start():
    model = toy(icloss_enabled=True)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    bundle, mem = model.step(frames(1, 1, 32, 32))
    # every latent is zero, K = sigmoid(0) = 1/2 blends two zeros, the decoder emits 0
    assert torch.count_nonzero(mem.h_p) == 0 and torch.count_nonzero(mem.h_r) == 0
    assert torch.count_nonzero(bundle.intensity) == 0
    assert torch.all(bundle.prob == 0.5)


# -- encode / decode --------------------------------------------------------------


def test_encode_dimensions():
    model = PhyDNet(ModelConfig(latent_channels=64, convlstm_widths=(4,)))
    with torch.no_grad():
        assert model.encode(torch.zeros(1, 1, 64, 64)).shape == (1, 64, 16, 16)
        assert model.encode(torch.zeros(1, 1, 128, 96)).shape == (1, 64, 32, 24)
    with pytest.raises(DimensionError):
        model.encode(torch.zeros(1, 1, 63, 64))


def test_decode_dimensions_and_range():
    model = randomise(PhyDNet(ModelConfig(latent_channels=64, convlstm_widths=(4,))), scale=1.0)
    with torch.no_grad():
        out = model.decode(torch.randn(1, 64, 16, 16))
        assert out.shape == (1, 1, 64, 64)
        assert out.min() >= 0 and out.max() <= 1
        f = torch.rand(2, 1, 40, 24)
        assert model.decode(model.encode(f)).shape == f.shape
    with pytest.raises(DimensionError):
        model.decode(torch.zeros(1, 3, 16, 16))


# -- step / forecast ----------------------------------------------------------------


def test_step_is_pure():
    model = randomise(toy(), seed=1)
    f = frames(1, 1, 32, 32)
    with torch.no_grad():
        _, mem = model.step(f)
        snapshot = mem.h_p.clone()
        a, mem_a = model.step(f, mem)
        b, mem_b = model.step(f, mem)
    assert torch.equal(a.intensity, b.intensity)
    assert torch.equal(mem_a.h_p, mem_b.h_p)
    assert torch.equal(mem.h_p, snapshot)


def test_prob_absent_without_icloss():
    bundle, _ = toy().step(frames(1, 1, 32, 32))
    assert bundle.prob is None and bundle.logits is None


def test_forecast_single_lead_equals_step_after_warmup():
    model = randomise(toy(), seed=2)
    x = frames(2, 3, 32, 32)
    with torch.no_grad():
        out = model.forecast(x, 1)
        mem = None
        for t in range(3):
            b, mem = model.step(x[:, t:t + 1], mem)
    assert len(out) == 1
    assert torch.equal(out[0].intensity, b.intensity)


def test_forecast_feeds_back_predictions():
    model = randomise(toy(), seed=2)
    model.decoder.net[3].bias.data.fill_(0.5)
    x = frames(1, 3, 32, 32)
    with torch.no_grad():
        out = model.forecast(x, 6)
        mem = None
        for t in range(3):
            b, mem = model.step(x[:, t:t + 1], mem)
        b2, _ = model.step(out[0].intensity, mem)
        b2_perturbed, _ = model.step(out[0].intensity + 0.05 * frames(1, 1, 32, 32, seed=9), mem)
    assert len(out) == 6
    assert torch.equal(out[1].intensity, b2.intensity)
    assert not torch.equal(b2.intensity, b2_perturbed.intensity)


def test_rollout_to_twice_the_training_horizon():
    model = toy(tau_out=6)
    assert model.config.tau_out * model.config.delta_minutes == 60
    with torch.no_grad():
        out = model.forecast(frames(1, 3, 32, 32), 12)
    assert len(out) == 12
    assert stack_intensity(out).shape == (1, 12, 32, 32)


def test_forecast_arity():
    model = toy()
    with pytest.raises(ArityError):
        model.forecast(frames(1, 2, 32, 32))


def test_teacher_forcing_uses_observed_frames():
    model = randomise(toy(), seed=5)
    model.decoder.net[3].bias.data.fill_(0.5)
    x = frames(1, 3, 32, 32)
    teacher = frames(1, 3, 32, 32, seed=4)
    with torch.no_grad():
        free = model.forecast(x, 4)
        forced = model.forecast(x, 4, teacher=teacher)
        mem = None
        for t in range(3):
            _, mem = model.step(x[:, t:t + 1], mem)
        expected, _ = model.step(teacher[:, :1], mem)
    assert torch.equal(free[0].intensity, forced[0].intensity)
    assert torch.equal(forced[1].intensity, expected.intensity)


def test_prob_head():
    model = randomise(toy(icloss_enabled=True), seed=1)
    f = frames(2, 1, 32, 32)
    logits, prob = model.prob_head(f)
    assert logits.shape == (2, 2, 32, 32) and prob.shape == (2, 1, 32, 32)
    both = torch.softmax(logits, 1)
    torch.testing.assert_close(both.sum(1), torch.ones(2, 32, 32, dtype=torch.float64))
    assert torch.all((prob >= 0) & (prob <= 1))
    model.prob_conv.weight.data.zero_()
    model.prob_conv.bias.data.zero_()
    assert torch.all(model.prob_head(f)[1] == 0.5)


# -- branches ------------------------------------------------------------------------


def test_decomposition_combined_matches_forecast():
    model = randomise(toy(), seed=7)
    model.decoder.net[3].bias.data.fill_(0.5)
    x = frames(2, 3, 32, 32)
    with torch.no_grad():
        dec = model.decompose_branches(x, 4)
        fc = model.forecast(x, 4)
    assert len(dec.combined) == len(dec.physical) == len(dec.residual) == 4
    for a, b in zip(dec.combined, fc):
        assert torch.equal(a.intensity, b.intensity)
    gap = max((c.intensity - (p + r)).abs().max().item()
              for c, p, r in zip(dec.combined, dec.physical, dec.residual))
    assert gap > 1e-3


def test_zeroed_residual_branch_leaves_physical_path():
    model = randomise(toy(), seed=7)
    model.decoder.net[3].bias.data.fill_(0.5)
    model.convlstm.project.weight.data.zero_()
    model.convlstm.project.bias.data.zero_()
    with torch.no_grad():
        dec = model.decompose_branches(frames(1, 3, 32, 32), 4)
    for c, p in zip(dec.combined, dec.physical):
        assert torch.equal(c.intensity, p)


def test_phycell_only_mode_equals_zero_residual():
    full = randomise(toy(), seed=8)
    full.decoder.net[3].bias.data.fill_(0.5)
    full.convlstm.project.weight.data.zero_()
    full.convlstm.project.bias.data.zero_()
    only = toy(residual=False)
    assert only.convlstm is None
    state = {k: v for k, v in full.state_dict().items() if not k.startswith("convlstm.")}
    only.load_state_dict(state)
    x = frames(1, 3, 32, 32)
    with torch.no_grad():
        a, b = full.forecast(x), only.forecast(x)
    for p, q in zip(a, b):
        assert torch.equal(p.intensity, q.intensity)


def test_decoder_receives_sum_of_branches():
    model = randomise(toy(), seed=9)
    seen = []
    model.decoder.register_forward_hook(lambda mod, inp, out: seen.append(inp[0].clone()))
    with torch.no_grad():
        _, mem = model.step(frames(1, 1, 32, 32))
    assert torch.equal(seen[-1], mem.h_p + mem.h_r)


def test_seeded_construction_is_deterministic():
    x = frames(1, 3, 32, 32)
    with torch.no_grad():
        a = stack_intensity(toy(seed=11).forecast(x))
        b = stack_intensity(toy(seed=11).forecast(x))
        c = stack_intensity(randomise(toy(seed=12)).forecast(x))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


@pytest.mark.parametrize("variant", ["baseline", "quad", "advdiff"])
def test_full_step_gradient(variant):
    cfg = dict(latent_channels=1, encoder_width=2, convlstm_widths=(2, 1), k=3 if variant != "baseline" else 7)
    model = randomise(toy(variant, **cfg), seed=4, scale=0.5)
    model.decoder.net[3].bias.data.fill_(0.5)
    f0 = frames(1, 1, 32, 32, seed=3)
    with torch.no_grad():
        _, mem = model.step(frames(1, 1, 32, 32, seed=2))

    def fn(x):
        with torch.no_grad():
            return model.step(torch.as_tensor(x), mem)[0].intensity.sum().item()

    x = f0.clone().requires_grad_(True)
    model.step(x, mem)[0].intensity.sum().backward()
    fd = central_difference_grad(fn, f0.numpy(), step=1e-4)
    assert relative_error(x.grad.numpy(), fd) <= 1e-3


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(variant="cubic")
    with pytest.raises(ValueError):
        ModelConfig(tau_in=0)
    with pytest.raises(ValueError):
        ModelConfig(variant="advdiff", k=5)
    assert ModelConfig(variant="baseline").k == 7
    assert ModelConfig(variant="quad").k == 3
    cfg = ModelConfig(variant="quad", latent_channels=8)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
