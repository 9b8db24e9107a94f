import numpy as np
import pytest

from jointdiff import ndcore as nd
from jointdiff.denoiser import DenoiserConfig, denoiser_forward, init_denoiser, num_parameters, timestep_embedding
from jointdiff.layers import cast_params

TINY = DenoiserConfig(in_channels=5, base_width=4, depth=2, time_embed_dim=8, channel_mults=(1, 2, 2))


def _randomized(config, seed=0):
    # the output layer starts at zero, which would hide every upstream gradient
    params = cast_params(init_denoiser(config, nd.Rng(seed)), np.float64)
    g = np.random.default_rng(seed)
    for p in params.values():
        p.data[...] = g.normal(0, 0.4, size=p.shape)
    return params


def test_parameter_budget():
    assert num_parameters(DenoiserConfig(in_channels=6)) <= 200_000
    assert num_parameters(DenoiserConfig(in_channels=6, conditional=True)) <= 200_000


def test_output_shape_and_zero_init():
    cfg = DenoiserConfig(in_channels=6, base_width=8)
    p = init_denoiser(cfg, nd.Rng(0))
    x = np.random.default_rng(0).normal(size=(3, 8, 8, 6)).astype(np.float32)
    out = denoiser_forward(x, np.array([1, 5, 9]), p, cfg)
    assert out.shape == (3, 8, 8, 6)
    np.testing.assert_array_equal(out.data, 0.0)
    assert denoiser_forward(x[0], 3, p, cfg).shape == (8, 8, 6)


def test_rejects_bad_inputs():
    cfg = DenoiserConfig(in_channels=6, base_width=8)
    p = init_denoiser(cfg, nd.Rng(0))
    with pytest.raises(ValueError, match="input channels"):
        denoiser_forward(np.zeros((1, 8, 8, 5)), 1, p, cfg)
    with pytest.raises(ValueError, match="divisible"):
        denoiser_forward(np.zeros((1, 6, 6, 6)), 1, p, cfg)
    with pytest.raises(ValueError):
        DenoiserConfig(in_channels=6, depth=3)


def test_timestep_embedding():
    e = timestep_embedding(np.array([0, 7]), 8)
    assert e.shape == (2, 8)
    np.testing.assert_allclose(e[0], [0, 1] * 4)
    assert np.all(np.abs(e) <= 1)
    assert not np.allclose(timestep_embedding(3, 8), timestep_embedding(4, 8))


def test_timestep_changes_output():
    p = _randomized(TINY, 1)
    x = np.random.default_rng(1).normal(size=(1, 4, 4, 5))
    a = denoiser_forward(x, 3, p, TINY).data
    b = denoiser_forward(x, 40, p, TINY).data
    assert not np.allclose(a, b)


def test_conditional_uses_condition():
    cfg = DenoiserConfig(in_channels=5, base_width=4, depth=1, time_embed_dim=8, conditional=True, channel_mults=(1, 1))
    p = _randomized(cfg, 2)
    g = np.random.default_rng(2)
    x = g.normal(size=(1, 4, 4, 5))
    c1, c2 = g.normal(size=(1, 4, 4, 5)), g.normal(size=(1, 4, 4, 5))
    a = denoiser_forward(np.concatenate([x, c1], -1), 2, p, cfg).data
    b = denoiser_forward(np.concatenate([x, c2], -1), 2, p, cfg).data
    assert a.shape == (1, 4, 4, 5) and not np.allclose(a, b)
    assert "in_cond.b" not in p


@pytest.mark.parametrize("conditional", [False, True])
def test_denoiser_finite_differences(conditional):
    cfg = DenoiserConfig(in_channels=5, base_width=4, depth=2, time_embed_dim=8, conditional=conditional, channel_mults=(1, 2, 2))
    params = _randomized(cfg, 3)
    g = np.random.default_rng(3)
    x = nd.Tensor(g.normal(size=(2, 4, 4, cfg.input_channels)))
    proj = nd.Tensor(g.normal(size=(2, 4, 4, 5)))
    t = np.array([2, 17])

    def loss():
        return nd.total(nd.mul(denoiser_forward(x, t, params, cfg), proj))

    worst = 0.0
    for name in params:  # every parameter tensor, a few entries each
        res = nd.check_gradients(loss, {name: params[name]}, n_samples=3, h=1e-3, seed=len(name))
        assert res.ok, (name, res.failures)
        worst = max(worst, res.max_rel_error)
    assert worst <= 1e-2
