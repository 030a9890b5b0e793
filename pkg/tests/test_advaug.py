import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ffcsn import numcore as nc
from ffcsn.advaug import (
    AdversarialModule,
    ALConfig,
    Discriminator,
    Generator,
    loss_al,
    minmax_value,
    sample_noise,
    toy_discriminator_fit,
)
from ffcsn.model import FFCSN, AblationFlags, ModelConfig


def rng(seed=0):
    return np.random.default_rng(seed)


def test_generator_output_length_and_range():
    g = Generator(ALConfig(), rng())
    out = g(nc.tensor(sample_noise(rng(1), 7)))
    assert out.shape == (7, 256)
    assert np.all((out.data > 0) & (out.data < 1))


def test_zero_generator_gives_half():
    g = Generator(ALConfig(), rng())
    for p in g.parameters():
        p.data[...] = 0.0
    assert np.allclose(g(nc.tensor(sample_noise(rng(), 3))).data, 0.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 100))
def test_discriminator_output_in_open_interval(seed, scale):
    d = Discriminator(ALConfig(), rng(seed))
    x = nc.tensor(scale * rng(seed + 1).standard_normal((5, 256)))
    out = d(x)
    assert out.shape == (5,)
    real, fake = loss_al(out, out)
    assert np.isfinite(real.data) and np.isfinite(fake.data)
    assert np.all(out.data >= 0) and np.all(out.data <= 1)


def test_zero_final_layer_gives_half():
    d = Discriminator(ALConfig(), rng())
    for p in d.layers.layers[-1].parameters():
        p.data[...] = 0.0
    assert np.allclose(d(nc.tensor(np.ones((2, 256)))).data, 0.5)


def test_shape_errors():
    with pytest.raises(nc.ShapeError):
        Generator(ALConfig(), rng())(nc.tensor(np.zeros((1, 5))))
    with pytest.raises(nc.ShapeError):
        Discriminator(ALConfig(), rng())(nc.tensor(np.zeros((1, 5))))


def test_symmetric_case_d_loss_is_two_ln2():
    half = nc.tensor(np.full(4, 0.5))
    d_loss, g_loss = loss_al(half, half)
    assert abs(float(d_loss.data) - 2 * math.log(2)) <= 1e-6
    assert abs(float(g_loss.data) + math.log(2)) <= 1e-6


def test_perfect_discriminator_loss_vanishes():
    d_loss, _ = loss_al(nc.tensor(np.ones(3)), nc.tensor(np.zeros(3)))
    assert float(d_loss.data) < 1e-6


def test_minmax_value_at_optimum():
    # p_g = p_data makes the optimal D equal 1/2 everywhere
    assert abs(minmax_value(np.full(6, 0.5), np.full(6, 0.5)) + 2 * math.log(2)) <= 1e-12


def test_brute_force_optimum_on_discrete_toy():
    p = {"a": 0.5, "b": 0.5}
    q = {"a": 0.5, "b": 0.5}
    grid = np.linspace(0.01, 0.99, 99)
    best = max(
        sum(p[k] * math.log(v) + q[k] * math.log(1 - v) for k, v in zip("ab", (da, db)))
        for da in grid for db in grid
    )
    assert abs(best + 2 * math.log(2)) <= 1e-9


def test_empty_batches_rejected():
    with pytest.raises(ValueError):
        loss_al(nc.tensor(np.zeros(0)), nc.tensor(np.ones(1)))


def test_toy_discriminator_reaches_analytic_optimum():
    start = time.perf_counter()
    out = toy_discriminator_fit(steps=5000, seed=0)
    assert time.perf_counter() - start < 30
    assert abs(out["D(a)"] - 1.0) <= 1e-2
    assert abs(out["D(b)"] - 1.0 / 3.0) <= 1e-2


def test_generator_gradient_vanishes_at_saddle():
    # D outputs 1/2 everywhere (zero last layer), so log(1 - D(G(z))) is flat in G
    cfg = ALConfig(feature_dim=8, g_hidden=6, noise_dim=4, d_hidden=(5, 3))
    mod = AdversarialModule(cfg, rng())
    for p in mod.D.layers.layers[-1].parameters():
        p.data[...] = 0.0
    f = mod.D(mod.G(nc.tensor(sample_noise(rng(1), 6, 4))))
    _, g_loss = loss_al(f, f)
    mod.G.zero_grad()
    g_loss.backward()
    assert all(np.all(p.grad == 0) for p in mod.G.parameters())


def _snapshot(params):
    return [p.data.copy() for p in params]


def test_step_changes_only_g_and_d():
    cfg = ModelConfig(frame_hw=16, channels=(2, 2, 2), d_s=8, d_t=4, corr_hidden=4, bottleneck=8)
    model = FFCSN(cfg, AblationFlags(), rng())
    al = ALConfig(feature_dim=8, g_hidden=6, noise_dim=4, d_hidden=(5, 3))
    mod = AdversarialModule(al, rng(1))
    before_model = _snapshot(model.parameters())
    before_g, before_d = _snapshot(mod.G.parameters()), _snapshot(mod.D.parameters())
    out = mod.step(rng(2).uniform(size=(6, 8)), rng(3), lr=0.1)
    assert set(out) == {"d_loss", "g_loss", "value", "l_al"} and out["l_al"] == out["d_loss"]
    assert all(np.array_equal(a, p.data) for a, p in zip(before_model, model.parameters()))
    assert any(not np.array_equal(a, p.data) for a, p in zip(before_g, mod.G.parameters()))
    assert any(not np.array_equal(a, p.data) for a, p in zip(before_d, mod.D.parameters()))


def test_step_is_deterministic():
    al = ALConfig(feature_dim=8, g_hidden=6, noise_dim=4, d_hidden=(5, 3))
    results = []
    for _ in range(2):
        mod = AdversarialModule(al, rng(1))
        feats = rng(2).uniform(size=(6, 8))
        r = rng(3)
        results.append([mod.step(feats, r, lr=0.1) for _ in range(3)])
    assert results[0] == results[1]
