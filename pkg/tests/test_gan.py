import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import single_point_run
from idsgan import gan, nn
from idsgan.errors import UsageError


def test_generator_shape_and_params():
    g = gan.build_generator(30, 30)
    assert nn.count_params(g) == (930, [0, 930, 0])
    out = nn.forward(g, np.zeros((2, 30)))
    assert out.shape == (2, 30, 1)
    assert gan.build_generator(30, 78).output_shapes()[-1] == (78, 1)


def test_generator_zero_weights_zero_noise():
    g = gan.build_generator(30, 30)
    g.params[(1, "kernel")].data[:] = 0
    assert not np.any(nn.forward(g, np.zeros((3, 30))).data)


def test_generator_deterministic():
    g = gan.build_generator(30, 30, seed=4)
    z = np.random.default_rng(0).standard_normal((5, 30))
    assert nn.forward(g, z).data.tobytes() == nn.forward(g, z).data.tobytes()


def test_discriminator_shapes():
    d = gan.build_discriminator(30)
    assert d.output_shapes() == [(30, 1), (15, 64), (8, 32), (256,), (1,)]
    assert nn.forward(d, np.zeros((3, 30, 1))).shape == (3, 1)


def test_discriminator_params_for_wide_input():
    _, per_layer = nn.count_params(gan.build_discriminator(78))
    assert per_layer[1:3] == [256, 6176]


def test_discriminator_zero_final_dense():
    d = gan.build_discriminator(30)
    d.params[(4, "kernel")].data[:] = 0
    x = np.random.default_rng(0).normal(scale=10, size=(4, 30, 1))
    assert np.all(nn.forward(d, x).data == 0.5)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([30, 78]), st.floats(-1e6, 1e6), st.integers(0, 1000))
def test_shape_chain_and_discriminator_range(length, scale, seed):
    g = gan.build_generator(30, length, seed=seed)
    d = gan.build_discriminator(length, seed=seed)
    z = np.random.default_rng(seed).standard_normal((3, 30))
    x = nn.forward(g, z)
    assert x.shape == (3, length, 1)
    p = nn.forward(d, x * scale).data
    assert p.shape == (3, 1)
    assert np.all((p > 0) & (p < 1))


def test_discriminator_needs_four_features():
    with pytest.raises(UsageError):
        gan.build_discriminator(3)


def test_gan_value_examples():
    assert gan.gan_value([0.5] * 4, [0.5] * 3) == pytest.approx(-2 * math.log(2), abs=1e-12)
    assert gan.gan_value([0.5], [0.5]) == pytest.approx(-1.38629, abs=5e-6)
    assert gan.gan_value([0.9], [0.2]) == pytest.approx(math.log(0.9) + math.log(0.8), abs=1e-15)
    assert gan.gan_value([0.9], [0.2]) == pytest.approx(-0.32850, abs=5e-6)
    assert gan.equilibrium_value() == -2 * math.log(2)


def test_gan_value_limits():
    values = [gan.gan_value([1 - e], [e]) for e in (1e-2, 1e-5, 1e-10)]
    assert values[0] < values[1] < values[2] < 0
    assert values[-1] > -1e-9


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-6, 1 - 1e-6))
def test_gan_value_bounded_by_discriminator_optimum(a, b):
    v = gan.gan_value([a], [b])
    assert v < 0
    assert v == pytest.approx(math.log(a) + math.log1p(-b), abs=1e-12)


@pytest.mark.parametrize("bad", [[0.0], [1.0], [1.5], [np.nan]])
def test_gan_value_rejects_out_of_range(bad):
    with pytest.raises(ValueError):
        gan.gan_value(bad, [0.5])
    with pytest.raises(ValueError):
        gan.gan_value([0.5], bad)


def test_zero_epochs_leaves_bundle_initialised():
    real = np.random.default_rng(0).uniform(size=(10, 8))
    bundle = gan.train_gan(real, gan.GanConfig(epochs=0, seed=3))
    assert bundle.history == []
    fresh = gan.build_generator(30, 8, seed=3)
    assert all(np.array_equal(p.data, fresh.params[k].data) for k, p in bundle.generator.params.items())


def test_histories_are_bitwise_deterministic():
    real = np.random.default_rng(0).uniform(size=(40, 8))
    runs = [gan.train_gan(real, gan.GanConfig(epochs=5, batch_size=16, seed=7)) for _ in range(2)]
    assert runs[0].history_rows() == runs[1].history_rows()
    a = gan.generate_synthetic(runs[0], 50, seed=1)
    b = gan.generate_synthetic(runs[1], 50, seed=1)
    assert a.tobytes() == b.tobytes()


def test_history_fields():
    real = np.random.default_rng(0).uniform(size=(20, 8))
    bundle = gan.train_gan(real, gan.GanConfig(epochs=3, seed=0))
    assert [h.epoch for h in bundle.history] == [1, 2, 3]
    for h in bundle.history:
        assert 0 <= h.d_real_acc <= 1 and 0 <= h.d_fake_acc <= 1
        assert h.value < 0 and h.d_loss > 0 and h.g_loss > 0


def test_train_gan_empty_real():
    with pytest.raises(UsageError):
        gan.train_gan(np.zeros((0, 8)))


def test_generate_synthetic_contract():
    real = np.random.default_rng(0).uniform(size=(20, 30, 1))
    bundle = gan.train_gan(real, gan.GanConfig(epochs=2, seed=0))
    assert gan.generate_synthetic(bundle, 0).shape == (0, 30, 1)
    big = gan.generate_synthetic(bundle, 10_000, seed=3)
    assert big.shape == (10_000,) + real.shape[1:]
    assert big.min() >= 0.0 and big.max() <= 1.0
    with pytest.raises(UsageError):
        gan.generate_synthetic(bundle, -1)


def test_generate_clips_unbounded_generator_output():
    real = np.random.default_rng(0).uniform(size=(20, 8))
    bundle = gan.train_gan(real, gan.GanConfig(epochs=0))
    bundle.generator.params[(1, "kernel")].data *= 100
    raw = nn.forward(bundle.generator, np.random.default_rng(1).standard_normal((500, 30))).data
    assert raw.max() > 1 and raw.min() < 0
    out = gan.generate_synthetic(bundle, 500, seed=1)
    assert out.min() == 0.0 and out.max() == 1.0


@pytest.mark.slow
def test_single_point_convergence():
    results = [single_point_run(seed) for seed in range(3)]
    assert sum(dist <= 0.1 for dist, _ in results) >= 2
    near_half = 0
    for _, bundle in results:
        tail = np.mean([h.d_fake_acc for h in bundle.history[-50:]])
        near_half += abs(tail - 0.5) <= 0.15
    assert near_half >= 2
