"""Generator/discriminator pair for synthesizing scaled feature rows."""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import UsageError
from .nn import LayerSpec, build_model, forward


@dataclass
class GanConfig:
    noise_dim: int = 30
    epochs: int = 200
    batch_size: int = 128
    alpha: float = 0.01
    # beta1=0.9 lets the discriminator run away on small sets; 0.5 is the usual GAN choice
    lr: float = 2e-3
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.noise_dim < 1:
            raise UsageError("noise_dim must be >= 1")
        if self.epochs < 0:
            raise UsageError("epochs must be >= 0")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")


@dataclass
class GanEpoch:
    epoch: int
    d_loss: float
    g_loss: float
    d_real_acc: float
    d_fake_acc: float
    value: float


@dataclass
class GanBundle:
    generator: object
    discriminator: object
    config: GanConfig
    history: list = field(default_factory=list)

    @property
    def feature_len(self):
        return self.discriminator.input_shape[0]

    def history_rows(self):
        return [asdict(h) for h in self.history]


def build_generator(noise_dim, feature_len, alpha=0.01, seed=0):
    """noise[noise_dim] -> Dense(feature_len, leaky_relu) -> (feature_len, 1)."""
    if feature_len < 1:
        raise UsageError("feature_len must be >= 1")
    layers = [
        LayerSpec("input", {"shape": (noise_dim,)}),
        LayerSpec("dense", {"units": feature_len, "activation": "leaky_relu", "alpha": alpha}),
        LayerSpec("reshape", {"target_shape": (feature_len, 1)}),
    ]
    return build_model(layers, seed=seed, class_count=1, role="generator")


def build_discriminator(feature_len, alpha=0.01, seed=0):
    """(L, 1) -> Conv1D(64, s2) -> Conv1D(32, s2) -> Flatten -> Dense(1, sigmoid)."""
    if feature_len < 4:
        raise UsageError("feature_len must be >= 4")
    layers = [
        LayerSpec("input", {"shape": (feature_len, 1)}),
        LayerSpec("conv1d", {"filters": 64, "kernel_size": 3, "stride": 2,
                             "activation": "leaky_relu", "alpha": alpha}),
        LayerSpec("conv1d", {"filters": 32, "kernel_size": 3, "stride": 2,
                             "activation": "leaky_relu", "alpha": alpha}),
        LayerSpec("flatten"),
        LayerSpec("dense", {"units": 1, "activation": "sigmoid"}),
    ]
    return build_model(layers, seed=seed, class_count=1, role="discriminator")


def gan_value(d_real, d_fake):
    """Empirical min-max objective: mean log D(x) + mean log(1 - D(G(z)))."""
    d_real = np.asarray(d_real, dtype=np.float64).reshape(-1)
    d_fake = np.asarray(d_fake, dtype=np.float64).reshape(-1)
    if d_real.size == 0 or d_fake.size == 0:
        raise UsageError("gan_value needs nonempty probability lists")
    for name, p in (("d_real", d_real), ("d_fake", d_fake)):
        if np.any(p <= 0.0) or np.any(p >= 1.0) or not np.all(np.isfinite(p)):
            raise ValueError(f"{name} probabilities must lie strictly inside (0, 1)")
    return float(np.mean(np.log(d_real)) + np.mean(np.log1p(-d_fake)))


def _as_sequences(real):
    real = np.asarray(real, dtype=np.float64)
    return real[..., None] if real.ndim == 2 else real


def train_gan(real, config=None):
    """Alternating training against ``real[N, L, 1]``.

    Each epoch takes one discriminator step on a real batch (label 1) plus a
    generated batch (label 0), then one generator step through the
    discriminator using the non-saturating loss -log D(G(z)).
    """
    config = config or GanConfig()
    real = _as_sequences(real)
    if len(real) == 0:
        raise UsageError("cannot train a GAN on an empty real set")
    feature_len = real.shape[1]
    gen = build_generator(config.noise_dim, feature_len, config.alpha, seed=config.seed)
    disc = build_discriminator(feature_len, config.alpha, seed=config.seed + 1)
    bundle = GanBundle(gen, disc, config)

    hp = (config.lr, config.beta1, config.beta2, config.eps)
    d_opt = T.Adam(disc.params, *hp)
    g_opt = T.Adam(gen.params, *hp)
    rng = np.random.default_rng(config.seed)
    n = len(real)
    b = min(config.batch_size, n)

    for epoch in range(config.epochs):
        xb = real[rng.choice(n, size=b, replace=False)]
        with T.no_grad():
            fake = forward(gen, rng.standard_normal((b, config.noise_dim))).data

        # discriminator step
        d_real = forward(disc, xb)
        d_fake = forward(disc, fake)
        d_loss = (T.binary_ce(d_real, np.ones((b, 1))) + T.binary_ce(d_fake, np.zeros((b, 1)))) * 0.5
        d_opt.zero_grad()
        T.backward(d_loss)
        d_opt.step()

        # generator step; discriminator gradients are discarded
        g_out = forward(disc, forward(gen, rng.standard_normal((b, config.noise_dim))))
        g_loss = T.binary_ce(g_out, np.ones((b, 1)))
        g_opt.zero_grad()
        d_opt.zero_grad()
        T.backward(g_loss)
        g_opt.step()
        d_opt.zero_grad()

        pr, pf = d_real.data.reshape(-1), d_fake.data.reshape(-1)
        bundle.history.append(GanEpoch(
            epoch=epoch + 1,
            d_loss=d_loss.item(),
            g_loss=g_loss.item(),
            d_real_acc=float(np.mean(pr >= 0.5)),
            d_fake_acc=float(np.mean(pf < 0.5)),
            value=gan_value(pr, pf),
        ))
    return bundle


def generate_synthetic(bundle, n, seed=0):
    """``n`` generated rows shaped ``[n, L, 1]`` and clipped to [0, 1]."""
    if n < 0:
        raise UsageError("n must be >= 0")
    length = bundle.feature_len
    if n == 0:
        return np.zeros((0, length, 1))
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, bundle.config.noise_dim))
    out = []
    with T.no_grad():
        for start in range(0, n, 4096):
            out.append(forward(bundle.generator, z[start:start + 4096]).data)
    return np.clip(np.concatenate(out), 0.0, 1.0)


def equilibrium_value():
    return -2.0 * math.log(2.0)
