"""Feature-space GAN over the classifier's bottleneck vectors."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Tuple

import numpy as np

from . import numcore as nc
from .numcore import Tensor

D_CLAMP = 1e-7


@dataclass
class ALConfig:
    noise_dim: int = 32
    g_hidden: int = 64
    feature_dim: int = 256
    d_hidden: Tuple[int, ...] = (64, 16)
    nonsaturating: bool = False

    def __post_init__(self):
        self.d_hidden = tuple(int(v) for v in self.d_hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["d_hidden"] = list(self.d_hidden)
        return d


class Generator(nc.Module):
    """noise -> FC + ELU -> FC + sigmoid."""

    def __init__(self, cfg: ALConfig, rng: np.random.Generator, dtype="float64"):
        super().__init__()
        dt = np.dtype(dtype)
        self.fc1 = nc.Linear(cfg.noise_dim, cfg.g_hidden, rng, init="fan_in", dtype=dt)
        self.fc2 = nc.Linear(cfg.g_hidden, cfg.feature_dim, rng, init="fan_in", dtype=dt)
        self.noise_dim = cfg.noise_dim

    def forward(self, z: Tensor) -> Tensor:
        if z.shape[-1] != self.noise_dim:
            raise nc.ShapeError(f"generator expects noise of length {self.noise_dim}, got {z.shape}")
        return self.fc2(self.fc1(z).elu()).sigmoid()


class Discriminator(nc.Module):
    """Three FC layers, ELU between, sigmoid output = P(real)."""

    def __init__(self, cfg: ALConfig, rng: np.random.Generator, dtype="float64"):
        super().__init__()
        dt = np.dtype(dtype)
        widths = (cfg.feature_dim,) + tuple(cfg.d_hidden) + (1,)
        self.layers = nc.Sequential(
            [nc.Linear(a, b, rng, init="fan_in", dtype=dt) for a, b in zip(widths[:-1], widths[1:])]
        )
        self.feature_dim = cfg.feature_dim

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.feature_dim:
            raise nc.ShapeError(f"discriminator expects features of length {self.feature_dim}, got {x.shape}")
        layers = self.layers.layers
        h = x
        for layer in layers[:-1]:
            h = layer(h).elu()
        return layers[-1](h).sigmoid().reshape(-1)


def sample_noise(rng: np.random.Generator, n: int, dim: int = 32, dtype="float64") -> np.ndarray:
    return rng.standard_normal((n, dim)).astype(dtype)


def loss_al(d_real: Tensor, d_fake: Tensor, nonsaturating: bool = False) -> Tuple[Tensor, Tensor]:
    """(d_loss, g_loss) from discriminator outputs on real and generated features.

    d_loss = -mean log D(x) - mean log(1 - D(G(z)))
    g_loss = mean log(1 - D(G(z)))   (or -mean log D(G(z)) when non-saturating)
    """
    if d_real.size == 0 or d_fake.size == 0:
        raise ValueError("loss_al needs non-empty real and fake batches")
    r = d_real.clip(D_CLAMP, 1 - D_CLAMP)
    f = d_fake.clip(D_CLAMP, 1 - D_CLAMP)
    d_loss = -r.log().mean() - (1.0 - f).log().mean()
    g_loss = -f.log().mean() if nonsaturating else (1.0 - f).log().mean()
    return d_loss, g_loss


def minmax_value(d_real: np.ndarray, d_fake: np.ndarray) -> float:
    """Value of the min-max objective E log D(x) + E log(1 - D(G(z)))."""
    r = np.clip(d_real, D_CLAMP, 1 - D_CLAMP)
    f = np.clip(d_fake, D_CLAMP, 1 - D_CLAMP)
    return float(np.mean(np.log(r)) + np.mean(np.log(1 - f)))


class AdversarialModule(nc.Module):
    def __init__(self, cfg: ALConfig, rng: np.random.Generator, dtype="float64"):
        super().__init__()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.G = Generator(cfg, rng, dtype)
        self.D = Discriminator(cfg, rng, dtype)

    def discriminator_step(self, real: np.ndarray, fake: np.ndarray, lr: float, momentum: float = 0.9,
                           weight_decay: float = 0.0) -> Tuple[float, float]:
        """One descent step of D on d_loss; returns (d_loss, min-max value) before the update."""
        d_real = self.D(Tensor(np.asarray(real, dtype=self.dtype)))
        d_fake = self.D(Tensor(np.asarray(fake, dtype=self.dtype)))
        d_loss, _ = loss_al(d_real, d_fake, self.cfg.nonsaturating)
        value = minmax_value(d_real.data, d_fake.data)
        self.D.zero_grad()
        d_loss.backward()
        nc.sgd_step(self.D.parameters(), lr, momentum, weight_decay)
        return float(d_loss.data), value

    def generator_step(self, n: int, rng: np.random.Generator, lr: float, momentum: float = 0.9,
                       weight_decay: float = 0.0) -> float:
        z = Tensor(sample_noise(rng, n, self.cfg.noise_dim, self.dtype))
        f = self.D(self.G(z)).clip(D_CLAMP, 1 - D_CLAMP)
        g_loss = -f.log().mean() if self.cfg.nonsaturating else (1.0 - f).log().mean()
        self.G.zero_grad()
        g_loss.backward()
        nc.sgd_step(self.G.parameters(), lr, momentum, weight_decay)
        self.D.zero_grad()
        return float(g_loss.data)

    def step(self, real_features: np.ndarray, rng: np.random.Generator, lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0) -> Dict[str, float]:
        """One D update on (real, fake) then one G update on fresh noise.

        The recorded ``l_al`` is the discriminator loss (the negated min-max value), so it
        reads as a quantity being minimised like the other loss terms.

        ``real_features`` are plain arrays: nothing upstream of them receives gradient.
        """
        n = len(real_features)
        with nc.no_grad():
            fake = self.G(Tensor(sample_noise(rng, n, self.cfg.noise_dim, self.dtype))).data
        d_loss, value = self.discriminator_step(real_features, fake, lr, momentum, weight_decay)
        g_loss = self.generator_step(n, rng, lr, momentum, weight_decay)
        return {"d_loss": d_loss, "g_loss": g_loss, "value": value, "l_al": d_loss}


def adversarial_step(module: AdversarialModule, model_bottleneck_features: np.ndarray,
                     rng: np.random.Generator, lr: float, momentum: float = 0.9,
                     weight_decay: float = 0.0) -> Dict[str, float]:
    return module.step(model_bottleneck_features, rng, lr, momentum, weight_decay)


def toy_discriminator_fit(steps: int = 5000, seed: int = 0, lr: float = 0.1, batch: int = 32,
                          points: Tuple[float, float] = (-1.0, 1.0)) -> Dict[str, float]:
    """Train D alone on a two-point distribution and report its values at both points.

    Real data puts mass 1/2 on each of a and b; the (frozen) generator always emits b.
    The optimal discriminator is p/(p+q): D*(a) = 1 and D*(b) = 1/3.
    """
    rng = np.random.default_rng(seed)
    cfg = ALConfig(noise_dim=1, g_hidden=1, feature_dim=1, d_hidden=(16, 8))
    D = Discriminator(cfg, rng)
    a, b = points
    fake = np.full((batch, 1), b)
    real = np.array([[a], [b]] * (batch // 2))
    for _ in range(steps):
        d_loss, _ = loss_al(D(Tensor(real)), D(Tensor(fake)))
        D.zero_grad()
        d_loss.backward()
        nc.sgd_step(D.parameters(), lr, 0.9, 0.0)
    with nc.no_grad():
        out = D(Tensor(np.array([[a], [b]]))).data
    return {"D(a)": float(out[0]), "D(b)": float(out[1])}
