"""Encoder, decoder and discriminator MLPs plus the training losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PRIOR_CLASS = 1
ENCODER_CLASS = 0


class Linear:
    """Affine layer with Glorot-uniform weights and zero bias."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 dtype=np.float32, name: str = "linear"):
        limit = np.sqrt(6.0 / (n_in + n_out))
        self.W = Tensor(rng.uniform(-limit, limit, size=(n_in, n_out)).astype(dtype),
                        requires_grad=True, name=f"{name}.W")
        self.b = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True,
                        name=f"{name}.b") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.affine(x, self.W, self.b)

    def parameters(self) -> list[Tensor]:
        return [self.W] if self.b is None else [self.W, self.b]


class _Module:
    layers: list[Linear]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def weight_mask(self) -> list[bool]:
        """True for weight matrices, False for biases."""
        return [p.data.ndim == 2 for p in self.parameters()]


def _mlp(x: Tensor, layers: Sequence[Linear]) -> Tensor:
    for layer in layers:
        x = ad.relu(layer(x))
    return x


class Encoder(_Module):
    """Shared ReLU trunk feeding a mean head and, optionally, a log-variance head."""

    def __init__(self, input_dim: int, latent_dim: int = 32, widths: Sequence[int] = (512, 256),
                 rng: np.random.Generator | None = None, bias: bool = True,
                 logvar_head: bool = True, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_dim = input_dim
        self.latent_dim = latent_dim
        dims = [input_dim, *widths]
        self.trunk = [Linear(a, b, rng, bias, dtype, name=f"encoder.trunk{i}")
                      for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        self.head_mean = Linear(dims[-1], latent_dim, rng, bias, dtype, name="encoder.mean")
        self.head_logvar = (Linear(dims[-1], latent_dim, rng, bias, dtype, name="encoder.logvar")
                            if logvar_head else None)
        self.layers = [*self.trunk, self.head_mean]
        if self.head_logvar is not None:
            self.layers.append(self.head_logvar)

    def _check(self, x: Tensor):
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"encoder expects (batch, {self.input_dim}), got {x.shape}")

    def mean(self, x: Tensor) -> Tensor:
        self._check(x)
        return self.head_mean(_mlp(x, self.trunk))

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor | None]:
        self._check(x)
        h = _mlp(x, self.trunk)
        mu = self.head_mean(h)
        logvar = self.head_logvar(h) if self.head_logvar is not None else None
        return mu, logvar


class Decoder(_Module):
    """Latent -> (batch, 3*S*S) with a softmax across the three die-state channels."""

    def __init__(self, latent_dim: int = 32, image_size: int = 64, widths: Sequence[int] = (256, 512),
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.latent_dim = latent_dim
        self.image_size = image_size
        out = 3 * image_size * image_size
        dims = [latent_dim, *widths, out]
        self.layers = [Linear(a, b, rng, True, dtype, name=f"decoder.l{i}")
                       for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]

    def __call__(self, z: Tensor) -> Tensor:
        if z.data.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"decoder expects (batch, {self.latent_dim}), got {z.shape}")
        h = _mlp(z, self.layers[:-1])
        logits = self.layers[-1](h)
        n = z.shape[0]
        pos = self.image_size * self.image_size
        probs = ad.softmax(ad.reshape(logits, (n, 3, pos)), axis=1)
        return ad.reshape(probs, (n, 3 * pos))


class Discriminator(_Module):
    def __init__(self, latent_dim: int = 32, widths: Sequence[int] = (128, 64),
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [latent_dim, *widths, 1]
        self.layers = [Linear(a, b, rng, True, dtype, name=f"discriminator.l{i}")
                       for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]

    def logits(self, z: Tensor) -> Tensor:
        return self.layers[-1](_mlp(z, self.layers[:-1]))

    def __call__(self, z: Tensor) -> Tensor:
        return ad.sigmoid(self.logits(z))


def reparameterize(mu: Tensor, logvar: Tensor, noise) -> Tensor:
    """``mu + exp(logvar / 2) * noise`` with the noise held constant."""
    noise = noise.data if isinstance(noise, Tensor) else noise
    noise = Tensor(np.asarray(noise, dtype=mu.dtype))
    if noise.shape != mu.shape or logvar.shape != mu.shape:
        raise ValueError(f"reparameterize shape mismatch: {mu.shape}, {logvar.shape}, {noise.shape}")
    return mu + ad.exp(logvar * 0.5) * noise


@dataclass
class HypersphereParams:
    """Centre/radius of the SVDD sphere and its hyperparameters.

    ``nu_svdd`` is the soft-boundary outlier fraction of the hinge loss;
    ``nu_prior`` scales the prior's spread. They are unrelated knobs.
    """

    center: np.ndarray | None = None
    radius: float = 0.0
    nu_svdd: float = 0.1
    weight_decay: float = 1e-6
    nu_prior: float = 1.0

    def __post_init__(self):
        if not 0 < self.nu_svdd <= 1:
            raise ValueError("nu_svdd must lie in (0, 1]")
        if self.nu_prior <= 0:
            raise ValueError("nu_prior must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    @property
    def initialized(self) -> bool:
        return self.center is not None


def squared_distance(mu: Tensor, center) -> Tensor:
    c = np.asarray(center, dtype=mu.dtype)
    return ad.sum(ad.square(mu - Tensor(c)), axis=1)


def dsvdd_loss(mu: Tensor, sphere: HypersphereParams) -> Tensor:
    """Soft-boundary SVDD objective ``R^2 + 1/(nu n) * sum max(0, |mu - c|^2 - R^2)``.

    R is held constant; the weight penalty is left to the optimizer.
    """
    if not sphere.initialized:
        raise ValueError("hypersphere centre is not initialized")
    r2 = float(sphere.radius) ** 2
    n = mu.shape[0]
    hinge = ad.relu(squared_distance(mu, sphere.center) - r2)
    return ad.sum(hinge) * (1.0 / (sphere.nu_svdd * n)) + r2


def discriminator_loss(d_out: Tensor, labels, from_logits: bool = False) -> Tensor:
    if from_logits:
        return ad.bce_with_logits(d_out, labels)
    return ad.binary_cross_entropy(d_out, labels)


def generator_loss(d_out: Tensor, from_logits: bool = False) -> Tensor:
    """Non-saturating adversarial loss: encoder latents should be scored as prior class."""
    target = np.full(d_out.shape, PRIOR_CLASS)
    return discriminator_loss(d_out, target, from_logits)


def gan_losses(d_disc: Tensor, d_gen: Tensor, labels, from_logits: bool = False) -> tuple[Tensor, Tensor]:
    """(discriminator BCE against ``labels``, generator BCE of ``d_gen`` against the prior class)."""
    return discriminator_loss(d_disc, labels, from_logits), generator_loss(d_gen, from_logits)


def combined_loss(recon_l1: Tensor | None, loss_g: Tensor | None, dsvdd: Tensor | None,
                  weights: Sequence[float] = (1.0, 1.0, 1.0)) -> Tensor:
    """Weighted sum of reconstruction, adversarial and SVDD terms; ``None`` terms are skipped."""
    if len(weights) != 3 or any(w < 0 for w in weights):
        raise ValueError(f"loss weights must be three non-negative reals, got {weights}")
    total = None
    for term, w in zip((recon_l1, loss_g, dsvdd), weights):
        if term is None or w == 0:
            continue
        part = term * float(w)
        total = part if total is None else total + part
    if total is None:
        raise ValueError("combined_loss has no active terms")
    return total
