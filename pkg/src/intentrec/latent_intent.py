"""Conditional VAE over behavior signals: prior p(z|x), encoder q(z|x,y), decoder p(y|z).

All three distributions are diagonal Gaussians whose mean and log-variance
come out of a ReLU MLP. Log-variances are soft-clipped into ``(a, b)`` and
weights start near zero so that prior and posterior begin at N(0, I).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .numerics import ParameterSet, ShapeError, Tensor, init_mlp, mlp_forward
from .numerics import tensor as T
from .numerics.layers import glorot_init

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ClipBounds:
    a: float = -8.0
    b: float = 4.0

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ValueError("clip bounds must be finite")
        if not self.a < self.b:
            raise ValueError(f"clip bounds need a < b, got ({self.a}, {self.b})")


@dataclass(frozen=True)
class IntentDims:
    d_x: int = 16
    d_y: int = 8
    d_z: int = 4
    hidden: tuple[int, ...] = (32, 32)

    def __post_init__(self):
        if min(self.d_x, self.d_y, self.d_z) < 1:
            raise ValueError("intent dims must be positive")
        if self.d_z >= self.d_y:
            raise ValueError(f"d_z ({self.d_z}) must be smaller than d_y ({self.d_y})")

    def prior_sizes(self) -> list[int]:
        return [self.d_x, *self.hidden, 2 * self.d_z]

    def encoder_sizes(self) -> list[int]:
        return [self.d_x + self.d_y, *self.hidden, 2 * self.d_z]

    def decoder_sizes(self) -> list[int]:
        return [self.d_z, *self.hidden, 2 * self.d_y]


@dataclass
class IntentModuleParams:
    prior_net: ParameterSet
    encoder_net: ParameterSet
    decoder_net: ParameterSet
    dims: IntentDims
    clip: ClipBounds | None = field(default_factory=ClipBounds)
    init_epsilon: float = 1e-3

    @property
    def param_sets(self) -> list[ParameterSet]:
        return [self.prior_net, self.encoder_net, self.decoder_net]


@dataclass
class DiagGaussian:
    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ShapeError(f"mean {self.mean.shape} and log_var {self.log_var.shape} differ")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


@dataclass
class LatentSample:
    z: Tensor
    noise: np.ndarray
    source: str  # "prior" or "posterior"


class ElboTerms(NamedTuple):
    elbo: Tensor
    recon: Tensor
    kl: Tensor
    posterior: DiagGaussian
    prior: DiagGaussian


DECODER_INITS = ("glorot_hidden", "uniform")


def init_params(
    dims: IntentDims | None = None,
    init_epsilon: float = 1e-3,
    seed: int = 0,
    clip: ClipBounds | None = ClipBounds(),
    decoder_init: str = "glorot_hidden",
) -> IntentModuleParams:
    """Near-zero init: U(-eps, eps) weights and zero biases.

    Prior and encoder are fully U(-eps, eps), so both start at ~N(0, I)
    and their KL starts near zero. The decoder's output layer is
    U(-eps, eps) too, but with ``decoder_init="glorot_hidden"`` its hidden
    layers are Glorot-uniform: with every decoder layer near zero the
    decoder learns the marginal of y through its biases and never starts
    using z (posterior collapse). ``"uniform"`` applies eps everywhere.
    """
    if not init_epsilon > 0:
        raise ValueError(f"init_epsilon must be positive, got {init_epsilon}")
    if decoder_init not in DECODER_INITS:
        raise ValueError(f"decoder_init must be one of {DECODER_INITS}")
    dims = dims or IntentDims()
    rng = np.random.default_rng(seed)
    prior_net = init_mlp("prior", dims.prior_sizes(), rng, epsilon=init_epsilon)
    encoder_net = init_mlp("encoder", dims.encoder_sizes(), rng, epsilon=init_epsilon)
    decoder_net = init_mlp("decoder", dims.decoder_sizes(), rng, epsilon=init_epsilon)
    if decoder_init == "glorot_hidden":
        n_layers = len(dims.decoder_sizes()) - 1
        for i in range(n_layers - 1):
            w = decoder_net[f"W{i}"]
            w.data = glorot_init(rng, w.shape)
    return IntentModuleParams(
        prior_net=prior_net,
        encoder_net=encoder_net,
        decoder_net=decoder_net,
        dims=dims,
        clip=clip,
        init_epsilon=init_epsilon,
    )


def _softplus(v):
    return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))


def soft_clip_values(v, a: float, b: float) -> np.ndarray:
    """f(v) = v - softplus(v - b) + softplus(a - v), cancellation-free.

    Above ``b`` and below ``a`` the algebraically equal forms
    ``b - softplus(b - v) + softplus(a - v)`` and
    ``a + softplus(v - a) - softplus(v - b)`` avoid subtracting two
    huge numbers.
    """
    v = np.asarray(v, dtype=np.float64)
    mid = v - _softplus(v - b) + _softplus(a - v)
    high = b - _softplus(b - v) + _softplus(a - v)
    low = a + _softplus(v - a) - _softplus(v - b)
    return np.where(v > b, high, np.where(v < a, low, mid))


def soft_clip(v, bounds: ClipBounds) -> Tensor:
    v = T.as_tensor(v)
    out = soft_clip_values(v.data, bounds.a, bounds.b)

    def backward(g):
        # f'(v) = 1 - sigmoid(v - b) - sigmoid(a - v)
        deriv = 1.0 - T._sigmoid(v.data - bounds.b) - T._sigmoid(bounds.a - v.data)
        return (g * deriv,)

    return Tensor._make(out, (v,), backward)


def _gaussian_head(params: IntentModuleParams, net: ParameterSet, sizes, inp) -> DiagGaussian:
    out = mlp_forward(net, inp, sizes, activation="relu")
    d = sizes[-1] // 2
    mean, raw = T.split(out, [d, d], axis=-1)
    log_var = soft_clip(raw, params.clip) if params.clip is not None else raw
    return DiagGaussian(mean, log_var)


def _check_dim(name: str, t: Tensor, expected: int) -> None:
    if t.shape[-1] != expected:
        raise ShapeError(f"{name} has dim {t.shape[-1]}, expected {expected}")


def prior(params: IntentModuleParams, x) -> DiagGaussian:
    """p(z | x)."""
    x = T.as_tensor(x)
    _check_dim("x", x, params.dims.d_x)
    return _gaussian_head(params, params.prior_net, params.dims.prior_sizes(), x)


def encode(params: IntentModuleParams, x, y) -> DiagGaussian:
    """q(z | x, y), the approximate posterior."""
    x, y = T.as_tensor(x), T.as_tensor(y)
    _check_dim("x", x, params.dims.d_x)
    _check_dim("y", y, params.dims.d_y)
    xy = T.concat([x, y], axis=-1)
    return _gaussian_head(params, params.encoder_net, params.dims.encoder_sizes(), xy)


def decode(params: IntentModuleParams, z) -> DiagGaussian:
    """p(y | z). Takes no x: y is independent of x given z."""
    if isinstance(z, LatentSample):
        z = z.z
    z = T.as_tensor(z)
    _check_dim("z", z, params.dims.d_z)
    return _gaussian_head(params, params.decoder_net, params.dims.decoder_sizes(), z)


def reparameterize(g: DiagGaussian, noise, source: str = "posterior") -> LatentSample:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1] != g.dim:
        raise ShapeError(f"noise dim {noise.shape[-1]} != distribution dim {g.dim}")
    z = g.mean + T.exp(g.log_var * 0.5) * noise
    return LatentSample(z=z, noise=noise, source=source)


def kl_diag_gaussian(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) in closed form, summed over the last axis."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise ShapeError(f"KL between dims {q.dim} and {p.dim}")
    var_ratio = T.exp(q.log_var - p.log_var)
    mahal = T.square(q.mean - p.mean) * T.exp(-p.log_var)
    terms = p.log_var - q.log_var + var_ratio + mahal - 1.0
    return T.tsum(terms, axis=-1) * 0.5


def gaussian_log_likelihood(g: DiagGaussian, y) -> Tensor:
    y = T.as_tensor(y)
    _check_dim("y", y, g.dim)
    sq = T.square(y - g.mean) * T.exp(-g.log_var)
    return T.tsum((sq + g.log_var + LOG_2PI) * -0.5, axis=-1)


def elbo(params: IntentModuleParams, x, y, noise) -> ElboTerms:
    """Single-sample ELBO, per example: log p(y|z) - KL(q(z|x,y) || p(z|x))."""
    q = encode(params, x, y)
    p = prior(params, x)
    sample = reparameterize(q, noise, source="posterior")
    recon = gaussian_log_likelihood(decode(params, sample), y)
    kl = kl_diag_gaussian(q, p)
    return ElboTerms(elbo=recon - kl, recon=recon, kl=kl, posterior=q, prior=p)


def sample_prior(params: IntentModuleParams, x, noise, use_mean: bool = False) -> LatentSample:
    """Draw the intent fed to the recommender (or its mean in ablation mode)."""
    p = prior(params, x)
    if use_mean:
        return LatentSample(z=p.mean, noise=np.zeros_like(np.asarray(noise)), source="prior")
    return reparameterize(p, noise, source="prior")


def log_variances(dists: Sequence[DiagGaussian]) -> np.ndarray:
    return np.concatenate([d.log_var.data.reshape(-1) for d in dists])
