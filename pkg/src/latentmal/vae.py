"""Dense variational autoencoder with hand-written backpropagation.

Encoder: relu hidden layers, then two linear heads for ``z_mean`` and
``z_log_var``. Decoder: relu hidden layers mirroring the encoder, sigmoid
output. Loss per row is ``sum_features (x - x_hat)^2`` plus the closed-form
``KL(N(mu, sigma^2) || N(0, I))``, both averaged over the batch.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .dataio import Dataset
from .errors import PreconditionError, ShapeError
from .numcore import RngState, as_matrix, derive_seed

__all__ = [
    "DenseLayer",
    "VaeModel",
    "TrainConfig",
    "AdamState",
    "LossBreakdown",
    "ForwardCache",
    "DEFAULT_HIDDEN",
    "init_vae",
    "encode",
    "reparameterize",
    "decode",
    "vae_loss",
    "forward",
    "backward",
    "train_vae",
    "extract_latent",
]

DEFAULT_HIDDEN = (512, 128)
DEFAULT_LATENT = 32
LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0
ACTIVATIONS = ("relu", "sigmoid", "linear")


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


@dataclass
class DenseLayer:
    weights: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "linear"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weights.ndim != 2 or self.weights.shape[1] != self.bias.shape[0]:
            raise ShapeError(f"weights {self.weights.shape} do not match bias {self.bias.shape}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    def preact(self, h):
        return h @ self.weights + self.bias

    def activate(self, a):
        if self.activation == "relu":
            return np.maximum(a, 0.0)
        if self.activation == "sigmoid":
            return _sigmoid(a)
        return a


@dataclass
class VaeModel:
    encoder_hidden: list
    mean_head: DenseLayer
    logvar_head: DenseLayer
    decoder_hidden: list
    output_layer: DenseLayer

    kind = "vae"

    def __post_init__(self):
        if self.mean_head.out_dim != self.logvar_head.out_dim:
            raise ShapeError("mean and log-variance heads differ in width")
        if self.output_layer.out_dim != self.input_dim:
            raise ShapeError("decoder output width must equal the input width")

    @property
    def input_dim(self) -> int:
        first = self.encoder_hidden[0] if self.encoder_hidden else self.mean_head
        return first.in_dim

    @property
    def latent_dim(self) -> int:
        return self.mean_head.out_dim

    @property
    def hidden_dims(self) -> list:
        return [layer.out_dim for layer in self.encoder_hidden]

    def layers(self) -> list:
        """Every layer in the fixed parameter order used by Adam and persistence."""
        return [*self.encoder_hidden, self.mean_head, self.logvar_head,
                *self.decoder_hidden, self.output_layer]

    def parameters(self) -> list:
        out = []
        for layer in self.layers():
            out.extend((layer.weights, layer.bias))
        return out

    def copy(self) -> "VaeModel":
        return copy.deepcopy(self)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 42

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise PreconditionError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise PreconditionError("learning_rate must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    reconstruction: float
    kl: float


@dataclass
class AdamState:
    first: list
    second: list
    step: int = 0

    @classmethod
    def for_model(cls, model: VaeModel) -> "AdamState":
        params = model.parameters()
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


# -- construction ------------------------------------------------------------

def _glorot(rng: RngState, fan_in: int, fan_out: int, activation: str) -> DenseLayer:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    w = (2.0 * rng.uniform(fan_in * fan_out) - 1.0) * bound
    return DenseLayer(w.reshape(fan_in, fan_out), np.zeros(fan_out), activation)


def init_vae(input_dim: int, hidden_dims=DEFAULT_HIDDEN, latent_dim: int = DEFAULT_LATENT,
             seed: int = 42) -> VaeModel:
    """Glorot-uniform weights, zero biases; the decoder mirrors ``hidden_dims``."""
    hidden_dims = [int(h) for h in hidden_dims]
    if input_dim < 1 or latent_dim < 1 or any(h < 1 for h in hidden_dims):
        raise PreconditionError("all layer widths must be >= 1")
    rng = RngState(seed)
    enc, prev = [], input_dim
    for h in hidden_dims:
        enc.append(_glorot(rng, prev, h, "relu"))
        prev = h
    mean_head = _glorot(rng, prev, latent_dim, "linear")
    logvar_head = _glorot(rng, prev, latent_dim, "linear")
    dec, prev = [], latent_dim
    for h in reversed(hidden_dims):
        dec.append(_glorot(rng, prev, h, "relu"))
        prev = h
    out = _glorot(rng, prev, input_dim, "sigmoid")
    return VaeModel(enc, mean_head, logvar_head, dec, out)


# -- forward -----------------------------------------------------------------

def _check_input(model: VaeModel, x) -> np.ndarray:
    x = as_matrix(x, "x")
    if x.shape[1] != model.input_dim:
        raise ShapeError(f"VAE expects {model.input_dim} features, got {x.shape[1]}")
    return x


def _encoder_trunk(model, x, keep=None):
    h = x
    for layer in model.encoder_hidden:
        a = layer.preact(h)
        if keep is not None:
            keep.append((h, a))
        h = layer.activate(a)
    return h


def encode(model: VaeModel, x):
    """``(z_mean, z_log_var)``, each batch x latent_dim."""
    h = _encoder_trunk(model, _check_input(model, x))
    return model.mean_head.preact(h), model.logvar_head.preact(h)


def reparameterize(z_mean, z_log_var, rng: RngState | None = None, eps=None):
    """``z = mean + exp(0.5 * log_var) * eps`` with ``eps ~ N(0, I)``.

    ``eps`` may be passed explicitly to freeze the noise; otherwise it is
    drawn from ``rng``.
    """
    z_mean = np.asarray(z_mean, dtype=np.float64)
    z_log_var = np.asarray(z_log_var, dtype=np.float64)
    if z_mean.shape != z_log_var.shape:
        raise ShapeError(f"mean {z_mean.shape} and log-variance {z_log_var.shape} differ")
    if eps is None:
        if rng is None:
            raise PreconditionError("reparameterize needs an rng or explicit eps")
        eps = rng.standard_normal(z_mean.size).reshape(z_mean.shape)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z_mean.shape:
        raise ShapeError("eps shape differs from the mean")
    # only the overflow side is clamped, so the noise vanishes as log_var -> -inf
    std = np.exp(0.5 * np.minimum(z_log_var, LOGVAR_MAX))
    return z_mean + std * eps


def decode(model: VaeModel, z) -> np.ndarray:
    z = as_matrix(z, "z")
    if z.shape[1] != model.latent_dim:
        raise ShapeError(f"decoder expects {model.latent_dim} latent dims, got {z.shape[1]}")
    h = z
    for layer in model.decoder_hidden:
        h = layer.activate(layer.preact(h))
    return model.output_layer.activate(model.output_layer.preact(h))


def vae_loss(x, x_hat, z_mean, z_log_var) -> LossBreakdown:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    z_mean = np.asarray(z_mean, dtype=np.float64)
    z_log_var = np.asarray(z_log_var, dtype=np.float64)
    if x.shape != x_hat.shape or z_mean.shape != z_log_var.shape or x.shape[0] != z_mean.shape[0]:
        raise ShapeError("inconsistent shapes in vae_loss")
    b = x.shape[0]
    recon = float(np.sum((x - x_hat) ** 2)) / b
    lv = np.clip(z_log_var, LOGVAR_MIN, LOGVAR_MAX)
    kl = 0.5 * float(np.sum(z_mean * z_mean + np.exp(lv) - lv - 1.0)) / b
    return LossBreakdown(recon + kl, recon, kl)


@dataclass
class ForwardCache:
    x: np.ndarray
    enc: list  # (input, pre-activation) per encoder hidden layer
    trunk: np.ndarray
    z_mean: np.ndarray
    z_log_var: np.ndarray
    eps: np.ndarray
    z: np.ndarray
    dec: list
    dec_out_in: np.ndarray
    x_hat: np.ndarray


def forward(model: VaeModel, x, rng: RngState | None = None, eps=None):
    """Full training-mode pass. Returns ``(LossBreakdown, ForwardCache)``."""
    x = _check_input(model, x)
    enc = []
    trunk = _encoder_trunk(model, x, enc)
    z_mean = model.mean_head.preact(trunk)
    z_log_var = model.logvar_head.preact(trunk)
    if eps is None:
        eps = rng.standard_normal(z_mean.size).reshape(z_mean.shape)
    z = reparameterize(z_mean, z_log_var, eps=eps)
    dec = []
    h = z
    for layer in model.decoder_hidden:
        a = layer.preact(h)
        dec.append((h, a))
        h = layer.activate(a)
    x_hat = model.output_layer.activate(model.output_layer.preact(h))
    cache = ForwardCache(x, enc, trunk, z_mean, z_log_var, np.asarray(eps), z, dec, h, x_hat)
    return vae_loss(x, x_hat, z_mean, z_log_var), cache


def backward(model: VaeModel, cache: ForwardCache) -> list:
    """Exact gradients of the batch loss, in ``model.parameters()`` order.

    The noise stored in ``cache`` is reused, so the result is the gradient of
    the same single-sample objective that :func:`forward` evaluated.
    """
    b = cache.x.shape[0]
    grads = {}

    d_out = (2.0 / b) * (cache.x_hat - cache.x) * cache.x_hat * (1.0 - cache.x_hat)
    out = model.output_layer
    grads[id(out)] = (cache.dec_out_in.T @ d_out, d_out.sum(axis=0))
    dh = d_out @ out.weights.T
    for layer, (h_in, a) in zip(reversed(model.decoder_hidden), reversed(cache.dec)):
        da = dh * (a > 0)
        grads[id(layer)] = (h_in.T @ da, da.sum(axis=0))
        dh = da @ layer.weights.T
    dz = dh

    lv = cache.z_log_var
    below_max = lv <= LOGVAR_MAX
    inside = (lv >= LOGVAR_MIN) & below_max
    lv_c = np.clip(lv, LOGVAR_MIN, LOGVAR_MAX)
    std = np.exp(0.5 * np.minimum(lv, LOGVAR_MAX))
    d_mean = dz + cache.z_mean / b
    d_lv = (dz * cache.eps * 0.5 * std * below_max
            + 0.5 * (np.exp(lv_c) - 1.0) / b * inside)

    grads[id(model.mean_head)] = (cache.trunk.T @ d_mean, d_mean.sum(axis=0))
    grads[id(model.logvar_head)] = (cache.trunk.T @ d_lv, d_lv.sum(axis=0))
    dh = d_mean @ model.mean_head.weights.T + d_lv @ model.logvar_head.weights.T
    for layer, (h_in, a) in zip(reversed(model.encoder_hidden), reversed(cache.enc)):
        da = dh * (a > 0)
        grads[id(layer)] = (h_in.T @ da, da.sum(axis=0))
        dh = da @ layer.weights.T

    flat = []
    for layer in model.layers():
        flat.extend(grads[id(layer)])
    return flat


# -- training ----------------------------------------------------------------

def _adam_update(params, grads, state: AdamState, cfg: TrainConfig):
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.first, state.second):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_epsilon)


def train_vae(model: VaeModel, train, config: TrainConfig | None = None):
    """Mini-batch Adam on a copy of ``model``.

    Rows are reshuffled every epoch and the last partial batch is kept.
    Returns ``(trained_model, history)`` where ``history[e]`` is the
    per-sample mean :class:`LossBreakdown` over epoch ``e``.
    """
    config = config or TrainConfig()
    x = train.features if isinstance(train, Dataset) else as_matrix(train, "train")
    x = _check_input(model, x)
    if x.shape[0] == 0:
        raise PreconditionError("cannot train on an empty dataset")
    if x.min() < 0.0 or x.max() > 1.0:
        raise PreconditionError("VAE input must be scaled to [0, 1]")
    model = model.copy()
    params = model.parameters()
    state = AdamState.for_model(model)
    shuffle_rng = RngState(derive_seed(config.seed, 0))
    noise_rng = RngState(derive_seed(config.seed, 1))
    n = x.shape[0]
    history = []
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(n)
        tot = rec = kl = 0.0
        for s in range(0, n, config.batch_size):
            batch = x[order[s:s + config.batch_size]]
            loss, cache = forward(model, batch, noise_rng)
            grads = backward(model, cache)
            _adam_update(params, grads, state, config)
            m = batch.shape[0]
            tot += loss.total * m
            rec += loss.reconstruction * m
            kl += loss.kl * m
        history.append(LossBreakdown(tot / n, rec / n, kl / n))
    return model, history


def extract_latent(model: VaeModel, ds: Dataset) -> Dataset:
    """Replace features with the encoder mean (no sampling); labels unchanged."""
    z_mean, _ = encode(model, ds.features)
    return Dataset(z_mean, ds.labels, f"{ds.name}:latent")
