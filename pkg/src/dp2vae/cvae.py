"""Conditional VAE on flattened images with a Bernoulli pixel likelihood.

The encoder maps ``concat(x, onehot(y))`` to ``concat(mu, logvar)``; the decoder
maps ``concat(z, onehot(y))`` to pixel probabilities. Losses and gradients are
for the *negative* ELBO, averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidLabelError, NumericError, ShapeError
from .nn import DenseNet, Tape, backward, forward
from .numerics import RngStream

PIXEL_CLIP = 1e-7
# exp(logvar / 2) is evaluated on logvar clipped to this range
LOGVAR_LIMIT = 80.0


@dataclass
class CvaeParams:
    encoder: DenseNet
    decoder: DenseNet
    n_classes: int = 10

    @property
    def latent_dim(self) -> int:
        return self.encoder.out_dim // 2

    @property
    def data_dim(self) -> int:
        return self.decoder.out_dim


@dataclass
class ElboTerms:
    recon: float
    kl: float

    @property
    def elbo(self) -> float:
        return self.recon - self.kl


def encoder_net(rng: RngStream, data_dim=784, n_classes=10, latent_dim=8, hidden=(256, 128)) -> DenseNet:
    sizes = (data_dim + n_classes, *hidden, 2 * latent_dim)
    return DenseNet.init(sizes, ("relu",) * len(hidden) + ("identity",), rng)


def decoder_net(rng: RngStream, data_dim=784, n_classes=10, latent_dim=8, hidden=(128, 256)) -> DenseNet:
    sizes = (latent_dim + n_classes, *hidden, data_dim)
    return DenseNet.init(sizes, ("relu",) * len(hidden) + ("sigmoid",), rng)


def one_hot(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise InvalidLabelError("labels must be integers")
        y = y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= n_classes):
        raise InvalidLabelError(f"labels must lie in 0..{n_classes - 1}")
    out = np.zeros(y.shape + (n_classes,))
    if y.ndim == 0:
        out[int(y)] = 1.0
    else:
        out[np.arange(len(y)), y] = 1.0
    return out


def _with_labels(v, y, n_classes):
    return np.concatenate([v, one_hot(y, n_classes)], axis=-1)


def encode(params: CvaeParams, x, y):
    """Posterior mean and log-variance for one example or a batch."""
    x = np.asarray(x, dtype=np.float64)
    out, _ = forward(params.encoder, _with_labels(x, y, params.n_classes))
    d = params.latent_dim
    return out[..., :d], out[..., d:]


def reparameterize(mu, logvar, rng: RngStream | None = None, eps=None) -> np.ndarray:
    """``z = mu + exp(logvar / 2) * eps`` with ``eps ~ N(0, I)`` from ``rng`` unless given."""
    mu = np.asarray(mu, dtype=np.float64)
    if eps is None:
        eps = rng.normal(mu.shape)
    std = np.exp(0.5 * np.clip(logvar, -LOGVAR_LIMIT, LOGVAR_LIMIT))
    return mu + std * eps


@dataclass
class DecoderTrace:
    """What a decoder parameter gradient needs from one forward pass."""

    tape: Tape
    pre_grad: np.ndarray


def elbo_and_grads(params: CvaeParams, x, y, rng: RngStream | None = None, eps=None, out=None,
                   defer_decoder: bool = False):
    """Single-sample ELBO and gradients of the negative ELBO.

    ``x`` is ``(d_x,)`` or ``(B, d_x)``; batch values are means over examples.
    Pass ``eps`` (shape of ``mu``) to freeze the reparameterization noise.
    ``out`` may hold preallocated ``(encoder_grad, decoder_grad)`` buffers.
    With ``defer_decoder`` the decoder gradient is not formed; a
    ``DecoderTrace`` is returned in its place for ``decoder_grad_from_traces``.

    Returns ``(ElboTerms, grad_encoder, grad_decoder)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.data_dim:
        raise ShapeError(f"x has {x.shape[-1]} features, decoder emits {params.data_dim}")
    n = 1 if x.ndim == 1 else x.shape[0]
    k = params.n_classes
    d = params.latent_dim

    enc_out, enc_tape = forward(params.encoder, _with_labels(x, y, k))
    mu, logvar = enc_out[..., :d], enc_out[..., d:]
    if eps is None:
        eps = rng.normal(mu.shape)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != mu.shape:
        raise ShapeError(f"eps shape {eps.shape} != latent shape {mu.shape}")
    lv = np.clip(logvar, -LOGVAR_LIMIT, LOGVAR_LIMIT)
    std = np.exp(0.5 * lv)
    z = mu + std * eps

    x_hat, dec_tape = forward(params.decoder, _with_labels(z, y, k))
    p = np.clip(x_hat, PIXEL_CLIP, 1.0 - PIXEL_CLIP)
    recon = float(np.sum(x * np.log(p) + (1.0 - x) * np.log1p(-p))) / n
    kl = 0.5 * float(np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar)) / n

    # d(-recon)/d(pre-sigmoid) is x_hat - x; zero where the clip is active
    inside = (x_hat > PIXEL_CLIP) & (x_hat < 1.0 - PIXEL_CLIP)
    g_pre = np.where(inside, x_hat - x, 0.0) / n
    out_enc, out_dec = (None, None) if out is None else out
    grad_dec, g_dec_in = backward(params.decoder, dec_tape, g_pre, through_last_activation=False,
                                  out=out_dec, param_grad=not defer_decoder)
    g_z = g_dec_in[..., :d]

    g_mu = g_z + mu / n
    in_range = np.abs(logvar) < LOGVAR_LIMIT
    g_logvar = g_z * eps * 0.5 * std * in_range + 0.5 * (np.exp(logvar) - 1.0) / n
    grad_enc, _ = backward(params.encoder, enc_tape, np.concatenate([g_mu, g_logvar], axis=-1),
                           out=out_enc)

    if defer_decoder:
        if not (np.all(np.isfinite(grad_enc)) and np.all(np.isfinite(g_pre))):
            raise NumericError("non-finite gradient in ELBO")
        return ElboTerms(recon, kl), grad_enc, DecoderTrace(dec_tape, g_pre)
    if not (np.all(np.isfinite(grad_enc)) and np.all(np.isfinite(grad_dec))):
        raise NumericError("non-finite gradient in ELBO")
    return ElboTerms(recon, kl), grad_enc, grad_dec


def decoder_grad_from_traces(decoder: DenseNet, traces, out=None) -> np.ndarray:
    """Sum of the decoder gradients recorded by single-example deferred passes.

    The decoder must not have changed since the traces were taken.
    """
    traces = list(traces)
    first = traces[0].tape
    stacked = Tape(first.net_id, first.version,
                   [np.stack([t.tape.inputs[i] for t in traces]) for i in range(len(first.inputs))],
                   [np.stack([t.tape.outputs[i] for t in traces]) for i in range(len(first.outputs))])
    grad, _ = backward(decoder, stacked, np.stack([t.pre_grad for t in traces]),
                       through_last_activation=False, out=out)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite decoder gradient")
    return grad


def negative_elbo(params: CvaeParams, x, y, eps) -> float:
    """Loss value matching ``elbo_and_grads`` for frozen ``eps``; used by gradient checks."""
    terms, _, _ = elbo_and_grads(params, x, y, eps=eps)
    return -terms.elbo


def generate(decoder: DenseNet, labels, rng: RngStream, n_classes: int = 10) -> np.ndarray:
    """Sample one image per label from the decoder with ``z ~ N(0, I)``.

    Only the decoder is taken: releasing samples never touches encoder state.
    Returns an array of shape ``(len(labels), d_x)``.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        return np.zeros((0, decoder.out_dim))
    latent = decoder.in_dim - n_classes
    z = rng.normal((labels.size, latent))
    images, _ = forward(decoder, _with_labels(z, labels, n_classes))
    return images
