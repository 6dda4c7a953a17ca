"""Exact per-step Renyi divergence of the released decoder gradient.

One Stage 2 step releases ``N(clip(g_bar(D)), sigma^2 C^2 I)``. For two
Gaussians with equal isotropic covariance the order-alpha Renyi divergence is
``alpha ||m - m'||^2 / (2 s^2)``, so the per-step privacy loss on a concrete
pair of adjacent batches can be computed exactly and compared with the
worst-case ``2 alpha / sigma^2``.
"""

from __future__ import annotations

import numpy as np

from .accountant import PrivacyParams, decoder_step_rdp
from .cvae import CvaeParams
from .errors import AuditViolation, InvalidParameterError
from .nn import AdamState, clip_to_norm
from .training import decoder_batch_gradient

# slack for rounding in the comparison only
BOUND_RTOL = 1e-12


def gaussian_renyi_divergence(mean_a, mean_b, std: float, alpha: float) -> float:
    """D_alpha(N(mean_a, std^2 I) || N(mean_b, std^2 I))."""
    diff = np.asarray(mean_a, dtype=np.float64) - np.asarray(mean_b, dtype=np.float64)
    return float(alpha * (diff @ diff) / (2.0 * std ** 2))


def audit_released_means(grads, adjacent_grads, privacy: PrivacyParams, alpha: float):
    """Audit from per-example decoder gradients, rows in batch order.

    Returns ``(d_alpha, bound)`` and raises ``AuditViolation`` if the exact
    divergence exceeds the bound.
    """
    grads = np.atleast_2d(np.asarray(grads, dtype=np.float64))
    adjacent_grads = np.atleast_2d(np.asarray(adjacent_grads, dtype=np.float64))
    if grads.shape != adjacent_grads.shape:
        raise InvalidParameterError("gradient batches must have the same shape")
    C, sigma = privacy.clip_bound, privacy.noise_multiplier
    released = clip_to_norm(grads.mean(axis=0), C)
    released_adj = clip_to_norm(adjacent_grads.mean(axis=0), C)
    d_alpha = gaussian_renyi_divergence(released, released_adj, sigma * C, alpha)
    bound = decoder_step_rdp(alpha, sigma)
    if d_alpha > bound * (1.0 + BOUND_RTOL):
        raise AuditViolation(f"exact divergence {d_alpha!r} exceeds bound {bound!r}")
    return d_alpha, bound


def differing_records(batch, adjacent_batch) -> int:
    (x, y), (x2, y2) = batch, adjacent_batch
    x, x2 = np.asarray(x), np.asarray(x2)
    y, y2 = np.asarray(y), np.asarray(y2)
    if x.shape != x2.shape or y.shape != y2.shape:
        raise InvalidParameterError("adjacent batches must have the same size")
    rows = np.any(x.reshape(len(x), -1) != x2.reshape(len(x2), -1), axis=1) | (y != y2)
    return int(rows.sum())


def audit_step_divergence(batch, adjacent_batch, params: CvaeParams, privacy: PrivacyParams,
                          alpha: float, eps=None, rng=None, encoder_adam: AdamState | None = None,
                          lr: float = 0.0):
    """Exact divergence of one Stage 2 release on two batches differing in one record.

    ``batch`` and ``adjacent_batch`` are ``(images, labels)`` pairs. Both runs use
    the same latent noise ``eps`` (drawn from ``rng`` if not given) and start
    from the same encoder state; with ``lr > 0`` the encoder takes its
    per-example Adam steps exactly as in training. ``params`` is not modified.

    Returns ``(d_alpha, bound)``.
    """
    if differing_records(batch, adjacent_batch) > 1:
        raise InvalidParameterError("batches differ in more than one record")
    images, labels = (np.asarray(a) for a in batch)
    adj_images, adj_labels = (np.asarray(a) for a in adjacent_batch)
    n = len(labels)
    if eps is None:
        eps = rng.normal((n, params.latent_dim))
    if encoder_adam is None:
        encoder_adam = AdamState.zeros(params.encoder.n_params)

    # both runs agree up to the first differing record: share that prefix
    differs = np.flatnonzero(np.any(images.reshape(n, -1) != adj_images.reshape(n, -1), axis=1)
                             | (labels != adj_labels))
    split = int(differs[0]) if len(differs) else n

    def run(encoder, adam, x, y, e):
        if not len(y):
            return np.zeros(params.decoder.n_params)
        g, _ = decoder_batch_gradient(encoder, adam, params.decoder, x, y, e, lr,
                                      params.n_classes, update_encoder=lr > 0)
        return g * len(y)

    encoder, adam = params.encoder.copy(), encoder_adam.copy()
    prefix = run(encoder, adam, images[:split], labels[:split], eps[:split])
    first = run(encoder.copy(), adam.copy(), images[split:], labels[split:], eps[split:])
    # the last run may consume the shared state
    second = run(encoder, adam, adj_images[split:], adj_labels[split:], eps[split:])
    sums = [(prefix + first) / n, (prefix + second) / n]
    return audit_released_means(sums[0], sums[1], privacy, alpha)
