import numpy as np
import pytest

from dp2vae.accountant import PrivacyParams
from dp2vae.audit import audit_released_means, audit_step_divergence, gaussian_renyi_divergence
from dp2vae.cvae import CvaeParams, decoder_net, encoder_net
from dp2vae.errors import AuditViolation, InvalidParameterError
from dp2vae.numerics import RngStream


def small_params(seed):
    rng = RngStream(seed)
    return CvaeParams(encoder_net(rng, 16, 10, 2, hidden=(8,)), decoder_net(rng, 16, 10, 2, hidden=(8,)))


def test_renyi_divergence_formula():
    assert gaussian_renyi_divergence([0, 0], [3, 4], 5.0, 2.0) == pytest.approx(2 * 25 / 50)


def test_identical_batches_zero():
    rng = RngStream(0)
    x, y = rng.uniform((4, 16), 0, 1), np.array([1, 2, 3, 4])
    d, bound = audit_step_divergence((x, y), (x, y), small_params(0), PrivacyParams(), 8.0, rng=rng)
    assert d == 0.0
    assert bound == 2 * 8.0 / 64


@pytest.mark.parametrize("alpha,sigma,C", [(8.0, 8.0, 1.0), (2.0, 1.0, 0.1), (32.0, 3.0, 10.0)])
def test_maximal_sensitivity_attains_bound(alpha, sigma, C):
    u = RngStream(1).normal(50)
    u /= np.linalg.norm(u)
    # batch means are +-5C u, so the clipped releases are +-C u
    grads = np.tile(5 * C * u, (4, 1))
    adjacent = grads.copy()
    adjacent[2] = grads[2] - 4 * 10 * C * u
    privacy = PrivacyParams(clip_bound=C, noise_multiplier=sigma)
    d, bound = audit_released_means(grads, adjacent, privacy, alpha)
    assert bound == 2 * alpha / sigma ** 2
    assert abs(d - bound) <= 1e-9 * bound


def test_violation_detected(monkeypatch):
    # with clipping disabled the gap exceeds 2C and the checker must flag it
    from dp2vae import audit
    monkeypatch.setattr(audit, "clip_to_norm", lambda g, c: g)
    with pytest.raises(AuditViolation):
        audit_released_means(np.ones((1, 4)), -np.ones((1, 4)), PrivacyParams(), 8.0)


def test_non_adjacent_rejected():
    rng = RngStream(2)
    x = rng.uniform((4, 16), 0, 1)
    y = np.array([0, 1, 2, 3])
    x2 = x.copy()
    x2[:2] = 1 - x2[:2]
    with pytest.raises(InvalidParameterError):
        audit_step_divergence((x, y), (x2, y), small_params(1), PrivacyParams(), 8.0, rng=rng)


def test_random_adjacent_batches_within_bound():
    rng = RngStream(3)
    for trial in range(50):
        params = small_params(100 + trial)
        x = rng.uniform((6, 16), 0, 1)
        y = np.array([rng.integers(10) for _ in range(6)])
        x2, y2 = x.copy(), y.copy()
        i = rng.integers(6)
        x2[i] = rng.uniform(16, 0, 1)
        y2[i] = rng.integers(10)
        d, bound = audit_step_divergence((x, y), (x2, y2), params, PrivacyParams(), 8.0, rng=rng,
                                         lr=1e-3 if trial % 2 else 0.0)
        assert 0.0 <= d <= bound
