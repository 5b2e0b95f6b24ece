import math

import numpy as np
import pytest
import torch

from wms3m.errors import ModeError
from wms3m.latent import LatentGaussian, LatentHeads, clamp_logvar, gaussian_nll, kl_diag, sample


def heads(**kw):
    base = dict(d_model=8, n_features=3, d_latent=4, out_dim=1)
    base.update(kw)
    return LatentHeads(**base).double()


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def test_prior_zero_weights_unit_gaussian():
    h = heads()
    zero_(h.prior_net)
    g = h.prior(torch.randn(2, 8, dtype=torch.float64))
    assert torch.equal(g.mu, torch.zeros(2, 4, dtype=torch.float64))
    assert torch.equal(g.var, torch.ones(2, 4, dtype=torch.float64))


def test_prior_shape_and_determinism():
    h = heads()
    s = torch.randn(3, 8, dtype=torch.float64)
    g1, g2 = h.prior(s), h.prior(s)
    assert g1.mu.shape == (3, 4) and g1.logvar.shape == (3, 4)
    assert torch.equal(g1.mu, g2.mu)


def test_posterior_guard_and_nondegeneracy():
    h = heads()
    s = torch.randn(1, 8, dtype=torch.float64)
    h.train()
    q1 = h.posterior(s, torch.zeros(1, 3, dtype=torch.float64))
    q2 = h.posterior(s, torch.ones(1, 3, dtype=torch.float64))
    assert not torch.equal(q1.mu, q2.mu)
    zero_(h.posterior_net)
    q = h.posterior(s, torch.ones(1, 3, dtype=torch.float64))
    assert torch.equal(q.mu, torch.zeros_like(q.mu)) and torch.equal(q.logvar, torch.zeros_like(q.logvar))
    h.eval()
    with pytest.raises(ModeError):
        h.posterior(s, torch.zeros(1, 3, dtype=torch.float64))


def test_sample_cases():
    mu = torch.tensor([0.5, -1.0], dtype=torch.float64)
    g = LatentGaussian(mu, torch.full((2,), -8.0, dtype=torch.float64))
    noise = torch.tensor([3.0, -2.0], dtype=torch.float64)
    assert torch.all((sample(g, noise) - mu).abs() <= math.exp(-4) * noise.abs() + 1e-15)
    assert torch.equal(sample(g, torch.zeros(2, dtype=torch.float64)), mu)


def test_sample_mean_monte_carlo():
    g = LatentGaussian(torch.tensor([1.0, -2.0], dtype=torch.float64),
                       torch.log(torch.tensor([0.25, 4.0], dtype=torch.float64)))
    n = 100_000
    eps = torch.from_numpy(np.random.default_rng(0).standard_normal((n, 2)))
    m = sample(g, eps).mean(0)
    assert torch.all((m - g.mu).abs() < 3 * g.var.sqrt() / math.sqrt(n))


def test_sample_gradient_finite_differences():
    noise = torch.tensor([0.3, -1.2], dtype=torch.float64)
    f = lambda mu, lv: sample(LatentGaussian(mu, lv), noise)  # noqa: E731
    mu = torch.tensor([0.1, 0.2], dtype=torch.float64, requires_grad=True)
    lv = torch.tensor([-0.5, 0.7], dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(f, (mu, lv))


def test_kl_closed_form_cases():
    p = LatentGaussian(torch.randn(5, dtype=torch.float64), torch.randn(5, dtype=torch.float64))
    assert float(kl_diag(p, p)) == 0.0
    q = LatentGaussian(torch.ones(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64))
    p0 = LatentGaussian(torch.zeros(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64))
    assert float(kl_diag(q, p0)) == 0.5


def test_kl_nonnegative_random_pairs():
    g = torch.Generator().manual_seed(0)
    r = lambda: torch.randn(10_000, 3, generator=g, dtype=torch.float64)  # noqa: E731
    q, p = LatentGaussian(r(), r()), LatentGaussian(r(), r())
    assert torch.all(kl_diag(q, p) >= 0)


def test_clamp_idempotent_and_bounds():
    x = torch.tensor([-20.0, -8.0, 0.0, 8.0, 10.0])
    c = clamp_logvar(x)
    assert c.tolist() == [-8.0, -8.0, 0.0, 8.0, 8.0]
    assert torch.equal(clamp_logvar(c), c)


def test_decode_full_zero_and_shape():
    h = heads()
    s, z = torch.randn(2, 8, dtype=torch.float64), torch.randn(2, 4, dtype=torch.float64)
    assert h.decode_full(s, z).shape == (2, 3)
    assert not torch.equal(h.decode_full(s, z), h.decode_full(s, z + 1))
    zero_(h.dec_full)
    assert torch.equal(h.decode_full(s, z), torch.zeros(2, 3, dtype=torch.float64))


def test_decode_target_skip_and_clamp():
    h = heads()
    s, z, last = (torch.randn(2, 8, dtype=torch.float64), torch.randn(2, 4, dtype=torch.float64),
                  torch.randn(2, 3, dtype=torch.float64))
    with torch.no_grad():
        h.kappa.zero_()
    p = h.decode_target(s, z, last)
    assert torch.equal(p.mean, p.head_mean)
    with torch.no_grad():
        h.dec_target[2].bias[1] = 1000.0  # raw logvar far above the clamp
    assert torch.all(h.decode_target(s, z, last).logvar == 8.0)
    with torch.no_grad():
        h.kappa.fill_(1e6)
    gain = h.decode_target(s, z, last).gain
    assert 0 < float(gain.detach()) <= 1.0
    for k in np.linspace(-50, 50, 101):
        with torch.no_grad():
            h.kappa.fill_(float(k))
        assert abs(float(h.decode_target(s, z, last).gain.detach())) <= 1.0


def test_decode_target_homoscedastic_and_multi():
    h = heads(out_dim=3, heteroscedastic=False)
    p = h.decode_target(torch.randn(2, 8, dtype=torch.float64), torch.randn(2, 4, dtype=torch.float64),
                        torch.randn(2, 3, dtype=torch.float64))
    assert p.logvar is None and p.mean.shape == (2, 3)


def test_gaussian_nll_closed_form():
    y = torch.zeros(1, 1, dtype=torch.float64)
    assert float(gaussian_nll(y, y, torch.zeros(1, 1, dtype=torch.float64))) == pytest.approx(
        0.5 * math.log(2 * math.pi), abs=1e-15)
    assert 0.5 * math.log(2 * math.pi) == pytest.approx(0.91894, abs=1e-5)
