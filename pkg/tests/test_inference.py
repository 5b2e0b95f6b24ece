import math

import numpy as np
import pytest
import torch

from wms3m.inference import (
    evaluate, predict, predict_standardized, regression_metrics, sample_noise, skill_scores,
)
from wms3m.model import WorldModel

from conftest import tiny_config


def frozen(seed=0, **kw):
    m = WorldModel(tiny_config(dtype="float64", init_seed=seed, **kw))
    m.freeze()
    return m


def set_const_decoder(m, c):
    with torch.no_grad():
        for p in m.heads.dec_target.parameters():
            p.zero_()
        m.heads.dec_target[-1].bias[0] = c
        m.heads.kappa.zero_()


def set_prior_logvar(m, v):
    with torch.no_grad():
        last = m.heads.prior_net[-1]
        d = m.cfg.d_latent
        last.weight[d:] = 0.0
        last.bias[d:] = v


def window(small_data, i=0):
    trace, plan, scaler, tr, _ = small_data
    return scaler.inverse_transform(tr.inputs[i]), scaler


def test_s1_has_zero_epistemic(small_data):
    w, scaler = window(small_data)
    m = frozen()
    p = predict(w, m, scaler, S=1, seed=3)
    assert np.all(p.epistemic == 0)
    noise = sample_noise(3, 0, 1, m.cfg.d_latent)[None]
    single = predict_standardized(m, scaler.transform(w)[None], noise)["samples"][0, 0]
    assert np.array_equal(p.std_mean, single)


def test_constant_decoder(small_data):
    w, scaler = window(small_data)
    m = frozen()
    set_const_decoder(m, 0.7)
    for S in (1, 2, 8, 33):
        p = predict(w, m, scaler, S=S, seed=S)
        assert np.all(p.epistemic == 0)
        assert p.mean == pytest.approx(scaler.inverse_target(np.array([0.7])), abs=1e-12)


def test_near_deterministic_latent(small_data):
    w, scaler = window(small_data)
    for seed in range(5):
        m = frozen(seed)
        set_prior_logvar(m, -8.0)
        p = predict(w, m, scaler, S=16, seed=seed)
        assert np.all(p.epistemic < 1e-3 * p.aleatoric)


def test_variance_is_sum_of_components(small_data):
    w, scaler = window(small_data)
    p = predict(w, frozen(), scaler, S=8)
    assert np.allclose(p.variance, (p.aleatoric + p.epistemic) * scaler.target_std ** 2, rtol=1e-14)
    lo, hi = p.interval(2.0)
    assert np.allclose(hi - p.mean, 2.0 * np.sqrt(p.variance))
    d = p.to_dict()
    assert {"mean", "aleatoric", "epistemic", "interval", "variance"} <= set(d)


def test_destandardization_is_exact(small_data):
    w, scaler = window(small_data)
    m = frozen()
    p = predict(w, m, scaler, S=8, seed=1, window_id=4)
    out = predict_standardized(m, scaler.transform(w)[None], sample_noise(1, 4, 8, m.cfg.d_latent)[None])
    assert np.array_equal(p.mean, scaler.inverse_target(out["mean"][0]))


def test_bad_sample_count(small_data):
    w, scaler = window(small_data)
    with pytest.raises(ValueError):
        predict(w, frozen(), scaler, S=0)


def test_mc_convergence(small_data):
    w, scaler = window(small_data)
    for seed in range(3):
        m = frozen(seed)
        p64 = predict(w, m, scaler, S=64, seed=seed)
        p1k = predict(w, m, scaler, S=1024, seed=seed)
        bound = 3 * np.sqrt(p1k.epistemic) / math.sqrt(64)
        assert np.all(np.abs(p64.std_mean - p1k.std_mean) < bound)


def test_variance_matches_brute_force(small_data):
    w, scaler = window(small_data)
    m = frozen(2)
    p = predict(w, m, scaler, S=4096, seed=0)
    n = 100_000
    out = predict_standardized(m, scaler.transform(w)[None], sample_noise(9, 0, n, m.cfg.d_latent)[None])
    # draw y ~ N(mean(z), sigma^2(z)) per latent sample
    x = m.tensor(scaler.transform(w)[None])
    s = m.encode(x, x[..., 3:4])
    prior = m.heads.prior(s)
    z = prior.mu + torch.exp(0.5 * prior.logvar) * m.tensor(sample_noise(9, 0, n, m.cfg.d_latent))
    pred = m.heads.decode_target(s.expand(n, -1), z, x[:, -1].expand(n, -1))
    y = pred.mean + torch.exp(0.5 * pred.logvar) * torch.randn(n, 1, dtype=torch.float64,
                                                                 generator=torch.Generator().manual_seed(0))
    brute = float(y.var()) * scaler.target_std[0] ** 2
    assert p.variance[0] == pytest.approx(brute, rel=0.05)
    assert out["samples"].shape == (1, n, 1)


def test_philox_streams():
    a = sample_noise(1, 5, 8, 3)
    assert np.array_equal(a, sample_noise(1, 5, 8, 3))
    assert not np.array_equal(a, sample_noise(1, 6, 8, 3))
    assert not np.array_equal(a, sample_noise(2, 5, 8, 3))
    assert np.array_equal(sample_noise(1, 5, 16, 3)[:8], a)


def test_evaluate_order_independent(small_data):
    trace, plan, scaler, tr, _ = small_data
    m = frozen()
    wins = np.stack([scaler.inverse_transform(tr.inputs[i]) for i in range(6)])
    truth = scaler.inverse_target(tr.targets[:6])
    ev = evaluate(wins, truth, m, scaler, S=4, seed=1)
    perm = np.array([5, 3, 1, 0, 2, 4])
    ev2 = evaluate(wins[perm], truth[perm], m, scaler, S=4, seed=1, window_ids=perm)
    for j, i in enumerate(perm):
        assert np.array_equal(ev.predictions[i].mean, ev2.predictions[j].mean)
    r = ev.report
    assert r.n_samples == 6 and r.rmse == pytest.approx(math.sqrt(r.mse)) and r.r2 <= 1
    assert r.latency_mean_s > 0


def test_evaluate_persistence_baseline(small_data):
    trace, plan, scaler, tr, _ = small_data
    wins = np.stack([scaler.inverse_transform(tr.inputs[i]) for i in range(6)])
    truth = wins[:, -1, list(scaler.target_columns)]
    ev = evaluate(wins, truth + 1.0, frozen(), scaler, S=2)
    assert ev.report.persistence_mae == pytest.approx(1.0)
    assert ev.report.persistence_rmse == pytest.approx(1.0)


def test_evaluate_empty(small_data):
    _, _, scaler, _, _ = small_data
    with pytest.raises(ValueError):
        evaluate(np.zeros((0, 8, 4)), np.zeros((0, 1)), frozen(), scaler)


def test_metric_examples():
    y = np.array([[1.0], [2.0], [4.0]])
    m = regression_metrics(y, y)
    assert m == {"rmse": 0.0, "mae": 0.0, "mse": 0.0, "r2": 1.0}
    m = regression_metrics(np.array([[1.0], [-1.0]]), np.zeros((2, 1)))
    assert (m["rmse"], m["mae"], m["mse"]) == (1.0, 1.0, 1.0)
    m = regression_metrics(np.full_like(y, y.mean()), y)
    assert m["r2"] == pytest.approx(0.0, abs=1e-15)


def test_skill_examples():
    e = np.array([1.0, -2.0, 0.5])
    assert skill_scores(e, e) == (0.0, 0.0)
    assert skill_scores(np.zeros(3), e) == (1.0, 1.0)
    assert skill_scores(e, np.zeros(3)) == (None, None)
    r = 1 - 0.2917 / 3.577
    assert r == pytest.approx(0.9184, abs=1e-4)
