import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ganssl.badgan import (
    BadGanConfig, BadGanState, NonFiniteLossError, badgan_train_step, density_penalty, entropy_proxy,
    feature_matching_loss, implicit_fake_probability, supervised_loss, unsupervised_loss,
)
from ganssl.datasets import dataset_spec
from ganssl.density import density_fit
from ganssl.networks import build_classifier, build_generator


def np_softmax(a):
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def oracle_losses(lab, y, unl, gen):
    """Explicit (K+1)-softmax with a zero extra logit, computed naively."""
    pad = lambda a: np.concatenate([a, np.zeros((len(a), 1))], axis=1)
    p_lab = np_softmax(lab)
    sup = -np.mean(np.log(p_lab[np.arange(len(y)), y]))
    pu, pg = np_softmax(pad(unl)), np_softmax(pad(gen))
    unsup = -np.mean(np.log(1 - pu[:, -1])) - np.mean(np.log(pg[:, -1]))
    return sup, unsup


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def test_uniform_values():
    z = torch.zeros(7, 10, dtype=torch.float64)
    assert abs(float(supervised_loss(z, torch.zeros(7, dtype=torch.long))) - math.log(10)) < 1e-9
    assert abs(float(unsupervised_loss(z, z)) - 2.493205) < 1e-6
    assert abs(float(implicit_fake_probability(z)[0]) - 1 / 11) < 1e-12


def test_extreme_logits():
    big = torch.full((2, 10), -200.0, dtype=torch.float64)
    assert torch.allclose(implicit_fake_probability(big), torch.ones(2, dtype=torch.float64))
    assert float(unsupervised_loss(-big, big)) < 1e-12
    logits = torch.tensor([[50.0, 0.0, 0.0]], dtype=torch.float64)
    assert float(supervised_loss(logits, torch.tensor([0]))) < 1e-20


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.integers(2, 12), n=st.integers(1, 16), scale=st.floats(0.1, 8.0))
def test_losses_match_explicit_oracle(seed, k, n, scale):
    rng = np.random.default_rng(seed)
    lab, unl, gen = (rng.standard_normal((n, k)) * scale for _ in range(3))
    y = rng.integers(0, k, n)
    sup, unsup = oracle_losses(lab, y, unl, gen)
    assert abs(float(supervised_loss(t(lab), torch.as_tensor(y))) - sup) < 1e-6
    assert abs(float(unsupervised_loss(t(unl), t(gen))) - unsup) < 1e-6
    p_fake = np_softmax(np.concatenate([lab, np.zeros((n, 1))], axis=1))[:, -1]
    np.testing.assert_allclose(implicit_fake_probability(t(lab)).numpy(), p_fake, atol=1e-7)


def test_unsupervised_gradient_directions():
    torch.manual_seed(0)
    u = torch.randn(8, 10, dtype=torch.float64, requires_grad=True)
    g = torch.randn(8, 10, dtype=torch.float64, requires_grad=True)
    unsupervised_loss(u, g).backward()
    # descent raises unlabeled logits (p_fake down) and lowers generated logits (p_fake up)
    assert bool((u.grad < 0).all())
    assert bool((g.grad > 0).all())


def test_feature_matching_examples():
    a = torch.randn(6, 4)
    assert float(feature_matching_loss(a, a)) == 0.0
    real = torch.tensor([[1.0, 2.0], [1.0, 2.0]])
    assert float(feature_matching_loss(real, torch.zeros(3, 2))) == 5.0
    assert float(feature_matching_loss(real, a[torch.randperm(6)][:, :2])) == pytest.approx(
        float(feature_matching_loss(real, a[:, :2])), rel=1e-6)
    with pytest.raises(ValueError):
        feature_matching_loss(torch.zeros(2, 3), torch.zeros(2, 4))


def test_feature_matching_gradient_formula():
    real = torch.randn(5, 3, dtype=torch.float64)
    gen = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    feature_matching_loss(real, gen).backward()
    expected = (2 / 4) * (gen.detach().mean(0) - real.mean(0))
    torch.testing.assert_close(gen.grad, expected.expand(4, 3))


def test_entropy_proxy_examples():
    assert float(entropy_proxy(torch.eye(4))) == 0.0
    assert float(entropy_proxy(torch.tensor([[1.0, 2.0], [1.0, 2.0]]))) == pytest.approx(1.0)
    rows = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert float(entropy_proxy(rows)) == pytest.approx(1 / 3)
    assert math.isfinite(float(entropy_proxy(torch.zeros(3, 2))))
    with pytest.raises(ValueError):
        entropy_proxy(torch.ones(1, 2))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 8), st.integers(1, 5)), elements=st.floats(-10, 10)))
def test_entropy_proxy_in_unit_interval(f):
    v = float(entropy_proxy(torch.as_tensor(f)))
    assert -1e-12 <= v <= 1 + 1e-9


def _pixel_model(seed=0):
    rng = np.random.default_rng(seed)
    ref = rng.random((30, 1, 2, 1)).astype(np.float32)
    return density_fit(ref, "kde-pixel", bandwidth=0.3, seed=0)


def test_density_penalty_examples():
    model = _pixel_model()
    x = torch.rand(10, 1, 1, 2)
    assert float(density_penalty(x, model, float("inf"))) == 0.0
    logp = model.log_density(x)
    eps = float(logp.sort().values[4])
    gate = logp > eps
    expected = float((logp * gate).mean())
    assert float(density_penalty(x, model, eps)) == pytest.approx(expected, abs=1e-6)
    with pytest.raises(ValueError):
        density_penalty(x, None, 0.0)


def test_density_penalty_single_sample():
    model = _pixel_model()
    x = torch.rand(1, 1, 1, 2)
    logp = float(model.log_density(x))
    assert float(density_penalty(x, model, logp - 1)) == pytest.approx(logp)


def _toy_state(config, seed=0, density=None, eps=float("inf")):
    torch.manual_seed(seed)
    spec = dataset_spec("synthetic-gaussians")
    g = build_generator(spec, conditional=False, z_dim=4, toy_hidden=(16,))
    c = build_classifier(spec, toy_hidden=(16,))
    return BadGanState.create(g, c, config, density, eps), spec


def _toy_batches(seed=0):
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(8, 1, 1, 2, generator=gen)
    y = torch.randint(0, 4, (8,), generator=gen)
    return x, y, torch.rand(8, 1, 1, 2, generator=gen)


def test_train_step_without_extra_terms_is_feature_matching():
    cfg = BadGanConfig(proxy_weight=0.0, density_weight=0.0)
    state, _ = _toy_state(cfg)
    out = badgan_train_step(state, *_toy_batches(), cfg)
    assert out.total_g == pytest.approx(out.generator_fm)
    assert out.total_c == pytest.approx(out.supervised + out.unsupervised)


def test_train_step_deterministic():
    cfg = BadGanConfig()
    runs = []
    for _ in range(2):
        state, _ = _toy_state(cfg, seed=3, density=_pixel_model(), eps=-5.0)
        torch.manual_seed(11)
        for _ in range(2):
            badgan_train_step(state, *_toy_batches(), cfg)
        runs.append([p.detach().clone() for p in state.classifier.parameters()])
    assert all(torch.equal(a, b) for a, b in zip(*runs))


def test_non_finite_loss_aborts():
    cfg = BadGanConfig(density_weight=0.0)
    state, _ = _toy_state(cfg)
    x, y, u = _toy_batches()
    with pytest.raises(NonFiniteLossError):
        badgan_train_step(state, x, y, u * float("nan"), cfg)


def test_batch_mean_variance_scales_inverse_with_batch():
    rng = np.random.default_rng(0)
    pool = rng.standard_normal((100000, 4))
    sizes = np.array([10, 20, 50, 100, 200])
    var = [np.var([pool[rng.integers(0, len(pool), b)].mean(0) for _ in range(2000)], axis=0).mean()
           for b in sizes]
    slope = np.polyfit(np.log(sizes), np.log(var), 1)[0]
    assert abs(slope + 1) < 0.1
