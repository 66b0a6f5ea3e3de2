import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ganssl.datasets import dataset_spec
from ganssl.density import (
    calibrate_epsilon, density_fit, kde_log_density, load_density, log_density, median_bandwidth,
    pretrain_feature_classifier, save_density,
)
from ganssl.networks import build_classifier


def points(a):
    """(N, D) array -> (N, 1, 1, D) channels-first images."""
    a = np.asarray(a, dtype=np.float64)
    return torch.as_tensor(a).reshape(len(a), 1, 1, -1)


def naive_log_density(q, ref, h):
    d = ref.shape[1]
    out = []
    for x in q:
        s = sum(math.exp(-np.sum((x - r) ** 2) / (2 * h * h)) for r in ref)
        out.append(math.log(s / len(ref)) - 0.5 * d * math.log(2 * math.pi * h * h))
    return np.array(out)


def test_single_reference_peak():
    model = density_fit(points([[0.2, 0.4, 0.6]]), bandwidth=0.5)
    expected = -1.5 * math.log(2 * math.pi * 0.25)
    assert float(log_density(model, points([[0.2, 0.4, 0.6]]))) == pytest.approx(expected, abs=1e-9)


def test_symmetry_about_midpoint():
    model = density_fit(points([[0.0, 0.0], [1.0, 2.0]]), bandwidth=0.7)
    a, b = log_density(model, points([[0.5 + 0.3, 1.0 - 0.1], [0.5 - 0.3, 1.0 + 0.1]]))
    assert float(a) == pytest.approx(float(b), abs=1e-12)


def test_wider_bandwidth_lowers_peak():
    ref = points([[0.0, 1.0]])
    narrow = log_density(density_fit(ref, bandwidth=0.2), ref)
    wide = log_density(density_fit(ref, bandwidth=0.4), ref)
    assert float(wide) < float(narrow)


def test_far_query_is_much_lower():
    ref = points(np.random.default_rng(0).random((20, 2)))
    model = density_fit(ref, bandwidth=0.1)
    far = float(log_density(model, points([[10.0, 10.0]])))
    assert far < float(log_density(model, ref).min()) - 10


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), d=st.integers(1, 4), h=st.floats(0.05, 2.0))
def test_matches_naive_oracle_and_permutation(seed, d, h):
    rng = np.random.default_rng(seed)
    ref, q = rng.random((12, d)), rng.random((5, d))
    model = density_fit(points(ref), bandwidth=h)
    got = log_density(model, points(q)).numpy()
    np.testing.assert_allclose(got, naive_log_density(q, ref, h), atol=1e-8, rtol=0)
    shuffled = density_fit(points(ref[rng.permutation(12)]), bandwidth=h)
    np.testing.assert_allclose(log_density(shuffled, points(q)).numpy(), got, atol=1e-10)


def test_one_dimensional_normalization():
    ref = np.random.default_rng(1).standard_normal((30, 1))
    grid = np.linspace(-12, 12, 20001)[:, None]
    dens = kde_log_density(torch.as_tensor(grid), torch.as_tensor(ref), 0.4).exp().numpy()
    area = np.trapezoid(dens, grid[:, 0]) if hasattr(np, "trapezoid") else np.trapz(dens, grid[:, 0])
    assert 0.99 <= area <= 1.01


def test_continuity_in_query():
    model = density_fit(points(np.random.default_rng(2).random((10, 2))), bandwidth=0.3)
    base = points([[0.4, 0.4]])
    step = points([[1e-7, 0.0]])
    assert abs(float(log_density(model, base + step) - log_density(model, base))) < 1e-5


def test_fit_errors_and_subsample():
    with pytest.raises(ValueError):
        density_fit(torch.zeros(0, 1, 1, 2))
    with pytest.raises(ValueError):
        density_fit(points([[1.0]]), bandwidth=0)
    with pytest.raises(ValueError):
        density_fit(points([[1.0]]), kind="pixelcnn")
    with pytest.raises(ValueError):
        density_fit(points([[1.0]]), kind="kde-feature")
    big = points(np.random.default_rng(0).random((50, 2)))
    a = density_fit(big, max_reference=10, seed=4)
    b = density_fit(big, max_reference=10, seed=4)
    assert len(a.reference) == 10 and torch.equal(a.reference, b.reference)


def test_shape_mismatch():
    model = density_fit(points([[0.0, 1.0]]), bandwidth=1.0)
    with pytest.raises(ValueError):
        log_density(model, points([[0.0, 1.0, 2.0]]))


def test_median_bandwidth():
    assert median_bandwidth(torch.tensor([[0.0], [1.0], [3.0]])) == pytest.approx(2.0)
    assert median_bandwidth(torch.zeros(3, 2)) == 1.0


def test_calibrate_epsilon_rule():
    ref = points([[0.0]])
    model = density_fit(ref, bandwidth=1.0)
    # log-density is monotone decreasing in |x|; pick queries with known order
    xs = points([[3.0], [2.0], [1.0], [0.0]])
    values = np.sort(log_density(model, xs).numpy())
    assert calibrate_epsilon(model, xs, q=50) == pytest.approx(values[1])
    assert calibrate_epsilon(model, xs, q=0) == pytest.approx(values[0])
    with pytest.raises(ValueError):
        calibrate_epsilon(model, xs[:0], q=10)
    with pytest.raises(ValueError):
        calibrate_epsilon(model, xs, q=120)


def test_fraction_above_threshold():
    data = points(np.random.default_rng(3).random((1000, 2)))
    model = density_fit(data, max_reference=200, seed=0)
    eps = calibrate_epsilon(model, data, q=10)
    above = int((log_density(model, data) > eps).sum())
    assert abs(above - 900) <= 1


def test_pixel_model_round_trip(tmp_path):
    model = density_fit(points(np.random.default_rng(0).random((10, 3))).float())
    save_density(tmp_path / "d.ckpt", model)
    again = load_density(tmp_path / "d.ckpt")
    assert again.kind == model.kind and again.bandwidth == model.bandwidth
    assert torch.equal(again.reference, model.reference)


def test_feature_model_round_trip(tmp_path):
    spec = dataset_spec("synthetic-gaussians")
    torch.manual_seed(0)
    c = build_classifier(spec, toy_hidden=(8,))
    x = torch.rand(20, 1, 1, 2)
    frozen = pretrain_feature_classifier(c, x, torch.randint(0, 4, (20,)), steps=5, batch_size=8)
    assert all(not p.requires_grad for p in frozen.parameters())
    model = density_fit(x, "kde-feature", embedder=frozen)
    save_density(tmp_path / "f.ckpt", model)
    with pytest.raises(ValueError):
        load_density(tmp_path / "f.ckpt")
    again = load_density(tmp_path / "f.ckpt", build_classifier(spec, toy_hidden=(8,)))
    torch.testing.assert_close(log_density(again, x), log_density(model, x))
