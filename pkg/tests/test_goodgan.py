import math

import numpy as np
import pytest
import torch
from PIL import Image

from ganssl.datasets import dataset_spec
from ganssl.goodgan import (
    GoodGanConfig, GoodGanState, PairBatch, ReinforceEstimator, classifier_reinforce_loss, conditional_grid,
    discriminator_loss, discriminator_step_loss, generate_cells, generator_loss_goodgan, goodgan_train_step,
    interpolation_grid, interpolation_latents, pseudo_pair_loss, sample_pseudo_labels, save_png,
    unconditional_grid,
)
from ganssl.networks import build_classifier, build_generator, build_pair_discriminator

TOY = dataset_spec("synthetic-gaussians")


def logit(p):
    return math.log(p / (1 - p))


def full(v, n=4):
    return torch.full((n,), float(v), dtype=torch.float64)


# -- D and G losses --------------------------------------------------------------


@pytest.mark.parametrize("alpha", [0.0, 0.3, 0.5, 1.0])
@pytest.mark.parametrize("as_real", [False, True])
def test_half_probability_is_two_ln2(alpha, as_real):
    z = full(0.0)
    assert abs(float(discriminator_loss(z, z, z, alpha, as_real)) - 2 * math.log(2)) < 1e-12


def test_discriminator_optimum():
    loss = discriminator_loss(full(60), full(-60), full(-60), 0.5)
    assert float(loss) < 1e-20
    loss = discriminator_loss(full(60), full(-60), full(60), 0.5, pseudo_as_real=True)
    assert float(loss) < 1e-20


def test_discriminator_alpha_range():
    with pytest.raises(ValueError):
        discriminator_loss(full(0), full(0), full(0), 1.5)


@pytest.mark.parametrize("as_real", [False, True])
def test_alpha_zero_pseudo_stream_has_no_gradient(as_real):
    real, gen = full(0.3).requires_grad_(), full(-0.2).requires_grad_()
    pseudo = full(0.7).requires_grad_()
    discriminator_loss(real, gen, pseudo, 0.0, as_real).backward()
    assert torch.equal(pseudo.grad, torch.zeros(4, dtype=torch.float64))
    assert bool((real.grad != 0).all()) and bool((gen.grad != 0).all())


def test_alpha_one_generated_stream_has_no_gradient():
    gen = full(0.1).requires_grad_()
    discriminator_loss(full(0), gen, full(0), 1.0).backward()
    assert torch.equal(gen.grad, torch.zeros(4, dtype=torch.float64))


def test_discriminator_loss_against_naive_bce():
    rng = np.random.default_rng(0)
    r, g, p = (rng.standard_normal(6) for _ in range(3))
    sig = lambda a: 1 / (1 + np.exp(-a))
    naive = -np.mean(np.log(sig(r))) - 0.4 * np.mean(np.log(1 - sig(g))) - 0.6 * np.mean(np.log(1 - sig(p)))
    got = discriminator_loss(*(torch.as_tensor(a) for a in (r, g, p)), 0.6)
    assert abs(float(got) - naive) < 1e-10


def test_generator_loss_examples():
    assert float(generator_loss_goodgan(full(60))) < 1e-20
    assert float(generator_loss_goodgan(full(logit(1 / math.e)))) == pytest.approx(1.0, abs=1e-12)
    s = full(0.2).requires_grad_()
    generator_loss_goodgan(s).backward()
    assert bool((s.grad < 0).all())  # descent raises D's score on generated pairs


# -- pair batches ----------------------------------------------------------------


def test_pair_batch_validation():
    with pytest.raises(ValueError):
        PairBatch(torch.zeros(2, 1), torch.zeros(2), "unlabeled")
    with pytest.raises(ValueError):
        PairBatch(torch.zeros(2, 1), torch.zeros(3), "generator")


def test_stream_tags_must_partition_in_order():
    torch.manual_seed(0)
    state = _state(GoodGanConfig())
    x, y = torch.rand(4, 1, 1, 2), torch.zeros(4, dtype=torch.long)
    with pytest.raises(ValueError, match="tagged"):
        discriminator_step_loss(state, PairBatch(x, y, "generator"), PairBatch(x, y, "real-labeled"),
                                PairBatch(x, y, "classifier-pseudo"), GoodGanConfig())


# -- pseudo labels and REINFORCE -------------------------------------------------


def test_pseudo_labels():
    logits = torch.full((5, 10), -1e4)
    logits[torch.arange(5), torch.tensor([3, 1, 4, 1, 5])] = 0
    labels, logp = sample_pseudo_labels(logits)
    assert labels.tolist() == [3, 1, 4, 1, 5]
    assert torch.allclose(logp, torch.zeros(5))
    uniform = torch.zeros(100000, 10)
    draws, _ = sample_pseudo_labels(uniform, torch.Generator().manual_seed(0))
    freq = torch.bincount(draws, minlength=10).double() / len(draws)
    assert float((freq - 0.1).abs().max()) < 0.005
    again, _ = sample_pseudo_labels(uniform, torch.Generator().manual_seed(0))
    assert torch.equal(draws, again)


def test_baseline_bias_corrected_ema():
    est = ReinforceEstimator(decay=0.9)
    assert est.baseline == 0.0
    est.update(torch.tensor([2.0, 4.0]))
    assert est.baseline == pytest.approx(3.0)
    est.update(torch.tensor([1.0]))
    m = 0.9 * 0.1 * 3.0 + 0.1 * 1.0
    assert est.baseline == pytest.approx(m / (1 - 0.81))
    est2 = ReinforceEstimator()
    est2.load_state_dict(est.state_dict())
    assert est2.baseline == est.baseline


def test_baseline_only_sees_earlier_rewards():
    est = ReinforceEstimator()
    logp = torch.zeros(3, requires_grad=True)
    loss = classifier_reinforce_loss(logp, torch.tensor([1.0, 2.0, 3.0]), est)
    loss.backward()
    torch.testing.assert_close(logp.grad, torch.tensor([1.0, 2.0, 3.0]) / 3)


def test_reward_equal_to_baseline_and_zero_reward():
    est = ReinforceEstimator()
    est.update(torch.tensor([-0.5]))
    logp = torch.randn(4, requires_grad=True)
    classifier_reinforce_loss(logp, torch.full((4,), -0.5), est, update=False).backward()
    assert torch.allclose(logp.grad, torch.zeros(4))
    zero = ReinforceEstimator(use_baseline=False)
    assert float(classifier_reinforce_loss(torch.randn(4), torch.zeros(4), zero)) == 0.0


def test_reinforce_matches_enumeration():
    theta = torch.tensor([0.4, -0.2, 0.1], dtype=torch.float64, requires_grad=True)
    reward = torch.tensor([-0.3, -1.2, -0.7], dtype=torch.float64)
    p = torch.softmax(theta, 0)
    (p * reward).sum().backward()
    exact = theta.grad.clone()
    theta.grad = None
    est = ReinforceEstimator()
    est.update(torch.tensor([-0.8]))
    n = 100000
    gen = torch.Generator().manual_seed(0)
    y, logp = sample_pseudo_labels(theta.expand(n, 3), gen)
    est.surrogate(logp, reward[y], update=False).backward()
    assert float((theta.grad - exact).norm() / exact.norm()) < 0.02


# -- warmup gate -----------------------------------------------------------------


def _state(config, seed=0):
    torch.manual_seed(seed)
    g = build_generator(TOY, conditional=True, z_dim=4, toy_hidden=(16,))
    c = build_classifier(TOY, toy_hidden=(16,))
    d = build_pair_discriminator(TOY, toy_hidden=(16,))
    return GoodGanState.create(g, c, d, config)


def test_pseudo_pair_gate():
    state = _state(GoodGanConfig())
    before = pseudo_pair_loss(state.classifier, state.generator, 199, 200, 16)
    assert float(before) == 0.0 and not before.requires_grad
    after = pseudo_pair_loss(state.classifier, state.generator, 200, 200, 16)
    assert after.item() > 0
    after.backward()
    assert all(p.grad is None for p in state.generator.parameters())


def _batches(seed=0):
    gen = torch.Generator().manual_seed(seed)
    return (torch.rand(8, 1, 1, 2, generator=gen), torch.randint(0, 4, (8,), generator=gen),
            torch.rand(8, 1, 1, 2, generator=gen))


def test_train_step_breakdown_and_warmup():
    cfg = GoodGanConfig(warmup_threshold=3)
    state = _state(cfg)
    out = goodgan_train_step(state, *_batches(), cfg, epoch=2)
    assert out.c_pseudo_pair == 0.0
    assert out.total_c == pytest.approx(out.c_supervised + cfg.reinforce_weight * out.c_adversarial_reinforce)
    out = goodgan_train_step(state, *_batches(), cfg, epoch=3)
    assert out.c_pseudo_pair > 0
    assert out.total_c == pytest.approx(out.c_supervised + cfg.reinforce_weight * out.c_adversarial_reinforce
                                        + cfg.pseudo_weight * out.c_pseudo_pair, rel=1e-5)


def test_train_step_deterministic():
    cfg = GoodGanConfig()
    params = []
    for _ in range(2):
        state = _state(cfg, seed=5)
        torch.manual_seed(9)
        for _ in range(3):
            goodgan_train_step(state, *_batches(), cfg, epoch=0)
        params.append([p.detach().clone() for m in state.modules().values() for p in m.parameters()])
    assert all(torch.equal(a, b) for a, b in zip(*params))


# -- grids -----------------------------------------------------------------------


def _mnist_generator():
    torch.manual_seed(0)
    return build_generator(dataset_spec("mnist"), conditional=True)


def test_conditional_grid_shape_and_determinism():
    g = _mnist_generator()
    lat = torch.rand(4, 100)
    grid = conditional_grid(g, list(range(10)), lat)
    assert grid.shape == (10 * 28, 4 * 28, 1)
    np.testing.assert_array_equal(grid, conditional_grid(g, list(range(10)), lat))
    assert not np.array_equal(grid[:28, :28], grid[28:56, :28])


def test_interpolation_endpoints_match_conditional_grid():
    g = _mnist_generator()
    z1, z2 = torch.rand(2, 100)
    classes = [0, 3, 7]
    interp = interpolation_grid(g, z1, z2, 5, classes)
    assert interp.shape == (5 * 28, 3 * 28, 1)
    cond = conditional_grid(g, classes, torch.stack([z1, z2]))
    for col in range(3):
        np.testing.assert_array_equal(interp[:28, col * 28:(col + 1) * 28], cond[col * 28:(col + 1) * 28, :28])
        np.testing.assert_array_equal(interp[-28:, col * 28:(col + 1) * 28], cond[col * 28:(col + 1) * 28, 28:])


def test_interpolation_latents():
    z1, z2 = torch.zeros(3), torch.tensor([1.0, 2.0, 4.0])
    lat = interpolation_latents(z1, z2, 3)
    torch.testing.assert_close(lat[1], (z1 + z2) / 2)
    with pytest.raises(ValueError):
        interpolation_latents(z1, z2, 1)


def test_cells_do_not_depend_on_batch_mates():
    g = _mnist_generator()
    lat = torch.rand(3, 100)
    a = generate_cells(g, lat, [2])
    b = generate_cells(g, lat[:1], [2])
    assert torch.equal(a[0, 0], b[0, 0])


def test_save_png(tmp_path):
    grid = np.linspace(0, 1, 2 * 3 * 1).reshape(2, 3, 1)
    save_png(tmp_path / "g.png", grid)
    img = Image.open(tmp_path / "g.png")
    assert img.mode == "L" and img.size == (3, 2)
    assert np.asarray(img)[1, 2] == 255
    rgb = np.zeros((4, 4, 3))
    save_png(tmp_path / "c.png", rgb)
    assert Image.open(tmp_path / "c.png").mode == "RGB"


def test_unconditional_grid():
    torch.manual_seed(0)
    g = build_generator(dataset_spec("mnist"), conditional=False)
    assert unconditional_grid(g, torch.rand(6, 100), 3).shape == (56, 84, 1)
