import numpy as np
import pytest
import torch

from ganssl.datasets import DatasetError, dataset_spec
from ganssl.networks import (
    LayerSpec, architecture_hash, balanced_labels, build_classifier, build_generator,
    build_pair_discriminator, count_parameters, describe, gaussian_noise_layer, one_hot, weight_norm_linear,
)

MNIST, SVHN, CIFAR = dataset_spec("mnist"), dataset_spec("svhn"), dataset_spec("cifar10")


def dense(n, act, norm):
    return LayerSpec("dense", n, activation=act, normalization=norm)


def conv(n, stride=1):
    return LayerSpec("conv", n, 3, stride, "leaky-relu", "weight-norm")


def test_mnist_generator_rows():
    rows = describe(build_generator(MNIST, conditional=False))
    assert rows == [dense(500, "softplus", "batch-norm")] * 3 + [
        dense(784, "sigmoid", "weight-norm"), LayerSpec("reshape", (1, 28, 28))]


def test_mnist_generator_parameter_count():
    # 3 dense+BN rows (no bias, gamma/beta) then a weight-norm output (v, g, bias)
    hand = (100 * 500 + 2 * 500) + 2 * (500 * 500 + 2 * 500) + (500 * 784 + 784 + 784)
    assert count_parameters(build_generator(MNIST, conditional=False)) == hand


def test_conv_generator_rows():
    rows = describe(build_generator(SVHN, conditional=True))
    assert [(r.kind, r.size) for r in rows] == [
        ("dense", 8192), ("reshape", (512, 4, 4)), ("deconv", 256), ("deconv", 128), ("deconv", 3)]
    assert all(r.stride == 2 and r.kernel == 5 for r in rows if r.kind == "deconv")
    assert rows[-1].activation == "sigmoid"


def test_generator_output_shape_and_range():
    g = build_generator(MNIST, conditional=False).eval()
    with torch.no_grad():
        x = g(g.sample_latent(4))
    assert tuple(x.shape) == (4, 1, 28, 28)
    assert float(x.min()) > 0 and float(x.max()) < 1
    g = build_generator(CIFAR, conditional=True).eval()
    assert tuple(g(g.sample_latent(2), torch.tensor([0, 9])).shape) == (2, 3, 32, 32)


def test_conditional_input_width():
    assert build_generator(MNIST, conditional=True).input_dim == 110
    assert build_generator(MNIST, conditional=False).input_dim == 100
    with pytest.raises(ValueError):
        build_generator(MNIST, conditional=True)(torch.rand(1, 100))


def test_latent_prior_is_unit_uniform():
    z = build_generator(MNIST, conditional=False).sample_latent(20000).detach()
    assert float(z.min()) >= 0 and float(z.max()) < 1
    assert abs(float(z.mean()) - 0.5) < 0.01


def test_mnist_classifier_rows():
    rows = describe(build_classifier(MNIST))
    dense_rows = [r for r in rows if r.kind == "dense"]
    assert [r.size for r in dense_rows] == [1000, 500, 250, 250, 250, 10]
    assert all(r.activation == "leaky-relu" and r.normalization == "weight-norm" for r in dense_rows[:-1])
    assert dense_rows[-1].activation == "softmax"
    assert rows[0] == LayerSpec("noise", rate=0.3)
    assert [r.rate for r in rows if r.kind == "noise"][1:] == [0.5] * 5


@pytest.mark.parametrize("spec,filters", [
    (SVHN, [64, 64, 64, 128, 128, 128, 128, 128, 128]),
    (CIFAR, [96, 96, 96, 192, 192, 128, 192, 192, 192]),
])
def test_conv_classifier_rows(spec, filters):
    rows = describe(build_classifier(spec))
    convs = [r for r in rows if r.kind == "conv"]
    assert [r.size for r in convs] == filters
    assert [r.stride for r in convs] == [1, 1, 2, 1, 1, 2, 1, 1, 1]
    assert [r.kind for r in rows][-2:] == ["global-pool", "dense"]


@pytest.mark.parametrize("spec,dim", [(MNIST, 250), (SVHN, 128), (CIFAR, 192)])
def test_feature_and_logit_dims(spec, dim):
    c = build_classifier(spec).eval()
    h, w, ch = spec.image_shape
    out = c(torch.zeros(2, ch, h, w))
    assert c.feature_dim == dim
    assert tuple(out.features.shape) == (2, dim)
    assert tuple(out.logits.shape) == (2, 10)


def test_eval_passes_are_bit_identical():
    c = build_classifier(MNIST).eval()
    x = torch.rand(3, 1, 28, 28)
    assert torch.equal(c(x).logits, c(x).logits)
    c.train()
    assert not torch.equal(c(x).logits, c(x).logits)


def test_discriminator_outputs_and_conditioning():
    d = build_pair_discriminator(MNIST).eval()
    x = torch.rand(5, 1, 28, 28)
    p = d.probability(x, torch.zeros(5, dtype=torch.long))
    assert p.shape == (5,) and bool(((p > 0) & (p < 1)).all())
    assert not torch.equal(d(x, torch.zeros(5, dtype=torch.long)), d(x, torch.full((5,), 3)))
    assert describe(d)[-1] == dense(1, "sigmoid", "weight-norm")


def test_conv_discriminator_label_planes():
    d = build_pair_discriminator(SVHN).eval()
    assert d.input_shape == (13, 32, 32)
    assert d(torch.rand(2, 3, 32, 32), torch.tensor([1, 2])).shape == (2,)


def test_unknown_dataset():
    with pytest.raises(DatasetError):
        build_classifier(dataset_spec("imagenet"))


def test_weight_norm_examples():
    x = torch.tensor([[1.0, 0.0]])
    out = weight_norm_linear(x, torch.tensor([[3.0, 4.0]]), torch.tensor([2.0]))
    assert abs(float(out) - 1.2) < 1e-6
    v = torch.randn(4, 6, dtype=torch.float64)
    x = torch.randn(3, 6, dtype=torch.float64)
    g = v.norm(dim=1)
    torch.testing.assert_close(weight_norm_linear(x, v, g), x @ v.T)
    torch.testing.assert_close(weight_norm_linear(x, 10 * v, g), weight_norm_linear(x, v, g))
    assert torch.isfinite(weight_norm_linear(x, torch.zeros(2, 6, dtype=torch.float64), torch.ones(2))).all()


def test_noise_layer():
    x = torch.zeros(100000)
    assert torch.equal(gaussian_noise_layer(x, 0.0, True), x)
    assert torch.equal(gaussian_noise_layer(x, 0.7, False), x)
    assert abs(float(gaussian_noise_layer(x, 0.5, True).var()) / 0.25 - 1) < 0.02


def test_one_hot_and_balanced_labels():
    h = one_hot(torch.tensor([0, 3, 9]), 10)
    assert torch.equal(h.sum(1), torch.ones(3))
    labels = balanced_labels(10000, 10, torch.Generator().manual_seed(0))
    assert torch.bincount(labels).tolist() == [1000] * 10
    counts = torch.bincount(balanced_labels(25, 10), minlength=10)
    assert counts.max() - counts.min() <= 1


def test_architecture_hash_tracks_structure():
    a = {"classifier": build_classifier(MNIST)}
    b = {"classifier": build_classifier(MNIST)}
    assert architecture_hash(a) == architecture_hash(b)
    assert architecture_hash(a) != architecture_hash({"classifier": build_classifier(MNIST, hidden_noise=0.1)})
    assert architecture_hash(a) != architecture_hash({"classifier": build_classifier(SVHN)})
