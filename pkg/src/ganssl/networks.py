"""Generator, classifier and pair discriminator architectures.

Every network is an ``nn.Sequential`` of small layer modules, each of which can
report its own :class:`LayerSpec`; :func:`describe` turns a built network back
into the row-by-row table it was built from.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datasets import DatasetSpec, ZCAWhitener

WN_EPS = 1e-12
INIT_STD = 0.05
BN_MOMENTUM = 0.01  # torch convention; equals a 0.99 moving-average decay
BN_EPS = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: Optional[object] = None
    kernel: Optional[int] = None
    stride: Optional[int] = None
    activation: str = "none"
    normalization: str = "none"
    rate: Optional[float] = None


# ---------------------------------------------------------------------------
# Functional pieces


def weight_norm_linear(x, v, g, bias=None):
    """g * (v / ||v||) x + bias, with the norm taken per output row of ``v``."""
    norm = v.norm(dim=1, keepdim=True) + WN_EPS
    return F.linear(x, v * (g.unsqueeze(1) / norm), bias)


def gaussian_noise_layer(x, sigma: float, training: bool):
    if not training or sigma == 0:
        return x
    return x + sigma * torch.randn_like(x)


def _activate(x, name: str, slope: float):
    if name == "relu":
        return F.relu(x)
    if name == "leaky-relu":
        return F.leaky_relu(x, slope)
    if name == "softplus":
        return F.softplus(x)
    if name == "sigmoid":
        return torch.sigmoid(x)
    if name in ("none", "softmax"):
        return x
    raise ValueError(f"unknown activation {name!r}")


# ---------------------------------------------------------------------------
# Layers


class Layer(nn.Module):
    def spec(self) -> LayerSpec:
        raise NotImplementedError


class GaussianNoise(Layer):
    def __init__(self, sigma: float):
        super().__init__()
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        self.sigma = float(sigma)

    def forward(self, x):
        return gaussian_noise_layer(x, self.sigma, self.training)

    def spec(self):
        return LayerSpec("noise", rate=self.sigma)


class Dropout(Layer):
    def __init__(self, p: float):
        super().__init__()
        self.p = float(p)

    def forward(self, x):
        return F.dropout(x, self.p, self.training)

    def spec(self):
        return LayerSpec("dropout", rate=self.p)


class GlobalPool(Layer):
    def forward(self, x):
        return x.mean(dim=(2, 3))

    def spec(self):
        return LayerSpec("global-pool")


class Reshape(Layer):
    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x):
        return x.reshape(len(x), *self.shape)

    def spec(self):
        return LayerSpec("reshape", size=self.shape)


class Flatten(Layer):
    def forward(self, x):
        return x.reshape(len(x), -1)

    def spec(self):
        return LayerSpec("reshape", size=("flatten",))


class _Parametric(Layer):
    """Shared weight handling: weight-norm (v, g, bias), batch-norm, or plain."""

    def __init__(self, weight_shape, out_features, activation, normalization, slope,
                 out_axis=0):
        super().__init__()
        self.activation = activation
        self.normalization = normalization
        self.slope = slope
        self.out_axis = out_axis
        # output layers whose squashing is folded into the loss emit raw logits
        self.logit_output = False
        if normalization == "weight-norm":
            self.v = nn.Parameter(torch.randn(*weight_shape) * INIT_STD)
            self.g = nn.Parameter(torch.ones(out_features))
            self.bias = nn.Parameter(torch.zeros(out_features))
        elif normalization == "batch-norm":
            # the batch-norm shift makes a separate bias redundant
            self.weight = nn.Parameter(torch.randn(*weight_shape) * INIT_STD)
            self.bias = None
        elif normalization == "none":
            self.weight = nn.Parameter(torch.randn(*weight_shape) * INIT_STD)
            self.bias = nn.Parameter(torch.zeros(out_features))
        else:
            raise ValueError(f"unknown normalization {normalization!r}")

    def effective_weight(self):
        if self.normalization != "weight-norm":
            return self.weight
        dims = [d for d in range(self.v.dim()) if d != self.out_axis]
        norm = self.v.pow(2).sum(dim=dims, keepdim=True).sqrt() + WN_EPS
        shape = [1] * self.v.dim()
        shape[self.out_axis] = -1
        return self.v * (self.g.reshape(shape) / norm)

    def _finish(self, x):
        if self.normalization == "batch-norm":
            x = self.bn(x)
        if self.logit_output:
            return x
        return _activate(x, self.activation, self.slope)


class DenseLayer(_Parametric):
    def __init__(self, in_features, out_features, activation="none", normalization="none", slope=0.2):
        super().__init__((out_features, in_features), out_features, activation, normalization, slope)
        self.in_features, self.out_features = in_features, out_features
        if normalization == "batch-norm":
            self.bn = nn.BatchNorm1d(out_features, eps=BN_EPS, momentum=BN_MOMENTUM)

    def forward(self, x):
        if self.normalization == "weight-norm":
            x = weight_norm_linear(x, self.v, self.g, self.bias)
        else:
            x = F.linear(x, self.weight, self.bias)
        return self._finish(x)

    def spec(self):
        return LayerSpec("dense", self.out_features, activation=self.activation,
                         normalization=self.normalization)


class ConvLayer(_Parametric):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, activation="none", normalization="none",
                 slope=0.2):
        super().__init__((out_ch, in_ch, kernel, kernel), out_ch, activation, normalization, slope)
        self.out_ch, self.kernel, self.stride = out_ch, kernel, stride
        if normalization == "batch-norm":
            self.bn = nn.BatchNorm2d(out_ch, eps=BN_EPS, momentum=BN_MOMENTUM)

    def forward(self, x):
        x = F.conv2d(x, self.effective_weight(), self.bias, stride=self.stride, padding=self.kernel // 2)
        return self._finish(x)

    def spec(self):
        return LayerSpec("conv", self.out_ch, self.kernel, self.stride, self.activation, self.normalization)


class DeconvLayer(_Parametric):
    """Transposed convolution that multiplies the spatial size by ``stride``."""

    def __init__(self, in_ch, out_ch, kernel=5, stride=2, activation="none", normalization="none",
                 slope=0.2):
        super().__init__((in_ch, out_ch, kernel, kernel), out_ch, activation, normalization, slope,
                         out_axis=1)
        self.out_ch, self.kernel, self.stride = out_ch, kernel, stride
        if normalization == "batch-norm":
            self.bn = nn.BatchNorm2d(out_ch, eps=BN_EPS, momentum=BN_MOMENTUM)

    def forward(self, x):
        x = F.conv_transpose2d(x, self.effective_weight(), self.bias, stride=self.stride,
                               padding=self.kernel // 2, output_padding=self.stride - 1)
        return self._finish(x)

    def spec(self):
        return LayerSpec("deconv", self.out_ch, self.kernel, self.stride, self.activation,
                         self.normalization)


def build_layers(specs: Sequence[LayerSpec], in_shape, slope=0.2):
    """Instantiate ``specs`` on an input of shape ``in_shape`` (features,) or (C, H, W)."""
    layers = []
    shape = tuple(in_shape)
    for s in specs:
        if s.kind == "dense":
            if len(shape) != 1:
                layers.append(Flatten())
                shape = (int(np.prod(shape)),)
            layers.append(DenseLayer(shape[0], s.size, s.activation, s.normalization, slope))
            shape = (s.size,)
        elif s.kind == "conv":
            layers.append(ConvLayer(shape[0], s.size, s.kernel, s.stride or 1, s.activation,
                                    s.normalization, slope))
            stride = s.stride or 1
            shape = (s.size, -(-shape[1] // stride), -(-shape[2] // stride))
        elif s.kind == "deconv":
            layers.append(DeconvLayer(shape[0], s.size, s.kernel, s.stride or 2, s.activation,
                                      s.normalization, slope))
            stride = s.stride or 2
            shape = (s.size, shape[1] * stride, shape[2] * stride)
        elif s.kind == "reshape":
            layers.append(Reshape(s.size))
            shape = tuple(s.size)
        elif s.kind == "global-pool":
            layers.append(GlobalPool())
            shape = (shape[0],)
        elif s.kind == "noise":
            layers.append(GaussianNoise(s.rate))
        elif s.kind == "dropout":
            layers.append(Dropout(s.rate))
        else:
            raise ValueError(f"unknown layer kind {s.kind!r}")
    return nn.Sequential(*layers), shape


# ---------------------------------------------------------------------------
# Architecture tables


def _dense(n, act, norm):
    return LayerSpec("dense", n, activation=act, normalization=norm)


def _conv(n, stride=1):
    return LayerSpec("conv", n, 3, stride, "leaky-relu", "weight-norm")


def _arch_family(dataset: DatasetSpec) -> str:
    if dataset.name == "mnist":
        return "mlp"
    if dataset.name in ("svhn", "cifar10"):
        return "conv"
    if dataset.is_synthetic:
        return "toy"
    raise ValueError(f"no architecture for dataset {dataset.name!r}")


DEFAULT_NOISE = {
    "mlp": (0.3, 0.5),
    "conv": (0.3, 0.0),
    "toy": (0.02, 0.1),
}


def generator_specs(dataset: DatasetSpec, toy_hidden=(128, 128)):
    h, w, c = dataset.image_shape
    family = _arch_family(dataset)
    if family == "mlp":
        return [_dense(500, "softplus", "batch-norm")] * 3 + [
            _dense(h * w * c, "sigmoid", "weight-norm"), LayerSpec("reshape", (c, h, w))]
    if family == "conv":
        return [
            _dense(8192, "relu", "batch-norm"),
            LayerSpec("reshape", (512, 4, 4)),
            LayerSpec("deconv", 256, 5, 2, "relu", "batch-norm"),
            LayerSpec("deconv", 128, 5, 2, "relu", "batch-norm"),
            LayerSpec("deconv", 3, 5, 2, "sigmoid", "weight-norm"),
        ]
    return [_dense(n, "softplus", "batch-norm") for n in toy_hidden] + [
        _dense(h * w * c, "sigmoid", "weight-norm"), LayerSpec("reshape", (c, h, w))]


def classifier_specs(dataset: DatasetSpec, input_noise=None, hidden_noise=None, toy_hidden=(128, 128),
                     head_units=None, head_activation="softmax"):
    """(body, head) layer lists; the body output is the feature tap."""
    family = _arch_family(dataset)
    d_in, d_hid = DEFAULT_NOISE[family]
    s_in = d_in if input_noise is None else input_noise
    s_hid = d_hid if hidden_noise is None else hidden_noise
    units = head_units or dataset.num_classes
    head_dense = _dense(units, head_activation, "weight-norm")
    if family == "mlp":
        body = [LayerSpec("noise", rate=s_in)]
        widths = (1000, 500, 250, 250, 250)
        for i, n in enumerate(widths):
            if i:
                body.append(LayerSpec("noise", rate=s_hid))
            body.append(_dense(n, "leaky-relu", "weight-norm"))
        return body, [LayerSpec("noise", rate=s_hid), head_dense]
    if family == "conv":
        if dataset.name == "svhn":
            blocks = [(64, 64, 64), (128, 128, 128), (128, 128, 128)]
        else:
            blocks = [(96, 96, 96), (192, 192, 128), (192, 192, 192)]
        body = [LayerSpec("noise", rate=s_in), LayerSpec("dropout", rate=0.2)]
        for i, (a, b, c) in enumerate(blocks):
            last = i == len(blocks) - 1
            body += [_conv(a), _conv(b), _conv(c, 1 if last else 2)]
            if not last:
                body.append(LayerSpec("dropout", rate=0.5))
        body.append(LayerSpec("global-pool"))
        return body, [head_dense]
    body = [LayerSpec("noise", rate=s_in)]
    for i, n in enumerate(toy_hidden):
        if i:
            body.append(LayerSpec("noise", rate=s_hid))
        body.append(_dense(n, "leaky-relu", "weight-norm"))
    return body, [LayerSpec("noise", rate=s_hid), head_dense]


def discriminator_specs(dataset: DatasetSpec, input_noise=None, hidden_noise=None, toy_hidden=(128, 128)):
    family = _arch_family(dataset)
    if family == "conv":
        body = [
            LayerSpec("dropout", rate=0.2), _conv(32), _conv(32, 2), LayerSpec("dropout", rate=0.2),
            _conv(64), _conv(64, 2), LayerSpec("dropout", rate=0.2),
            _conv(128), _conv(128), LayerSpec("global-pool"),
        ]
        return body + [_dense(1, "sigmoid", "weight-norm")]
    body, head = classifier_specs(dataset, input_noise, hidden_noise, toy_hidden,
                                  head_units=1, head_activation="sigmoid")
    return body + head


# ---------------------------------------------------------------------------
# Networks


class ClassifierOutput(NamedTuple):
    logits: torch.Tensor
    features: torch.Tensor


def one_hot(labels, num_classes, dtype=None):
    return F.one_hot(labels.long(), num_classes).to(dtype or torch.get_default_dtype())


def balanced_labels(n: int, num_classes: int, generator=None) -> torch.Tensor:
    """``n`` labels covering every class equally; the remainder is drawn without replacement."""
    reps = torch.arange(num_classes).repeat(n // num_classes)
    extra = torch.randperm(num_classes, generator=generator)[: n % num_classes]
    labels = torch.cat([reps, extra])
    return labels[torch.randperm(n, generator=generator)]


class Generator(nn.Module):
    def __init__(self, dataset: DatasetSpec, conditional: bool, z_dim: int = 100, toy_hidden=(128, 128)):
        super().__init__()
        self.dataset = dataset
        self.conditional = conditional
        self.z_dim = z_dim
        self.num_classes = dataset.num_classes
        self.input_dim = z_dim + (dataset.num_classes if conditional else 0)
        self.net, out_shape = build_layers(generator_specs(dataset, toy_hidden), (self.input_dim,))
        h, w, c = dataset.image_shape
        assert out_shape == (c, h, w), out_shape

    def sample_latent(self, n, generator=None):
        """Uniform prior on [0, 1]^z_dim."""
        p = next(self.parameters())
        return torch.rand(n, self.z_dim, generator=generator, dtype=p.dtype)

    def forward(self, z, y=None):
        if self.conditional:
            if y is None:
                raise ValueError("conditional generator needs labels")
            z = torch.cat([z, one_hot(y, self.num_classes, z.dtype)], dim=1)
        return self.net(z)


class Classifier(nn.Module):
    """Image -> (K logits, features). The (K+1)th logit of the GAN view is fixed at 0."""

    def __init__(self, dataset: DatasetSpec, input_noise=None, hidden_noise=None, toy_hidden=(128, 128),
                 slope=0.2, whitener: Optional[ZCAWhitener] = None):
        super().__init__()
        self.dataset = dataset
        body, head = classifier_specs(dataset, input_noise, hidden_noise, toy_hidden)
        h, w, c = dataset.image_shape
        self.body, feat_shape = build_layers(body, (c, h, w), slope)
        self.head, _ = build_layers(head, feat_shape, slope)
        self.feature_dim = feat_shape[0]
        self.register_buffer("zca_mean", None)
        self.register_buffer("zca_matrix", None)
        if whitener is not None:
            self.attach_whitener(whitener)

    def attach_whitener(self, whitener: ZCAWhitener):
        """Whiten inputs inside the classifier so callers always pass raw images."""
        h, w, c = self.dataset.image_shape
        # mean/matrix live in (H, W, C) flattening order
        self.register_buffer("zca_mean", torch.as_tensor(whitener.mean, dtype=torch.float32))
        self.register_buffer("zca_matrix", torch.as_tensor(whitener.matrix, dtype=torch.float32))

    def _whiten(self, x):
        if self.zca_matrix is None:
            return x
        n, c, h, w = x.shape
        flat = x.permute(0, 2, 3, 1).reshape(n, -1)
        flat = (flat - self.zca_mean.to(x.dtype)) @ self.zca_matrix.to(x.dtype).T
        return flat.reshape(n, h, w, c).permute(0, 3, 1, 2)

    def forward(self, x) -> ClassifierOutput:
        features = self.body(self._whiten(x))
        return ClassifierOutput(self.head(features), features)


class PairDiscriminator(nn.Module):
    """(image, label) -> logit of the pair being a real labeled pair.

    MLP variants concatenate the one-hot label to the flattened image; conv
    variants append the one-hot label as constant feature planes.
    """

    def __init__(self, dataset: DatasetSpec, input_noise=None, hidden_noise=None, toy_hidden=(128, 128),
                 slope=0.2):
        super().__init__()
        self.dataset = dataset
        self.num_classes = dataset.num_classes
        h, w, c = dataset.image_shape
        self.planes = _arch_family(dataset) == "conv"
        in_shape = (c + self.num_classes, h, w) if self.planes else (h * w * c + self.num_classes,)
        self.input_shape = in_shape
        self.net, _ = build_layers(discriminator_specs(dataset, input_noise, hidden_noise, toy_hidden),
                                   in_shape, slope)
        self.net[-1].logit_output = True

    def forward(self, x, y):
        code = one_hot(y, self.num_classes, x.dtype)
        if self.planes:
            n, _, h, w = x.shape
            inp = torch.cat([x, code[:, :, None, None].expand(n, self.num_classes, h, w)], dim=1)
        else:
            inp = torch.cat([x.reshape(len(x), -1), code], dim=1)
        return self.net(inp).reshape(-1)

    def probability(self, x, y):
        return torch.sigmoid(self(x, y))


def build_generator(dataset: DatasetSpec, conditional: bool, z_dim: int = 100, **kw) -> Generator:
    return Generator(dataset, conditional, z_dim, **kw)


def build_classifier(dataset: DatasetSpec, **kw) -> Classifier:
    return Classifier(dataset, **kw)


def build_pair_discriminator(dataset: DatasetSpec, **kw) -> PairDiscriminator:
    return PairDiscriminator(dataset, **kw)


# ---------------------------------------------------------------------------
# Structural audit


def describe(module: nn.Module) -> list[LayerSpec]:
    """Layer rows of a built network, read back from the instantiated modules."""
    return [m.spec() for m in module.modules() if isinstance(m, Layer) and not isinstance(m, Flatten)]


def architecture_hash(modules: dict) -> str:
    # layer rows alone miss input widths (e.g. conditional vs plain G), so add tensor shapes
    payload = {name: {"layers": [asdict(s) for s in describe(m)],
                      "shapes": [[k, list(t.shape)] for k, t in m.state_dict().items()]}
               for name, m in sorted(modules.items())}
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=list).encode()).hexdigest()[:16]


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
