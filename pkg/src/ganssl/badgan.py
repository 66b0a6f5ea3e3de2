"""Bad GAN: (K+1)-class classifier losses and the complement-generator objective.

The classifier emits K logits; the fake class has an implicit logit of 0, so
with ``lse = logsumexp(logits)``::

    p_fake          = 1 / (1 + exp(lse))
    -log(1 - p_fake) = softplus(-lse)
    -log p_fake      = softplus(lse)
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F

from .density import DensityModel
from .networks import Classifier, Generator

PROXY_EPS = 1e-12


class NonFiniteLossError(RuntimeError):
    def __init__(self, message, losses=None):
        super().__init__(message)
        self.losses = losses or {}


# ---------------------------------------------------------------------------
# Losses


def supervised_loss(logits, labels):
    """Cross-entropy over the K real classes."""
    return F.cross_entropy(logits, labels)


def implicit_fake_log_probability(logits):
    return -F.softplus(torch.logsumexp(logits, dim=1))


def implicit_fake_probability(logits):
    return torch.exp(implicit_fake_log_probability(logits))


def unsupervised_loss(unlabeled_logits, generated_logits):
    lse_u = torch.logsumexp(unlabeled_logits, dim=1)
    lse_g = torch.logsumexp(generated_logits, dim=1)
    return F.softplus(-lse_u).mean() + F.softplus(lse_g).mean()


def feature_matching_loss(real_features, generated_features):
    if real_features.shape[1:] != generated_features.shape[1:]:
        raise ValueError(f"feature shapes differ: {tuple(real_features.shape)} vs {tuple(generated_features.shape)}")
    diff = real_features.mean(dim=0) - generated_features.mean(dim=0)
    return diff.pow(2).sum()


def entropy_proxy(generated_features):
    """Pull-away term: mean squared cosine similarity over distinct pairs."""
    b = len(generated_features)
    if b < 2:
        raise ValueError("entropy proxy needs at least two samples")
    f = generated_features.reshape(b, -1)
    unit = f / (f.norm(dim=1, keepdim=True) + PROXY_EPS)
    cos2 = (unit @ unit.T).pow(2)
    off_diag = cos2.sum() - cos2.diagonal().sum()
    return off_diag / (b * (b - 1))


def density_penalty(generated_images, model: Optional[DensityModel], epsilon_log: float):
    """Mean of log p(x) * 1[log p(x) > epsilon]; the gate carries no gradient."""
    if model is None:
        raise ValueError("density model has not been fit")
    logp = model.log_density(generated_images)
    gate = (logp.detach() > epsilon_log).to(logp.dtype)
    return (logp * gate).mean()


# ---------------------------------------------------------------------------
# Training


@dataclass
class BadGanConfig:
    fm_weight: float = 1.0
    proxy_weight: float = 0.1
    density_weight: float = 0.01
    lr: float = 3e-4
    beta1: float = 0.5
    beta2: float = 0.999


@dataclass
class BadGanLossBreakdown:
    supervised: float
    unsupervised: float
    generator_fm: float
    generator_entropy_proxy: float
    generator_density_penalty: float
    total_c: float
    total_g: float

    def as_dict(self):
        return asdict(self)


@dataclass
class BadGanState:
    generator: Generator
    classifier: Classifier
    opt_g: torch.optim.Optimizer
    opt_c: torch.optim.Optimizer
    density: Optional[DensityModel] = None
    epsilon_log: float = float("inf")
    step: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(cls, generator, classifier, config: BadGanConfig, density=None, epsilon_log=float("inf")):
        betas = (config.beta1, config.beta2)
        return cls(generator, classifier,
                   torch.optim.Adam(generator.parameters(), lr=config.lr, betas=betas),
                   torch.optim.Adam(classifier.parameters(), lr=config.lr, betas=betas),
                   density, epsilon_log)

    def modules(self):
        return {"generator": self.generator, "classifier": self.classifier}


def _check_finite(values: dict):
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        raise NonFiniteLossError(f"non-finite loss terms: {', '.join(bad)}", values)


def generator_loss(state: BadGanState, unlabeled, config: BadGanConfig, n_gen: int):
    """Weighted generator objective and its three terms (as tensors)."""
    g, c = state.generator, state.classifier
    fake = g(g.sample_latent(n_gen))
    real_features = c(unlabeled).features.detach()
    fake_features = c(fake).features
    fm = feature_matching_loss(real_features, fake_features)
    zero = fm.new_zeros(())
    proxy = entropy_proxy(fake_features) if config.proxy_weight else zero
    dens = density_penalty(fake, state.density, state.epsilon_log) if config.density_weight else zero
    total = config.fm_weight * fm + config.proxy_weight * proxy + config.density_weight * dens
    return total, fm, proxy, dens


def classifier_loss(state: BadGanState, labeled_x, labeled_y, unlabeled, n_gen: int):
    g, c = state.generator, state.classifier
    with torch.no_grad():
        fake = g(g.sample_latent(n_gen))
    sup = supervised_loss(c(labeled_x).logits, labeled_y)
    unsup = unsupervised_loss(c(unlabeled).logits, c(fake).logits)
    return sup + unsup, sup, unsup


def badgan_train_step(state: BadGanState, labeled_x, labeled_y, unlabeled, config: BadGanConfig):
    """One classifier update on (supervised + unsupervised), then one generator update."""
    n_gen = len(unlabeled)
    state.generator.train()
    state.classifier.train()

    total_c, sup, unsup = classifier_loss(state, labeled_x, labeled_y, unlabeled, n_gen)
    _check_finite({"total_c": total_c.item()})
    state.opt_c.zero_grad()
    total_c.backward()
    state.opt_c.step()

    total_g, fm, proxy, dens = generator_loss(state, unlabeled, config, n_gen)
    state.opt_g.zero_grad()
    total_g.backward()
    state.opt_g.step()
    # generator backward also reaches the classifier; those gradients are discarded
    state.opt_c.zero_grad()
    state.step += 1

    out = BadGanLossBreakdown(sup.item(), unsup.item(), fm.item(), proxy.item(), dens.item(),
                              total_c.item(), total_g.item())
    _check_finite(out.as_dict())
    return out
