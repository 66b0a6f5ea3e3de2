"""Good GAN: conditional generator, classifier and pair discriminator.

The discriminator scores (image, label) pairs. Real labeled pairs are positives;
generator pairs ``(G(z, y), y)`` and classifier pairs ``(x_u, y_hat)`` share the
negative mass with weights ``1 - alpha`` and ``alpha``. The classifier receives
the adversarial signal through a REINFORCE estimate because ``y_hat`` is a
discrete sample.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .badgan import NonFiniteLossError
from .networks import Classifier, Generator, PairDiscriminator, balanced_labels

SOURCES = ("real-labeled", "generator", "classifier-pseudo")


@dataclass
class PairBatch:
    images: torch.Tensor
    labels: torch.Tensor
    source: str

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown pair source {self.source!r}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")


# ---------------------------------------------------------------------------
# Losses


def discriminator_loss(real_logits, gen_logits, pseudo_logits, alpha: float, pseudo_as_real: bool = False):
    """Binary cross-entropy over the three pair streams, from D's logits.

    With ``pseudo_as_real`` the classifier pairs move to the positive side and
    share it with the real pairs in proportion ``alpha``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    neg_gen = F.softplus(gen_logits).mean()  # -log(1 - D)
    if pseudo_as_real:
        pos = (1 - alpha) * F.softplus(-real_logits).mean() + alpha * F.softplus(-pseudo_logits).mean()
        return pos + neg_gen
    pos = F.softplus(-real_logits).mean()
    return pos + (1 - alpha) * neg_gen + alpha * F.softplus(pseudo_logits).mean()


def generator_loss_goodgan(gen_logits):
    """Non-saturating -log D(G(z, y), y)."""
    return F.softplus(-gen_logits).mean()


class ReinforceEstimator:
    """Score-function surrogate with a bias-corrected moving-average baseline.

    The baseline after t updates is ``m_t / (1 - decay**t)`` where
    ``m_t = decay * m_{t-1} + (1 - decay) * mean(reward_t)``; it is 0 before the
    first update and only ever sees rewards from earlier calls.
    """

    def __init__(self, decay: float = 0.99, use_baseline: bool = True):
        self.decay = decay
        self.use_baseline = use_baseline
        self._avg = 0.0
        self._count = 0

    @property
    def baseline(self) -> float:
        if not self.use_baseline or self._count == 0:
            return 0.0
        return self._avg / (1.0 - self.decay ** self._count)

    def update(self, rewards) -> None:
        self._avg = self.decay * self._avg + (1 - self.decay) * float(rewards.mean())
        self._count += 1

    def surrogate(self, log_probs, rewards, update: bool = True):
        rewards = rewards.detach()
        loss = ((rewards - self.baseline) * log_probs).mean()
        if update:
            self.update(rewards)
        return loss

    def state_dict(self):
        return {"avg": self._avg, "count": self._count, "decay": self.decay}

    def load_state_dict(self, state):
        self._avg, self._count, self.decay = float(state["avg"]), int(state["count"]), float(state["decay"])


def classifier_reinforce_loss(log_probs, rewards, estimator: ReinforceEstimator, update: bool = True):
    return estimator.surrogate(log_probs, rewards, update)


def sample_pseudo_labels(logits, generator: Optional[torch.Generator] = None):
    """Draw y_hat ~ softmax(logits) per row; returns (labels, log p(y_hat | x))."""
    log_p = F.log_softmax(logits, dim=1)
    labels = torch.multinomial(log_p.detach().exp(), 1, generator=generator).reshape(-1)
    return labels, log_p.gather(1, labels[:, None]).reshape(-1)


def pseudo_pair_loss(classifier, generator, epoch: int, threshold: int, n: int):
    """Cross-entropy of C on generated pairs once ``epoch >= threshold``, else exactly 0."""
    if epoch < threshold:
        return torch.zeros((), dtype=next(classifier.parameters()).dtype)
    y = balanced_labels(n, generator.num_classes)
    with torch.no_grad():
        x = generator(generator.sample_latent(n), y)
    return F.cross_entropy(classifier(x).logits, y)


# ---------------------------------------------------------------------------
# Training


@dataclass
class GoodGanConfig:
    alpha: float = 0.5
    reinforce_weight: float = 0.01
    pseudo_weight: float = 0.1
    warmup_threshold: int = 200
    baseline_decay: float = 0.99
    pseudo_pairs_as_real: bool = False
    lr: float = 3e-4
    beta1: float = 0.5
    beta2: float = 0.999


@dataclass
class GoodGanLossBreakdown:
    d_loss: float
    g_adversarial: float
    c_supervised: float
    c_adversarial_reinforce: float
    c_pseudo_pair: float
    alpha: float
    total_c: float

    def as_dict(self):
        return asdict(self)


@dataclass
class GoodGanState:
    generator: Generator
    classifier: Classifier
    discriminator: PairDiscriminator
    opt_g: torch.optim.Optimizer
    opt_c: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    estimator: ReinforceEstimator
    step: int = 0

    @classmethod
    def create(cls, generator, classifier, discriminator, config: GoodGanConfig):
        betas = (config.beta1, config.beta2)

        def adam(m):
            return torch.optim.Adam(m.parameters(), lr=config.lr, betas=betas)

        return cls(generator, classifier, discriminator, adam(generator), adam(classifier),
                   adam(discriminator), ReinforceEstimator(config.baseline_decay))

    def modules(self):
        return {"generator": self.generator, "classifier": self.classifier,
                "discriminator": self.discriminator}


def _check(values: dict):
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        raise NonFiniteLossError(f"non-finite loss terms: {', '.join(bad)}", values)


def discriminator_step_loss(state: GoodGanState, real: PairBatch, gen: PairBatch, pseudo: PairBatch,
                            config: GoodGanConfig):
    tags = [real.source, gen.source, pseudo.source]
    if tags != list(SOURCES):
        raise ValueError(f"pair streams must be tagged {SOURCES}, got {tags}")
    d = state.discriminator
    return discriminator_loss(d(real.images, real.labels), d(gen.images, gen.labels),
                              d(pseudo.images, pseudo.labels), config.alpha, config.pseudo_pairs_as_real)


def goodgan_train_step(state: GoodGanState, labeled_x, labeled_y, unlabeled, config: GoodGanConfig,
                       epoch: int):
    """D update, then G update, then C update, one optimizer step each."""
    g, c, d = state.generator, state.classifier, state.discriminator
    for m in (g, c, d):
        m.train()
    n = len(unlabeled)
    k = g.num_classes

    # discriminator
    with torch.no_grad():
        y_gen = balanced_labels(n, k)
        x_gen = g(g.sample_latent(n), y_gen)
        y_pseudo, _ = sample_pseudo_labels(c(unlabeled).logits)
    d_loss = discriminator_step_loss(
        state,
        PairBatch(labeled_x, labeled_y, "real-labeled"),
        PairBatch(x_gen, y_gen, "generator"),
        PairBatch(unlabeled, y_pseudo, "classifier-pseudo"),
        config,
    )
    _check({"d_loss": d_loss.item()})
    state.opt_d.zero_grad()
    d_loss.backward()
    state.opt_d.step()

    # generator
    y_gen = balanced_labels(n, k)
    g_loss = generator_loss_goodgan(d(g(g.sample_latent(n), y_gen), y_gen))
    state.opt_g.zero_grad()
    g_loss.backward()
    state.opt_g.step()

    # classifier
    sup = F.cross_entropy(c(labeled_x).logits, labeled_y)
    y_hat, log_p = sample_pseudo_labels(c(unlabeled).logits)
    with torch.no_grad():
        rewards = -F.softplus(d(unlabeled, y_hat))  # log(1 - D(x, y_hat))
    reinforce = classifier_reinforce_loss(log_p, rewards, state.estimator)
    pseudo = pseudo_pair_loss(c, g, epoch, config.warmup_threshold, n)
    total_c = sup + config.reinforce_weight * reinforce + config.pseudo_weight * pseudo
    _check({"total_c": total_c.item()})
    state.opt_c.zero_grad()
    total_c.backward()
    state.opt_c.step()
    for opt in (state.opt_d, state.opt_g):
        opt.zero_grad()
    state.step += 1

    out = GoodGanLossBreakdown(d_loss.item(), g_loss.item(), sup.item(), reinforce.item(), pseudo.item(),
                               config.alpha, total_c.item())
    _check(out.as_dict())
    return out


# ---------------------------------------------------------------------------
# Grids


def _tile(images: torch.Tensor, rows: int, cols: int) -> np.ndarray:
    """(rows*cols, C, H, W) in row-major order -> (rows*H, cols*W, C) array."""
    _, ch, h, w = images.shape
    grid = images.reshape(rows, cols, ch, h, w).permute(0, 3, 1, 4, 2)
    return grid.reshape(rows * h, cols * w, ch).cpu().numpy()


@torch.no_grad()
def generate_cells(generator: Generator, latents: torch.Tensor, labels: Sequence[int]) -> torch.Tensor:
    """Images for every (label, latent) pair, label-major: shape (K, L, C, H, W).

    Cells are generated one at a time so a cell's pixels do not depend on which
    other cells share its batch.
    """
    generator.eval()
    n_lat = len(latents)
    z = latents.repeat(len(labels), 1)
    y = torch.as_tensor(labels).repeat_interleave(n_lat)
    out = torch.cat([generator(z[i:i + 1], y[i:i + 1]) for i in range(len(z))])
    return out.reshape(len(labels), n_lat, *out.shape[1:])


def conditional_grid(generator: Generator, classes: Sequence[int], latents: torch.Tensor) -> np.ndarray:
    """Row = class, column = latent vector; returns (K*H, L*W, C) in [0, 1]."""
    cells = generate_cells(generator, latents, classes)
    return _tile(cells.reshape(-1, *cells.shape[2:]), len(classes), len(latents))


def interpolation_latents(z1, z2, steps: int) -> torch.Tensor:
    if steps < 2:
        raise ValueError("steps must be >= 2")
    t = torch.linspace(0.0, 1.0, steps, dtype=z1.dtype)[:, None]
    return (1 - t) * z1[None, :] + t * z2[None, :]


def interpolation_grid(generator: Generator, z1, z2, steps: int, classes: Sequence[int]) -> np.ndarray:
    """Row = interpolation step (z1 at the top, z2 at the bottom), column = class."""
    latents = interpolation_latents(z1, z2, steps)
    cells = generate_cells(generator, latents, classes)  # (K, steps, ...)
    cells = cells.transpose(0, 1).reshape(-1, *cells.shape[2:])
    return _tile(cells, steps, len(classes))


@torch.no_grad()
def grid_agreement(oracle: Classifier, generator: Generator, classes: Sequence[int], latents) -> float:
    """Fraction of grid cells the frozen oracle assigns to their conditioning label."""
    oracle.eval()
    cells = generate_cells(generator, latents, classes)
    flat = cells.reshape(-1, *cells.shape[2:])
    pred = oracle(flat).logits.argmax(1)
    target = torch.as_tensor(classes).repeat_interleave(len(latents))
    return float((pred == target).double().mean())


def unconditional_grid(generator: Generator, latents: torch.Tensor, cols: int) -> np.ndarray:
    generator.eval()
    with torch.no_grad():
        out = generator(latents)
    rows = len(latents) // cols
    return _tile(out[: rows * cols], rows, cols)


def save_png(path, grid: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(grid) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)
