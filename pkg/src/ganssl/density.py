"""Pre-trained density model used by the bad-generator density penalty.

A Gaussian kernel density estimate over either raw pixels (``kde-pixel``) or the
feature tap of a frozen classifier (``kde-feature``). ``log_density`` is a torch
function, so gradients flow back to the queried images.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import read_archive, write_archive
from .datasets import to_tensor

KINDS = ("kde-feature", "kde-pixel")


@dataclass
class DensityModel:
    kind: str
    bandwidth: float
    reference: torch.Tensor
    embedder: Optional[torch.nn.Module] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown density kind {self.kind!r}")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if len(self.reference) == 0:
            raise ValueError("reference set is empty")
        if self.kind == "kde-feature" and self.embedder is None:
            raise ValueError("kde-feature needs an embedding classifier")

    @property
    def dim(self) -> int:
        return self.reference.shape[1]

    def embed(self, images) -> torch.Tensor:
        return embed_points(self.kind, self.embedder, images)

    def log_density(self, images, chunk: int = 4096) -> torch.Tensor:
        return log_density(self, images, chunk)


def embed_points(kind, embedder, images) -> torch.Tensor:
    """Channels-first image tensor -> (N, dim) points in KDE space."""
    if kind == "kde-pixel":
        return images.reshape(len(images), -1)
    return embedder(images).features


def _as_images(images):
    return to_tensor(images) if isinstance(images, np.ndarray) else images


def median_bandwidth(points: torch.Tensor) -> float:
    """Median pairwise Euclidean distance (falls back to 1.0 for degenerate sets)."""
    if len(points) < 2:
        return 1.0
    d = torch.pdist(points.double())
    med = float(d.median()) if len(d) else 0.0
    return med if med > 0 else 1.0


def kde_log_density(queries: torch.Tensor, reference: torch.Tensor, bandwidth: float) -> torch.Tensor:
    """log (1/M) sum_j N(q; r_j, h^2 I) via log-sum-exp."""
    reference = reference.to(queries.dtype)
    d2 = (queries.pow(2).sum(1, keepdim=True) + reference.pow(2).sum(1)[None, :]
          - 2.0 * queries @ reference.T).clamp_min(0.0)
    dim = reference.shape[1]
    log_norm = math.log(len(reference)) + 0.5 * dim * math.log(2 * math.pi * bandwidth ** 2)
    return torch.logsumexp(-d2 / (2 * bandwidth ** 2), dim=1) - log_norm


def density_fit(images, kind: str = "kde-pixel", bandwidth: Optional[float] = None,
                max_reference: int = 2000, seed: int = 0,
                embedder: Optional[torch.nn.Module] = None) -> DensityModel:
    """Store a seeded uniform subsample of ``images`` (embedded for ``kde-feature``).

    ``bandwidth=None`` selects the median pairwise distance of the reference set.
    """
    images = _as_images(images)
    if len(images) == 0:
        raise ValueError("cannot fit a density model on zero images")
    if bandwidth is not None and bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    rng = np.random.default_rng(seed)
    if len(images) > max_reference:
        idx = np.sort(rng.choice(len(images), size=max_reference, replace=False))
        images = images[torch.as_tensor(idx)]
    if kind == "kde-feature":
        if embedder is None:
            raise ValueError("kde-feature needs an embedding classifier")
        embedder = copy.deepcopy(embedder).eval()
        for p in embedder.parameters():
            p.requires_grad_(False)
    elif kind not in KINDS:
        raise ValueError(f"unknown density kind {kind!r}")
    with torch.no_grad():
        reference = embed_points(kind, embedder, images).detach().clone()
    h = median_bandwidth(reference) if bandwidth is None else float(bandwidth)
    return DensityModel(kind, h, reference, embedder)


def log_density(model: DensityModel, images, chunk: int = 4096) -> torch.Tensor:
    images = _as_images(images)
    points = model.embed(images)
    if points.shape[1] != model.dim:
        raise ValueError(f"query dimension {points.shape[1]} does not match model dimension {model.dim}")
    parts = [kde_log_density(points[i:i + chunk], model.reference, model.bandwidth)
             for i in range(0, len(points), chunk)]
    return torch.cat(parts)


def calibrate_epsilon(model: DensityModel, images, q: float = 10.0, batch: int = 2048) -> float:
    """q-th percentile (lower-nearest) of the log-density over ``images``."""
    if not 0 <= q <= 100:
        raise ValueError("percentile must lie in [0, 100]")
    if len(images) == 0:
        raise ValueError("cannot calibrate on an empty set")
    values = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            values.append(log_density(model, _as_images(images[i:i + batch])).double().numpy())
    return float(np.percentile(np.concatenate(values), q, method="lower"))


def pretrain_feature_classifier(classifier, labeled_images, labels, steps: int = 300, batch_size: int = 100,
                                lr: float = 3e-4, seed: int = 0):
    """Copy of ``classifier`` fit with cross-entropy on the labeled subset, then frozen."""
    net = copy.deepcopy(classifier).train()
    gen = torch.Generator().manual_seed(seed)
    x = _as_images(labeled_images)
    y = torch.as_tensor(labels)
    opt = torch.optim.Adam(net.parameters(), lr=lr, betas=(0.5, 0.999))
    for _ in range(steps):
        idx = torch.randint(0, len(x), (batch_size,), generator=gen)
        loss = F.cross_entropy(net(x[idx]).logits, y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def save_density(path, model: DensityModel):
    arrays = {"reference": model.reference.detach().cpu().numpy().astype("<f4")}
    if model.embedder is not None:
        for key, t in model.embedder.state_dict().items():
            arrays[f"embedder/{key.replace('.', '/')}"] = t.detach().cpu().numpy().astype(
                "<f4" if t.is_floating_point() else "<i8")
    manifest = {"kind": model.kind, "bandwidth": model.bandwidth, "dim": model.dim,
                "reference_count": len(model.reference)}
    return write_archive(path, arrays, manifest)


def load_density(path, embedder: Optional[torch.nn.Module] = None) -> DensityModel:
    """Reload a saved model; ``kde-feature`` needs an embedder of the same architecture."""
    arrays, manifest = read_archive(path)
    if manifest["kind"] == "kde-feature":
        if embedder is None:
            raise ValueError("kde-feature archive needs an embedder instance to load into")
        state = {key: torch.from_numpy(arrays[f"embedder/{key.replace('.', '/')}"].copy()).to(v.dtype)
                 for key, v in embedder.state_dict().items()}
        embedder.load_state_dict(state)
        embedder.eval()
        for p in embedder.parameters():
            p.requires_grad_(False)
    return DensityModel(manifest["kind"], float(manifest["bandwidth"]),
                        torch.from_numpy(arrays["reference"].copy()), embedder)
