"""Acceptance checks shared by ``ganssl verify`` and the test suite.

Each check returns a :class:`CheckResult`; nothing here raises on a failed
criterion. Checks 1-5 and 10 are oracle/plumbing checks that run in minutes on a
CPU (``fast``); 6-9 train models and 7-9 need the MNIST files.
"""
from __future__ import annotations

import json
import math
import tempfile
import time
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import badgan, goodgan
from .config import load_config
from .datasets import DatasetError, dataset_spec, default_data_dir, load_dataset, to_tensor, zca_apply, zca_fit
from .density import density_fit, log_density
from .networks import balanced_labels, build_classifier, build_generator, build_pair_discriminator

LN2 = math.log(2.0)
UNIFORM_UNSUPERVISED_K10 = 2.493205  # ln(1.1) + ln(11)


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"[{verdict}] criterion {self.number:>2} {self.name}: {self.detail} ({self.seconds:.1f}s)"

    def as_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# 1. loss oracle


def _explicit_losses(l_lab, y, l_unl, l_gen):
    """Brute-force (K+1)-way softmax with an appended zero logit, in numpy float64."""
    def softmax_k1(logits):
        full = np.concatenate([logits, np.zeros((len(logits), 1))], axis=1)
        e = np.exp(full - full.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    p_lab = softmax_k1(l_lab)
    k = l_lab.shape[1]
    # supervised term: p(y | x, y <= K)
    sup = -np.mean(np.log(p_lab[np.arange(len(y)), y] / p_lab[:, :k].sum(axis=1)))
    unsup = -np.mean(np.log(1.0 - softmax_k1(l_unl)[:, k])) - np.mean(np.log(softmax_k1(l_gen)[:, k]))
    return sup, unsup


def check_loss_oracle(n_batches: int = 1000, batch: int = 32, k: int = 10, seed: int = 0) -> CheckResult:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_batches):
        scale = rng.uniform(0.1, 6.0)
        l_lab, l_unl, l_gen = (rng.standard_normal((batch, k)) * scale for _ in range(3))
        y = rng.integers(0, k, batch)
        sup = badgan.supervised_loss(torch.from_numpy(l_lab), torch.from_numpy(y)).item()
        unsup = badgan.unsupervised_loss(torch.from_numpy(l_unl), torch.from_numpy(l_gen)).item()
        ref_sup, ref_unsup = _explicit_losses(l_lab, y, l_unl, l_gen)
        worst = max(worst, abs(sup - ref_sup), abs(unsup - ref_unsup))
    secs = time.perf_counter() - start
    ok = worst < 1e-6 and secs < 5.0
    return CheckResult(1, "loss-oracle equivalence", ok,
                       f"max |implicit - explicit| = {worst:.2e} over {n_batches} batches (tol 1e-6, < 5 s)", secs)


# ---------------------------------------------------------------------------
# 2. analytic values


def check_analytic_values() -> CheckResult:
    start = time.perf_counter()
    zeros = torch.zeros(8, 10, dtype=torch.float64)
    unsup = badgan.unsupervised_loss(zeros, zeros).item()
    sup = badgan.supervised_loss(zeros, torch.arange(8) % 10).item()
    z = torch.zeros(8, dtype=torch.float64)
    pair = [goodgan.discriminator_loss(z, z, z, a, as_real).item()
            for a in (0.0, 0.5, 1.0) for as_real in (False, True)]
    errs = {
        "unsupervised": abs(unsup - UNIFORM_UNSUPERVISED_K10),
        "supervised": abs(sup - math.log(10)),
        "pair": max(abs(p - 2 * LN2) for p in pair),
    }
    ok = errs["unsupervised"] < 1e-5 and errs["supervised"] < 1e-6 and errs["pair"] < 1e-6
    detail = f"unsup={unsup:.6f} sup={sup:.6f} pair={pair[1]:.6f}; errors " + ", ".join(
        f"{k} {v:.1e}" for k, v in errs.items())
    return CheckResult(2, "analytic spot values", ok, detail, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# 3. gradient checks


def _flat_params(module):
    return [p for p in module.parameters() if p.requires_grad]


def gradient_relative_error(fn: Callable[[], torch.Tensor], params, h: float = 1e-6) -> float:
    """Relative L2 error between autograd and central finite differences of ``fn``."""
    for p in params:
        p.grad = None
    fn().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params])
    numeric = torch.zeros_like(analytic)
    i = 0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + h
                up = fn().item()
                flat[j] = orig - h
                down = fn().item()
                flat[j] = orig
                numeric[i] = (up - down) / (2 * h)
                i += 1
    denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / denom


def _mini_nets(seed=0):
    torch.manual_seed(seed)
    spec = dataset_spec("synthetic-gaussians", num_classes=3)
    kw = dict(input_noise=0.0, hidden_noise=0.0, toy_hidden=(6, 5))
    g = build_generator(spec, conditional=False, z_dim=3, toy_hidden=(6, 5)).double()
    gc = build_generator(spec, conditional=True, z_dim=3, toy_hidden=(6, 5)).double()
    c = build_classifier(spec, **kw).double()
    d = build_pair_discriminator(spec, **kw).double()
    return spec, g, gc, c, d


def check_gradients(seed: int = 0) -> CheckResult:
    start = time.perf_counter()
    spec, g, gc, c, d = _mini_nets(seed)
    for m in (g, gc, c, d):
        m.train()
    gen = torch.Generator().manual_seed(seed)
    n = 12
    z = torch.rand(n, 3, generator=gen, dtype=torch.float64)
    real = torch.rand(n, 1, 1, 2, generator=gen, dtype=torch.float64)
    real_features = c(real).features.detach()

    errors = {}
    errors["feature-matching"] = gradient_relative_error(
        lambda: badgan.feature_matching_loss(real_features, c(g(z)).features), _flat_params(g))
    errors["entropy-proxy"] = gradient_relative_error(
        lambda: badgan.entropy_proxy(c(g(z)).features), _flat_params(g))

    ref = torch.rand(40, 1, 1, 2, generator=gen, dtype=torch.float64)
    for kind in ("kde-pixel", "kde-feature"):
        model = density_fit(ref, kind, bandwidth=0.2 if kind == "kde-pixel" else None, embedder=c)
        with torch.no_grad():
            base = log_density(model, g(z))
        # threshold halfway between two sorted values so no sample sits on the gate
        ordered = base.sort().values
        eps = float(ordered[n // 2 - 1] + ordered[n // 2]) / 2
        gate = base > eps

        def dens():
            value = badgan.density_penalty(g(z), model, eps)
            with torch.no_grad():
                if not torch.equal(log_density(model, g(z)) > eps, gate):
                    raise RuntimeError("density gate flipped during finite differencing")
            return value

        errors[f"density-penalty ({kind})"] = gradient_relative_error(dens, _flat_params(g))

    y_hat, _ = goodgan.sample_pseudo_labels(c(real).logits.detach(), gen)
    rewards = -torch.rand(n, generator=gen, dtype=torch.float64) * 2
    est = goodgan.ReinforceEstimator(0.99)
    est.update(-torch.ones(1, dtype=torch.float64))

    def reinforce():
        log_p = F.log_softmax(c(real).logits, 1).gather(1, y_hat[:, None]).reshape(-1)
        return goodgan.classifier_reinforce_loss(log_p, rewards, est, update=False)

    errors["reinforce-surrogate"] = gradient_relative_error(reinforce, _flat_params(c))

    y_real = torch.arange(n) % 3
    x_gen = gc(z, y_real).detach()
    for as_real in (False, True):
        errors[f"pair-discriminator (pseudo_as_real={as_real})"] = gradient_relative_error(
            lambda: goodgan.discriminator_loss(d(real, y_real), d(x_gen, y_real), d(real, y_hat), 0.5, as_real),
            _flat_params(d))
    errors["generator-adversarial"] = gradient_relative_error(
        lambda: goodgan.generator_loss_goodgan(d(gc(z, y_real), y_real)), _flat_params(gc))

    secs = time.perf_counter() - start
    worst = max(errors.values())
    ok = worst < 1e-3 and secs < 120
    detail = "max relative error " + f"{worst:.1e}; " + ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    return CheckResult(3, "gradient checks (float64)", ok, detail, secs)


# ---------------------------------------------------------------------------
# 4. REINFORCE


REINFORCE_LOGITS = (0.4, -0.2, 0.1)
REINFORCE_REWARDS = (-0.3, -1.2, -0.7)


def exact_reinforce_gradient(logits, rewards) -> torch.Tensor:
    theta = torch.tensor(logits, dtype=torch.float64, requires_grad=True)
    r = torch.tensor(rewards, dtype=torch.float64)
    (torch.softmax(theta, 0) * r).sum().backward()
    return theta.grad


def mc_reinforce_gradient(logits, rewards, n: int, estimator: goodgan.ReinforceEstimator, generator) -> torch.Tensor:
    theta = torch.tensor(logits, dtype=torch.float64, requires_grad=True)
    r = torch.tensor(rewards, dtype=torch.float64)
    log_p_all = torch.log_softmax(theta, 0)
    y = torch.multinomial(log_p_all.detach().exp(), n, replacement=True, generator=generator)
    estimator.surrogate(log_p_all[y], r[y], update=True).backward()
    return theta.grad


def check_reinforce(samples: int = 100_000, reps: int = 10, steps: int = 300, batch: int = 10,
                    seed: int = 0) -> CheckResult:
    start = time.perf_counter()
    exact = exact_reinforce_gradient(REINFORCE_LOGITS, REINFORCE_REWARDS)
    gen = torch.Generator().manual_seed(seed)
    warm = goodgan.ReinforceEstimator(0.99)
    for _ in range(200):
        mc_reinforce_gradient(REINFORCE_LOGITS, REINFORCE_REWARDS, 100, warm, gen)
    mc = mc_reinforce_gradient(REINFORCE_LOGITS, REINFORCE_REWARDS, samples, warm, gen)
    rel = ((mc - exact).norm() / exact.norm()).item()

    wins = 0
    ratios = []
    for rep in range(reps):
        var = {}
        for use_baseline in (True, False):
            g = torch.Generator().manual_seed(seed + 1000 + rep)
            est = goodgan.ReinforceEstimator(0.99, use_baseline=use_baseline)
            grads = torch.stack([mc_reinforce_gradient(REINFORCE_LOGITS, REINFORCE_REWARDS, batch, est, g)
                                 for _ in range(steps)])
            var[use_baseline] = grads.var(dim=0).sum().item()
        ratios.append(var[True] / var[False])
        wins += var[True] < var[False]
    ok = rel < 0.02 and wins >= 8
    detail = (f"MC vs exact relative error {100 * rel:.2f}% (tol 2%); EMA baseline lowered variance in "
              f"{wins}/{reps} repetitions (median ratio {float(np.median(ratios)):.3f})")
    return CheckResult(4, "REINFORCE exactness", ok, detail, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# 5. ZCA


def correlated_images(n: int = 4000, shape=(4, 4, 3), seed: int = 0) -> np.ndarray:
    """Gaussian images with a dense random covariance (eigenvalues roughly 0.25 to 9)."""
    rng = np.random.default_rng(seed)
    dim = int(np.prod(shape))
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    scales = np.linspace(0.5, 3.0, dim)
    x = rng.standard_normal((n, dim)) @ (q * scales).T + 0.5
    return x.reshape(n, *shape)


def zca_statistics(images, epsilon: float = 1e-2) -> dict:
    w = zca_fit(images, epsilon)
    out = zca_apply(w, images).astype(np.float64).reshape(len(images), -1)
    cov = np.cov(out, rowvar=False, bias=True)
    off = cov - np.diag(np.diag(cov))
    return {"diag_min": float(np.diag(cov).min()), "diag_max": float(np.diag(cov).max()),
            "offdiag_max": float(np.abs(off).max()), "asymmetry": float(np.abs(w.matrix - w.matrix.T).max())}


def check_zca(data_dir: Optional[str] = None) -> CheckResult:
    start = time.perf_counter()
    source = "synthetic correlated images"
    images = correlated_images()
    stats = zca_statistics(images)
    ok = (0.9 <= stats["diag_min"] and stats["diag_max"] <= 1.1 and stats["offdiag_max"] < 0.05
          and stats["asymmetry"] < 1e-8)
    detail = (f"{source}: diag [{stats['diag_min']:.4f}, {stats['diag_max']:.4f}], "
              f"off-diag max {stats['offdiag_max']:.2e}, |W - W^T| max {stats['asymmetry']:.1e}")
    return CheckResult(5, "ZCA whitening", ok, detail, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# 6. synthetic efficacy

SYNTHETIC_BASE = [
    "experiment.dataset=synthetic-gaussians",
    "data.synthetic_classes=4",
    "data.labeled_count=16",
    "data.synthetic_n_per_class=504",
    "data.synthetic_noise=0.1",
    "train.batch_size=100",
    "train.epochs=100",
    "train.checkpoint_interval=0",
    "density.kind=kde-pixel",
]
SYNTHETIC_MODEL_OVERRIDES = {
    "supervised-baseline": [],
    "badgan": [],
    "goodgan": ["loss.pseudo_pairs_as_real=true", "train.warmup_threshold=50"],
}


def sign_test_p(wins: int, n: int) -> float:
    """One-sided sign-test p-value P(X >= wins), X ~ Binomial(n, 1/2)."""
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2 ** n


def synthetic_efficacy_configs(work_dir, seeds=range(10)):
    out = {}
    for model, extra in SYNTHETIC_MODEL_OVERRIDES.items():
        out[model] = [load_config(None, SYNTHETIC_BASE + extra + [
            f"experiment.model={model}", f"train.seed={s}", f"experiment.output_dir={work_dir}"]) for s in seeds]
    return out


def check_synthetic_efficacy(work_dir=None, seeds=range(10), force: bool = False) -> CheckResult:
    from .harness import run_experiment

    start = time.perf_counter()
    work_dir = Path(work_dir or tempfile.mkdtemp(prefix="ganssl-c6-"))
    acc = {}
    for model, cfgs in synthetic_efficacy_configs(work_dir, seeds).items():
        acc[model] = []
        for cfg in cfgs:
            rec = run_experiment(cfg, force=force)
            acc[model].append(rec.final_test_accuracy if rec.status == "completed" else float("nan"))
    secs = time.perf_counter() - start
    base = np.array(acc["supervised-baseline"])
    parts = [f"supervised mean {np.nanmean(base):.2f}%"]
    ok = secs < 1800
    for model in ("badgan", "goodgan"):
        a = np.array(acc[model])
        wins = int(np.sum(a > base))
        better = bool(np.nanmean(a) > np.nanmean(base)) and wins >= 8
        ok = ok and better
        parts.append(f"{model} mean {np.nanmean(a):.2f}% wins {wins}/{len(a)} (sign p={sign_test_p(wins, len(a)):.3f})")
    return CheckResult(6, "synthetic SSL efficacy", ok, "; ".join(parts) + " (need >= 8 wins, < 30 min)", secs)


# ---------------------------------------------------------------------------
# 7-9. MNIST experiments


def _mnist_dir(data_dir) -> Optional[str]:
    data_dir = default_data_dir(data_dir)
    if not data_dir:
        return None
    try:
        load_dataset(dataset_spec("mnist"), data_dir)
    except DatasetError:
        return None
    return data_dir


def _missing_mnist(number, name, data_dir, start) -> CheckResult:
    where = default_data_dir(data_dir) or "<unset>"
    return CheckResult(number, name, False,
                       f"MNIST files not available under data dir {where} (set --data-dir or GANSSL_DATA_DIR, "
                       f"or --allow-download); experiment not run", time.perf_counter() - start)


def mnist_configs(model: str, data_dir, work_dir, seeds=(0, 1, 2), batch_size: int = 100, extra=()):
    return [load_config(None, [
        f"experiment.model={model}", "experiment.dataset=mnist", f"experiment.output_dir={work_dir}",
        f"data.data_dir={data_dir}", "data.labeled_count=100", f"train.batch_size={batch_size}",
        "train.epochs=100", f"train.seed={s}", *extra]) for s in seeds]


GOODGAN_MNIST_EXTRA = ("train.warmup_threshold=50",)


def check_mnist_scaled(data_dir=None, work_dir=None) -> CheckResult:
    from .harness import aggregate, run_experiment

    start = time.perf_counter()
    name = "scaled-down MNIST accuracy"
    data_dir = _mnist_dir(data_dir)
    if data_dir is None:
        return _missing_mnist(7, name, None, start)
    work_dir = work_dir or tempfile.mkdtemp(prefix="ganssl-mnist-")
    bad = aggregate([run_experiment(c) for c in mnist_configs("badgan", data_dir, work_dir)])
    good = aggregate([run_experiment(c) for c in mnist_configs("goodgan", data_dir, work_dir,
                                                                  extra=GOODGAN_MNIST_EXTRA)])
    ok = bad.mean >= 97.0 and good.mean >= 96.0
    return CheckResult(7, name, ok, f"badgan {bad.format()} (need >= 97.0), goodgan {good.format()} (need >= 96.0)",
                       time.perf_counter() - start)


def check_batch_direction(data_dir=None, work_dir=None) -> CheckResult:
    from .harness import aggregate, final_stage_mean, run_experiment

    start = time.perf_counter()
    name = "batch-size direction"
    data_dir = _mnist_dir(data_dir)
    if data_dir is None:
        return _missing_mnist(8, name, None, start)
    work_dir = work_dir or tempfile.mkdtemp(prefix="ganssl-mnist-")
    runs = {b: [run_experiment(c) for c in mnist_configs("badgan", data_dir, work_dir, batch_size=b)] for b in (20, 100)}
    acc = {b: aggregate(r).mean for b, r in runs.items()}
    loss = {b: float(np.mean([final_stage_mean(r, "loss_g_fm") for r in rs])) for b, rs in runs.items()}
    ok = acc[100] >= acc[20] and loss[20] > loss[100]
    return CheckResult(8, name, ok, f"accuracy b100 {acc[100]:.2f}% vs b20 {acc[20]:.2f}%; final-10 G loss "
                       f"b20 {loss[20]:.4f} vs b100 {loss[100]:.4f}", time.perf_counter() - start)


def train_oracle_classifier(images, labels, epochs: int = 3, batch: int = 100, seed: int = 0):
    """Fully supervised MNIST classifier used only to judge generated digits."""
    torch.manual_seed(seed)
    net = build_classifier(dataset_spec("mnist"))
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(images))
        for i in range(0, len(order) - batch + 1, batch):
            idx = order[i:i + batch]
            loss = F.cross_entropy(net(to_tensor(images[idx])).logits, torch.as_tensor(labels[idx]))
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def interpolation_endpoints_match(generator, classes, z1, z2, steps: int = 10) -> bool:
    """Rows 0 and steps-1 of the interpolation grid equal the conditional-grid columns for z1 and z2."""
    interp = goodgan.interpolation_grid(generator, z1, z2, steps, classes)
    cond = goodgan.conditional_grid(generator, classes, torch.stack([z1, z2]))
    h = interp.shape[0] // steps
    w = interp.shape[1] // len(classes)
    for k in range(len(classes)):
        for row, col in ((0, 0), (steps - 1, 1)):
            a = interp[row * h:(row + 1) * h, k * w:(k + 1) * w]
            b = cond[k * h:(k + 1) * h, col * w:(col + 1) * w]
            if not np.array_equal(a, b):
                return False
    return True


def check_conditional_generation(data_dir=None, work_dir=None) -> CheckResult:
    from .harness import load_run_networks, run_dir_for, run_experiment

    start = time.perf_counter()
    name = "conditional generation"
    data_dir = _mnist_dir(data_dir)
    if data_dir is None:
        return _missing_mnist(9, name, None, start)
    work_dir = work_dir or tempfile.mkdtemp(prefix="ganssl-mnist-")
    cfg = mnist_configs("goodgan", data_dir, work_dir, seeds=(0,), extra=GOODGAN_MNIST_EXTRA)[0]
    run_experiment(cfg)
    _, nets = load_run_networks(run_dir_for(cfg))
    g = nets["generator"]
    full = load_dataset(dataset_spec("mnist"), data_dir)
    oracle = train_oracle_classifier(full.train.images, full.train.labels)
    gen = torch.Generator().manual_seed(0)
    latents = torch.rand(10, g.z_dim, generator=gen)
    agreement = goodgan.grid_agreement(oracle, g, list(range(10)), latents)
    z1, z2 = torch.rand(2, g.z_dim, generator=gen)
    endpoints = interpolation_endpoints_match(g, list(range(10)), z1, z2)
    ok = agreement >= 0.7 and endpoints
    return CheckResult(9, name, ok, f"oracle agreement {100 * agreement:.1f}% (need >= 70%); interpolation "
                       f"endpoints bit-match: {endpoints}", time.perf_counter() - start)


# ---------------------------------------------------------------------------
# 10. plumbing


def fixed_batch_losses(model: str, nets: dict, batch, seed: int = 123, density=None, epsilon=float("inf"),
                       estimator_state=None) -> dict:
    """Every loss term of ``model`` on one batch under a fixed RNG seed, without updating anything."""
    x_l, y_l, x_u = batch
    torch.manual_seed(seed)
    c = nets["classifier"]
    for m in nets.values():
        m.train()
    with torch.no_grad():
        out = {"supervised": badgan.supervised_loss(c(x_l).logits, y_l).item()}
        if model == "badgan":
            g = nets["generator"]
            fake = g(g.sample_latent(len(x_u)))
            out["unsupervised"] = badgan.unsupervised_loss(c(x_u).logits, c(fake).logits).item()
            feats = c(fake).features
            out["fm"] = badgan.feature_matching_loss(c(x_u).features, feats).item()
            out["proxy"] = badgan.entropy_proxy(feats).item()
            if density is not None:
                out["density"] = badgan.density_penalty(fake, density, epsilon).item()
        elif model == "goodgan":
            g, d = nets["generator"], nets["discriminator"]
            y = balanced_labels(len(x_u), g.num_classes)
            x_g = g(g.sample_latent(len(x_u)), y)
            y_hat, log_p = goodgan.sample_pseudo_labels(c(x_u).logits)
            out["d_pair"] = goodgan.discriminator_loss(d(x_l, y_l), d(x_g, y), d(x_u, y_hat), 0.5).item()
            out["g_adv"] = goodgan.generator_loss_goodgan(d(x_g, y)).item()
            est = goodgan.ReinforceEstimator()
            if estimator_state:
                est.load_state_dict(estimator_state)
            out["reinforce"] = est.surrogate(log_p, -F.softplus(d(x_u, y_hat)), update=False).item()
            out["pseudo"] = F.cross_entropy(c(x_g).logits, y).item()
    return out


SMOKE_DATASETS = ("mnist", "svhn", "cifar10", "synthetic-moons", "synthetic-gaussians")
SMOKE_MODELS = ("supervised-baseline", "badgan", "goodgan")


def smoke_config(model: str, dataset: str, work_dir, data_dir=None):
    from .fixtures import fixture_split_sizes

    overrides = [f"experiment.model={model}", f"experiment.dataset={dataset}", f"experiment.output_dir={work_dir}",
                 "train.epochs=2", "train.eval_interval=1", "train.checkpoint_interval=1", "train.batch_size=50",
                 "density.pretrain_steps=5", "density.max_reference=100", "train.warmup_threshold=1"]
    if dataset.startswith("synthetic-"):
        overrides += ["data.labeled_count=8", "data.synthetic_n_per_class=60", "data.synthetic_test_per_class=50"]
    else:
        sizes = ",".join(str(s) for s in fixture_split_sizes(dataset))
        overrides += ["data.labeled_count=20", f"data.split_sizes={sizes}", f"data.data_dir={data_dir}"]
    return load_config(None, overrides)


def _plumbing_checkpoint(tmp: Path) -> list[str]:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .harness import Trainer, build_networks, prepare_data
    from .datasets import batch_stream

    problems = []
    for model in SMOKE_MODELS:
        cfg = smoke_config(model, "synthetic-gaussians", tmp / "ckpt")
        torch.manual_seed(0)
        data = prepare_data(cfg)
        trainer = Trainer(cfg, data)
        for lab, unl in batch_stream(data.split, 50, 0, 0):
            trainer.step(lab, unl, 0)
        lab, unl = next(iter(batch_stream(data.split, 50, 0, 1)))
        batch = (to_tensor(lab.images), torch.as_tensor(lab.labels), to_tensor(unl))
        extra = trainer.extra_state()
        kw = dict(density=getattr(trainer, "density", None), epsilon=extra.get("epsilon_log", float("inf")),
                  estimator_state=extra.get("reinforce"))
        before = fixed_batch_losses(model, trainer.nets, batch, **kw)
        path = save_checkpoint(tmp / f"{model}.ckpt", trainer.nets, 1, 0, extra)
        torch.manual_seed(99)
        fresh = build_networks(cfg, data.spec, data.whitener)
        manifest = load_checkpoint(path, fresh)
        kw["estimator_state"] = manifest.get("extra", {}).get("reinforce")
        after = fixed_batch_losses(model, fresh, batch, **kw)
        if before != after:
            problems.append(f"{model}: losses differ after reload {before} vs {after}")
    return problems


def _plumbing_smoke(tmp: Path) -> tuple[list[str], Path]:
    from .fixtures import write_fixture
    from .harness import run_experiment

    problems = []
    runs = tmp / "smoke"
    for dataset in SMOKE_DATASETS:
        data_dir = None
        if not dataset.startswith("synthetic-"):
            data_dir = write_fixture(dataset, tmp / "fixtures" / dataset)
        for model in SMOKE_MODELS:
            with warnings.catch_warnings():
                # fixture files never match the published checksums
                warnings.filterwarnings("ignore", message=".*checksum mismatch")
                rec = run_experiment(smoke_config(model, dataset, runs, data_dir), force=True)
            values = [v for row in rec.rows for k, v in row.items()
                      if k.startswith("loss_") and isinstance(v, float)]
            if rec.status != "completed" or len(rec.rows) != 2 or not all(map(math.isfinite, values)):
                problems.append(f"{model}/{dataset}: status {rec.status}, {len(rec.rows)} rows")
    return problems, runs


def check_plumbing(work_dir=None) -> CheckResult:
    from .report import report

    start = time.perf_counter()
    tmp = Path(work_dir or tempfile.mkdtemp(prefix="ganssl-plumbing-"))
    problems = _plumbing_checkpoint(tmp)
    smoke_problems, runs = _plumbing_smoke(tmp)
    problems += smoke_problems
    first = report(runs, runs / "report-a.md").read_bytes()
    second = report(runs, runs / "report-b.md").read_bytes()
    if first != second:
        problems.append("report regeneration is not byte-identical")
    n = len(SMOKE_MODELS) * len(SMOKE_DATASETS)
    detail = (f"checkpoint reload bit-exact for {len(SMOKE_MODELS)} models; {n} smoke runs; report deterministic"
              if not problems else "; ".join(problems))
    return CheckResult(10, "plumbing", not problems, detail, time.perf_counter() - start)


# ---------------------------------------------------------------------------


def run_checks(fast: bool = False, data_dir=None, work_dir=None, only=None, echo=None) -> list[CheckResult]:
    """Run the acceptance checks in order; ``fast`` keeps only checks that need no training data or long runs."""
    work = Path(work_dir) if work_dir else Path(tempfile.mkdtemp(prefix="ganssl-verify-"))
    table = {
        1: check_loss_oracle,
        2: check_analytic_values,
        3: check_gradients,
        4: check_reinforce,
        5: lambda: check_zca(data_dir),
        6: lambda: check_synthetic_efficacy(work / "synthetic"),
        7: lambda: check_mnist_scaled(data_dir, work / "mnist"),
        8: lambda: check_batch_direction(data_dir, work / "mnist"),
        9: lambda: check_conditional_generation(data_dir, work / "mnist"),
        10: lambda: check_plumbing(work / "plumbing"),
    }
    numbers = [n for n in table if only is None or n in only]
    if fast:
        numbers = [n for n in numbers if n not in (6, 7, 8, 9)]
    results = []
    for n in numbers:
        res = table[n]()
        results.append(res)
        if echo:
            echo(res.line())
    return results


def write_results(path, results: list[CheckResult]):
    Path(path).write_text(json.dumps([r.as_dict() for r in results], indent=1, sort_keys=True))
