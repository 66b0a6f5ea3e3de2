"""Run execution, persistence, sweeps and aggregation.

Each run lives in ``<output_dir>/<run_id>/`` with ``config.cfg``, an
append-only ``metrics.csv``, ``record.json`` (rewritten atomically after every
epoch) and a ``checkpoints/`` directory.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import badgan, goodgan
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .datasets import (LabeledBatch, SSLSplit, batch_stream, dataset_spec, default_data_dir,
                       ZCAWhitener, download_dataset, load_dataset, make_synthetic,
                       representative_select, stratified_select, to_tensor, zca_fit)
from .density import (calibrate_epsilon, density_fit, pretrain_feature_classifier, save_density)
from .networks import build_classifier, build_generator, build_pair_discriminator

log = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "run_id", "epoch", "loss_supervised", "loss_unsupervised", "loss_g_fm", "loss_g_entropy",
    "loss_g_density", "loss_d_pair", "loss_c_reinforce", "loss_c_pseudo", "train_acc", "test_acc",
    "seconds", "loss_g_adv",
]


class RunExistsError(FileExistsError):
    pass


@dataclass
class RunRecord:
    run_id: str
    config: dict
    rows: list = field(default_factory=list)
    final_test_accuracy: Optional[float] = None
    artifacts: dict = field(default_factory=dict)
    status: str = "running"
    message: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def append(self, row: dict):
        if self.status == "completed":
            raise RuntimeError("completed records are immutable")
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("rows must be appended in increasing epoch order")
        self.rows.append(row)

    def series(self, column: str) -> list:
        return [r.get(column) for r in self.rows]


def load_record(path) -> RunRecord:
    path = Path(path)
    if path.is_dir():
        path = path / "record.json"
    return RunRecord.from_json(path.read_text())


def find_records(root) -> list[RunRecord]:
    return [load_record(p) for p in sorted(Path(root).rglob("record.json"))]


def _atomic_write(path: Path, text: str):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Data preparation


@dataclass
class PreparedData:
    split: SSLSplit
    spec: object
    whitener: Optional[object] = None


def _uses_zca(cfg: TrainConfig) -> bool:
    return cfg.data.zca == "on" or (cfg.data.zca == "auto" and cfg.experiment.dataset == "cifar10")


def prepare_data(cfg: TrainConfig) -> PreparedData:
    d = cfg.data
    name = cfg.experiment.dataset
    split_seed = 0 if d.fixed_split else cfg.train.seed
    if name.startswith("synthetic-"):
        spec = dataset_spec(name, num_classes=d.synthetic_classes, rasterize=d.rasterize)
        train = make_synthetic(name, d.synthetic_n_per_class, d.synthetic_noise, d.synthetic_seed,
                               spec.num_classes, d.rasterize)
        test = make_synthetic(name, d.synthetic_test_per_class, d.synthetic_noise, d.synthetic_seed + 1,
                              spec.num_classes, d.rasterize)
        validation = None
    else:
        spec = dataset_spec(name, d.split_sizes or None, d.reserve_validation)
        data_dir = default_data_dir(d.data_dir or None)
        if not data_dir:
            raise FileNotFoundError("no data directory: set data.data_dir or GANSSL_DATA_DIR")
        if d.allow_download:
            download_dataset(name, data_dir)
        loaded = load_dataset(spec, data_dir)
        train, test, validation = loaded.train, loaded.test, loaded.validation
    select = representative_select if d.selection == "representative" else stratified_select
    split = select(train, d.labeled_count, split_seed, spec.num_classes, test=test,
                   validation=validation if d.use_validation else None)
    whitener = zca_fit(train.images, d.zca_epsilon) if _uses_zca(cfg) else None
    return PreparedData(split, spec, whitener)


def build_networks(cfg: TrainConfig, spec, whitener=None) -> dict:
    m = cfg.model
    net_kw = dict(input_noise=m.input_noise, hidden_noise=m.hidden_noise, toy_hidden=tuple(m.toy_hidden))
    nets = {"classifier": build_classifier(spec, slope=m.lrelu_slope, whitener=whitener, **net_kw)}
    model = cfg.experiment.model
    if model in ("badgan", "goodgan"):
        nets["generator"] = build_generator(spec, conditional=model == "goodgan", z_dim=cfg.train.z_dim,
                                            toy_hidden=tuple(m.toy_hidden))
    if model == "goodgan":
        nets["discriminator"] = build_pair_discriminator(spec, slope=m.lrelu_slope, **net_kw)
    return nets


@torch.no_grad()
def evaluate_accuracy(classifier, batch: LabeledBatch, chunk: int = 500) -> float:
    """Percentage of correct argmax predictions, with stochastic layers off."""
    if len(batch) == 0:
        return float("nan")
    was_training = classifier.training
    classifier.eval()
    correct = 0
    for i in range(0, len(batch), chunk):
        x = to_tensor(batch.images[i:i + chunk])
        pred = classifier(x).logits.argmax(1).numpy()
        correct += int((pred == batch.labels[i:i + chunk]).sum())
    classifier.train(was_training)
    return 100.0 * correct / len(batch)


# ---------------------------------------------------------------------------
# Trainers


class Trainer:
    """Owns one run's networks, optimizers and per-step update."""

    def __init__(self, cfg: TrainConfig, data: PreparedData):
        self.cfg = cfg
        self.data = data
        self.nets = build_networks(cfg, data.spec, data.whitener)
        self.model = cfg.experiment.model
        o, lw = cfg.optim, cfg.loss
        if self.model == "badgan":
            self.bg_cfg = badgan.BadGanConfig(lw.fm_weight, lw.proxy_weight, lw.density_weight,
                                              o.lr, o.beta1, o.beta2)
            density, eps = self._fit_density() if lw.density_weight else (None, float("inf"))
            self.density = density
            self.state = badgan.BadGanState.create(self.nets["generator"], self.nets["classifier"],
                                                   self.bg_cfg, density, eps)
        elif self.model == "goodgan":
            self.gg_cfg = goodgan.GoodGanConfig(lw.alpha, lw.reinforce_weight, lw.pseudo_weight,
                                                cfg.train.warmup_threshold, lw.baseline_decay,
                                                lw.pseudo_pairs_as_real, o.lr, o.beta1, o.beta2)
            self.state = goodgan.GoodGanState.create(self.nets["generator"], self.nets["classifier"],
                                                     self.nets["discriminator"], self.gg_cfg)
        else:
            self.opt = torch.optim.Adam(self.nets["classifier"].parameters(), lr=o.lr,
                                        betas=(o.beta1, o.beta2))

    def _fit_density(self):
        dc = self.cfg.density
        split = self.data.split
        embedder = None
        if dc.kind == "kde-feature":
            fresh = copy.deepcopy(self.nets["classifier"])
            embedder = pretrain_feature_classifier(fresh, split.labeled.images, split.labeled.labels,
                                                   steps=dc.pretrain_steps, batch_size=self.cfg.train.batch_size,
                                                   lr=self.cfg.optim.lr, seed=self.cfg.train.seed)
        model = density_fit(split.unlabeled, dc.kind, dc.bandwidth or None, dc.max_reference,
                            self.cfg.train.seed, embedder)
        eps = calibrate_epsilon(model, split.unlabeled, dc.percentile)
        return model, eps

    def step(self, lab: LabeledBatch, unl: np.ndarray, epoch: int) -> dict:
        x_l, y_l = to_tensor(lab.images), torch.as_tensor(lab.labels)
        x_u = to_tensor(unl)
        if self.model == "badgan":
            out = badgan.badgan_train_step(self.state, x_l, y_l, x_u, self.bg_cfg)
            return {"loss_supervised": out.supervised, "loss_unsupervised": out.unsupervised,
                    "loss_g_fm": out.generator_fm, "loss_g_entropy": out.generator_entropy_proxy,
                    "loss_g_density": out.generator_density_penalty}
        if self.model == "goodgan":
            out = goodgan.goodgan_train_step(self.state, x_l, y_l, x_u, self.gg_cfg, epoch)
            return {"loss_supervised": out.c_supervised, "loss_d_pair": out.d_loss,
                    "loss_c_reinforce": out.c_adversarial_reinforce, "loss_c_pseudo": out.c_pseudo_pair,
                    "loss_g_adv": out.g_adversarial}
        c = self.nets["classifier"]
        c.train()
        loss = F.cross_entropy(c(x_l).logits, y_l)
        if not math.isfinite(loss.item()):
            raise badgan.NonFiniteLossError("non-finite supervised loss", {"loss_supervised": loss.item()})
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        return {"loss_supervised": loss.item()}

    def extra_state(self) -> dict:
        extra = {}
        if self.model == "goodgan":
            extra["reinforce"] = self.state.estimator.state_dict()
        if self.model == "badgan":
            extra["epsilon_log"] = self.state.epsilon_log
        return extra


# ---------------------------------------------------------------------------
# run_experiment


def _format_cell(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    if isinstance(value, float):
        return f"{value:.8g}"
    return str(value)


def _append_csv(path: Path, row: dict):
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(METRIC_COLUMNS)
        writer.writerow([_format_cell(row.get(c)) for c in METRIC_COLUMNS])
        fh.flush()
        os.fsync(fh.fileno())


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_dir_for(cfg: TrainConfig) -> Path:
    return Path(cfg.experiment.output_dir) / cfg.resolved_run_id()


def run_experiment(cfg: TrainConfig, force: bool = False, data: Optional[PreparedData] = None) -> RunRecord:
    """Train one configuration end to end and persist its record and artifacts.

    A completed run with the same id is returned as-is unless ``force``; any
    other existing run directory is an error unless ``force``.
    """
    cfg.validate()
    run_id = cfg.resolved_run_id()
    out = run_dir_for(cfg)
    record_path = out / "record.json"
    if record_path.exists() and not force:
        existing = load_record(record_path)
        if existing.status == "completed":
            return existing
        raise RunExistsError(f"{out} holds a {existing.status} run; pass force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    if metrics_path.exists():
        metrics_path.unlink()
    (out / "config.cfg").write_text(cfg.dumps())

    torch.manual_seed(cfg.train.seed)
    record = RunRecord(run_id, cfg.to_dict())
    record.artifacts["metrics"] = "metrics.csv"
    record.artifacts["config"] = "config.cfg"
    t = cfg.train
    try:
        data = data or prepare_data(cfg)
        trainer = Trainer(cfg, data)
        if getattr(trainer, "density", None) is not None:
            save_density(out / "density.ckpt", trainer.density)
            record.artifacts["density"] = "density.ckpt"
        split = data.split
        if len(split.unlabeled) < t.batch_size:
            raise ValueError(f"{len(split.unlabeled)} unlabeled examples cannot fill a batch of {t.batch_size}")
        for epoch in range(t.epochs):
            start = time.perf_counter()
            sums: dict = {}
            stream = batch_stream(split, t.batch_size, t.seed, epoch)
            for lab, unl in stream:
                for key, value in trainer.step(lab, unl, epoch).items():
                    sums[key] = sums.get(key, 0.0) + value
            row = {"run_id": run_id, "epoch": epoch + 1}
            row.update({k: v / len(stream) for k, v in sums.items()})
            row["train_acc"] = evaluate_accuracy(trainer.nets["classifier"], split.labeled)
            last = epoch + 1 == t.epochs
            if last or (epoch + 1) % t.eval_interval == 0:
                row["test_acc"] = evaluate_accuracy(trainer.nets["classifier"], split.test)
            row["seconds"] = time.perf_counter() - start
            record.append(row)
            _append_csv(metrics_path, row)
            if t.checkpoint_interval and (epoch + 1) % t.checkpoint_interval == 0 and not last:
                name = f"checkpoints/epoch_{epoch + 1:04d}.ckpt"
                save_checkpoint(out / name, trainer.nets, epoch + 1, t.seed, trainer.extra_state())
                record.artifacts.setdefault("checkpoints", []).append(name)
            _atomic_write(record_path, record.to_json())
        save_checkpoint(out / "checkpoints/final.ckpt", trainer.nets, t.epochs, t.seed, trainer.extra_state())
        record.artifacts["final_checkpoint"] = "checkpoints/final.ckpt"
        record.artifacts.update(_emit_run_images(cfg, trainer, out))
        record.final_test_accuracy = record.rows[-1]["test_acc"]
        record.status = "completed"
    except badgan.NonFiniteLossError as err:
        record.status = "aborted"
        record.message = f"{err}; last losses: {err.losses}"
        log.error("run %s aborted: %s", run_id, record.message)
    _atomic_write(record_path, record.to_json())
    return record


def _emit_run_images(cfg: TrainConfig, trainer: Trainer, out: Path) -> dict:
    if cfg.experiment.dataset.startswith("synthetic-") and not cfg.data.rasterize:
        return {}
    g = trainer.nets.get("generator")
    if g is None:
        return {}
    gen = torch.Generator().manual_seed(cfg.train.seed)
    artifacts = {}
    if g.conditional:
        classes = list(range(g.num_classes))
        latents = torch.rand(10, g.z_dim, generator=gen)
        goodgan.save_png(out / "conditional_grid.png", goodgan.conditional_grid(g, classes, latents))
        z1, z2 = torch.rand(2, g.z_dim, generator=gen)
        goodgan.save_png(out / "interpolation_grid.png", goodgan.interpolation_grid(g, z1, z2, 10, classes))
        artifacts.update(conditional_grid="conditional_grid.png", interpolation_grid="interpolation_grid.png")
    else:
        latents = torch.rand(100, g.z_dim, generator=gen)
        goodgan.save_png(out / "samples.png", goodgan.unconditional_grid(g, latents, 10))
        artifacts["samples"] = "samples.png"
    return artifacts


def load_run_networks(run_dir, checkpoint: str = "checkpoints/final.ckpt") -> tuple[TrainConfig, dict]:
    """Rebuild a run's networks and load a checkpoint into them."""
    record = load_record(run_dir)
    cfg = record.train_config
    spec = _spec_for(cfg)
    whitener = None
    if _uses_zca(cfg):
        # the whitening buffers are part of the checkpoint; a placeholder of the right size suffices
        dim = spec.flat_dim
        whitener = ZCAWhitener(np.zeros(dim), np.eye(dim), cfg.data.zca_epsilon, spec.image_shape)
    nets = build_networks(cfg, spec, whitener)
    load_checkpoint(Path(run_dir) / checkpoint, nets)
    return cfg, nets


def _spec_for(cfg: TrainConfig):
    d = cfg.data
    if cfg.experiment.dataset.startswith("synthetic-"):
        return dataset_spec(cfg.experiment.dataset, num_classes=d.synthetic_classes, rasterize=d.rasterize)
    return dataset_spec(cfg.experiment.dataset, d.split_sizes or None, d.reserve_validation)


# ---------------------------------------------------------------------------
# Sweeps and aggregation


@dataclass
class SweepSpec:
    base: TrainConfig
    axis: str
    values: Sequence
    seeds: Sequence[int]

    def __post_init__(self):
        if self.axis not in ("labeled_count", "batch_size"):
            raise ValueError(f"unsupported sweep axis {self.axis!r}")
        if not self.values or not self.seeds:
            raise ValueError("sweep needs at least one value and one seed")

    @property
    def axis_key(self) -> str:
        return "data.labeled_count" if self.axis == "labeled_count" else "train.batch_size"

    def cells(self) -> list[TrainConfig]:
        return [self.base.with_values({self.axis_key: v, "train.seed": s})
                for v in self.values for s in self.seeds]

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "SweepSpec":
        s = cfg.sweep
        return cls(cfg, s.axis, list(s.values), list(s.seeds))


@dataclass
class Aggregate:
    mean: float
    std: float
    count: int

    def format(self) -> str:
        return f"{self.mean:.2f}±{self.std:.2f}%"


def aggregate(records: Iterable) -> Aggregate:
    """Sample mean and (n-1)-denominator std of final test accuracy over completed records.

    Plain numbers are accepted in place of records.
    """
    values = []
    for r in records:
        if isinstance(r, RunRecord):
            if r.status == "completed" and r.final_test_accuracy is not None:
                values.append(float(r.final_test_accuracy))
        else:
            values.append(float(r))
    if not values:
        raise ValueError("no completed records to aggregate")
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return Aggregate(statistics.fmean(values), std, len(values))


def _run_cell(args):
    cfg_dict, force = args
    torch.set_num_threads(1)
    return run_experiment(TrainConfig.from_dict(cfg_dict).validate(), force=force).to_json()


def run_sweep(spec: SweepSpec, parallel: int = 1, force: bool = False, out_dir=None) -> dict:
    """Run every grid cell and write ``summary.csv`` / ``summary.md``.

    Returns ``{"records": [...], "rows": [...], "dir": Path}``; each row holds the
    axis value, the formatted aggregate and the aborted-cell count.
    """
    cells = spec.cells()
    jobs = [(c.to_dict(), force) for c in cells]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            records = [RunRecord.from_json(t) for t in pool.map(_run_cell, jobs)]
    else:
        records = [run_experiment(c, force=force) for c in cells]
    name = spec.base.sweep.name or f"{spec.base.experiment.model}_{spec.base.experiment.dataset}_{spec.axis}"
    out = Path(out_dir or Path(spec.base.experiment.output_dir) / "sweeps" / name)
    out.mkdir(parents=True, exist_ok=True)
    rows = summarize(records, spec.axis_key, spec.values)
    write_summary(out, rows, spec.axis)
    (out / "runs.txt").write_text("".join(f"{r.run_id}\n" for r in records))
    return {"records": records, "rows": rows, "dir": out}


def summarize(records: Sequence[RunRecord], axis_key: str, values: Sequence) -> list[dict]:
    rows = []
    for value in values:
        group = [r for r in records if r.train_config.get(axis_key) == value]
        done = [r for r in group if r.status == "completed"]
        aborted = len(group) - len(done)
        row = {"value": value, "count": len(done), "aborted": aborted, "mean": "", "std": "", "cell": "aborted"}
        if done:
            agg = aggregate(done)
            row.update(mean=f"{agg.mean:.4f}", std=f"{agg.std:.4f}", cell=agg.format())
            if agg.count == 1:
                row["cell"] += " (n=1)"
        if aborted:
            row["cell"] += f" [{aborted} aborted]"
        rows.append(row)
    return rows


def write_summary(out: Path, rows: list[dict], axis: str):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([axis, "mean", "std", "count", "aborted", "formatted"])
    for r in rows:
        writer.writerow([r["value"], r["mean"], r["std"], r["count"], r["aborted"], r["cell"]])
    (out / "summary.csv").write_text(buf.getvalue())
    header = "| " + axis + " | " + " | ".join(str(r["value"]) for r in rows) + " |"
    sep = "|" + "---|" * (len(rows) + 1)
    body = "| test accuracy | " + " | ".join(r["cell"] for r in rows) + " |"
    (out / "summary.md").write_text("\n".join([header, sep, body, ""]))


# ---------------------------------------------------------------------------
# Curves


def _group_by(records, axis_key):
    groups: dict = {}
    for r in records:
        groups.setdefault(r.train_config.get(axis_key), []).append(r)
    return dict(sorted(groups.items(), key=lambda kv: kv[0]))


def _series_table(records, axis_key, column, max_epoch=None, smooth=False):
    groups = _group_by(records, axis_key)
    notes = []
    series = {}
    for value, group in groups.items():
        per_epoch: dict = {}
        for r in group:
            for row in r.rows:
                v = row.get(column)
                if v is None or v == "" or (isinstance(v, float) and math.isnan(v)):
                    continue
                per_epoch.setdefault(row["epoch"], []).append(float(v))
        if not per_epoch:
            notes.append(f"no {column} values for {axis_key}={value}; series skipped")
            continue
        curve = {e: statistics.fmean(vs) for e, vs in sorted(per_epoch.items())}
        if smooth:
            best = -math.inf
            for e in curve:
                best = max(best, curve[e])
                curve[e] = best
        series[value] = curve
    epochs = sorted({e for curve in series.values() for e in curve})
    if max_epoch is not None:
        epochs = [e for e in epochs if e <= max_epoch]
    return series, epochs, notes


def _write_curves(path, series, epochs, axis, notes):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch"] + [f"{axis}={v}" for v in series])
    for e in epochs:
        writer.writerow([e] + [_format_cell(series[v].get(e)) for v in series])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    for note in notes:
        log.warning(note)
    return path


def _render(path, series, epochs, ylabel, axis):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for value, curve in series.items():
        xs = [e for e in epochs if e in curve]
        ax.plot(xs, [curve[e] for e in xs], label=f"{axis}={value}")
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def emit_loss_curves(records, path, axis: str = "batch_size", column: str = "loss_g_fm",
                     render: bool = False, max_epoch=None):
    """Per-epoch mean of ``column`` over seeds, one CSV column per axis value."""
    axis_key = "data.labeled_count" if axis == "labeled_count" else "train.batch_size"
    series, epochs, notes = _series_table(records, axis_key, column, max_epoch)
    out = _write_curves(path, series, epochs, axis, notes)
    if render:
        _render(Path(path).with_suffix(".png"), series, epochs, column, axis)
    return out


def emit_accuracy_curves(records, path, axis: str = "batch_size", max_epoch=None, smooth: bool = False,
                         render: bool = False):
    """Test accuracy per evaluated epoch for each axis value; cells are blank where not evaluated."""
    axis_key = "data.labeled_count" if axis == "labeled_count" else "train.batch_size"
    series, epochs, notes = _series_table(records, axis_key, "test_acc", max_epoch, smooth)
    out = _write_curves(path, series, epochs, axis, notes)
    if render:
        _render(Path(path).with_suffix(".png"), series, epochs, "test accuracy (%)", axis)
    return out


def final_stage_mean(record: RunRecord, column: str, last: int = 10) -> float:
    values = [float(r[column]) for r in record.rows[-last:] if r.get(column) not in (None, "")]
    return statistics.fmean(values)
