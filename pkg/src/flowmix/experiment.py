"""Glue between configs, datasets, models and training loops."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import (ExperimentConfig, MnistData, PinwheelData, TwoCirclesData)
from .datasets import LabeledDataset, gen_pinwheel, gen_two_circles, load_mnist_idx
from .errors import FlowmixError
from .mixture import (EpochMetrics, MixtureModel, TemperatureSchedule, pretrain_supervised,
                      train_semisupervised, train_unsupervised)
from .nn import Adam

DATA_DIR_ENV = "FLOWMIX_DATA_DIR"
METRIC_COLUMNS = ["epoch", "phase", "elbo", "recon", "prior", "entropy", "temperature",
                  "sup_nll", "ce"]


def data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "."))


def _resolve(path: str) -> Path:
    p = Path(path)
    if not p.is_absolute():
        p = data_dir() / p
    if not p.exists() and p.with_name(p.name + ".gz").exists():
        p = p.with_name(p.name + ".gz")
    if not p.exists():
        raise FlowmixError(f"dataset file {p} not found (set {DATA_DIR_ENV})")
    return p


def seeds(cfg_seed: int) -> dict[str, np.random.SeedSequence]:
    data, init, train, labeled = np.random.SeedSequence(cfg_seed).spawn(4)
    return {"data": data, "init": init, "train": train, "labeled": labeled}


def load_dataset(block, seed) -> LabeledDataset:
    """Materialize a dataset block; ``block.seed`` overrides ``seed`` when set."""
    if block.seed is not None:
        seed = block.seed
    if isinstance(block, PinwheelData):
        return gen_pinwheel(block.n_per_class, block.classes, seed, block.radial_std,
                            block.tangential_std, block.rate)
    if isinstance(block, TwoCirclesData):
        return gen_two_circles(block.n_per_class, seed, block.radii, block.noise_std)
    if isinstance(block, MnistData):
        return load_mnist_idx(_resolve(block.images), _resolve(block.labels), block.digits,
                              seed, block.limit, block.dequantize, block.logit)
    raise FlowmixError(f"unknown dataset {block!r}")


def labeled_subset(block, data: LabeledDataset, per_class: int, seed) -> LabeledDataset:
    """Labeled examples for semi-supervised runs.

    Synthetic sets draw a fresh sample of ``per_class`` points per class;
    file-backed sets take the first ``per_class`` examples of each class.
    """
    if isinstance(block, PinwheelData):
        return gen_pinwheel(per_class, block.classes, seed, block.radial_std,
                            block.tangential_std, block.rate)
    if isinstance(block, TwoCirclesData):
        return gen_two_circles(per_class, seed, block.radii, block.noise_std)
    idx = np.concatenate([np.flatnonzero(data.labels == c)[:per_class]
                          for c in range(data.n_classes)])
    return data.subset(np.sort(idx))


def layer_specs(cfg: ExperimentConfig) -> list[dict]:
    return [spec.model_dump() for spec in cfg.model.flow]


def build_model(cfg: ExperimentConfig, dim: int, rng: np.random.Generator) -> MixtureModel:
    return MixtureModel.build(dim, cfg.model.components, layer_specs(cfg),
                              cfg.model.posterior_hidden, rng,
                              posterior_gain=cfg.model.posterior_init_gain)


def make_optimizer(cfg: ExperimentConfig, model: MixtureModel) -> Adam:
    return Adam(model.params, lr=cfg.training.learning_rate,
                weight_decay=cfg.training.weight_decay)


def make_schedule(cfg: ExperimentConfig) -> TemperatureSchedule:
    t = cfg.training.temperature
    if t.decay is not None:
        return TemperatureSchedule(t.t0, t.t_min, t.decay)
    tr = cfg.training
    unsup = tr.epochs if tr.mode == "unsupervised" else tr.epochs * tr.unsupervised_per_round
    return TemperatureSchedule.reaching_floor(unsup, t.t0, t.t_min, t.floor_fraction)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


class MetricsWriter:
    """Deterministic per-epoch CSV plus a ``.timing.csv`` sidecar with wall time."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.timing_path = self.path.with_suffix(".timing.csv")
        self._fh = open(self.path, "w", newline="")
        self._th = open(self.timing_path, "w", newline="")
        self._w, self._t = csv.writer(self._fh), csv.writer(self._th)
        self._w.writerow(METRIC_COLUMNS)
        self._t.writerow(["epoch", "phase", "seconds"])

    def __call__(self, m: EpochMetrics) -> None:
        self._w.writerow([_fmt(v) for v in (m.epoch, m.phase, m.elbo, m.reconstruction, m.prior,
                                             m.entropy, m.temperature, m.supervised_nll,
                                             m.cross_entropy)])
        self._t.writerow([m.epoch, m.phase, f"{m.seconds:.6f}"])
        self._fh.flush()
        self._th.flush()

    def close(self) -> None:
        self._fh.close()
        self._th.close()


@dataclass
class RunResult:
    model: MixtureModel
    optimizer: Adam
    data: LabeledDataset
    metrics: list[EpochMetrics] = field(default_factory=list)
    rng: np.random.Generator | None = None
    labeled: LabeledDataset | None = None


def train(cfg: ExperimentConfig, callback=None, data: LabeledDataset | None = None) -> RunResult:
    """Build everything from ``cfg`` and run the configured training mode in memory."""
    s = seeds(cfg.seed)
    if data is None:
        data = load_dataset(cfg.dataset, s["data"])
    model = build_model(cfg, data.dim, np.random.default_rng(s["init"]))
    opt = make_optimizer(cfg, model)
    rng = np.random.default_rng(s["train"])
    schedule = make_schedule(cfg)
    tr = cfg.training
    bs = min(tr.batch_size, len(data))
    result = RunResult(model, opt, data, rng=rng)

    def record(m: EpochMetrics) -> None:
        result.metrics.append(m)
        if callback:
            callback(m)

    if tr.mode == "unsupervised":
        train_unsupervised(model, data.points, opt, schedule, tr.epochs, bs, rng, callback=record)
    else:
        labeled = labeled_subset(cfg.dataset, data, tr.labeled_per_class, s["labeled"])
        result.labeled = labeled
        lbs = min(tr.batch_size, len(labeled))
        pretrain_supervised(model, labeled.points, labeled.labels, opt, tr.pretrain_epochs, rng,
                            lbs, callback=record)
        train_semisupervised(model, labeled.points, labeled.labels, data.points, opt, schedule,
                             tr.epochs, rng, bs, tr.supervised_per_round,
                             tr.unsupervised_per_round, callback=record)
    model.eval()
    return result


def run(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> RunResult:
    """Train and write the metrics CSV and the final checkpoint under the output dir."""
    out = Path(out_dir if out_dir is not None else cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    writer = MetricsWriter(out / cfg.output.metrics)
    try:
        result = train(cfg, writer)
    finally:
        writer.close()
    epochs = len({(m.phase, m.epoch) for m in result.metrics})
    checkpoint.save(out / cfg.output.checkpoint, cfg, result.model, result.optimizer,
                    epoch=epochs, rng=result.rng)
    return result
