"""Alternating k-means pseudo-labelling and classification training.

Each epoch:

1. pool dense features of every subject over its lung mask with the
   network frozen,
2. standardize, PCA-reduce and l2-normalize those vectors,
3. run k-means to get one pseudo-label per subject,
4. re-draw the head from a seed derived from ``(head seed, epoch)``,
5. train network and head together on the pseudo-labels with momentum SGD.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .clustering import KMeansModel, kmeans, preprocess, pseudo_labels
from .evaluation import MetricsReport, davies_bouldin, matched_accuracy, silhouette
from .nn import (FeatureNet, Head, baseline_topology, derive_seed, feature_mask,
                 head_backward, head_reset_seed, init_head, init_random, masked_avg_pool,
                 masked_avg_pool_backward, proposed_topology, save_checkpoint, sgd_step,
                 softmax_xent)
from .nn.network import Topology
from .volume import Dataset, check_divisible

log = logging.getLogger(__name__)

LOSS_TOLERANCE = 1e-6
EXTRACT_BATCH = 8


class ConfigError(ValueError):
    pass


@dataclass
class Seeds:
    net: int = 0
    head: int = 1
    kmeans: int = 2
    sampler: int = 3


@dataclass
class TrainConfig:
    epochs: int = 15
    classifier_steps_per_epoch: Optional[int] = None
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 4
    pca_dim: Optional[int] = None
    k: int = 6
    seeds: Seeds = field(default_factory=Seeds)
    variant: str = "proposed"
    uniform_sampling: bool = True
    base_filters: Optional[int] = None
    levels: Optional[int] = None
    skip_connections: bool = True
    relu_features: bool = True
    standardize: bool = True
    l2_normalize: bool = True
    whiten: bool = False

    def __post_init__(self):
        if isinstance(self.seeds, dict):
            self.seeds = Seeds(**self.seeds)
        problems = []
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.k < 2:
            problems.append("k must be >= 2")
        if not self.learning_rate > 0:
            problems.append("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            problems.append("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.classifier_steps_per_epoch is not None and self.classifier_steps_per_epoch < 0:
            problems.append("classifier_steps_per_epoch must be >= 0")
        if self.variant not in ("proposed", "baseline"):
            problems.append(f"variant must be 'proposed' or 'baseline', got {self.variant!r}")
        if problems:
            raise ConfigError("; ".join(problems))

    def topology(self) -> Topology:
        if self.variant == "proposed":
            return proposed_topology(self.base_filters or 8, self.levels or 3,
                                     self.skip_connections, self.relu_features)
        return baseline_topology(self.base_filters or 16, self.levels or 4,
                                 relu_features=self.relu_features)

    def steps_for(self, n: int) -> int:
        if self.classifier_steps_per_epoch is not None:
            return self.classifier_steps_per_epoch
        return math.ceil(n / self.batch_size) * 3

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict, source: str = "config") -> "TrainConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"{source}: top level must be a JSON object")
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in known:
                raise ConfigError(f"{source}: unknown config key {key!r}")
            if key == "seeds":
                kwargs[key] = _parse_seeds(value, source)
            else:
                kwargs[key] = _check_type(key, value, known[key].type, source)
        try:
            return cls(**kwargs)
        except ConfigError as e:
            raise ConfigError(f"{source}: {e}") from None


_TYPES = {"int": (int,), "float": (int, float), "bool": (bool,), "str": (str,)}


def _check_type(key, value, annotation, source):
    ann = str(annotation)
    optional = ann.startswith("Optional[")
    base = ann[len("Optional["):-1] if optional else ann
    if value is None and optional:
        return None
    ok = _TYPES.get(base, (object,))
    if isinstance(value, bool) and base != "bool":
        ok = ()
    if not isinstance(value, ok):
        raise ConfigError(f"{source}: field {key!r} expects {base}, got {value!r}")
    return float(value) if base == "float" else value


def _parse_seeds(value, source):
    if not isinstance(value, dict):
        raise ConfigError(f"{source}: field 'seeds' must be an object")
    names = {f.name for f in dataclasses.fields(Seeds)}
    for key, v in value.items():
        if key not in names:
            raise ConfigError(f"{source}: unknown config key 'seeds.{key}'")
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{source}: field 'seeds.{key}' expects int, got {v!r}")
    return Seeds(**value)


def load_config(path) -> TrainConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    return TrainConfig.from_dict(data, source=str(path))


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    inertia: float
    histogram: tuple[int, ...]
    loss_start: float
    loss_end: float
    label_change: float
    flagged: bool = False

    CSV_FIELDS = ("epoch", "inertia", "histogram", "loss_start", "loss_end",
                  "label_change", "flagged")

    def csv_row(self) -> list[str]:
        return [str(self.epoch), f"{self.inertia:.10g}", ";".join(map(str, self.histogram)),
                f"{self.loss_start:.10g}", f"{self.loss_end:.10g}",
                f"{self.label_change:.10g}", str(int(self.flagged))]


# ---------------------------------------------------------------------------
# building blocks

def _stacked(dataset: Dataset, topology: Topology):
    x, m = dataset.stack()
    check_divisible(x.shape[1:], topology.factor)
    return x, feature_mask(topology, m)


def pooled_features(net: FeatureNet, x, fmask, batch: int = EXTRACT_BATCH) -> np.ndarray:
    rows = [masked_avg_pool(net.forward(x[i:i + batch]), fmask[i:i + batch])
            for i in range(0, len(x), batch)]
    return np.concatenate(rows).astype(np.float64)


def extract_features(net: FeatureNet, dataset: Dataset) -> np.ndarray:
    """``(N, F)`` lung-pooled dense features; the network is only read."""
    x, fmask = _stacked(dataset, net.topology)
    return pooled_features(net, x, fmask)


def cluster(features, k: int, seed: int, config: TrainConfig | None = None):
    """Preprocess pooled features and run k-means. Returns (reduced, model)."""
    cfg = config or TrainConfig(k=k)
    reduced, _ = preprocess(features, cfg.pca_dim, scale=cfg.standardize,
                            l2_normalize=cfg.l2_normalize, whiten=cfg.whiten)
    return reduced, kmeans(reduced, k, seed=seed)


def dataset_loss(head: Head, pooled, labels, balanced: bool = False) -> float:
    """Mean loss over the whole dataset.

    ``balanced`` weights every pseudo-class equally, which is the objective
    uniform class sampling optimizes in expectation.
    """
    logits = head(np.asarray(pooled, dtype=head.weight.dtype))
    labels = np.asarray(labels)
    if not balanced:
        return softmax_xent(logits, labels)[0]
    classes = np.unique(labels)
    return float(np.mean([softmax_xent(logits[labels == c], labels[labels == c])[0]
                          for c in classes]))


def sample_batches(labels, steps: int, batch_size: int, rng, uniform: bool) -> list[np.ndarray]:
    """Index batches for the classifier phase.

    With ``uniform`` each slot first draws a pseudo-class uniformly, then a
    member of it. Otherwise batches walk through reshuffled passes.
    """
    labels = np.asarray(labels)
    n = len(labels)
    batches = []
    if uniform:
        groups = [np.flatnonzero(labels == c) for c in np.unique(labels)]
        for _ in range(steps):
            cls = rng.integers(len(groups), size=batch_size)
            batches.append(np.array([groups[c][rng.integers(len(groups[c]))] for c in cls]))
        return batches
    order = np.empty(0, dtype=np.int64)
    for _ in range(steps):
        if len(order) < batch_size:
            order = np.concatenate([order, rng.permutation(n)])
        batches.append(order[:batch_size])
        order = order[batch_size:]
    return batches


def train_step(net: FeatureNet, head: Head, x, fmask, labels, lr, momentum,
               net_velocity: dict, head_velocity: dict) -> float:
    """One SGD step on a batch for both the network and the head."""
    tape = []
    feats = net.forward(x, tape)
    pooled = masked_avg_pool(feats, fmask)
    loss, g_logits = softmax_xent(head(pooled), labels)
    g_pooled, g_w, g_b = head_backward(head.weight, pooled, g_logits)
    net_grads = net.backward(tape, masked_avg_pool_backward(g_pooled, fmask, feats.dtype))
    sgd_step(net.params, net_grads, lr, momentum, net_velocity)
    sgd_step(head.params, {"head.weight": g_w, "head.bias": g_b}, lr, momentum, head_velocity)
    return loss


def label_change(labels, prev_labels, k: int) -> float:
    """Fraction of subjects whose label changed, under the best relabelling."""
    if prev_labels is None:
        return 1.0
    return 1.0 - matched_accuracy(labels, prev_labels, k)


def run_epoch(net: FeatureNet, head: Head | None, dataset: Dataset, config: TrainConfig,
              prev_labels=None, epoch: int = 1, features=None, _stack=None):
    """One full epoch. ``net`` is trained in place.

    ``head`` is discarded: a fresh head is drawn for this epoch. Pass
    ``features`` to reuse pooled features already extracted with the
    current parameters. Returns ``(log, labels, head, end_features)``.
    """
    x, fmask = _stack if _stack is not None else _stacked(dataset, net.topology)
    if features is None:
        features = pooled_features(net, x, fmask)
    _, km = cluster(features, config.k, derive_seed(config.seeds.kmeans, epoch), config)
    labels = pseudo_labels(km)

    head = init_head(net.topology.out_channels, config.k,
                     head_reset_seed(config.seeds.head, epoch), dtype=net.dtype)
    loss_start = dataset_loss(head, features, labels, config.uniform_sampling)

    rng = np.random.default_rng(derive_seed(config.seeds.sampler, epoch))
    batches = sample_batches(labels, config.steps_for(len(labels)), config.batch_size,
                             rng, config.uniform_sampling)
    net_velocity, head_velocity = {}, {}
    for idx in batches:
        train_step(net, head, x[idx], fmask[idx], labels[idx], config.learning_rate,
                   config.momentum, net_velocity, head_velocity)

    end_features = pooled_features(net, x, fmask)
    loss_end = dataset_loss(head, end_features, labels, config.uniform_sampling)
    flagged = loss_end > loss_start + LOSS_TOLERANCE
    if flagged:
        log.warning("epoch %d: classification loss rose %.6g -> %.6g", epoch, loss_start, loss_end)
    entry = EpochLog(
        epoch=epoch,
        inertia=km.inertia,
        histogram=tuple(int(c) for c in np.bincount(labels, minlength=config.k)),
        loss_start=loss_start,
        loss_end=loss_end,
        label_change=label_change(labels, prev_labels, config.k),
        flagged=flagged,
    )
    return entry, labels, head, end_features


def initial_models(config: TrainConfig):
    topo = config.topology()
    net = init_random(topo, config.seeds.net)
    head = init_head(topo.out_channels, config.k, head_reset_seed(config.seeds.head, 0))
    return net, head


def checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:03d}"


def write_epoch_csv(path, logs) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EpochLog.CSV_FIELDS)
        for entry in logs:
            w.writerow(entry.csv_row())


def train(config: TrainConfig, dataset: Dataset, out_dir=None, callback=None):
    """Run ``config.epochs`` epochs from a fresh random initialisation.

    With ``out_dir`` a checkpoint is written before training and after
    every epoch, and ``epochs.csv`` is rewritten after every epoch.
    Returns ``(net, head, logs)``.
    """
    net, head = initial_models(config)
    seeds = dataclasses.asdict(config.seeds)
    ckpt_dir = Path(out_dir) / "checkpoints" if out_dir is not None else None
    if ckpt_dir is not None:
        save_checkpoint(ckpt_dir / checkpoint_name(0), net, head, epoch=0, seeds=seeds)
        write_epoch_csv(Path(out_dir) / "epochs.csv", [])
    stack = _stacked(dataset, net.topology)
    logs = []
    labels = None
    features = None
    for epoch in range(1, config.epochs + 1):
        entry, labels, head, features = run_epoch(net, head, dataset, config, labels, epoch,
                                                  features=features, _stack=stack)
        logs.append(entry)
        log.info("epoch %d inertia %.4f loss %.4f -> %.4f change %.3f", epoch, entry.inertia,
                 entry.loss_start, entry.loss_end, entry.label_change)
        if ckpt_dir is not None:
            save_checkpoint(ckpt_dir / checkpoint_name(epoch), net, head, epoch=epoch, seeds=seeds)
            write_epoch_csv(Path(out_dir) / "epochs.csv", logs)
        if callback is not None:
            callback(entry, net, head)
    return net, head, logs


# ---------------------------------------------------------------------------
# evaluation of a trained network

@dataclass(frozen=True)
class Evaluation:
    report: MetricsReport
    raw_report: MetricsReport
    labels: np.ndarray
    reduced: np.ndarray
    features: np.ndarray


def evaluate(net: FeatureNet, dataset: Dataset, k: int, method: str, seed: int = 0,
             config: TrainConfig | None = None) -> Evaluation:
    """Cluster ``dataset`` with the frozen network and score against truth.

    The main report scores the reduced space k-means saw; ``raw_report``
    scores the same assignment on the raw pooled features.
    """
    features = extract_features(net, dataset)
    reduced, km = cluster(features, k, seed, config or TrainConfig(k=k))
    pred = km.assignments
    truth = dataset.true_classes()
    kk = int(max(pred.max(), truth.max())) + 1
    acc = matched_accuracy(pred, truth, kk)
    rep = MetricsReport(method, acc, silhouette(reduced, pred), davies_bouldin(reduced, pred))
    raw = MetricsReport(method, acc, silhouette(features, pred), davies_bouldin(features, pred))
    return Evaluation(rep, raw, pred, reduced, features)
