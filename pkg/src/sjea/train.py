"""Pretraining driver plus frozen-encoder evaluation.

pretrain owns the run artifacts: a per-epoch metrics CSV and a rolling
checkpoint.  Evaluation (linear probe, k-NN, collapse diagnostics, embedding
export) operates on frozen models in eval mode and never mutates encoder or
projector parameters.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from .augment import TransformConfig, sample_views
from .checkpoint import collect_state, load_checkpoint, restore_state, save_checkpoint
from .config import (
    config_strings,
    loss_weights_from,
    model_pieces_from,
    resolve_config,
    stack_weights_from,
)
from .data import Dataset, SplitDatasets, load_cifar10, load_stl10, synth_dataset
from .errors import ContractViolation, SjeaError, TrainingDivergence
from .losses import LossBreakdown
from .model import SJEAModel, build_sjea, train_step
from .optim import Adam, cosine_lr
from .tensor import Tape, Tensor, add, log, matmul, mul, sub, tmax, tmean, transpose, tsum
from .tensor import exp as texp

__all__ = [
    "METRICS_HEADER", "MetricsRow", "PretrainResult", "run_rngs",
    "load_dataset", "transform_for", "build_from_config", "pretrain",
    "encode_dataset", "probe_features", "linear_probe", "knn_classify",
    "knn_eval", "collapse_metrics", "export_embeddings", "read_embeddings",
]

METRICS_HEADER = "epoch,total,s0,v0,c0,s1,v1,c1,lr,seconds"
CHECKPOINT_NAME = "checkpoint.bin"


def _fmt(value: float) -> str:
    return "%.9g" % value


@dataclass
class MetricsRow:
    """One pretraining epoch: loss parts per stack, lr, optional wall time."""
    epoch: int
    breakdown: LossBreakdown
    lr: float
    seconds: float | None

    def csv_fields(self) -> list[str]:
        cells = [str(self.epoch), _fmt(self.breakdown.total)]
        for k in range(2):
            if k < self.breakdown.num_stacks:
                cells += [_fmt(self.breakdown.s[k]), _fmt(self.breakdown.v[k]),
                          _fmt(self.breakdown.c[k])]
            else:
                cells += ["", "", ""]
        cells.append(_fmt(self.lr))
        cells.append("" if self.seconds is None else "%.3f" % self.seconds)
        return cells


@dataclass
class PretrainResult:
    model: SJEAModel
    optimizer: Adam
    rows: list[MetricsRow]
    checkpoint_path: str
    aborted: bool = False
    diagnostics: dict = field(default_factory=dict)


def run_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent streams for parameter init and for the training run."""
    build_seq, run_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(build_seq), np.random.default_rng(run_seq)


def load_dataset(cfg: dict) -> SplitDatasets:
    name = cfg["dataset.name"]
    if name == "cifar10":
        return load_cifar10(cfg["dataset.dir"])
    if name == "stl10":
        return load_stl10(cfg["dataset.dir"])
    train = synth_dataset(cfg["dataset.classes"], cfg["dataset.per_class"],
                          size=cfg["dataset.size"], seed=cfg["seed"])
    held = synth_dataset(cfg["dataset.classes"], cfg["dataset.test_per_class"],
                         size=cfg["dataset.size"], seed=cfg["seed"] + 1)
    test = Dataset(held.images, held.labels, "test", train.channel_stats,
                   num_classes=held.num_classes)
    return SplitDatasets(train, test)


def transform_for(cfg: dict, dataset: Dataset) -> TransformConfig:
    mean, std = dataset.channel_stats
    h, w = dataset.images.shape[2], dataset.images.shape[3]
    return TransformConfig(
        crop_scale_range=(cfg["augment.crop_min"], 1.0),
        jitter_prob=cfg["augment.jitter_prob"],
        grayscale_prob=cfg["augment.grayscale_prob"],
        output_size=(h, w),
        norm_mean=tuple(float(v) for v in mean),
        norm_std=tuple(float(v) for v in std),
    )


def build_from_config(cfg: dict, rng: np.random.Generator) -> tuple[SJEAModel, Adam]:
    spec, enc_cfgs, proj_dims = model_pieces_from(cfg)
    model = build_sjea(spec, enc_cfgs, proj_dims, rng)
    optimizer = Adam(model.named_parameters(), lr=cfg["optim.lr"],
                     betas=(cfg["optim.beta1"], cfg["optim.beta2"]),
                     weight_decay=cfg["optim.weight_decay"])
    return model, optimizer


def _epoch_seconds(deterministic: bool, started: float) -> float | None:
    # wall time is inherently non-reproducible, so deterministic runs blank it
    return None if deterministic else time.monotonic() - started


def pretrain(cfg: dict, splits: SplitDatasets, out_dir: str,
             resume_from: str | None = None,
             stop_after: int | None = None) -> PretrainResult:
    """Train per config, logging one metrics row per epoch and checkpointing
    at the configured cadence.  A non-finite loss aborts the run and leaves
    the last written checkpoint in place.  stop_after ends the run early
    after that epoch (counted from 0) with a checkpoint, so a later call can
    resume it; the learning-rate schedule still spans the full configured
    epoch count."""
    os.makedirs(out_dir, exist_ok=True)
    train_set = splits.train
    batch_size = cfg["train.batch_size"]
    if len(train_set) < batch_size:
        raise ContractViolation(
            f"train split has {len(train_set)} samples, fewer than one "
            f"batch of {batch_size}")
    steps_per_epoch = len(train_set) // batch_size
    total_steps = cfg["train.epochs"] * steps_per_epoch
    warmup_steps = cfg["optim.warmup_epochs"] * steps_per_epoch
    floor_lr = (cfg["optim.lr"] if cfg["optim.schedule"] == "constant"
                else cfg["optim.min_lr"])
    weights = loss_weights_from(cfg)
    stack_weights = stack_weights_from(cfg)
    t_cfg = transform_for(cfg, train_set)
    checkpoint_path = os.path.join(out_dir, CHECKPOINT_NAME)
    metrics_path = os.path.join(out_dir, "metrics.csv")

    build_rng, rng = run_rngs(cfg["seed"])
    model, optimizer = build_from_config(cfg, build_rng)
    start_epoch = 0
    global_step = 0
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        restore_state(model, optimizer, ck.tensors, adam_t=ck.meta["adam_t"])
        rng.bit_generator.state = ck.meta["rng"]
        start_epoch = ck.meta["epoch"]
        global_step = ck.meta["global_step"]

    mode = "a" if resume_from is not None and os.path.exists(metrics_path) else "w"
    rows: list[MetricsRow] = []
    with open(metrics_path, mode, encoding="utf-8") as log_fh:
        if mode == "w":
            log_fh.write(METRICS_HEADER + "\n")
        for epoch in range(start_epoch, cfg["train.epochs"]):
            started = time.monotonic()
            perm = rng.permutation(len(train_set))
            sums = None
            lr = optimizer.lr
            for b in range(steps_per_epoch):
                idx = perm[b * batch_size:(b + 1) * batch_size]
                batch = Tensor(train_set.images[idx])
                views = sample_views(batch, t_cfg, rng=rng)
                lr = cosine_lr(cfg["optim.lr"], global_step, total_steps,
                               min_lr=floor_lr, warmup_steps=warmup_steps)
                optimizer.lr = lr
                try:
                    breakdown = train_step(model, views, weights, optimizer,
                                           stack_weights)
                except TrainingDivergence as err:
                    return PretrainResult(model, optimizer, rows,
                                          checkpoint_path, aborted=True,
                                          diagnostics=dict(err.diagnostics,
                                                           epoch=epoch, step=b))
                global_step += 1
                vals = np.array([breakdown.total, *breakdown.s, *breakdown.v,
                                 *breakdown.c])
                sums = vals if sums is None else sums + vals
            n_stacks = model.spec.num_stacks
            means = sums / steps_per_epoch
            row = MetricsRow(
                epoch=epoch,
                breakdown=LossBreakdown(
                    s=tuple(means[1:1 + n_stacks]),
                    v=tuple(means[1 + n_stacks:1 + 2 * n_stacks]),
                    c=tuple(means[1 + 2 * n_stacks:1 + 3 * n_stacks]),
                    total=float(means[0])),
                lr=lr,
                seconds=_epoch_seconds(cfg["deterministic"], started))
            rows.append(row)
            log_fh.write(",".join(row.csv_fields()) + "\n")
            log_fh.flush()
            stopping = stop_after is not None and epoch + 1 >= stop_after
            last = epoch + 1 == cfg["train.epochs"] or stopping
            if (epoch + 1) % cfg["train.checkpoint_every"] == 0 or last:
                save_checkpoint(checkpoint_path, collect_state(model, optimizer),
                                meta={"epoch": epoch + 1,
                                      "global_step": global_step,
                                      "adam_t": optimizer.t,
                                      "rng": rng.bit_generator.state,
                                      "config": config_strings(cfg)})
            if stopping:
                break
    return PretrainResult(model, optimizer, rows, checkpoint_path)


def resume_config(checkpoint_path: str) -> dict:
    """Recover the fully-typed config a checkpoint was trained under."""
    meta = load_checkpoint(checkpoint_path).meta
    return resolve_config(meta["config"])


def _normalized(dataset: Dataset) -> np.ndarray:
    mean, std = dataset.channel_stats
    return ((dataset.images - mean[None, :, None, None])
            / std[None, :, None, None]).astype(np.float32)


def encode_dataset(model: SJEAModel, dataset: Dataset, stack: int,
                   batch_size: int = 256) -> tuple[np.ndarray, np.ndarray | None]:
    """Pooled eval-mode representations of every sample, in dataset order."""
    images = _normalized(dataset)
    chunks = []
    for lo in range(0, len(images), batch_size):
        pooled = model.represent(Tensor(images[lo:lo + batch_size]), stack)
        chunks.append(pooled.numpy())
    return np.concatenate(chunks), dataset.labels


def _cross_entropy(logits: Tensor, one_hot: Tensor) -> Tensor:
    # detaching the row max keeps exp() in range; the gradient is unchanged
    peak = tmax(logits, axis=1, keepdims=True).detach()
    lse = add(log(tsum(texp(sub(logits, peak)), axis=1, keepdims=True)), peak)
    true_logit = tsum(mul(logits, one_hot), axis=1, keepdims=True)
    return tmean(sub(lse, true_logit))


def probe_features(train_x: np.ndarray, train_y: np.ndarray,
                   test_x: np.ndarray, test_y: np.ndarray,
                   num_classes: int, epochs: int = 10, lr: float = 1e-2,
                   batch_size: int = 256, seed: int = 0) -> float:
    """Train a linear classifier on fixed features; return test top-1."""
    if len(train_x) != len(train_y) or len(test_x) != len(test_y):
        raise ContractViolation("features and labels must pair up")
    dim = train_x.shape[1]
    weight = Tensor(np.zeros((num_classes, dim), dtype=np.float32),
                    requires_grad=True)
    bias = Tensor(np.zeros(num_classes, dtype=np.float32), requires_grad=True)
    opt = Adam([("weight", weight), ("bias", bias)], lr=lr)
    rng = np.random.default_rng(seed)
    eye = np.eye(num_classes, dtype=np.float32)
    batch_size = min(batch_size, len(train_x))
    for _ in range(epochs):
        perm = rng.permutation(len(train_x))
        for lo in range(0, len(perm), batch_size):
            idx = perm[lo:lo + batch_size]
            x = Tensor(train_x[idx].astype(np.float32))
            target = Tensor(eye[train_y[idx]])
            opt.zero_grad()
            with Tape() as tape:
                logits = add(matmul(x, transpose(weight)), bias)
                loss = _cross_entropy(logits, target)
            tape.backward(loss)
            opt.step()
    scores = test_x.astype(np.float32) @ weight.data.T + bias.data
    return float(np.mean(np.argmax(scores, axis=1) == test_y))


def linear_probe(model: SJEAModel, target_stack: int, splits: SplitDatasets,
                 cfg: dict) -> float:
    """Probe the frozen pooled representation of one stack; model untouched."""
    train_x, train_y = encode_dataset(model, splits.train, target_stack,
                                      cfg["train.batch_size"])
    test_x, test_y = encode_dataset(model, splits.test, target_stack,
                                    cfg["train.batch_size"])
    if train_y is None or test_y is None:
        raise ContractViolation("linear probe needs labeled splits")
    num_classes = splits.train.num_classes or int(train_y.max()) + 1
    return probe_features(train_x, train_y, test_x, test_y, num_classes,
                          epochs=cfg["eval.probe_epochs"],
                          lr=cfg["eval.probe_lr"], seed=cfg["seed"])


def knn_classify(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray,
                 k: int, metric: str = "cosine",
                 num_classes: int | None = None) -> np.ndarray:
    """Similarity-weighted k-nearest-neighbor class predictions."""
    if k < 1 or k > len(train_x):
        raise ContractViolation(
            f"k={k} must lie in [1, train size {len(train_x)}]")
    if metric not in ("cosine", "euclidean"):
        raise ContractViolation(f"unknown metric {metric!r}")
    classes = num_classes or int(train_y.max()) + 1
    a = train_x.astype(np.float64)
    b = test_x.astype(np.float64)
    if metric == "cosine":
        a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
        b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
        sims = b @ a.T
    else:
        d2 = (np.square(b).sum(1)[:, None] + np.square(a).sum(1)[None, :]
              - 2.0 * (b @ a.T))
        sims = -np.sqrt(np.maximum(d2, 0.0))
    top = np.argpartition(-sims, k - 1, axis=1)[:, :k]
    votes = np.zeros((len(b), classes))
    rows = np.repeat(np.arange(len(b)), k)
    neighbor_cls = train_y[top].ravel()
    if metric == "cosine":
        weight = np.take_along_axis(sims, top, axis=1).ravel()
    else:
        weight = np.ones(top.size)
    np.add.at(votes, (rows, neighbor_cls), weight)
    return np.argmax(votes, axis=1)


def knn_eval(model: SJEAModel, target_stack: int, splits: SplitDatasets,
             cfg: dict) -> float:
    train_x, train_y = encode_dataset(model, splits.train, target_stack,
                                      cfg["train.batch_size"])
    test_x, test_y = encode_dataset(model, splits.test, target_stack,
                                    cfg["train.batch_size"])
    if train_y is None or test_y is None:
        raise ContractViolation("k-NN evaluation needs labeled splits")
    preds = knn_classify(train_x, train_y, test_x, cfg["eval.knn_k"],
                         num_classes=splits.train.num_classes)
    return float(np.mean(preds == test_y))


def collapse_metrics(z: np.ndarray) -> dict[str, float]:
    """Spread, decorrelation, and soft-rank diagnostics of an embedding batch."""
    if z.ndim != 2 or z.shape[0] < 2:
        raise ContractViolation(f"need a (N>=2, D) matrix, got {z.shape}")
    z = z.astype(np.float64)
    n, d = z.shape
    mean_std = float(np.mean(np.std(z, axis=0, ddof=1)))
    centered = z - z.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    off = cov - np.diag(np.diag(cov))
    cov_term = float(np.sum(off * off) / d)
    singular = np.linalg.svd(z, compute_uv=False)
    total = singular.sum()
    if total == 0.0:
        erank = 0.0
    else:
        p = singular[singular > 0] / total
        erank = float(np.exp(-np.sum(p * np.log(p))))
    return {"mean_std": mean_std, "covariance": cov_term,
            "effective_rank": erank}


def export_embeddings(model: SJEAModel, target_stack: int, dataset: Dataset,
                      path: str, batch_size: int = 256) -> None:
    """Write `label,e0,...` rows, one per sample, floats at 9 significant
    digits (exact for float32 round-trips), in dataset order."""
    features, labels = encode_dataset(model, dataset, target_stack, batch_size)
    if labels is None:
        raise ContractViolation("embedding export needs a labeled dataset")
    dim = features.shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("label," + ",".join(f"e{j}" for j in range(dim)) + "\n")
        for label, row in zip(labels, features):
            fh.write(str(int(label)) + "," + ",".join(_fmt(v) for v in row) + "\n")


def read_embeddings(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of export_embeddings: (labels, float32 feature matrix)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[0] != "label" or header[1:] != [f"e{j}" for j in
                                                  range(len(header) - 1)]:
            raise SjeaError(f"{path}: not an embedding export header")
        labels, rows = [], []
        for line in fh:
            cells = line.strip().split(",")
            labels.append(int(cells[0]))
            rows.append([np.float32(v) for v in cells[1:]])
    return np.asarray(labels, dtype=np.int64), np.asarray(rows, dtype=np.float32)
