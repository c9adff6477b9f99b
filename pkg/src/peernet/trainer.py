"""SGD training, learning-rate schedules, evaluation and the search-then-prune pipeline."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from peernet import tensor as tn
from peernet.data import Dataset, batcher
from peernet.graph import (
    DEFAULT_PRUNE_THRESHOLD,
    ConnectivityGraph,
    prune_attention,
    prune_connections,
    valid_edges,
)
from peernet.model import (
    ArchitectureTable,
    AssembledModel,
    ModelConfig,
    build_model,
    save_checkpoint,
    table_specs,
)
from peernet.tensor import NonFiniteError, Tensor

SCHEDULES = ("cosine", "warm-restart")
LOSSES = ("softmax-ce", "sigmoid-bce")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    base_lr: float = 0.01
    schedule: str = "cosine"
    cycle_len: int | None = None
    momentum: float = 0.9
    batch: int = 4
    seed: int = 0
    loss: str = "softmax-ce"
    clip_norm: float = 10.0
    eval_every: int = 0
    finetune: bool = False
    finetune_fraction: float = 0.1
    prune_threshold: float = DEFAULT_PRUNE_THRESHOLD

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.base_lr < 0:
            raise ValueError("base_lr must be non-negative")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.schedule == "warm-restart":
            if not self.cycle_len or self.cycle_len <= 0 or self.iterations % self.cycle_len:
                raise ValueError("warm-restart needs a cycle_len that divides iterations")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    def to_json(self) -> dict:
        return asdict(self)


def lr_at(config: TrainConfig, it: int) -> float:
    if not 0 <= it < config.iterations:
        raise ValueError(f"iteration {it} outside [0, {config.iterations})")
    if config.schedule == "cosine":
        frac = it / config.iterations
    else:
        frac = (it % config.cycle_len) / config.cycle_len
    return 0.5 * config.base_lr * (1.0 + math.cos(math.pi * frac))


def loss_fn(logits: Tensor, labels, kind: str = "softmax-ce") -> Tensor:
    """``softmax-ce`` takes class indices; ``sigmoid-bce`` takes indices or a 0/1 target matrix."""
    if kind == "softmax-ce":
        return tn.softmax_cross_entropy(logits, labels)
    if kind == "sigmoid-bce":
        labels = np.asarray(labels)
        if labels.ndim == 1:
            n, k = logits.shape
            if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
                raise ValueError(f"label index out of range [0, {k})")
            targets = np.zeros((n, k))
            targets[np.arange(n), labels] = 1.0
            labels = targets
        return tn.sigmoid_bce(logits, labels)
    raise ValueError(f"unknown loss {kind!r}")


class SGD:
    """Momentum SGD over one flat buffer that all parameter arrays view into."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, clip_norm: float | None = 10.0):
        self.params = list(params)
        self.momentum = momentum
        self.clip_norm = clip_norm
        sizes = [p.size for p in self.params]
        self.offsets = np.concatenate(([0], np.cumsum(sizes))).astype(int)
        self.flat = np.concatenate([p.data.reshape(-1) for p in self.params]) if self.params else np.zeros(0)
        for p, a, b in zip(self.params, self.offsets[:-1], self.offsets[1:]):
            p.data = self.flat[a:b].reshape(p.shape)
        self.velocity = np.zeros_like(self.flat)
        self._grad = np.zeros_like(self.flat)
        self._starts = self.offsets[:-1].tolist()
        self._stops = self.offsets[1:].tolist()

    def flat_grad(self) -> np.ndarray:
        buf = self._grad
        for p, a, b in zip(self.params, self._starts, self._stops):
            if p.grad is None:
                buf[a:b] = 0.0
            else:
                buf[a:b] = p.grad.reshape(-1)
        return buf

    def step(self, lr: float) -> float:
        """Apply one update and return the pre-clip gradient norm."""
        g = self.flat_grad()
        norm = float(np.sqrt(g @ g))
        if not math.isfinite(norm):
            bad = next(p for p in self.params if p.grad is not None and not np.all(np.isfinite(p.grad)))
            raise NonFiniteError(f"gradient of {bad.name or 'parameter'}")
        if self.clip_norm is not None and norm > self.clip_norm:
            g *= self.clip_norm / norm
        self.velocity *= self.momentum
        self.velocity += g
        self.flat -= lr * self.velocity
        return norm


@dataclass
class MetricsLog:
    rows: list[tuple] = field(default_factory=list)

    HEADER = ("iter", "lr", "loss", "metric_name", "metric_value")

    def log_step(self, it: int, lr: float, loss: float) -> None:
        self._check(it)
        self.rows.append((it, lr, loss, "", ""))

    def log_metric(self, it: int, lr: float, name: str, value: float) -> None:
        self._check(it)
        self.rows.append((it, lr, "", name, value))

    def _check(self, it: int) -> None:
        if self.rows and it < self.rows[-1][0]:
            raise ValueError(f"iteration {it} goes back before {self.rows[-1][0]}")

    def losses(self) -> list[float]:
        return [r[2] for r in self.rows if r[3] == ""]

    def metrics(self, name: str) -> list[tuple[int, float]]:
        return [(r[0], r[4]) for r in self.rows if r[3] == name]

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.HEADER)
            for row in self.rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return path


def train_step(
    model: AssembledModel,
    inputs: dict[str, np.ndarray],
    labels: np.ndarray,
    optimizer: SGD,
    lr: float,
    loss_kind: str = "softmax-ce",
    it: int | None = None,
) -> float:
    """Forward, backward and one optimizer update. Returns the loss before the update."""
    model.zero_grad()
    where = f" at iteration {it}" if it is not None else ""
    try:
        with tn.Tape() as tape:
            loss = loss_fn(model(inputs), labels, loss_kind)
        tape.backward(loss, optimizer.params)
        optimizer.step(lr)
    except NonFiniteError as exc:
        raise TrainingError(f"non-finite value{where}: first produced by {exc.op}") from exc
    return loss.item()


def predict(model: AssembledModel, dataset: Dataset, batch: int = 100, objects: bool = True) -> np.ndarray:
    """Logits for every sample, evaluated without a tape."""
    out = []
    for s in range(0, len(dataset), batch):
        idx = np.arange(s, min(s + batch, len(dataset)))
        out.append(model(dataset.inputs(idx, objects)).data)
    return np.concatenate(out)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def mean_class_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    pred = np.argmax(logits, axis=1)
    per_class = [np.mean(pred[labels == c] == c) for c in np.unique(labels)]
    return float(np.mean(per_class))


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    order = np.argsort(-scores, kind="stable")
    hits = positives[order].astype(bool)
    if not hits.any():
        return float("nan")
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits].mean())


def mean_average_precision(logits: np.ndarray, targets: np.ndarray) -> float:
    """Per-class average precision, averaged over classes that have positives."""
    if targets.ndim == 1:
        onehot = np.zeros_like(logits)
        onehot[np.arange(len(targets)), targets] = 1.0
        targets = onehot
    aps = [average_precision(logits[:, c], targets[:, c]) for c in range(logits.shape[1])]
    return float(np.nanmean(aps))


def evaluate(model: AssembledModel, dataset: Dataset, objects: bool | None = None) -> dict[str, float]:
    if objects is None:
        objects = _uses_objects(model)
    logits = predict(model, dataset, objects=objects)
    return {
        "accuracy": accuracy(logits, dataset.labels),
        "mean_class_accuracy": mean_class_accuracy(logits, dataset.labels),
        "mAP": mean_average_precision(logits, dataset.labels),
    }


def _uses_objects(model: AssembledModel) -> bool:
    return any(b.kind == "input-object" for b in model.graph.blocks.values())


def train(
    model: AssembledModel,
    train_set: Dataset,
    config: TrainConfig,
    test_set: Dataset | None = None,
    log: MetricsLog | None = None,
    start: int = 0,
    stop: int | None = None,
    iter_offset: int = 0,
) -> MetricsLog:
    """Run iterations ``[start, stop)`` of ``config``'s schedule on ``model`` in place.

    The batch stream is a function of ``config.seed`` alone, so a run split
    into several calls sees the same batches as one uninterrupted run (each
    call starts with fresh momentum).
    ``iter_offset`` shifts the iteration numbers written to the log.
    """
    log = log if log is not None else MetricsLog()
    stop = config.iterations if stop is None else stop
    if not 0 <= start <= stop <= config.iterations:
        raise ValueError(f"bad iteration range [{start}, {stop}) for {config.iterations} iterations")
    objects = _uses_objects(model)
    optimizer = SGD(model.parameters(), config.momentum, config.clip_norm)
    batches = batcher(train_set, config.batch, config.seed)
    for _ in range(start):
        next(batches)
    for it in range(start, stop):
        lr = lr_at(config, it)
        idx = next(batches)
        loss = train_step(
            model, train_set.inputs(idx, objects), train_set.labels[idx], optimizer, lr,
            config.loss, iter_offset + it,
        )
        log.log_step(iter_offset + it, lr, loss)
        if test_set is not None and config.eval_every and (it + 1) % config.eval_every == 0:
            log.log_metric(iter_offset + it, lr, "accuracy", evaluate(model, test_set, objects)["accuracy"])
    return log


def finetune_config(config: TrainConfig) -> TrainConfig:
    """Short schedule used to fine-tune a pruned model."""
    n = max(1, int(round(config.iterations * config.finetune_fraction)))
    return TrainConfig(**{**config.to_json(), "iterations": n, "schedule": "cosine", "cycle_len": None})


@dataclass
class PipelineResult:
    searched: AssembledModel
    pruned: AssembledModel
    log: MetricsLog
    metrics: dict[str, float]


def densify(table: ArchitectureTable, model_config: ModelConfig) -> AssembledModel:
    """Every level-respecting edge, each carrying a oneshot attention binding."""
    edges = valid_edges(table_specs(table, model_config))
    return build_model(table, _with_mode(model_config, "oneshot"), edges=edges)


def _with_mode(config: ModelConfig, mode: str) -> ModelConfig:
    return ModelConfig(**{**config.to_json(), "attention_mode": mode})


def prune_model(model: AssembledModel, threshold: float = DEFAULT_PRUNE_THRESHOLD) -> AssembledModel:
    """Connection pruning followed by argmax attention pruning."""
    graph: ConnectivityGraph = prune_attention(prune_connections(model.graph, threshold))
    return model.replace_graph(graph)


def run_pipeline(
    table: ArchitectureTable,
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_set: Dataset,
    test_set: Dataset | None = None,
    out_dir: str | Path | None = None,
    dense: bool = True,
) -> PipelineResult:
    """Densify, train the oneshot search model, prune, optionally fine-tune.

    With ``dense=False`` the table's own edges are searched instead of every
    valid edge.
    """
    if dense:
        searched = densify(table, model_config)
    else:
        searched = build_model(table, _with_mode(model_config, "oneshot"))
    log = train(searched, train_set, train_config, test_set)
    pruned = prune_model(searched, train_config.prune_threshold)
    if train_config.finetune:
        train(pruned, train_set, finetune_config(train_config), test_set, log,
              iter_offset=train_config.iterations)
    metrics: dict[str, float] = {}
    if test_set is not None:
        metrics = evaluate(pruned, test_set)
        last = log.rows[-1][0] if log.rows else 0
        for name, value in metrics.items():
            log.log_metric(last, 0.0, name, value)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(searched, out / "search")
        save_checkpoint(pruned, out / "pruned")
        log.write_csv(out / "metrics.csv")
    return PipelineResult(searched, pruned, log, metrics)
