"""Toy experiments: attention-mode ablation and object-connectivity sweep."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

from scipy.stats import spearmanr

from peernet.data import Dataset
from peernet.graph import prune_attention
from peernet.model import ArchitectureTable, ModelConfig, build_model, without_object
from peernet.trainer import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

ABLATION_MODES = ("none", "static", "self", "peer")
SWEEP_RATIOS = (0.0, 0.25, 0.5, 0.75, 1.0)

# Share of the ablation budget the Peer cell spends on the oneshot search;
# the rest trains the pruned peer model.
SEARCH_FRACTION = 0.5


@dataclass(frozen=True)
class ResultRow:
    mode: str
    objects: bool
    accuracy: float
    mean_class_accuracy: float

    def as_csv(self) -> list:
        return [self.mode, "on" if self.objects else "off", repr(self.accuracy), repr(self.mean_class_accuracy)]


def train_cell(
    table: ArchitectureTable,
    mode: str,
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_set: Dataset,
    search_fraction: float = SEARCH_FRACTION,
):
    if mode != "peer":
        model = build_model(table, replace(model_config, attention_mode=mode))
        return model, train(model, train_set, train_config)
    model = build_model(table, replace(model_config, attention_mode="oneshot"))
    cut = int(round(train_config.iterations * search_fraction))
    mlog = train(model, train_set, train_config, stop=cut)
    model = model.replace_graph(prune_attention(model.graph))
    train(model, train_set, train_config, log=mlog, start=cut)
    return model, mlog


def source_peer_bindings(table: ArchitectureTable) -> dict[tuple[int, int], dict]:
    """Peer attention on every table edge, each head reading the edge's own source."""
    return {(j, i): {"mode": "peer", "peer": j} for j, i in table.edges()}


def ablate_attention(
    table: ArchitectureTable,
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_set: Dataset,
    test_set: Dataset,
    modes=ABLATION_MODES,
    out_dir: str | Path | None = None,
    search_fraction: float = SEARCH_FRACTION,
) -> list[ResultRow]:
    """Train every (mode, objects) cell with the same seed and budget.

    ``peer`` runs the oneshot search on the cell's connections, keeps the
    argmax peer of every edge and trains the pruned model for the rest of
    the budget.
    """
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    rows = []
    for objects in (True, False):
        cell_table = table if objects else without_object(table)
        for mode in modes:
            model, mlog = train_cell(
                cell_table, mode, model_config, train_config, train_set, search_fraction
            )
            m = evaluate(model, test_set, objects)
            rows.append(ResultRow(mode, objects, m["accuracy"], m["mean_class_accuracy"]))
            log.info("ablation %s objects=%s accuracy=%.4f", mode, objects, m["accuracy"])
            if out_dir is not None:
                mlog.write_csv(Path(out_dir) / f"metrics_{mode}_{'on' if objects else 'off'}.csv")
    if out_dir is not None:
        write_rows(Path(out_dir) / "ablation.csv", ["mode", "objects", "accuracy", "mean_class_accuracy"],
                   [r.as_csv() for r in rows])
    return rows


def write_rows(path: Path, header: list[str], rows: list[list]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def object_block(table: ArchitectureTable) -> int:
    for r in table.rows:
        if r.kind == "input-object":
            return r.index
    raise ValueError("table has no object input block")


def object_destinations(table: ArchitectureTable) -> list[int]:
    """Every conv block, i.e. every block the object block may feed."""
    return [r.index for r in table.rows if r.kind == "conv"]


def omnipresent_edges(table: ArchitectureTable) -> list[tuple[int, int]]:
    """Table edges without object edges, plus the object block feeding every conv block."""
    obj = object_block(table)
    base = [(j, i) for j, i in table.edges() if j != obj]
    return sorted(base + [(obj, i) for i in object_destinations(table)], key=lambda e: (e[1], e[0]))


def edges_for_ratio(
    table: ArchitectureTable, ranking: list[int], ratio: float
) -> list[tuple[int, int]]:
    """Non-object table edges plus object edges to the top ``round(ratio * n)`` ranked blocks."""
    obj = object_block(table)
    keep = ranking[: int(round(ratio * len(ranking)))]
    base = [(j, i) for j, i in table.edges() if j != obj]
    return sorted(base + [(obj, i) for i in keep], key=lambda e: (e[1], e[0]))


@dataclass(frozen=True)
class SweepResult:
    ratios: tuple[float, ...]
    accuracies: tuple[float, ...]
    ranking: tuple[int, ...]
    spearman: float


def sweep_object_ratio(
    table: ArchitectureTable,
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_set: Dataset,
    test_set: Dataset,
    ratios=SWEEP_RATIOS,
    out_dir: str | Path | None = None,
) -> SweepResult:
    """Accuracy as object connectivity grows from none to omnipresent.

    The omnipresent model is trained first; its learned object-edge gates
    rank destinations (strongest first), and each ratio keeps that prefix.
    """
    obj = object_block(table)
    full = build_model(table, model_config, edges=omnipresent_edges(table))
    train(full, train_set, train_config)
    strength = {e.dst: e.strength for e in full.graph.edges if e.src == obj}
    ranking = sorted(strength, key=lambda i: (-strength[i], i))
    accs = []
    for r in ratios:
        if r == 1.0:
            model = full
        else:
            model = build_model(table, model_config, edges=edges_for_ratio(table, ranking, r))
            train(model, train_set, train_config)
        accs.append(evaluate(model, test_set)["accuracy"])
    rho = float(spearmanr(ratios, accs).statistic) if len(set(accs)) > 1 else 0.0
    result = SweepResult(tuple(ratios), tuple(accs), tuple(ranking), rho)
    if out_dir is not None:
        write_rows(Path(out_dir) / "sweep.csv", ["ratio", "object_edges", "accuracy"],
                   [[repr(r), int(round(r * len(ranking))), repr(a)] for r, a in zip(ratios, accs)])
    return result
