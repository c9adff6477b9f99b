"""Architecture tables, model assembly, forward pass and checkpoints."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np

from peernet import tensor as tn
from peernet.attention import fuse_inputs, make_binding
from peernet.blocks import (
    INPUT_KINDS,
    BlockSpec,
    ConvBlock,
    ConvLayer,
    InputBlock,
    make_conv_block,
    make_input_block,
    seeded_rng,
)
from peernet.graph import ConnectionEdge, ConnectivityGraph, peer_set, topo_order
from peernet.tensor import Tensor

MODALITY_CHANNELS = {"input-rgb": 3, "input-flow": 2}
MIN_WIDTH = 4
CHECKPOINT_FORMAT = "peernet-checkpoint-1"


class TableError(ValueError):
    pass


class ModelInputError(ValueError):
    pass


@dataclass(frozen=True)
class TableRow:
    index: int
    level: int
    inputs: tuple[int, ...]
    channels: int
    dilation: int
    stride: int
    kind: str = "conv"


@dataclass(frozen=True)
class ArchitectureTable:
    rows: tuple[TableRow, ...]
    num_classes: int = 16

    def row(self, index: int) -> TableRow:
        return self.rows[index]

    @property
    def edge_count(self) -> int:
        return sum(len(r.inputs) for r in self.rows)

    def edges(self) -> list[tuple[int, int]]:
        return sorted(((j, r.index) for r in self.rows for j in r.inputs), key=lambda e: (e[1], e[0]))

    def level_channel_sums(self, width_scale: float = 1.0) -> dict[int, int]:
        """Channel sum per level over rgb/flow/conv blocks.

        The object block is excluded: it has no conv layers and its width is
        the number of object classes.
        """
        sums: dict[int, int] = {}
        for r in self.rows:
            if r.kind == "input-object":
                continue
            sums[r.level] = sums.get(r.level, 0) + scaled_width(r.channels, width_scale)
        return dict(sorted(sums.items()))

    def to_json(self) -> dict:
        return {
            "blocks": [
                {
                    "index": r.index,
                    "level": r.level,
                    "inputs": list(r.inputs),
                    "channels": r.channels,
                    "dilation": r.dilation,
                    "stride": r.stride,
                    "kind": r.kind,
                }
                for r in self.rows
            ],
            "num_classes": self.num_classes,
        }


def scaled_width(channels: int, width_scale: float) -> int:
    if width_scale == 1:
        return channels
    return max(MIN_WIDTH, int(round(channels * float(width_scale))))


def _parse_rows(doc) -> ArchitectureTable:
    if not isinstance(doc, dict) or not isinstance(doc.get("blocks"), list):
        raise TableError("architecture must be an object with a 'blocks' list")
    num_classes = doc.get("num_classes", 16)
    if not isinstance(num_classes, int) or num_classes < 1:
        raise TableError("num_classes must be a positive integer")
    rows = []
    for pos, raw in enumerate(doc["blocks"]):
        where = f"row {pos}"
        if not isinstance(raw, dict):
            raise TableError(f"{where}: expected an object")
        try:
            row = TableRow(
                index=int(raw["index"]),
                level=int(raw["level"]),
                inputs=tuple(int(j) for j in raw.get("inputs", [])),
                channels=int(raw["channels"]),
                dilation=int(raw.get("dilation", 1)),
                stride=int(raw.get("stride", 1)),
                kind=str(raw.get("kind", "conv")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise TableError(f"{where}: malformed field ({exc})") from None
        where = f"row {pos} (block {row.index})"
        if row.index != pos:
            if any(r.index == row.index for r in rows):
                raise TableError(f"{where}: duplicate index {row.index}")
            raise TableError(f"{where}: indices must run 0..n-1 in order")
        if row.kind not in INPUT_KINDS + ("conv",):
            raise TableError(f"{where}: unknown kind {row.kind!r}")
        if row.kind in INPUT_KINDS and (row.level != 0 or row.inputs):
            raise TableError(f"{where}: input blocks sit at level 0 with no input connections")
        if row.kind == "conv" and row.level < 1:
            raise TableError(f"{where}: conv blocks need level >= 1")
        if row.channels <= 0 or row.dilation < 1 or row.stride < 1:
            raise TableError(f"{where}: channels, dilation and stride must be positive")
        if len(set(row.inputs)) != len(row.inputs):
            raise TableError(f"{where}: repeated input connection")
        rows.append(row)
    levels = {r.index: r.level for r in rows}
    for r in rows:
        for j in r.inputs:
            if j not in levels:
                raise TableError(f"row {r.index}: dangling input connection {j}")
            if levels[j] >= r.level:
                raise TableError(
                    f"row {r.index}: input {j} at level {levels[j]} is not below level {r.level}"
                )
    return ArchitectureTable(tuple(rows), num_classes)


def parse_architecture(text: str) -> ArchitectureTable:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TableError(f"malformed architecture text: {exc}") from None
    return _parse_rows(doc)


def load_table(path: str | Path | None = None) -> ArchitectureTable:
    if path is None:
        text = resources.files("peernet").joinpath("tables/assemblenet_pp.json").read_text()
    else:
        text = Path(path).read_text()
    return parse_architecture(text)


def without_object(table: ArchitectureTable) -> ArchitectureTable:
    """Drop the object input block and every connection out of it."""
    obj = {r.index for r in table.rows if r.kind == "input-object"}
    remap: dict[int, int] = {}
    rows = []
    for r in table.rows:
        if r.index in obj:
            continue
        remap[r.index] = len(rows)
        rows.append(r)
    out = []
    for r in rows:
        inputs = tuple(remap[j] for j in r.inputs if j not in obj)
        if r.kind == "conv" and not inputs:
            raise TableError(f"block {r.index} only reads from the object block")
        out.append(replace(r, index=remap[r.index], inputs=inputs))
    return ArchitectureTable(tuple(out), table.num_classes)


@dataclass(frozen=True)
class ModelConfig:
    width_scale: float = 0.125
    depth_scale: float = 1 / 3
    T: int = 4
    H: int = 16
    W: int = 16
    batch: int = 4
    num_classes: int = 16
    object_channels: int = 9
    attention_mode: str = "none"
    seed: int = 0

    def __post_init__(self):
        for name in ("width_scale", "depth_scale", "T", "H", "W", "batch", "num_classes", "object_channels"):
            if not getattr(self, name) > 0:
                raise ValueError(f"ModelConfig.{name} must be positive")

    def to_json(self) -> dict:
        return asdict(self)


def parse_scale(text: str) -> float:
    """Accept ``0.125`` or ``1/8``."""
    return float(Fraction(text))


@dataclass
class Adapter:
    """Average pool to the destination resolution, then a 1x1 conv to its width."""

    pool: int
    conv: ConvLayer | None = None

    def __call__(self, x: Tensor) -> Tensor:
        x = tn.avg_pool_spatial(x, self.pool)
        if self.conv is not None:
            x = self.conv(x)
        return x

    def parameters(self) -> list[Tensor]:
        return self.conv.parameters() if self.conv is not None else []


def resolution_match(
    src_shape: tuple[int, int, int], dst_shape: tuple[int, int, int], rng=None, name: str = ""
) -> Adapter | None:
    """Adapter taking ``(H, W, C)`` to ``(H', W', C')``; ``None`` when already matched."""
    (h, w, c), (h2, w2, c2) = src_shape, dst_shape
    if h < h2 or w < w2:
        raise ValueError(f"resolution_match: upsampling {h}x{w} -> {h2}x{w2} is not supported")
    if h % h2 or w % w2 or h // h2 != w // w2:
        raise ValueError(f"resolution_match: {h}x{w} does not pool evenly to {h2}x{w2}")
    pool = h // h2
    if pool == 1 and c == c2:
        return None
    conv = None
    if c != c2:
        rng = rng if rng is not None else np.random.default_rng(0)
        conv = ConvLayer.create(rng, name, (1, 1, 1), c, c2)
    return Adapter(pool, conv)


def _stem_out(h: int, kind: str) -> int:
    if kind == "input-object":
        if h % 4:
            raise ValueError(f"object input size {h} is not divisible by 4")
        return h // 4
    h = -(-h // 2)
    if h % 2:
        raise ValueError(f"stem output {h} is not divisible by the 2x2 pool")
    return h // 2


@dataclass
class AssembledModel:
    config: ModelConfig
    table: ArchitectureTable
    graph: ConnectivityGraph
    blocks: dict[int, InputBlock | ConvBlock]
    adapters: dict[tuple[int, int], Adapter | None]
    classifier_w: Tensor
    classifier_b: Tensor
    in_res: dict[int, tuple[int, int]] = field(default_factory=dict)
    out_res: dict[int, tuple[int, int]] = field(default_factory=dict)

    @property
    def order(self) -> list[int]:
        return topo_order(self.graph)

    @property
    def final_block(self) -> int:
        return self.order[-1]

    def width(self, index: int) -> int:
        return self.blocks[index].out_channels

    def input_width(self, index: int) -> int:
        return self.blocks[index].in_channels

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for idx in self.order:
            block = self.blocks[idx]
            for layer_no, layer in enumerate(block.conv_layers()):
                out.append((f"block{idx}/conv{layer_no}/w", layer.weight))
                out.append((f"block{idx}/conv{layer_no}/b", layer.bias))
        for e in self.graph.edges:
            prefix = f"edge{e.src}-{e.dst}"
            out.append((f"{prefix}/w", e.weight))
            out.extend(e.attention.named_parameters(prefix))
            adapter = self.adapters.get((e.src, e.dst))
            if adapter is not None and adapter.conv is not None:
                out.append((f"{prefix}/adapter/w", adapter.conv.weight))
                out.append((f"{prefix}/adapter/b", adapter.conv.bias))
        out.append(("classifier/w", self.classifier_w))
        out.append(("classifier/b", self.classifier_b))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def replace_graph(self, graph: ConnectivityGraph) -> "AssembledModel":
        """Deep copy of this model running on ``graph`` (a subset of the current edges)."""
        missing = set(graph.edge_pairs()) - set(self.adapters)
        if missing:
            raise ValueError(f"edges {sorted(missing)} have no adapters in this model")
        return AssembledModel(
            config=self.config,
            table=self.table,
            graph=graph.copy(),
            blocks=copy.deepcopy(self.blocks),
            adapters={k: copy.deepcopy(self.adapters[k]) for k in graph.edge_pairs()},
            classifier_w=self.classifier_w.clone(),
            classifier_b=self.classifier_b.clone(),
            in_res=dict(self.in_res),
            out_res=dict(self.out_res),
        )

    def clone(self) -> "AssembledModel":
        return self.replace_graph(self.graph)

    def __call__(self, inputs: Mapping[str, np.ndarray | Tensor]) -> Tensor:
        return model_forward(self, inputs)


def resolution_plan(
    specs: list[BlockSpec], H: int, W: int
) -> tuple[dict[int, tuple[int, int]], dict[int, tuple[int, int]]]:
    """Input and output ``(H, W)`` of every block for a clip of size ``H x W``.

    A conv block runs at the smallest resolution produced below its level,
    whatever its actual connections are, so pruning never changes shapes.
    """
    out_res: dict[int, tuple[int, int]] = {}
    in_res: dict[int, tuple[int, int]] = {}
    for s in sorted(specs, key=lambda s: (s.level, s.index)):
        if s.is_input:
            in_res[s.index] = (H, W)
            out_res[s.index] = (_stem_out(H, s.kind), _stem_out(W, s.kind))
            continue
        below = [out_res[p.index] for p in specs if p.level < s.level]
        h, w = min(r[0] for r in below), min(r[1] for r in below)
        in_res[s.index] = (h, w)
        out_res[s.index] = (-(-h // s.spatial_stride), -(-w // s.spatial_stride))
    return in_res, out_res


def table_specs(table: ArchitectureTable, config: ModelConfig) -> list[BlockSpec]:
    specs = []
    for r in table.rows:
        if r.kind == "input-object":
            channels = config.object_channels
        else:
            channels = scaled_width(r.channels, config.width_scale)
        specs.append(BlockSpec(r.index, r.level, channels, r.dilation, r.stride, r.kind))
    return specs


def build_model(
    table: ArchitectureTable,
    config: ModelConfig,
    edges: list[tuple[int, int]] | None = None,
    bindings: Mapping[tuple[int, int], Mapping] | None = None,
) -> AssembledModel:
    """Instantiate blocks, connections, attention and classifier.

    ``edges`` defaults to the table's input connections. ``bindings`` may
    override the attention of individual edges, e.g.
    ``{(2, 5): {"mode": "peer", "peer": 0}}``; other edges use
    ``config.attention_mode``.
    """
    seed = config.seed
    specs = table_specs(table, config)
    blocks: dict[int, InputBlock | ConvBlock] = {}
    for s in specs:
        if s.is_input:
            cin = config.object_channels if s.kind == "input-object" else MODALITY_CHANNELS[s.kind]
            blocks[s.index] = make_input_block(s, cin, seed)
        else:
            blocks[s.index] = make_conv_block(s, config.depth_scale, seed)

    in_res, out_res = resolution_plan(specs, config.H, config.W)

    pairs = table.edges() if edges is None else sorted(edges, key=lambda e: (e[1], e[0]))
    bindings = bindings or {}
    conn_edges = []
    adapters: dict[tuple[int, int], Adapter | None] = {}
    for j, i in pairs:
        rng = seeded_rng(seed, "edge", j, i)
        name = f"edge{j}-{i}"
        peers = peer_set((j, i), specs)
        widths = {k: blocks[k].out_channels for k in peers}
        spec = bindings.get((j, i), {"mode": config.attention_mode})
        binding = make_binding(
            spec["mode"], j, blocks[i].in_channels, widths, rng, name, peer=spec.get("peer")
        )
        conn_edges.append(ConnectionEdge(j, i, tn.parameter(0.0, f"{name}/w"), binding))
        adapters[(j, i)] = resolution_match(
            (*out_res[j], blocks[j].out_channels),
            (*in_res[i], blocks[i].in_channels),
            rng,
            f"{name}/adapter",
        )
    graph = ConnectivityGraph(specs, conn_edges)
    final = topo_order(graph)[-1]
    rng = seeded_rng(seed, "classifier")
    cfinal = blocks[final].out_channels
    k = config.num_classes
    classifier_w = tn.parameter(rng.standard_normal((cfinal, k)) / math.sqrt(cfinal), "classifier/w")
    classifier_b = tn.parameter(np.zeros(k), "classifier/b")
    for s in specs:
        if not s.is_input and not graph.incoming(s.index):
            raise TableError(f"block {s.index} has no incoming connections")
    return AssembledModel(config, table, graph, blocks, adapters, classifier_w, classifier_b, in_res, out_res)


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def model_forward(model: AssembledModel, inputs: Mapping[str, np.ndarray | Tensor]) -> Tensor:
    """Logits ``(N, num_classes)``: per-frame classifier, max-pooled over time."""
    outs: dict[int, Tensor] = {}
    pooled_cache: dict[int, Tensor] = {}

    def pooled(k) -> Tensor:
        if k not in pooled_cache:
            if isinstance(k, tuple):
                pooled_cache[k] = tn.concat_channels([pooled(j) for j in k])
            else:
                pooled_cache[k] = tn.gap_spatial(outs[k])
        return pooled_cache[k]

    for idx in model.order:
        block = model.blocks[idx]
        if isinstance(block, InputBlock):
            if block.modality not in inputs:
                raise ModelInputError(f"missing '{block.modality}' input required by block {idx}")
            with tn.flop_scope("conv_blocks"):
                outs[idx] = block(_as_input(inputs[block.modality]))
            continue
        incoming = model.graph.incoming(idx)
        sources = {}
        with tn.flop_scope("adapters"):
            for e in incoming:
                adapter = model.adapters[(e.src, e.dst)]
                sources[e.src] = adapter(outs[e.src]) if adapter is not None else outs[e.src]
        x_in = fuse_inputs(incoming, sources, pooled)
        with tn.flop_scope("conv_blocks"):
            outs[idx] = block(x_in)
    with tn.flop_scope("classifier"):
        final = tn.gap_spatial(outs[model.final_block])
        per_frame = tn.linear(final, model.classifier_w, model.classifier_b)
        return tn.temporal_max(per_frame)


# ----------------------------------------------------------------------------
# checkpoints: flat little-endian float64 + JSON manifest


def save_checkpoint(model: AssembledModel, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.bin`` and ``<path>.json``."""
    path = Path(path)
    params = {}
    offset = 0
    chunks = []
    for name, p in model.named_parameters():
        params[name] = {"offset": offset, "shape": list(p.shape)}
        offset += p.size
        chunks.append(p.data.reshape(-1))
    blob = np.concatenate(chunks).astype("<f8") if chunks else np.zeros(0, "<f8")
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_json(),
        "table": model.table.to_json(),
        "edges": [
            {"src": e.src, "dst": e.dst, "attention": e.attention.describe()} for e in model.graph.edges
        ],
        "total": offset,
        "params": params,
    }
    bin_path, json_path = path.with_suffix(".bin"), path.with_suffix(".json")
    bin_path.write_bytes(blob.tobytes())
    json_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return bin_path, json_path


def load_checkpoint(path: str | Path) -> AssembledModel:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint manifest")
    blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    if blob.size != manifest["total"]:
        raise ValueError(f"{path}: binary has {blob.size} values, manifest expects {manifest['total']}")
    config = ModelConfig(**manifest["config"])
    table = _parse_rows(manifest["table"])
    edges = [(e["src"], e["dst"]) for e in manifest["edges"]]
    bindings = {(e["src"], e["dst"]): e["attention"] for e in manifest["edges"]}
    model = build_model(table, config, edges=edges, bindings=bindings)
    entries = manifest["params"]
    named = model.named_parameters()
    if set(entries) != {n for n, _ in named}:
        raise ValueError(f"{path}: parameter names do not match the rebuilt model")
    for name, p in named:
        meta = entries[name]
        n = int(np.prod(meta["shape"], dtype=np.int64))
        p.data = blob[meta["offset"]:meta["offset"] + n].reshape(meta["shape"]).astype(np.float64)
    return model
