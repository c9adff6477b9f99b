"""Parameter and FLOP accounting per model component.

Convention: one multiply-accumulate is 2 FLOPs.

- conv: ``2 * kt*kh*kw * C_in * C_out * N*T*H_out*W_out``
- fully connected on pooled vectors: ``2 * C_in * C_out`` per row
- sigmoid and softmax on activations: 4 per element

Pooling (global average pooling included), element-wise products and sums,
and transforms that only touch parameters (``sigmoid(w)``, ``softmax(h)``,
static logits) are not counted.
The static count here matches what :func:`peernet.tensor.count_flops` records
during a real forward pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from peernet import tensor as tn
from peernet.blocks import ConvBlock, ConvLayer, InputBlock
from peernet.graph import GraphError
from peernet.model import AssembledModel, model_forward, resolution_plan

COMPONENTS = ("conv_blocks", "adapters", "connections", "attention_heads", "classifier")


@dataclass
class CostReport:
    params: dict[str, int] = field(default_factory=lambda: {c: 0 for c in COMPONENTS})
    flops: dict[str, int] = field(default_factory=lambda: {c: 0 for c in COMPONENTS})

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def total_flops(self) -> int:
        return sum(self.flops.values())

    @property
    def attention_param_ratio(self) -> float:
        total = self.total_params
        return self.params["attention_heads"] / total if total else 0.0

    @property
    def attention_flop_ratio(self) -> float:
        total = self.total_flops
        return self.flops["attention_heads"] / total if total else 0.0

    def to_json(self) -> dict:
        return {
            "components": {c: {"params": self.params[c], "flops": self.flops[c]} for c in COMPONENTS},
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "attention_param_ratio": self.attention_param_ratio,
            "attention_flop_ratio": self.attention_flop_ratio,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)

    def table(self) -> str:
        lines = [f"{'component':<16}{'params':>14}{'flops':>18}"]
        for c in COMPONENTS:
            lines.append(f"{c:<16}{self.params[c]:>14,}{self.flops[c]:>18,}")
        lines.append(f"{'total':<16}{self.total_params:>14,}{self.total_flops:>18,}")
        lines.append(
            f"attention share: params {self.attention_param_ratio:.4%}, flops {self.attention_flop_ratio:.4%}"
        )
        return "\n".join(lines)


def component_of(name: str) -> str:
    """Component a named parameter belongs to (see ``AssembledModel.named_parameters``)."""
    if name.startswith("block"):
        return "conv_blocks"
    if name.startswith("classifier"):
        return "classifier"
    if name.startswith("edge"):
        rest = name.split("/", 1)[1]
        if rest == "w":
            return "connections"
        if rest.startswith("adapter"):
            return "adapters"
        return "attention_heads"
    raise ValueError(f"cannot attribute parameter {name!r}")


def count_params(model: AssembledModel, report: CostReport | None = None) -> CostReport:
    report = report if report is not None else CostReport()
    for c in COMPONENTS:
        report.params[c] = 0
    for name, p in model.named_parameters():
        report.params[component_of(name)] += p.size
    return report


def conv_flops(layer: ConvLayer, n: int, t: int, h_out: int, w_out: int) -> int:
    kt, kh, kw = layer.kernel
    return 2 * kt * kh * kw * layer.in_channels * layer.out_channels * n * t * h_out * w_out


def fc_flops(cin: int, cout: int, rows: int) -> int:
    return 2 * cin * cout * rows


def _block_flops(block, n: int, t: int, h: int, w: int) -> int:
    total = 0
    if isinstance(block, InputBlock):
        for layer in block.layers:
            h, w = -(-h // layer.stride), -(-w // layer.stride)
            total += conv_flops(layer, n, t, h, w)
        return total
    assert isinstance(block, ConvBlock)
    for module in block.modules:
        for layer in module.layers:
            h, w = -(-h // layer.stride), -(-w // layer.stride)
            total += conv_flops(layer, n, t, h, w)
        if module.shortcut is not None:
            total += conv_flops(module.shortcut, n, t, h, w)
    return total


def count_flops(model: AssembledModel, input_shape: tuple[int, int, int, int] | None = None,
                report: CostReport | None = None) -> CostReport:
    """Static FLOPs of one forward pass on inputs of shape ``(N, T, H, W)``."""
    cfg = model.config
    n, t, H, W = input_shape if input_shape is not None else (cfg.batch, cfg.T, cfg.H, cfg.W)
    report = report if report is not None else CostReport()
    for c in COMPONENTS:
        report.flops[c] = 0
    specs = list(model.graph.blocks.values())
    in_res, _ = resolution_plan(specs, H, W)
    width = {i: model.width(i) for i in model.graph.blocks}
    for idx, block in model.blocks.items():
        report.flops["conv_blocks"] += _block_flops(block, n, t, *in_res[idx])
    for e in model.graph.edges:
        adapter = model.adapters.get((e.src, e.dst))
        if adapter is not None and adapter.conv is not None:
            report.flops["adapters"] += conv_flops(adapter.conv, n, t, *in_res[e.dst])
        att = e.attention
        if att.mode in ("none", "static"):
            continue
        c_dst = model.blocks[e.dst].in_channels
        sources = att.source_blocks(e.src)
        if att.mode == "oneshot":
            report.flops["attention_heads"] += fc_flops(sum(width[k] for k in sources), c_dst, n * t)
        report.flops["attention_heads"] += fc_flops(att.head.in_width, att.head.out_width, n * t)
        report.flops["attention_heads"] += 4 * n * t * c_dst
    final = model.final_block
    report.flops["classifier"] += fc_flops(width[final], model.config.num_classes, n * t)
    return report


def cost_report(model: AssembledModel, input_shape: tuple[int, int, int, int] | None = None) -> CostReport:
    report = count_params(model)
    return count_flops(model, input_shape, report)


def instrumented_flops(model: AssembledModel, inputs) -> dict[str, int]:
    """FLOPs recorded by actually running the forward pass."""
    with tn.count_flops() as counter:
        model_forward(model, inputs)
    return {c: counter.get(c, 0) for c in COMPONENTS}


def attention_overhead(
    model_with: AssembledModel,
    model_without: AssembledModel,
    input_shape: tuple[int, int, int, int] | None = None,
) -> tuple[float, float]:
    """Relative growth in parameters and FLOPs caused by attention alone."""
    if model_with.graph.edge_pairs() != model_without.graph.edge_pairs():
        raise GraphError("attention_overhead needs models with identical connections")
    specs_a = sorted(model_with.graph.blocks.values(), key=lambda b: b.index)
    specs_b = sorted(model_without.graph.blocks.values(), key=lambda b: b.index)
    if specs_a != specs_b:
        raise GraphError("attention_overhead needs models with identical blocks")
    a = cost_report(model_with, input_shape)
    b = cost_report(model_without, input_shape)
    return (
        (a.total_params - b.total_params) / b.total_params,
        (a.total_flops - b.total_flops) / b.total_flops,
    )

