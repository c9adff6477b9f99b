"""Command-line entry points: ``peernet <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from peernet import __version__
from peernet.attention import MODES
from peernet.cost import cost_report
from peernet.data import GeneratorConfig, dump_dataset, generate_dataset
from peernet.experiments import ablate_attention, source_peer_bindings, sweep_object_ratio, train_cell
from peernet.graph import GraphError, export_dot, prune_attention, prune_connections
from peernet.model import (
    ModelConfig,
    ModelInputError,
    TableError,
    build_model,
    load_checkpoint,
    load_table,
    parse_scale,
    save_checkpoint,
    without_object,
)
from peernet.tensor import NonFiniteError
from peernet.trainer import TrainConfig, TrainingError, evaluate, run_pipeline

log = logging.getLogger("peernet")

COMMANDS = (
    "gen-data", "build", "train", "search", "prune", "eval", "cost",
    "export-dot", "ablate-attention", "sweep-object-ratio",
)


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--table", type=Path, default=None, help="architecture JSON (default: packaged table)")
    common.add_argument("--width-scale", type=parse_scale, default=0.125)
    common.add_argument("--depth-scale", type=parse_scale, default=1 / 3)
    common.add_argument("--iters", type=int, default=3000)
    common.add_argument("--lr", type=float, default=0.01)
    common.add_argument("--batch", type=int, default=4)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=Path, default=Path("runs"))
    common.add_argument("--attention", choices=MODES, default="none")
    common.add_argument("--objects", choices=("on", "off"), default="on")
    common.add_argument("--samples", type=int, default=2000, help="training clips")
    common.add_argument("--test-samples", type=int, default=400)
    common.add_argument("--checkpoint", type=Path, default=None, help="checkpoint stem for prune/eval/export-dot")
    common.add_argument("--input-shape", default=None, help="N,T,H,W for cost (default: model config)")
    common.add_argument("--finetune", action="store_true", help="fine-tune after pruning (search)")
    common.add_argument("--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="peernet", description=__doc__)
    parser.add_argument("--version", action="version", version=f"peernet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _resolve(args) -> dict:
    return {
        "command": args.command,
        "table": str(args.table) if args.table else "packaged:assemblenet_pp.json",
        "width_scale": args.width_scale,
        "depth_scale": args.depth_scale,
        "iters": args.iters,
        "lr": args.lr,
        "batch": args.batch,
        "seed": args.seed,
        "out": str(args.out),
        "attention": args.attention,
        "objects": args.objects,
        "samples": args.samples,
        "test_samples": args.test_samples,
        "checkpoint": str(args.checkpoint) if args.checkpoint else None,
        "input_shape": args.input_shape,
        "finetune": args.finetune,
    }


def _configs(args):
    table = load_table(args.table)
    if args.objects == "off":
        table = without_object(table)
    model_config = ModelConfig(
        width_scale=args.width_scale,
        depth_scale=args.depth_scale,
        batch=args.batch,
        attention_mode=args.attention if args.attention != "peer" else "none",
        seed=args.seed,
    )
    train_config = TrainConfig(
        iterations=args.iters, base_lr=args.lr, batch=args.batch, seed=args.seed, finetune=args.finetune
    )
    gen = GeneratorConfig(seed=args.seed, samples=args.samples, test_samples=args.test_samples)
    model_config = replace(model_config, T=gen.T, H=gen.H, W=gen.W, object_channels=gen.mask_channels,
                           num_classes=gen.num_classes)
    return table, model_config, train_config, gen


def _datasets(gen: GeneratorConfig):
    return generate_dataset(gen, "train"), generate_dataset(gen, "test")


def _build(table, model_config, attention: str):
    """``peer`` without a search binds each edge's head to its own source block."""
    bindings = source_peer_bindings(table) if attention == "peer" else None
    return build_model(table, model_config, bindings=bindings)


def _need_checkpoint(args) -> Path:
    if args.checkpoint is None:
        raise ModelInputError(f"{args.command} needs --checkpoint")
    return args.checkpoint


def run(args) -> dict:
    """Execute one command and return the outputs to record in the manifest."""
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    table, model_config, train_config, gen = _configs(args)
    objects = args.objects == "on"
    outputs: dict = {}

    if args.command == "gen-data":
        for split in ("train", "test"):
            outputs[split] = str(dump_dataset(generate_dataset(gen, split), out / "data"))

    elif args.command == "build":
        model = _build(table, model_config, args.attention)
        report = cost_report(model)
        outputs["checkpoint"] = str(save_checkpoint(model, out / "model")[1])
        outputs["blocks"] = len(model.graph)
        outputs["edges"] = len(model.graph.edges)
        outputs["params"] = report.total_params
        print(f"{len(model.graph)} blocks, {len(model.graph.edges)} edges, {report.total_params} parameters")

    elif args.command == "train":
        train_set, test_set = _datasets(gen)
        model, mlog = train_cell(table, args.attention, model_config, train_config, train_set)
        metrics = evaluate(model, test_set, objects)
        last = mlog.rows[-1][0]
        for name, value in metrics.items():
            mlog.log_metric(last, 0.0, name, value)
        outputs["metrics"] = str(mlog.write_csv(out / "metrics.csv"))
        outputs["checkpoint"] = str(save_checkpoint(model, out / "model")[1])
        outputs["test"] = metrics
        print(json.dumps(metrics))

    elif args.command == "search":
        train_set, test_set = _datasets(gen)
        result = run_pipeline(table, model_config, train_config, train_set, test_set, out)
        outputs["metrics"] = str(out / "metrics.csv")
        outputs["checkpoints"] = [str(out / "search.json"), str(out / "pruned.json")]
        outputs["edges_after_prune"] = len(result.pruned.graph.edges)
        outputs["test"] = result.metrics
        print(json.dumps(result.metrics))

    elif args.command == "prune":
        model = load_checkpoint(_need_checkpoint(args))
        graph = prune_attention(prune_connections(model.graph, train_config.prune_threshold))
        pruned = model.replace_graph(graph)
        outputs["checkpoint"] = str(save_checkpoint(pruned, out / "pruned")[1])
        outputs["edges"] = [len(model.graph.edges), len(pruned.graph.edges)]
        print(f"kept {len(pruned.graph.edges)} of {len(model.graph.edges)} edges")

    elif args.command == "eval":
        model = load_checkpoint(_need_checkpoint(args))
        _, test_set = _datasets(gen)
        metrics = evaluate(model, test_set)
        outputs["test"] = metrics
        (out / "eval.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))
        print(json.dumps(metrics))

    elif args.command == "cost":
        if args.checkpoint is not None:
            model = load_checkpoint(args.checkpoint)
        else:
            model = _build(table, model_config, args.attention)
        shape = None
        if args.input_shape:
            shape = tuple(int(v) for v in args.input_shape.split(","))
            if len(shape) != 4:
                raise ModelInputError("--input-shape needs four integers N,T,H,W")
        report = cost_report(model, shape)
        (out / "cost.json").write_text(report.dumps())
        outputs["report"] = report.to_json()
        print(report.table())

    elif args.command == "export-dot":
        graph = load_checkpoint(args.checkpoint).graph if args.checkpoint else _build(table, model_config, args.attention).graph
        outputs["dot"] = str(export_dot(graph, out / "graph.dot"))
        print(outputs["dot"])

    elif args.command == "ablate-attention":
        train_set, test_set = _datasets(gen)
        rows = ablate_attention(load_table(args.table), model_config, train_config, train_set, test_set, out_dir=out)
        outputs["results"] = str(out / "ablation.csv")
        for r in rows:
            print(f"{r.mode:<7} objects={'on' if r.objects else 'off':<3} accuracy={r.accuracy:.4f}")

    elif args.command == "sweep-object-ratio":
        train_set, test_set = _datasets(gen)
        result = sweep_object_ratio(load_table(args.table), model_config, train_config, train_set, test_set, out_dir=out)
        outputs["results"] = str(out / "sweep.csv")
        outputs["spearman"] = result.spearman
        for r, a in zip(result.ratios, result.accuracies):
            print(f"ratio={r:.2f} accuracy={a:.4f}")
        print(f"spearman={result.spearman:.4f}")

    return outputs


def _category(exc: BaseException) -> str:
    if isinstance(exc, TableError):
        return "table"
    if isinstance(exc, GraphError):
        return "graph"
    if isinstance(exc, (TrainingError, NonFiniteError)):
        return "training"
    if isinstance(exc, OSError):
        return "io"
    return "input"


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    resolved = _resolve(args)
    log.info("resolved config: %s", json.dumps(resolved, sort_keys=True))
    try:
        outputs = run(args)
    except (TableError, GraphError, TrainingError, NonFiniteError, ModelInputError, OSError, ValueError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {_category(exc)}: {msg}", file=sys.stderr)
        return 1
    manifest = {"peernet": __version__, "config": resolved, "outputs": outputs}
    (args.out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
