"""Acceptance criteria, one test per criterion.

Each test prints a single PASS/FAIL line (collected into the terminal
summary) and then asserts, so a failing criterion is reported and stays red.
Criteria 5 and 6 train models and take several minutes; deselect them with
``-m "not slow"``.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

import oracles
from conftest import record_criterion, three_block_table
from peernet import tensor as tn
from peernet.attention import select_peer
from peernet.blocks import BlockSpec
from peernet.cost import attention_overhead, cost_report
from peernet.data import GeneratorConfig, generate_dataset
from peernet.experiments import ablate_attention, source_peer_bindings, sweep_object_ratio
from peernet.graph import (
    ConnectionEdge,
    ConnectivityGraph,
    attention_peers,
    peer_set,
    prune_attention,
    prune_connections,
    valid_edges,
)
from peernet.model import ModelConfig, build_model, load_table, model_forward, save_checkpoint
from peernet.trainer import TrainConfig, loss_fn, run_pipeline

TOY = ModelConfig(width_scale=1.0, T=2, H=16, W=16, batch=1, num_classes=5, attention_mode="oneshot")


def _toy_inputs(rng, batch=1):
    return {"rgb": rng.uniform(-1, 1, (batch, TOY.T, TOY.H, TOY.W, 3))}


# 1 ---------------------------------------------------------------------------


def test_criterion_1_gradient_fidelity():
    start = time.perf_counter()
    model = build_model(three_block_table(), TOY, bindings={(0, 1): {"mode": "static"}})
    rng = np.random.default_rng(1)
    for _, p in model.named_parameters():
        p.data += rng.normal(0, 0.05, p.shape)
    inputs, labels = _toy_inputs(np.random.default_rng(2)), np.array([3])
    named = model.named_parameters()
    model.zero_grad()
    with tn.Tape() as tape:
        loss = loss_fn(model(inputs), labels)
    tape.backward(loss, [p for _, p in named])

    def value() -> float:
        return loss_fn(model(inputs), labels).item()

    classes = {"conv": 0, "adapter": 0, "head": 0, "w": 0, "h": 0, "static": 0, "proj": 0}
    worst, worst_name, checked = 0.0, "", 0
    max_abs, max_grad, live = 0.0, 0.0, 0
    pick = np.random.default_rng(3)
    for name, p in named:
        flat = p.data.reshape(-1)
        coords = range(p.size) if p.size <= 16 else pick.choice(p.size, 16, replace=False)
        for i in coords:
            keep = flat[i]
            flat[i] = keep + 1e-5
            up = value()
            flat[i] = keep - 1e-5
            down = value()
            flat[i] = keep
            fd = (up - down) / 2e-5
            an = p.grad.reshape(-1)[i]
            err = abs(fd - an)
            max_abs, max_grad = max(max_abs, err), max(max_grad, abs(an))
            live += abs(an) > 1e-6
            if err >= 1e-7:
                rel = err / max(abs(fd), abs(an))
                if rel > worst:
                    worst, worst_name = rel, name
            checked += 1
        for key in classes:
            tail = name.split("/", 1)[-1]
            if (key == "conv" and name.startswith("block")) or (key != "conv" and tail.startswith(key)):
                classes[key] += 1
    elapsed = time.perf_counter() - start
    missing = [k for k, n in classes.items() if n == 0]
    passed = worst < 1e-4 and not missing and live > checked // 2 and elapsed < 60
    record_criterion(
        1, "gradient fidelity", passed,
        f"{checked} coordinates over {len(named)} tensors, worst rel err {worst:.2e} ({worst_name or '-'}), "
        f"max abs err {max_abs:.1e}, max |grad| {max_grad:.1e}, {live} with |grad| > 1e-6, classes {sorted(classes)}, {elapsed:.1f}s",
    )
    assert not missing, missing
    assert live > checked // 2
    assert worst < 1e-4
    assert elapsed < 60


# 2 ---------------------------------------------------------------------------


def _explicit_peer_model(model, chosen: dict):
    """Peer model built from scratch with the oneshot weights copied over.

    ``chosen[(j, i)]`` is the position of the kept peer in the edge's peer set.
    """
    bindings = {
        (e.src, e.dst): {"mode": "peer", "peer": e.attention.peers[chosen[(e.src, e.dst)]]}
        for e in model.graph.edges
    }
    explicit = build_model(model.table, replace(model.config, attention_mode="none"), bindings=bindings)
    source = dict(model.named_parameters())
    for name, p in explicit.named_parameters():
        if "/head/" not in name:
            p.data = source[name].data.copy()
    for e in model.graph.edges:
        att = e.attention
        target = explicit.graph.edge(e.src, e.dst).attention.head
        target.weight.data = att.projectors[chosen[(e.src, e.dst)]].data @ att.head.weight.data
        target.bias.data = att.head.bias.data.copy()
    return explicit


def test_criterion_2_one_hot_pruning_equivalence():
    start = time.perf_counter()
    model = build_model(three_block_table(), TOY)
    rng = np.random.default_rng(5)
    chosen = {}
    for e in model.graph.edges:
        att = e.attention
        att.head.weight.data = rng.normal(0, 0.5, att.head.weight.shape)
        k = len(att.peers) - 1
        chosen[(e.src, e.dst)] = k
        att.h.data[:] = -1e3
        att.h.data[k] = 1e3
    explicit = _explicit_peer_model(model, chosen)
    exact = 0.0
    for i in range(100):
        inputs = _toy_inputs(np.random.default_rng(1000 + i))
        exact = max(exact, float(np.abs(model(inputs).data - explicit(inputs).data).max()))

    probs = []
    for e in model.graph.edges:
        att = e.attention
        m, k = len(att.peers), chosen[(e.src, e.dst)]
        att.h.data[:] = 0.0
        if m > 1:
            att.h.data[k] = np.log(0.995 * (m - 1) / 0.005)
        probs.append(float(tn.softmax(att.h).data[k]))
    pruned = model.replace_graph(prune_attention(model.graph))
    near = 0.0
    for i in range(100):
        inputs = _toy_inputs(np.random.default_rng(2000 + i))
        near = max(near, float(np.abs(model(inputs).data - pruned(inputs).data).max()))
    elapsed = time.perf_counter() - start
    passed = exact < 1e-6 and min(probs) > 0.99 and near < 1e-3 and elapsed < 30
    record_criterion(
        2, "one-hot / pruning equivalence", passed,
        f"saturated max diff {exact:.1e}, near-saturated (p >= {min(probs):.3f}) max diff {near:.1e}, "
        f"{elapsed:.1f}s",
    )
    assert exact < 1e-6
    assert min(probs) > 0.99 and near < 1e-3
    assert elapsed < 30


# 3 ---------------------------------------------------------------------------


def test_criterion_3_table_reconstruction():
    start = time.perf_counter()
    table = load_table()
    levels = sorted({r.level for r in table.rows})
    sums = table.level_channel_sums(1.0)
    expected_sums = {0: 128, 1: 128, 2: 256, 3: 512, 4: 512}
    elapsed = time.perf_counter() - start
    checks = {
        "15 blocks": len(table.rows) == 15,
        "43 edges": table.edge_count == 43,
        "levels 0-4": levels == [0, 1, 2, 3, 4],
        "channel sums": sums == expected_sums,
        "< 1 s": elapsed < 1,
    }
    record_criterion(
        3, "table reconstruction", all(checks.values()),
        f"{len(table.rows)} blocks, {table.edge_count} edges, levels {levels}, sums {list(sums.values())}; "
        f"failed: {[k for k, ok in checks.items() if not ok] or 'none'}",
    )
    assert len(table.rows) == 15
    assert levels == [0, 1, 2, 3, 4]
    assert sums == expected_sums
    assert table.edge_count == 43, f"the packaged table lists {table.edge_count} input connections"


# 4 ---------------------------------------------------------------------------


def test_criterion_4_overhead_bracketing():
    start = time.perf_counter()
    table = load_table()
    config = ModelConfig(width_scale=1.0, depth_scale=1.0, T=8, H=224, W=224, batch=1,
                         num_classes=table.num_classes, object_channels=table.row(4).channels)
    plain = build_model(table, config)
    with_attention = build_model(table, config, bindings=source_peer_bindings(table))
    params, flops = attention_overhead(with_attention, plain, (1, 8, 224, 224))
    elapsed = time.perf_counter() - start
    passed = 0.01 <= params <= 0.03 and flops < 0.005 and elapsed < 10
    record_criterion(
        4, "overhead bracketing", passed,
        f"params +{params:.3%} (band 1-3%), flops +{flops:.4%} (< 0.5%), {elapsed:.1f}s",
    )
    assert 0.01 <= params <= 0.03
    assert flops < 0.005
    assert elapsed < 10


# 5 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_ablation_direction(tmp_path):
    start = time.perf_counter()
    seed = 0
    gen = GeneratorConfig(seed=seed)
    train_set, test_set = generate_dataset(gen, "train"), generate_dataset(gen, "test")
    rows = ablate_attention(load_table(), ModelConfig(seed=seed), TrainConfig(seed=seed),
                            train_set, test_set, out_dir=tmp_path)
    elapsed = time.perf_counter() - start
    acc = {(r.mode, r.objects): 100 * r.accuracy for r in rows}
    margin = acc[("peer", True)] - acc[("none", True)]
    objects_help = {m: acc[(m, True)] >= acc[(m, False)] for m in ("none", "static", "self", "peer")}
    table = ", ".join(f"{m} {acc[(m, True)]:.2f}/{acc[(m, False)]:.2f}" for m in objects_help)
    passed = margin >= 2.0 and all(objects_help.values()) and elapsed < 600
    record_criterion(
        5, "toy ablation direction", passed,
        f"with/without objects: {table}; peer - none = {margin:+.2f} pts (>= +2), {elapsed:.0f}s (< 600)",
    )
    assert all(objects_help.values()), objects_help
    assert margin >= 2.0
    assert elapsed < 600


# 6 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_object_ratio_trend(tmp_path):
    start = time.perf_counter()
    rhos = []
    for seed in range(3):
        gen = GeneratorConfig(seed=seed)
        result = sweep_object_ratio(
            load_table(), ModelConfig(seed=seed), TrainConfig(seed=seed),
            generate_dataset(gen, "train"), generate_dataset(gen, "test"), out_dir=tmp_path / str(seed),
        )
        rhos.append(result.spearman)
    elapsed = time.perf_counter() - start
    positive = sum(r > 0 for r in rhos)
    passed = positive >= 2 and elapsed < 1200
    record_criterion(
        6, "object-ratio trend", passed,
        f"spearman per seed {[round(r, 3) for r in rhos]}, {positive}/3 positive, {elapsed:.0f}s (< 1200)",
    )
    assert positive >= 2
    assert elapsed < 1200


# 7 ---------------------------------------------------------------------------


def test_criterion_7_determinism(tmp_path):
    gen = GeneratorConfig(samples=24, test_samples=8)
    train_set, test_set = generate_dataset(gen, "train"), generate_dataset(gen, "test")
    config = ModelConfig(T=gen.T, batch=2)
    outputs = []
    for run in ("a", "b"):
        run_pipeline(load_table(), config, TrainConfig(iterations=12, batch=2, finetune=True),
                     train_set, test_set, tmp_path / run)
        outputs.append({f.name: f.read_bytes() for f in sorted((tmp_path / run).iterdir())})
    same = outputs[0] == outputs[1]
    record_criterion(
        7, "determinism", same,
        f"{len(outputs[0])} files compared byte for byte: {', '.join(outputs[0])}",
    )
    assert set(outputs[0]) == {"metrics.csv", "search.bin", "search.json", "pruned.bin", "pruned.json"}
    assert same


# 8 ---------------------------------------------------------------------------


def _random_specs(rng) -> list[BlockSpec]:
    n = int(rng.integers(2, 12))
    levels = rng.integers(0, 5, n)
    levels[0] = 0
    return [BlockSpec(i, int(lvl), 4, kind="input-rgb" if lvl == 0 else "conv") for i, lvl in enumerate(levels)]


def test_criterion_8_graph_properties():
    from peernet.attention import make_binding

    start = time.perf_counter()
    rng = np.random.default_rng(8)
    failures = []
    for trial in range(1000):
        blocks = _random_specs(rng)
        level = {b.index: b.level for b in blocks}
        edges = valid_edges(blocks)
        if any(level[j] >= level[i] for j, i in edges):
            failures.append((trial, "level order"))
        for j, i in edges:
            if peer_set((j, i), blocks) != peer_set((None, i), blocks):
                failures.append((trial, "peer set"))
        conn = []
        for j, i in edges:
            widths = {k: 4 for k in peer_set((j, i), blocks)}
            binding = make_binding("oneshot", j, 4, widths, rng)
            binding.h.data[:] = rng.normal(0, 1, binding.h.shape)
            conn.append(ConnectionEdge(j, i, tn.parameter(rng.normal(0, 2)), binding))
        graph = ConnectivityGraph(blocks, conn)
        once = prune_connections(graph)
        if prune_connections(once).edge_pairs() != once.edge_pairs():
            failures.append((trial, "idempotence"))
        final = prune_attention(once)
        if any(len(p) != 1 for p in attention_peers(final).values()):
            failures.append((trial, "one peer per edge"))
    elapsed = time.perf_counter() - start
    passed = not failures and elapsed < 10
    record_criterion(8, "graph property suite", passed,
                     f"1000 random level assignments, {len(failures)} violations, {elapsed:.1f}s")
    assert not failures, failures[:5]
    assert elapsed < 10


# 9 ---------------------------------------------------------------------------


def test_criterion_9_numeric_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(9)
    worst = {name: 0.0 for name in ("softmax", "sigmoid", "gap", "channel_scale", "conv", "fc")}
    tolerance = {"softmax": 1e-14, "sigmoid": 1e-15, "gap": 1e-14, "channel_scale": 1e-15, "conv": 1e-10, "fc": 1e-12}

    def note(name, got, want):
        worst[name] = max(worst[name], float(np.max(np.abs(np.asarray(got) - np.asarray(want)))))

    for _ in range(200):
        v = rng.uniform(-5, 5, int(rng.integers(1, 8)))
        note("softmax", tn.softmax(tn.Tensor(v)).data, oracles.softmax(v))
        x = rng.uniform(-10, 10, 6)
        note("sigmoid", tn.sigmoid(tn.Tensor(x)).data, [oracles.sigmoid(float(s)) for s in x])
        shape = tuple(int(s) for s in rng.integers(1, 4, 5))
        t = rng.standard_normal(shape)
        note("gap", tn.gap_spatial(tn.Tensor(t)).data, oracles.gap(t))
        a = rng.uniform(0, 1, (shape[0], shape[1], 1, 1, shape[4]))
        note("channel_scale", tn.channel_scale(tn.Tensor(t), tn.Tensor(a)).data, oracles.channel_scale(t, a))
        kt, kh, kw = (int(k) for k in rng.choice([1, 3], 3))
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        stride, dil = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        xc = rng.standard_normal((1, int(rng.integers(1, 4)), int(rng.integers(2, 7)), int(rng.integers(2, 7)), cin))
        wc, bc = rng.standard_normal((kt, kh, kw, cin, cout)), rng.standard_normal(cout)
        got = tn.conv3d(tn.Tensor(xc), tn.Tensor(wc), tn.Tensor(bc), stride, dil).data
        note("conv", got, oracles.conv3d(xc, wc, bc, stride, dil))
        rows, fin, fout = (int(s) for s in rng.integers(1, 6, 3))
        xf, wf, bf = rng.standard_normal((rows, fin)), rng.standard_normal((fin, fout)), rng.standard_normal(fout)
        note("fc", tn.linear(tn.Tensor(xf), tn.Tensor(wf), tn.Tensor(bf)).data, oracles.linear(xf, wf, bf))
    elapsed = time.perf_counter() - start
    bad = [n for n in worst if worst[n] > tolerance[n]]
    passed = not bad and elapsed < 60
    record_criterion(
        9, "numeric-op oracle suite", passed,
        "200 cases each; max abs err " + ", ".join(f"{n} {worst[n]:.1e}" for n in worst) + f"; {elapsed:.1f}s",
    )
    assert not bad, {n: worst[n] for n in bad}
    assert elapsed < 60
