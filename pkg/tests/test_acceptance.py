"""Acceptance criteria 1-10. Each test records one PASS/FAIL line, shown in the terminal summary."""

import itertools
import math
import time

import numpy as np
import pytest
import torch

import conftest
from oracles import dense_forward, naive_diagnose, naive_representation_quality, naive_supcon, recount_provenance
from rograd.attacks import AttackSpec, apply_compound, intensity
from rograd.backbones import BackboneConfig, build_model, forward, prepare, train_classifier
from rograd.embed_store import EmbeddingStore, HashingEncoder, build_store
from rograd.harness import (
    GRID_LABELED,
    GRID_RATIOS,
    CurvePoint,
    GridSpec,
    Resources,
    norm_auc,
    representation_quality,
    rograd_stages,
    run_cell,
)
from rograd.llm_gateway import LLMGateway, MockLLM
from rograd.r2cl import supcon_loss
from rograd.sggm import SggmConfig, diagnose, generate_sample
from rograd.synthetic import make_synthetic_tag

GRID = list(itertools.product(GRID_RATIOS, GRID_RATIOS, GRID_RATIOS, GRID_LABELED))
SEEDS = range(5)


def verdict(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_attack_oracle():
    graph = make_synthetic_tag(n_nodes=60, n_classes=3, seed=0).graph
    start = time.perf_counter()
    mismatches = 0
    for (nra, sha, fda, lr), seed in itertools.product(GRID, range(20)):
        attacked = apply_compound(graph, AttackSpec(nra, sha, fda, lr, seed=seed))
        counts = recount_provenance(graph, attacked.graph)
        p = attacked.provenance
        got = {k: getattr(p, k) for k in counts}
        mismatches += got != counts
    elapsed = time.perf_counter() - start
    verdict(1, mismatches == 0 and elapsed < 10.0,
            f"{len(GRID) * 20} attacks, {mismatches} mismatches, {elapsed:.2f}s < 10s")


# published intensity labels; supervision scarcity contributes 0, 0.33 or 0.66
TABLE_LABELS = {
    0.00, 0.33, 0.50, 0.66, 0.83, 0.90, 1.00, 1.16, 1.23, 1.33, 1.40, 1.50, 1.56, 1.66, 1.73, 1.80, 1.83, 1.90,
    2.06, 2.13, 2.16, 2.23, 2.30, 2.46, 2.56, 2.63, 2.70, 2.96, 3.03, 3.36,
}
SSA_LABEL = {0.6: 0.0, 0.4: 0.33, 0.2: 0.66}


def test_criterion_2_intensity_axis():
    bad = [
        (nra, sha, fda, lr)
        for nra, sha, fda, lr in GRID
        if round(intensity(AttackSpec(nra, sha, fda, lr)), 2) != round(nra + sha + fda + SSA_LABEL[lr], 2)
    ]
    labels = {round(intensity(AttackSpec(*cell)), 2) for cell in GRID}
    top = max(labels)
    verdict(2, not bad and labels == TABLE_LABELS and top == 3.36,
            f"{len(GRID) - len(bad)}/81 labels match, {len(labels)} distinct, max {top:.2f}")


def test_criterion_3_diagnostics_oracle():
    gen = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        n, d, classes = int(gen.integers(4, 101)), int(gen.integers(1, 33)), int(gen.integers(2, 5))
        n = max(n, classes)
        labels = np.concatenate([np.arange(classes), gen.integers(0, classes, n - classes)])
        kinds = np.where(gen.random(n) < 0.25, "generated", "original")
        kinds[:classes] = "original"
        vecs = gen.standard_normal((n, d))
        store = EmbeddingStore(d)
        for kind in ("original", "generated"):
            rows = np.flatnonzero(kinds == kind)
            store.add([f"v{r}" for r in rows], labels[rows], vecs[rows], kind=kind)
        cand = gen.standard_normal(d)
        cand /= np.linalg.norm(cand)
        prev = [v / np.linalg.norm(v) for v in gen.standard_normal((int(gen.integers(0, 5)), d))]
        label, k = int(gen.integers(0, classes)), int(gen.integers(1, 16))
        rep = diagnose(cand, store, prev, label, SggmConfig(k=k))
        ref = naive_diagnose(cand, store.vectors, store.labels, store.kinds, prev, label, k)
        worst = max(worst, max(abs(getattr(rep, m) - v) for m, v in ref.items()))
    verdict(3, worst <= 1e-9, f"200 stores, max abs error {worst:.1e} <= 1e-9")


def test_criterion_4_supcon():
    gen = np.random.default_rng(4)
    worst_loss = 0.0
    for _ in range(100):
        n, d = int(gen.integers(2, 33)), int(gen.integers(2, 17))
        z = torch.nn.functional.normalize(torch.tensor(gen.standard_normal((n, d))), dim=1)
        y = torch.tensor(gen.integers(0, 4, n))
        y[1] = y[0]
        g = torch.tensor(gen.random(n) < 0.5)
        ref = naive_supcon(z.numpy(), y.tolist(), g.tolist(), 0.07, 2.0)
        worst_loss = max(worst_loss, abs(float(supcon_loss(z, y, g)) - ref))

    worst_grad = 0.0
    for _ in range(5):
        n, d = int(gen.integers(4, 33)), int(gen.integers(2, 17))
        z = torch.nn.functional.normalize(torch.tensor(gen.standard_normal((n, d))), dim=1).requires_grad_(True)
        y = torch.tensor(gen.integers(0, 3, n))
        y[1] = y[0]
        g = torch.tensor(gen.random(n) < 0.5)
        tau = 0.5
        supcon_loss(z, y, g, tau).backward()
        num = torch.zeros_like(z)
        with torch.no_grad():
            for idx in np.ndindex(*z.shape):
                zp, zm = z.detach().clone(), z.detach().clone()
                zp[idx] += 1e-6
                zm[idx] -= 1e-6
                num[idx] = (supcon_loss(zp, y, g, tau) - supcon_loss(zm, y, g, tau)) / 2e-6
        worst_grad = max(worst_grad, float((z.grad - num).norm() / num.norm()))

    same = torch.nn.functional.normalize(torch.ones(4, 3, dtype=torch.float64), dim=1)
    e = torch.eye(2, dtype=torch.float64)
    split = torch.stack([e[0], e[0], e[1], e[1]])
    y = torch.tensor([0, 0, 1, 1])
    c1 = abs(float(supcon_loss(same, y)) - math.log(3))
    c2 = abs(float(supcon_loss(split, y)) - math.log(1 + 2 * math.exp(-1 / 0.07)))
    ok = worst_loss <= 1e-10 and worst_grad < 1e-4 and max(c1, c2) <= 1e-6
    verdict(4, ok, f"loss err {worst_loss:.1e} <= 1e-10, grad rel err {worst_grad:.1e} < 1e-4, "
                   f"closed forms err {max(c1, c2):.1e} <= 1e-6")


def test_criterion_5_backbones():
    start = time.perf_counter()
    gen = np.random.default_rng(5)
    worst, attn = 0.0, 0.0
    for trial in range(30):
        n = int(gen.integers(2, 17))
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if gen.random() < 0.35] or [(0, 1)]
        g = conftest.make_graph(n=n, num_classes=3, edges=pairs, seed=trial, dim=6)
        for arch in ("gcn", "gat", "sage"):
            model = build_model(BackboneConfig(arch, seed=trial), 6, 3)
            out = forward(model, g).double().numpy()
            worst = max(worst, float(np.abs(out - dense_forward(model, g.features, pairs)).max()))
            if arch == "gat":
                t = prepare(g)
                for alpha in model.attention():
                    sums = torch.zeros(n, alpha.shape[1], dtype=alpha.dtype).index_add_(0, t.dst, alpha)
                    attn = max(attn, float((sums - 1).abs().max()))
    accs = []
    for seed in SEEDS:
        graph = make_synthetic_tag(seed=seed, homophily=1.0).graph
        for arch in ("gcn", "gat", "sage"):
            accs.append(train_classifier(graph, config=BackboneConfig(arch, max_epochs=200, seed=seed))[1].test_acc)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and attn <= 1e-6 and min(accs) >= 95.0 and elapsed < 60.0
    verdict(5, ok, f"dense err {worst:.1e} <= 1e-5, attention err {attn:.1e} <= 1e-6, "
                   f"min separable acc {min(accs):.1f}% >= 95% over 5 seeds x 3 archs, {elapsed:.1f}s < 60s")


def test_criterion_6_metrics():
    consts = [0.0, 12.5, 37.5, 62.5, 87.98, 100.0]
    xs = [0.0, 0.33, 0.5, 1.16, 2.06, 3.36]
    flat = all(norm_auc([CurvePoint(x, c, 1) for x in xs]) == c / 100 for c in consts)
    ramp = norm_auc([CurvePoint(0.0, 100.0, 1), CurvePoint(1.0, 0.0, 1)]) == 0.5
    gen = np.random.default_rng(6)
    worst = 0.0
    for _ in range(50):
        n, d = int(gen.integers(4, 50)), int(gen.integers(1, 10))
        z = gen.standard_normal((n, d))
        y = np.concatenate([[0, 1], gen.integers(0, 4, n - 2)])
        rep = representation_quality(z, y)
        intra, inter = naive_representation_quality(z.tolist(), y.tolist())
        worst = max(worst, float(np.abs(rep.intra_variance - intra).max()), float(np.abs(rep.inter_margin - inter).max()))
    verdict(6, flat and ramp and worst <= 1e-10,
            f"constant curves exact: {flat}, ramp = 0.5: {ramp}, quality err {worst:.1e} <= 1e-10")


ATTACK = (0.5, 0.5, 0.5, 0.2)


@pytest.fixture(scope="module")
def paired_runs():
    """Vanilla and RoGRAD on identical attacked graphs, one grid cell per seed."""
    start = time.perf_counter()
    runs = []
    for seed in SEEDS:
        grid = GridSpec(seed=seed, methods=("vanilla", "rograd"))
        res = Resources.load(grid)
        cell_seed = grid.cell_seed(*ATTACK, 0)
        vanilla = run_cell(grid, *ATTACK, cell_seed, "vanilla", res)
        ours = run_cell(grid, *ATTACK, cell_seed, "rograd", res)
        runs.append((grid, res, cell_seed, vanilla, ours))
    return runs, time.perf_counter() - start


def test_criterion_7_end_to_end(paired_runs):
    runs, elapsed = paired_runs
    van = [r[3].test_acc for r in runs]
    ours = [r[4].test_acc for r in runs]
    paired = all(r[3].provenance == r[4].provenance for r in runs)
    ok = paired and all(r[3].ok and r[4].ok for r in runs) and np.median(ours) > np.median(van) and elapsed < 120
    verdict(7, ok, f"median RoGRAD {np.median(ours):.2f} vs vanilla {np.median(van):.2f} (must be strictly greater), "
                   f"per seed {ours} vs {van}, {elapsed:.1f}s < 120s")


def _unit(m):
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.where(norms > 0, norms, 1.0)


def test_criterion_8_representation_direction(paired_runs):
    runs, _ = paired_runs
    intra_raw, intra_h, inter_raw, inter_h = [], [], [], []
    for grid, res, cell_seed, _, _ in runs:
        attacked = apply_compound(res.graph, AttackSpec(*ATTACK, seed=cell_seed)).graph
        _, result = rograd_stages(attacked, grid, res, cell_seed)
        n, ok = attacked.num_nodes, ~attacked.feature_missing
        raw = representation_quality(_unit(attacked.features.astype(np.float64))[ok], attacked.labels[ok])
        learned = representation_quality(_unit(result.representations.h[:n])[ok], attacked.labels[ok])
        intra_raw.append(raw.mean_intra)
        intra_h.append(learned.mean_intra)
        inter_raw.append(raw.min_inter)
        inter_h.append(learned.min_inter)
    ok = np.median(intra_h) < np.median(intra_raw) and np.median(inter_h) > np.median(inter_raw)
    verdict(8, ok, f"median intra {np.median(intra_raw):.3f} -> {np.median(intra_h):.3f}, "
                   f"median min inter {np.median(inter_raw):.3f} -> {np.median(inter_h):.3f}")


def test_criterion_9_sggm_termination(synthetic):
    graph = synthetic.graph
    enc = HashingEncoder(256)
    store = build_store(graph, enc, graph.train_mask)
    texts = dict(zip(graph.node_ids, graph.texts))
    gen = np.random.default_rng(9)
    good = 0
    for trial in range(50):
        config = SggmConfig(k=int(gen.integers(1, 11)), keyword_weight=float(gen.uniform(0.0, 2.5)),
                            max_rounds=int(gen.integers(2, 7)))
        label = int(gen.integers(0, graph.num_classes))
        seed = int(gen.integers(0, 2**31))
        name = graph.class_names[label]
        never = generate_sample(label, store, texts, LLMGateway(MockLLM(synthetic.vocab, seed=trial, mode="off_category")),
                                enc, config, seed=seed, category_name=name)
        comply = generate_sample(label, store, texts, LLMGateway(MockLLM(synthetic.vocab, seed=trial)),
                                 enc, config, seed=seed, category_name=name)
        good += (never.rounds_used == config.max_rounds and not never.clean
                 and comply.clean and comply.rounds_used < config.max_rounds)
    verdict(9, good == 50, f"{good}/50 randomized configs behave as required")


@pytest.mark.assets
@pytest.mark.skip(reason="needs the Cora dataset, a sentence-embedding model and a live LLM endpoint")
def test_criterion_10_real_assets():
    """Vanilla GCN clean accuracy within 2 points of 87.98 and RoGRAD within 2 points of 89.39 on Cora."""
