"""The verification gate: one test per numbered criterion, each printing a
PASS/FAIL line (run with -s to see them on success)."""

import time

import numpy as np
import pytest

from setloc.attention import (
    GraphAttentionParams,
    GraphToGraphParams,
    MultiHeadParams,
    graph_attention_coefficients,
    graph_self_attention_mp,
    graph_to_graph_coefficients,
    graph_to_graph_mp,
    multi_head_self_attention,
)
from setloc.config import load_run_config
from setloc.data import load_dataset, save_dataset, synthesize_dataset
from setloc.diagnostics import gradcheck_suite
from setloc.errors import NumericError
from setloc.evaluation import (
    Detection,
    average_precision,
    evaluate,
    ground_truth_as_detections,
    matched_segment_pairs,
)
from setloc.matching import (
    GroundTruth,
    LossWeights,
    brute_force_match,
    hungarian_loss,
    hungarian_match,
    iou_loss,
    matching_cost,
    segment_loss,
)
from setloc.model import Model
from setloc.tensor import Tensor
from setloc.trainer import TrainConfig, predict_corpus, train
from tests.test_matching import FakePred, random_gt, random_pred


def report(criterion: int, ok: bool, detail: str):
    print(f"ACCEPTANCE {criterion:02d} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


# ---------------------------------------------------------------------------


def test_criterion_01_gradient_integrity():
    cfg = load_run_config("toy-gradcheck")
    assert (cfg.model.d, cfg.model.k, cfg.model.l_e, cfg.model.l_d) == (8, 2, 1, 1)
    assert (cfg.model.c_in, cfg.model.n_o, cfg.model.c_cls) == (6, 5, 3)
    start = time.time()
    rows = gradcheck_suite(cfg.model, seed=cfg.train.seed)
    elapsed = time.time() - start
    worst = max(err for _, _, err in rows)
    modules = {m for m, _, _ in rows}
    assert modules == {
        "graph_self_attention",
        "graph_to_graph",
        "prediction_heads",
        "hungarian_loss",
    }
    report(
        1,
        worst < 1e-4 and elapsed < 60.0,
        f"worst gradient rel. error {worst:.2e} over {len(rows)} checks in {elapsed:.1f}s",
    )


def test_criterion_02_matcher_oracle_equivalence():
    start = time.time()
    checked = 0
    for n in range(2, 8):
        for seed in range(100):
            cost = np.random.default_rng(10_000 * n + seed).normal(size=(n, n))
            fast = hungarian_match(cost)
            slow = brute_force_match(cost)
            assert abs(fast.total_cost - slow.total_cost) < 1e-9, (n, seed)
            checked += 1
    elapsed = time.time() - start
    report(2, elapsed < 10.0, f"{checked} cost matrices, totals identical, {elapsed:.1f}s")


def test_criterion_03_loss_set_semantics():
    w = LossWeights()
    worst = 0.0
    rng = np.random.default_rng(42)
    for fixture in range(20):
        gt = random_gt(4, 3, seed=fixture)
        pred = random_pred(7, 3, seed=500 + fixture)
        base = hungarian_loss(gt, pred, w).item()
        for _ in range(20):
            perm = rng.permutation(4)
            shuffled = GroundTruth(gt.labels[perm], gt.segments[perm])
            worst = max(worst, abs(hungarian_loss(shuffled, pred, w).item() - base))
    probs = np.random.default_rng(1).dirichlet(np.ones(4), size=1)[0]
    empty_cost = matching_cost(3, [0.1, 0.9], probs, [0.3, 0.7], w, no_action=3)
    report(
        3,
        worst < 1e-9 and empty_cost == 0.0,
        f"max permutation drift {worst:.1e}; no-action cost {empty_cost}",
    )


def test_criterion_04_attention_normalization_and_residuals():
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 4))
        d = k * int(rng.integers(1, 5))
        n = int(rng.integers(2, 8))
        mask = rng.random(n) < 0.7
        mask[rng.integers(0, n)] = True
        x = Tensor(rng.normal(size=(n, d)))
        params = GraphAttentionParams(d, k, rng)
        alpha = graph_attention_coefficients(x, params, mask)
        worst = max(worst, float(np.abs(alpha.data.sum(axis=2) - 1.0).max()))
        g2g = GraphToGraphParams(d, k, rng)
        beta = graph_to_graph_coefficients(x, Tensor(rng.normal(size=(3, d))), g2g, mask)
        worst = max(worst, float(np.abs(beta.data.sum(axis=2) - 1.0).max()))

    rng = np.random.default_rng(99)
    d, k = 8, 2
    x = rng.normal(size=(5, d))
    sa = GraphAttentionParams(d, k, rng)
    for p in sa.w_g:
        p.data[...] = 0.0
    exact_sa = np.array_equal(graph_self_attention_mp(Tensor(x), sa).data, x)
    g2g = GraphToGraphParams(d, k, rng)
    for p in g2g.w_s:
        p.data[...] = 0.0
    x_t = rng.normal(size=(3, d))
    exact_g2g = np.array_equal(graph_to_graph_mp(Tensor(x), Tensor(x_t), g2g).data, x_t)
    mha = MultiHeadParams(d, k, rng)
    for p in mha.w_v:
        p.data[...] = 0.0
    exact_mha = np.array_equal(multi_head_self_attention(Tensor(x), mha).data, x)
    report(
        4,
        worst < 1e-9 and exact_sa and exact_g2g and exact_mha,
        f"coefficient row-sum error {worst:.1e}; residual identities exact "
        f"(self={exact_sa}, cross={exact_g2g}, mha={exact_mha})",
    )


def test_criterion_05_padding_invariance():
    cfg = load_run_config("toy-gradcheck").model
    model = Model(cfg, np.random.default_rng(3))
    rng = np.random.default_rng(4)
    n = 4
    x = rng.normal(size=(n, cfg.c_in))
    base_ctx = model.encode(x)
    base_pred = model.predict_heads(model.decode(base_ctx))
    worst = 0.0
    for pad in range(1, 9):
        if n + pad > cfg.n_v_max:
            big = type(cfg)(**{**cfg.__dict__, "n_v_max": n + 8})
            model_big = Model(big, np.random.default_rng(3))
            base_ctx = model_big.encode(x)
            base_pred = model_big.predict_heads(model_big.decode(base_ctx))
            use = model_big
        else:
            use = model
        junk = rng.normal(size=(pad, cfg.c_in)) * 100.0
        mask = np.concatenate([np.ones(n, dtype=bool), np.zeros(pad, dtype=bool)])
        ctx = use.encode(np.concatenate([x, junk]), mask)
        pred = use.predict_heads(use.decode(ctx, mask))
        worst = max(worst, float(np.abs(ctx.data[:n] - base_ctx.data).max()))
        worst = max(worst, float(np.abs(pred.probs - base_pred.probs).max()))
        worst = max(worst, float(np.abs(pred.segs - base_pred.segs).max()))
    report(5, worst < 1e-9, f"max output drift over 1..8 pad nodes: {worst:.1e}")


def test_criterion_06_closed_form_loss_values():
    w = LossWeights(lam_l1=5.0, lam_iou=3.0)
    e1 = abs(iou_loss([0.2, 0.6], [0.4, 0.8]) - 2 / 3)
    e2 = abs(segment_loss([0.2, 0.6], [0.4, 0.8], w) - 4.0)
    e3 = abs(iou_loss([0.0, 0.2], [0.5, 0.9]) - 1.0)
    e4 = abs(segment_loss([0.2, 0.6], [0.2, 0.6], w))
    ok = e1 < 1e-12 and e2 < 1e-12 and e3 == 0.0 and e4 == 0.0
    report(6, ok, f"iou 2/3 err {e1:.1e}; weighted 4.0 err {e2:.1e}; disjoint/identical exact")


def test_criterion_07_evaluation_oracle():
    from tests.test_evaluation import fixture_corpus

    gt, dets = fixture_corpus()
    replay = evaluate(ground_truth_as_detections(gt), gt)
    perfect = all(v == 1.0 for v in replay.map_per_threshold.values())

    rep = evaluate(dets, gt, thresholds=(0.2, 0.5, 0.8))
    expected = {0.2: 1.0, 0.5: 5 / 6, 0.8: 3 / 4}
    fixture_err = max(abs(rep.map_per_threshold[t] - expected[t]) for t in expected)

    rng = np.random.default_rng(5)
    gts = {"v": np.sort(rng.uniform(0, 1, (6, 2)), axis=1)}
    rdets = [
        Detection("v", 0, float(rng.uniform()), *sorted(rng.uniform(0, 1, 2)))
        for _ in range(20)
    ]
    aps = [average_precision(rdets, gts, t) for t in np.linspace(0.05, 0.95, 10)]
    monotone = all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))
    report(
        7,
        perfect and fixture_err < 1e-12 and monotone,
        f"replay mAP 1.0: {perfect}; fixture err {fixture_err:.1e}; AP monotone: {monotone}",
    )


# ---------------------------------------------------------------------------
# criteria 8-10 share the toy-overfit fixture (see conftest-style fixture below)


def test_criterion_11_determinism_and_persistence(tmp_path):
    cfg = load_run_config(
        "toy-overfit",
        overrides=[
            "synth.num_videos=6",
            "train.total_steps=12",
            "train.decay_step=10",
            "train.eval_interval=6",
            "train.batch_size=3",
        ],
    )
    records = synthesize_dataset(cfg.synth)

    a = train(Model(cfg.model, np.random.default_rng(0)), records, cfg.train)
    b = train(Model(cfg.model, np.random.default_rng(0)), records, cfg.train)
    curves_equal = a.loss_curve == b.loss_curve

    full = train(
        Model(cfg.model, np.random.default_rng(0)),
        records,
        cfg.train,
        out_dir=str(tmp_path / "run"),
    )
    resumed = train(
        Model(cfg.model, np.random.default_rng(1)),
        records,
        cfg.train,
        resume_from=str(tmp_path / "run" / "step0000006.ckpt"),
    )
    resume_equal = resumed.loss_curve == full.loss_curve[6:]

    path = tmp_path / "roundtrip.slds"
    save_dataset(records, path)
    loaded = load_dataset(path)
    path2 = tmp_path / "roundtrip2.slds"
    save_dataset(loaded, path2)
    files_equal = path.read_bytes() == path2.read_bytes()
    arrays_equal = all(
        np.array_equal(x.features, y.features) and x.annotations == y.annotations
        for x, y in zip(records, loaded)
    )
    report(
        11,
        curves_equal and resume_equal and files_equal and arrays_equal,
        f"same-seed curves equal: {curves_equal}; resume bitwise: {resume_equal}; "
        f"dataset round-trip bitwise: {files_equal and arrays_equal}",
    )
