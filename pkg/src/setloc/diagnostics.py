"""Finite-difference verification of the full model, block by block.

Each entry checks one differentiable surface (inputs and a representative
parameter) against central differences through a random linear scalarizer,
in training-mode normalization with frozen running statistics and the
matching frozen where a matcher is involved.
"""

from __future__ import annotations

import numpy as np

from .gradcheck import grad_check
from .matching import GroundTruth, LossWeights, hungarian_loss, match_predictions
from .model import Model, ModelConfig
from .tensor import Tensor, tsum

GRADCHECK_CSV_COLUMNS = ["module", "target", "max_rel_error"]


def _scalarize(out, rng):
    return tsum(out * Tensor(rng.normal(size=out.shape)))


def _swap_check(holder, attr, index, build, eps):
    """grad_check with respect to one parameter stored in a list attribute."""
    params = getattr(holder, attr)
    original = params[index]

    def f(t):
        params[index] = t
        try:
            return build()
        finally:
            params[index] = original

    return grad_check(f, Tensor(original.data.copy()), eps)


def gradcheck_suite(cfg: ModelConfig, seed: int = 0, eps: float = 1e-5):
    """Max relative gradient errors for the attention blocks, the prediction
    heads, and the full matched loss. Returns (module, target, error) rows."""
    cfg.validate()
    model = Model(cfg, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    n_v = min(4, cfg.n_v_max)
    rows = []

    run = {"training": True, "update_stats": False}

    # graph self-attention block
    block = model.encoder[0].graph_attn
    x_nodes = rng.normal(size=(n_v, cfg.d))
    scal_rng = np.random.default_rng(seed + 2)

    def self_block(t):
        return _scalarize(block(t, **run), np.random.default_rng(seed + 3))

    rows.append(("graph_self_attention", "input", grad_check(self_block, Tensor(x_nodes), eps)))
    x_fixed = Tensor(x_nodes)
    rows.append(
        (
            "graph_self_attention",
            "W_g.0",
            _swap_check(
                block.attn,
                "w_g",
                0,
                lambda: _scalarize(block(x_fixed, **run), np.random.default_rng(seed + 3)),
                eps,
            ),
        )
    )
    rows.append(
        (
            "graph_self_attention",
            "w_a.0",
            _swap_check(
                block.attn,
                "w_a",
                0,
                lambda: _scalarize(block(x_fixed, **run), np.random.default_rng(seed + 3)),
                eps,
            ),
        )
    )

    # graph-to-graph block
    cross = model.decoder[0].cross_attn
    source = Tensor(rng.normal(size=(n_v, cfg.d)))
    target_nodes = rng.normal(size=(cfg.n_o, cfg.d))

    def cross_block(t):
        return _scalarize(cross(source, t, **run), np.random.default_rng(seed + 4))

    rows.append(("graph_to_graph", "target", grad_check(cross_block, Tensor(target_nodes), eps)))

    def cross_block_source(t):
        return _scalarize(cross(t, Tensor(target_nodes), **run), np.random.default_rng(seed + 4))

    rows.append(("graph_to_graph", "source", grad_check(cross_block_source, Tensor(source.data.copy()), eps)))
    rows.append(
        (
            "graph_to_graph",
            "W_s.0",
            _swap_check(
                cross.attn,
                "w_s",
                0,
                lambda: _scalarize(
                    cross(source, Tensor(target_nodes), **run), np.random.default_rng(seed + 4)
                ),
                eps,
            ),
        )
    )

    # prediction heads
    decoded = rng.normal(size=(cfg.n_o, cfg.d))
    probs_scal = scal_rng.normal(size=(cfg.n_o, cfg.c_cls + 1))
    segs_scal = scal_rng.normal(size=(cfg.n_o, 2))

    def heads(t):
        pred = model.predict_heads(t)
        return tsum(pred.class_probs * Tensor(probs_scal)) + tsum(
            pred.segments * Tensor(segs_scal)
        )

    rows.append(("prediction_heads", "input", grad_check(heads, Tensor(decoded), eps)))

    head_w = model.head_class.weight

    def heads_weight(t):
        model.head_class.weight = t
        try:
            pred = model.predict_heads(Tensor(decoded))
            return tsum(pred.class_probs * Tensor(probs_scal))
        finally:
            model.head_class.weight = head_w

    rows.append(
        ("prediction_heads", "class.weight", grad_check(heads_weight, Tensor(head_w.data.copy()), eps))
    )

    # full matched loss through the whole model, matching frozen
    weights = LossWeights()
    gt = GroundTruth(
        np.array([0, min(1, cfg.c_cls - 1)]),
        np.array([[0.1, 0.4], [0.5, 0.9]]),
    )
    features = rng.normal(size=(n_v, cfg.c_in))
    base_pred = model.forward(features, **run)
    frozen = match_predictions(gt, base_pred.probs, base_pred.segs, weights)

    def full_loss(t):
        pred = model.forward(t, **run)
        return hungarian_loss(gt, pred, weights, assignment=frozen)

    rows.append(("hungarian_loss", "features", grad_check(full_loss, Tensor(features), eps)))

    pos = model.pos_table

    def full_loss_pos(t):
        model.pos_table = t
        try:
            pred = model.forward(features, **run)
            return hungarian_loss(gt, pred, weights, assignment=frozen)
        finally:
            model.pos_table = pos

    rows.append(
        ("hungarian_loss", "pos_table", grad_check(full_loss_pos, Tensor(pos.data.copy()), eps))
    )
    return rows
