"""Attention blocks for graphs whose edges are learned, not given.

Two message-passing flavors do the heavy lifting:

* graph self-attention: every node attends over all (unmasked) nodes of its
  own graph through per-head learned coefficients, followed by batch norm, a
  linear layer, and a standard scaled-dot-product multi-head self-attention.
* graph-to-graph attention: each target node aggregates source-graph nodes
  through the analogous cross-graph coefficients, wrapped the same way.

Neighborhoods are the complete graph over unmasked nodes (self-loops
included); masked nodes are excluded from every softmax by -inf logits and
pass through message passing unchanged.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import (
    Tensor,
    concat,
    dropout,
    leaky_relu,
    masked_softmax,
    matmul,
    relu,
    reshape,
    stack,
    transpose,
)

DEFAULT_LEAKY_SLOPE = 0.01


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out) if shape is None else shape)


def full_mask(n: int) -> np.ndarray:
    return np.ones(n, dtype=bool)


def _check_mask(mask, n: int) -> np.ndarray:
    if mask is None:
        return full_mask(n)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise ShapeError(f"mask shape {mask.shape} does not match {n} nodes")
    if not mask.any():
        raise ContractError("mask excludes every node")
    return mask


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Tensor(xavier(rng, d_in, d_out), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out

    def named_parameters(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias

    def named_buffers(self):
        return iter(())


class BatchNorm:
    """Per-feature normalization treating graph nodes as the batch axis."""

    def __init__(self, d: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)
        self.running_mean = np.zeros(d)
        self.running_var = np.ones(d)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, *, training=False, mask=None, update_stats=True):
        from .tensor import batch_norm

        return batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            momentum=self.momentum,
            eps=self.eps,
            training=training,
            mask=mask,
            update_running=update_stats,
        )

    def named_parameters(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def named_buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var


# ---------------------------------------------------------------------------
# parameter bundles


class GraphAttentionParams:
    """Per-head transforms W_g and attention vectors w_a for within-graph
    message passing; concatenating the K heads restores the node dimension."""

    def __init__(self, d: int, k: int, rng: np.random.Generator, leaky_slope=DEFAULT_LEAKY_SLOPE):
        if d % k:
            raise ContractError(f"node dimension {d} not divisible by {k} heads")
        self.k = k
        self.d_head = d // k
        self.leaky_slope = leaky_slope
        self.w_g = [Tensor(xavier(rng, d, self.d_head), requires_grad=True) for _ in range(k)]
        self.w_a = [
            Tensor(xavier(rng, 2 * self.d_head, 1, shape=(2 * self.d_head,)), requires_grad=True)
            for _ in range(k)
        ]

    def named_parameters(self):
        for i, w in enumerate(self.w_g):
            yield f"W_g.{i}", w
        for i, w in enumerate(self.w_a):
            yield f"w_a.{i}", w


class GraphToGraphParams:
    """Per-head source/target transforms and attention vectors for
    cross-graph message passing."""

    def __init__(self, d: int, k: int, rng: np.random.Generator, leaky_slope=DEFAULT_LEAKY_SLOPE):
        if d % k:
            raise ContractError(f"node dimension {d} not divisible by {k} heads")
        self.k = k
        self.d_head = d // k
        self.leaky_slope = leaky_slope
        self.w_s = [Tensor(xavier(rng, d, self.d_head), requires_grad=True) for _ in range(k)]
        self.w_t = [Tensor(xavier(rng, d, self.d_head), requires_grad=True) for _ in range(k)]
        self.w_st = [
            Tensor(xavier(rng, 2 * self.d_head, 1, shape=(2 * self.d_head,)), requires_grad=True)
            for _ in range(k)
        ]

    def named_parameters(self):
        for i, w in enumerate(self.w_s):
            yield f"W_s.{i}", w
        for i, w in enumerate(self.w_t):
            yield f"W_t.{i}", w
        for i, w in enumerate(self.w_st):
            yield f"w_st.{i}", w


class MultiHeadParams:
    """Query/key/value/output projections of standard multi-head attention."""

    def __init__(self, d: int, k: int, rng: np.random.Generator):
        if d % k:
            raise ContractError(f"node dimension {d} not divisible by {k} heads")
        self.k = k
        self.d_head = d // k
        self.w_q = [Tensor(xavier(rng, d, self.d_head), requires_grad=True) for _ in range(k)]
        self.w_k = [Tensor(xavier(rng, d, self.d_head), requires_grad=True) for _ in range(k)]
        self.w_v = [Tensor(xavier(rng, d, self.d_head), requires_grad=True) for _ in range(k)]
        self.w_o = Tensor(xavier(rng, d, d), requires_grad=True)

    def named_parameters(self):
        for i, w in enumerate(self.w_q):
            yield f"W_q.{i}", w
        for i, w in enumerate(self.w_k):
            yield f"W_k.{i}", w
        for i, w in enumerate(self.w_v):
            yield f"W_v.{i}", w
        yield "W_o", self.w_o


# ---------------------------------------------------------------------------
# message-passing operations


def _pair_logits(query_proj: Tensor, key_proj: Tensor, w_a: Tensor, slope: float) -> Tensor:
    """Pairwise pre-softmax scores: a nonlinearity over the attention vector
    applied to each concatenated [query_i || key_j] projection pair."""
    dh = query_proj.shape[1]
    a_query = matmul(query_proj, reshape(w_a[:dh], (dh, 1)))  # (n_q, 1)
    a_key = matmul(key_proj, reshape(w_a[dh:], (dh, 1)))  # (n_k, 1)
    return leaky_relu(a_query + transpose(a_key), slope)


def graph_attention_coefficients(
    x: Tensor, params: GraphAttentionParams, mask=None
) -> Tensor:
    """Attention coefficients of every head, stacked to (K, n, n). Row (k, i)
    is a distribution over the unmasked nodes j; masked columns are exactly 0.
    """
    n = x.shape[0]
    mask = _check_mask(mask, n)
    per_head = []
    for k in range(params.k):
        proj = matmul(x, params.w_g[k])
        logits = _pair_logits(proj, proj, params.w_a[k], params.leaky_slope)
        per_head.append(masked_softmax(logits, mask[None, :], axis=1))
    return stack(per_head, axis=0)


def graph_self_attention_mp(
    x: Tensor,
    params: GraphAttentionParams,
    mask=None,
    *,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Within-graph message passing: each node adds the concatenation over
    heads of its coefficient-weighted neighborhood aggregate. Masked nodes
    pass through unchanged."""
    n, d = x.shape
    if d != params.k * params.d_head:
        raise ShapeError(f"node dim {d} does not match params ({params.k}x{params.d_head})")
    mask = _check_mask(mask, n)
    heads = []
    for k in range(params.k):
        proj = matmul(x, params.w_g[k])
        logits = _pair_logits(proj, proj, params.w_a[k], params.leaky_slope)
        alpha = masked_softmax(logits, mask[None, :], axis=1)
        if training and dropout_p > 0.0:
            alpha = dropout(alpha, dropout_p, rng, training)
        heads.append(leaky_relu(matmul(alpha, proj), params.leaky_slope))
    messages = concat(heads, axis=1)
    if not mask.all():
        messages = messages * Tensor(mask.astype(np.float64)[:, None])
    return x + messages


def graph_to_graph_mp(
    x_source: Tensor,
    x_target: Tensor,
    params: GraphToGraphParams,
    source_mask=None,
    *,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Cross-graph message passing: each target node adds the concatenation
    over heads of a coefficient-weighted aggregate of source nodes. For each
    (head, target) the coefficients form a distribution over unmasked sources.
    """
    if x_source.shape[0] == 0 or x_target.shape[0] == 0:
        raise ContractError("both graphs must be nonempty")
    d = x_target.shape[1]
    if d != params.k * params.d_head or x_source.shape[1] != d:
        raise ShapeError("graph dimensions do not match params")
    source_mask = _check_mask(source_mask, x_source.shape[0])
    heads = []
    for k in range(params.k):
        s_proj = matmul(x_source, params.w_s[k])
        t_proj = matmul(x_target, params.w_t[k])
        logits = _pair_logits(t_proj, s_proj, params.w_st[k], params.leaky_slope)
        beta = masked_softmax(logits, source_mask[None, :], axis=1)  # (n_t, n_s)
        if training and dropout_p > 0.0:
            beta = dropout(beta, dropout_p, rng, training)
        heads.append(leaky_relu(matmul(beta, s_proj), params.leaky_slope))
    return x_target + concat(heads, axis=1)


def graph_to_graph_coefficients(
    x_source: Tensor, x_target: Tensor, params: GraphToGraphParams, source_mask=None
) -> Tensor:
    """Cross-graph coefficients stacked to (K, n_target, n_source)."""
    source_mask = _check_mask(source_mask, x_source.shape[0])
    per_head = []
    for k in range(params.k):
        s_proj = matmul(x_source, params.w_s[k])
        t_proj = matmul(x_target, params.w_t[k])
        logits = _pair_logits(t_proj, s_proj, params.w_st[k], params.leaky_slope)
        per_head.append(masked_softmax(logits, source_mask[None, :], axis=1))
    return stack(per_head, axis=0)


def multi_head_self_attention(
    x: Tensor,
    params: MultiHeadParams,
    mask=None,
    *,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Scaled dot-product self-attention with residual; masked keys are
    excluded from every softmax."""
    n, d = x.shape
    if d != params.k * params.d_head:
        raise ShapeError(f"node dim {d} does not match params ({params.k}x{params.d_head})")
    mask = _check_mask(mask, n)
    scale = 1.0 / np.sqrt(params.d_head)
    heads = []
    for k in range(params.k):
        q = matmul(x, params.w_q[k])
        key = matmul(x, params.w_k[k])
        v = matmul(x, params.w_v[k])
        scores = matmul(q, transpose(key)) * scale
        attn = masked_softmax(scores, mask[None, :], axis=1)
        if training and dropout_p > 0.0:
            attn = dropout(attn, dropout_p, rng, training)
        heads.append(matmul(attn, v))
    return x + matmul(concat(heads, axis=1), params.w_o)


class FeedForward:
    """Position-wise two-layer network with ReLU, added back to its input."""

    def __init__(self, d: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = d if hidden is None else hidden
        self.lin1 = Linear(d, hidden, rng)
        self.lin2 = Linear(hidden, d, rng)

    def __call__(self, x, *, dropout_p=0.0, rng=None, training=False):
        h = relu(self.lin1(x))
        if training and dropout_p > 0.0:
            h = dropout(h, dropout_p, rng, training)
        return x + self.lin2(h)

    def named_parameters(self):
        for name, p in self.lin1.named_parameters():
            yield f"lin1.{name}", p
        for name, p in self.lin2.named_parameters():
            yield f"lin2.{name}", p

    def named_buffers(self):
        return iter(())


# ---------------------------------------------------------------------------
# composed blocks


class GraphSelfAttentionBlock:
    """Message passing, then batch norm, a linear layer, and standard
    multi-head self-attention, in that order."""

    def __init__(self, d: int, k: int, rng: np.random.Generator, leaky_slope=DEFAULT_LEAKY_SLOPE):
        self.attn = GraphAttentionParams(d, k, rng, leaky_slope)
        self.bn = BatchNorm(d)
        self.linear = Linear(d, d, rng)
        self.mha = MultiHeadParams(d, k, rng)

    def __call__(self, x, mask=None, *, dropout_p=0.0, rng=None, training=False, update_stats=True):
        x = graph_self_attention_mp(
            x, self.attn, mask, dropout_p=dropout_p, rng=rng, training=training
        )
        x = self.bn(x, training=training, mask=mask, update_stats=update_stats)
        x = self.linear(x)
        return multi_head_self_attention(
            x, self.mha, mask, dropout_p=dropout_p, rng=rng, training=training
        )

    def named_parameters(self):
        for name, p in self.attn.named_parameters():
            yield name, p
        for name, p in self.bn.named_parameters():
            yield f"bn.{name}", p
        for name, p in self.linear.named_parameters():
            yield f"linear.{name}", p
        for name, p in self.mha.named_parameters():
            yield f"mha.{name}", p

    def named_buffers(self):
        for name, b in self.bn.named_buffers():
            yield f"bn.{name}", b


class GraphToGraphBlock:
    """Cross-graph message passing into the target graph, then batch norm, a
    linear layer, and multi-head self-attention over the target nodes."""

    def __init__(self, d: int, k: int, rng: np.random.Generator, leaky_slope=DEFAULT_LEAKY_SLOPE):
        self.attn = GraphToGraphParams(d, k, rng, leaky_slope)
        self.bn = BatchNorm(d)
        self.linear = Linear(d, d, rng)
        self.mha = MultiHeadParams(d, k, rng)

    def __call__(
        self,
        x_source,
        x_target,
        source_mask=None,
        *,
        dropout_p=0.0,
        rng=None,
        training=False,
        update_stats=True,
    ):
        x = graph_to_graph_mp(
            x_source,
            x_target,
            self.attn,
            source_mask,
            dropout_p=dropout_p,
            rng=rng,
            training=training,
        )
        x = self.bn(x, training=training, update_stats=update_stats)
        x = self.linear(x)
        return multi_head_self_attention(
            x, self.mha, dropout_p=dropout_p, rng=rng, training=training
        )

    def named_parameters(self):
        for name, p in self.attn.named_parameters():
            yield name, p
        for name, p in self.bn.named_parameters():
            yield f"bn.{name}", p
        for name, p in self.linear.named_parameters():
            yield f"linear.{name}", p
        for name, p in self.mha.named_parameters():
            yield f"mha.{name}", p

    def named_buffers(self):
        for name, b in self.bn.named_buffers():
            yield f"bn.{name}", b
