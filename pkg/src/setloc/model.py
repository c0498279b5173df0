"""The full detector: feature sequence in, fixed-size instance set out.

An input projection with learnable per-position encodings feeds an encoder
stack of graph self-attention blocks, producing a latent context graph. A
learnable query graph is decoded against that context (self-attention over
queries, cross-graph attention from the context, feed forward), and each
decoded node is read out by prediction heads into a class distribution over
C+1 labels (the extra one meaning "no action") and a (start, end) pair in
(0, 1), normalized by video duration.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .attention import (
    DEFAULT_LEAKY_SLOPE,
    FeedForward,
    GraphSelfAttentionBlock,
    GraphToGraphBlock,
    Linear,
    full_mask,
)
from .errors import ContractError, DatasetFormatError, ShapeError
from .tensor import Tensor, relu, sigmoid, softmax

CHECKPOINT_MAGIC = b"SETLOC.CKPT.1\n"


@dataclass
class ModelConfig:
    c_in: int = 2048  # input feature dimension
    d: int = 512  # latent node dimension
    l_e: int = 4  # encoder blocks
    l_d: int = 4  # decoder blocks
    k: int = 8  # attention heads
    n_o: int = 300  # query-graph size (must exceed max instances per video)
    n_v_max: int = 256  # positional-table size / max temporal positions
    c_cls: int = 20  # number of real action classes
    dropout: float = 0.0
    leaky_slope: float = DEFAULT_LEAKY_SLOPE
    table_scale: float = 1.0  # stddev of the positional/query embedding init

    def validate(self):
        for name in ("c_in", "d", "l_e", "l_d", "k", "n_o", "n_v_max", "c_cls"):
            if getattr(self, name) <= 0:
                raise ContractError(f"ModelConfig.{name} must be positive")
        if self.d % self.k:
            raise ContractError(f"d={self.d} must be divisible by k={self.k}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.table_scale <= 0:
            raise ContractError(f"table_scale must be positive, got {self.table_scale}")
        return self


@dataclass
class PredictionSet:
    """Fixed-cardinality prediction: one probability row and one segment per
    query node. ``class_probs`` rows sum to 1; the last column is no-action."""

    class_probs: Tensor  # (n_o, c_cls + 1)
    segments: Tensor  # (n_o, 2) in (0, 1)

    @property
    def probs(self) -> np.ndarray:
        return self.class_probs.data

    @property
    def segs(self) -> np.ndarray:
        return self.segments.data


class EncoderBlock:
    def __init__(self, d, k, rng, leaky_slope):
        self.graph_attn = GraphSelfAttentionBlock(d, k, rng, leaky_slope)
        self.ffn = FeedForward(d, rng)

    def __call__(self, x, mask, **kw):
        x = self.graph_attn(x, mask, **kw)
        ffn_kw = {key: kw[key] for key in ("dropout_p", "rng", "training") if key in kw}
        return self.ffn(x, **ffn_kw)

    def named_parameters(self):
        for name, p in self.graph_attn.named_parameters():
            yield f"graph_attn.{name}", p
        for name, p in self.ffn.named_parameters():
            yield f"ffn.{name}", p

    def named_buffers(self):
        for name, b in self.graph_attn.named_buffers():
            yield f"graph_attn.{name}", b


class DecoderBlock:
    def __init__(self, d, k, rng, leaky_slope):
        self.self_attn = GraphSelfAttentionBlock(d, k, rng, leaky_slope)
        self.cross_attn = GraphToGraphBlock(d, k, rng, leaky_slope)
        self.ffn = FeedForward(d, rng)

    def __call__(self, y, context, source_mask, **kw):
        y = self.self_attn(y, None, **kw)
        y = self.cross_attn(context, y, source_mask, **kw)
        ffn_kw = {key: kw[key] for key in ("dropout_p", "rng", "training") if key in kw}
        return self.ffn(y, **ffn_kw)

    def named_parameters(self):
        for name, p in self.self_attn.named_parameters():
            yield f"self_attn.{name}", p
        for name, p in self.cross_attn.named_parameters():
            yield f"cross_attn.{name}", p
        for name, p in self.ffn.named_parameters():
            yield f"ffn.{name}", p

    def named_buffers(self):
        for name, b in self.self_attn.named_buffers():
            yield f"self_attn.{name}", b
        for name, b in self.cross_attn.named_buffers():
            yield f"cross_attn.{name}", b


class Model:
    """Encoder-decoder detector over a feature sequence.

    Weight matrices use Xavier initialization; the positional and query
    tables are N(0, table_scale^2), the standard embedding-layer
    initialization at the default scale 1.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(0) if rng is None else rng
        self.pos_table = Tensor(
            rng.normal(size=(cfg.n_v_max, cfg.c_in)) * cfg.table_scale, requires_grad=True
        )
        self.in_proj = Linear(cfg.c_in, cfg.d, rng)
        self.encoder = [
            EncoderBlock(cfg.d, cfg.k, rng, cfg.leaky_slope) for _ in range(cfg.l_e)
        ]
        self.query_table = Tensor(
            rng.normal(size=(cfg.n_o, cfg.d)) * cfg.table_scale, requires_grad=True
        )
        self.decoder = [
            DecoderBlock(cfg.d, cfg.k, rng, cfg.leaky_slope) for _ in range(cfg.l_d)
        ]
        self.head_class = Linear(cfg.d, cfg.c_cls + 1, rng)
        self.head_seg = [Linear(cfg.d, cfg.d, rng), Linear(cfg.d, cfg.d, rng), Linear(cfg.d, 2, rng)]

    # ------------------------------------------------------------------
    # forward pieces

    def _run_kwargs(self, training, rng, update_stats):
        return {
            "dropout_p": self.cfg.dropout,
            "rng": rng,
            "training": training,
            "update_stats": update_stats,
        }

    def encode(self, features, mask=None, *, training=False, rng=None, update_stats=True):
        """Positional encodings + projection + encoder stack -> context graph."""
        features = features if isinstance(features, Tensor) else Tensor(features)
        n_v = features.shape[0]
        if n_v < 1:
            raise ShapeError("encode needs at least one temporal position")
        if n_v > self.cfg.n_v_max:
            raise ContractError(
                f"{n_v} temporal positions exceed the positional table ({self.cfg.n_v_max})"
            )
        if features.shape[1] != self.cfg.c_in:
            raise ShapeError(f"feature dim {features.shape[1]} != c_in {self.cfg.c_in}")
        mask = full_mask(n_v) if mask is None else np.asarray(mask, dtype=bool)
        x = features + self.pos_table[:n_v]
        x = self.in_proj(x)
        kw = self._run_kwargs(training, rng, update_stats)
        for block in self.encoder:
            x = block(x, mask, **kw)
        return x

    def decode(self, context, source_mask=None, *, training=False, rng=None, update_stats=True):
        """Query graph decoded against the context graph -> (n_o, d) nodes."""
        if context.shape[1] != self.cfg.d:
            raise ShapeError(f"context dim {context.shape[1]} != d {self.cfg.d}")
        y = self.query_table
        kw = self._run_kwargs(training, rng, update_stats)
        for block in self.decoder:
            y = block(y, context, source_mask, **kw)
        return y

    def predict_heads(self, y) -> PredictionSet:
        """Per-node readout: class softmax and sigmoid (start, end)."""
        h = relu(self.head_seg[0](y))
        h = relu(self.head_seg[1](h))
        segments = sigmoid(self.head_seg[2](h))
        class_probs = softmax(self.head_class(y), axis=1)
        return PredictionSet(class_probs, segments)

    def forward(self, features, mask=None, *, training=False, rng=None, update_stats=True):
        context = self.encode(
            features, mask, training=training, rng=rng, update_stats=update_stats
        )
        decoded = self.decode(
            context, mask, training=training, rng=rng, update_stats=update_stats
        )
        return self.predict_heads(decoded)

    __call__ = forward

    # ------------------------------------------------------------------
    # parameters and persistence

    def named_parameters(self):
        yield "pos_table", self.pos_table
        yield "query_table", self.query_table
        for name, p in self.in_proj.named_parameters():
            yield f"in_proj.{name}", p
        for i, block in enumerate(self.encoder):
            for name, p in block.named_parameters():
                yield f"encoder.block{i}.{name}", p
        for i, block in enumerate(self.decoder):
            for name, p in block.named_parameters():
                yield f"decoder.block{i}.{name}", p
        for name, p in self.head_class.named_parameters():
            yield f"heads.class.{name}", p
        for j, lin in enumerate(self.head_seg):
            for name, p in lin.named_parameters():
                yield f"heads.seg{j}.{name}", p

    def named_buffers(self):
        for i, block in enumerate(self.encoder):
            for name, b in block.named_buffers():
                yield f"encoder.block{i}.{name}", b
        for i, block in enumerate(self.decoder):
            for name, b in block.named_buffers():
                yield f"decoder.block{i}.{name}", b

    def bn_layers(self):
        for block in self.encoder:
            yield block.graph_attn.bn
        for block in self.decoder:
            yield block.self_attn.bn
            yield block.cross_attn.bn

    def decay_exempt_names(self):
        """Parameters never touched by weight decay: normalization affines
        and the positional/query tables."""
        names = {"pos_table", "query_table"}
        for name, _ in self.named_parameters():
            if name.endswith("bn.gamma") or name.endswith("bn.beta"):
                names.add(name)
        return names

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.zero_grad()

    def state_arrays(self):
        """All learnable parameters plus running statistics, by stable name."""
        out = {name: p.data for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            out[name] = b
        return out

    def load_state(self, arrays: dict):
        mine = self.state_arrays()
        missing = sorted(set(mine) - set(arrays))
        extra = sorted(set(arrays) - set(mine))
        if missing or extra:
            raise DatasetFormatError(
                f"checkpoint mismatch; missing={missing[:3]} extra={extra[:3]}"
            )
        for name, current in mine.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != current.shape:
                raise DatasetFormatError(
                    f"checkpoint entry {name} has shape {value.shape}, expected {current.shape}"
                )
            current[...] = value


# ---------------------------------------------------------------------------
# checkpoint container: magic, little-endian uint64 header length, JSON header
# (config, entry names/shapes, free-form meta), then float64 LE payloads in
# header order.


def save_checkpoint(path, config: ModelConfig, arrays: dict, meta: dict | None = None):
    entries = [{"name": name, "shape": list(np.asarray(a).shape)} for name, a in arrays.items()]
    header = json.dumps(
        {"config": asdict(config), "entries": entries, "meta": meta or {}},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for entry in entries:
            fh.write(np.ascontiguousarray(arrays[entry["name"]], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (ModelConfig, {name: array}, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DatasetFormatError(f"{path}: not a checkpoint (bad magic)")
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise DatasetFormatError(f"{path}: truncated header length")
        (header_len,) = struct.unpack("<Q", raw_len)
        raw_header = fh.read(header_len)
        if len(raw_header) != header_len:
            raise DatasetFormatError(f"{path}: truncated header")
        try:
            header = json.loads(raw_header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DatasetFormatError(f"{path}: unreadable header: {exc}") from exc
        arrays = {}
        for entry in header["entries"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise DatasetFormatError(f"{path}: truncated payload for {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise DatasetFormatError(f"{path}: trailing bytes after payload")
    config = ModelConfig(**header["config"])
    return config, arrays, header.get("meta", {})


def save_model(model: Model, path, meta: dict | None = None, extra_arrays: dict | None = None):
    arrays = model.state_arrays()
    if extra_arrays:
        overlap = set(arrays) & set(extra_arrays)
        if overlap:
            raise ContractError(f"extra arrays collide with model state: {sorted(overlap)[:3]}")
        arrays = {**arrays, **extra_arrays}
    save_checkpoint(path, model.cfg, arrays, meta)


def load_model(path):
    """Rebuild a model from a checkpoint; returns (model, extra arrays, meta)."""
    config, arrays, meta = load_checkpoint(path)
    model = Model(config, np.random.default_rng(0))
    own = set(model.state_arrays())
    model.load_state({k: v for k, v in arrays.items() if k in own})
    extras = {k: v for k, v in arrays.items() if k not in own}
    return model, extras, meta
