"""End-to-end optimization: AdamW with decoupled weight decay, a stepwise
loop over duration-sorted batches, periodic evaluation, and checkpointing.

Every source of randomness is derived statelessly from (seed, purpose, step
or epoch), so a run is a pure function of its config and a checkpoint resume
reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .data import VideoRecord, augment_features, make_batches
from .errors import ContractError, NumericError
from .evaluation import (
    DEFAULT_TIOU_THRESHOLDS,
    EvalReport,
    evaluate,
    filter_predictions,
)
from .matching import GroundTruth, LossWeights, hungarian_loss
from .model import Model, load_model, save_model
from .tensor import Tensor, backward

LOSS_CSV_COLUMNS = ["step", "loss", "lr"]
EVAL_CSV_COLUMNS = ["step", "avg_map"]


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    total_steps: int = 5000
    decay_step: int = 3500  # learning rate is multiplied by decay_factor past this step
    decay_factor: float = 0.1
    batch_size: int = 4
    seed: int = 0
    eval_interval: int = 500
    grad_clip: float | None = None  # optional global-norm clip, off by default
    augment_gamma: int = 4
    no_action_weight: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self):
        if self.lr <= 0 or self.total_steps <= 0 or self.batch_size < 1:
            raise ContractError("lr, total_steps and batch_size must be positive")
        if not 0 < self.decay_step <= self.total_steps:
            raise ContractError("decay_step must lie in (0, total_steps]")
        if self.decay_factor <= 0 or self.weight_decay < 0:
            raise ContractError("decay_factor must be positive, weight_decay nonnegative")
        if self.eval_interval < 1:
            raise ContractError("eval_interval must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ContractError("grad_clip must be positive when set")
        if self.no_action_weight < 0:
            raise ContractError("no_action_weight must be nonnegative")
        return self


class AdamW:
    """Bias-corrected Adam moments plus weight decay applied directly to the
    parameters, separate from the adaptive step. Names in ``exempt`` are
    never decayed."""

    def __init__(
        self,
        named_params,
        lr: float,
        weight_decay: float = 0.0,
        exempt: set[str] | None = None,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        grad_clip: float | None = None,
    ):
        self.params = list(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.exempt = set() if exempt is None else set(exempt)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.grad_clip = grad_clip
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def _gradients(self):
        grads = {}
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {name}; step rejected")
            grads[name] = g
        return grads

    def step(self):
        grads = self._gradients()
        if self.grad_clip is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
                grads = {name: g * scale for name, g in grads.items()}

        self.step_count += 1
        t = self.step_count
        correct1 = 1.0 - self.beta1**t
        correct2 = 1.0 - self.beta2**t
        for name, p in self.params:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / correct1) / (np.sqrt(v / correct2) + self.eps)
            p.data -= self.lr * update
            if self.weight_decay and name not in self.exempt:
                p.data -= self.lr * self.weight_decay * p.data

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def state_arrays(self) -> dict:
        out = {"optimizer.step": np.array([float(self.step_count)])}
        for name, _ in self.params:
            out[f"optimizer.m.{name}"] = self.m[name]
            out[f"optimizer.v.{name}"] = self.v[name]
        return out

    def load_state(self, arrays: dict):
        self.step_count = int(arrays["optimizer.step"][0])
        for name, _ in self.params:
            self.m[name][...] = arrays[f"optimizer.m.{name}"]
            self.v[name][...] = arrays[f"optimizer.v.{name}"]


# ---------------------------------------------------------------------------
# corpus-level inference


def predict_corpus(
    model: Model,
    records: list[VideoRecord],
    score_threshold: float = 0.0,
    gamma: int = 4,
):
    """Eval-mode predictions for every record. Returns (detections,
    ground-truth map, per-video PredictionSets)."""
    detections = []
    ground_truth = {}
    by_video = {}
    for record in records:
        feats = augment_features(record.features, model.cfg.n_v_max, gamma, None, False)
        pred = model.forward(feats)
        by_video[record.id] = pred
        ground_truth[record.id] = record.normalized_ground_truth()
        detections.extend(filter_predictions(pred, record.id, score_threshold))
    return detections, ground_truth, by_video


def evaluate_model(
    model: Model,
    records: list[VideoRecord],
    thresholds=DEFAULT_TIOU_THRESHOLDS,
    score_threshold: float = 0.0,
) -> EvalReport:
    detections, ground_truth, _ = predict_corpus(model, records, score_threshold)
    return evaluate(detections, ground_truth, thresholds)


def recalibrate_running_stats(model: Model, records: list[VideoRecord]):
    """Replace the normalization layers' running statistics with the exact
    mean of the per-video batch statistics at the current parameters.

    Training tracks statistics as an exponential average while the weights
    are still moving; recomputing them over the corpus (on eval-view
    features, no augmentation) removes that lag before evaluation.
    """
    layers = list(model.bn_layers())
    saved_momentum = [layer.momentum for layer in layers]
    saved_dropout = model.cfg.dropout
    model.cfg.dropout = 0.0
    try:
        for i, record in enumerate(records):
            for layer in layers:
                layer.momentum = 1.0 / (i + 1)  # cumulative moving average
            feats = augment_features(record.features, model.cfg.n_v_max, 1, None, False)
            model.forward(feats, training=True, update_stats=True)
    finally:
        model.cfg.dropout = saved_dropout
        for layer, momentum in zip(layers, saved_momentum):
            layer.momentum = momentum


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    loss_curve: list  # (step, loss, lr)
    eval_history: list  # (step, EvalReport)
    final_checkpoint: str | None


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1000003, epoch])


def _dropout_rng(seed: int, step: int, row: int) -> np.random.Generator:
    return np.random.default_rng([seed, 7717, step, row])


def _lr_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate used for 1-based step ``step``; drops once by
    decay_factor after decay_step."""
    return cfg.lr if step <= cfg.decay_step else cfg.lr * cfg.decay_factor


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(c) if isinstance(c, float) else c for c in row])


def train(
    model: Model,
    records: list[VideoRecord],
    cfg: TrainConfig,
    *,
    out_dir: str | None = None,
    eval_records: list[VideoRecord] | None = None,
    eval_thresholds=DEFAULT_TIOU_THRESHOLDS,
    resume_from: str | None = None,
    log=None,
) -> TrainResult:
    """Run the optimization loop; deterministic given (model init, cfg).

    Per step: one duration-sorted batch, per-record forward + matched loss,
    gradients accumulated record by record (scaled 1/B, so the step optimizes
    the batch-mean loss), one AdamW update. Evaluation and checkpointing
    happen every ``eval_interval`` steps and at the end; a non-finite loss
    aborts with the last written checkpoint intact.
    """
    cfg.validate()
    if not records:
        raise ContractError("training needs a nonempty dataset")
    max_inst = max(len(r.annotations) for r in records)
    if max_inst >= model.cfg.n_o:
        raise ContractError(
            f"query-graph size {model.cfg.n_o} must exceed the max instance count {max_inst}"
        )
    for r in records:
        if len(r.annotations) and max(a.label for a in r.annotations) >= model.cfg.c_cls:
            raise ContractError(f"{r.id}: label outside the configured {model.cfg.c_cls} classes")

    optimizer = AdamW(
        list(model.named_parameters()),
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        exempt=model.decay_exempt_names(),
        beta1=cfg.adam_beta1,
        beta2=cfg.adam_beta2,
        eps=cfg.adam_eps,
        grad_clip=cfg.grad_clip,
    )

    start_step = 0
    if resume_from is not None:
        loaded, extras, meta = load_model(resume_from)
        model.load_state(loaded.state_arrays())
        optimizer.load_state(extras)
        start_step = int(meta["step"])

    batches_per_epoch = (len(records) + cfg.batch_size - 1) // cfg.batch_size
    loss_curve = []
    eval_history = []
    last_checkpoint = resume_from
    cached_epoch, cached_batches = -1, None

    def checkpoint(step: int) -> str | None:
        nonlocal last_checkpoint
        if out_dir is None:
            return None
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, f"step{step:07d}.ckpt")
        save_model(model, path, meta={"step": step}, extra_arrays=optimizer.state_arrays())
        _write_csv(os.path.join(out_dir, "loss_curve.csv"), LOSS_CSV_COLUMNS, loss_curve)
        if eval_history:
            _write_csv(
                os.path.join(out_dir, "eval_history.csv"),
                EVAL_CSV_COLUMNS,
                [(s, rep.avg_map) for s, rep in eval_history],
            )
        last_checkpoint = path
        return path

    for step in range(start_step, cfg.total_steps):
        epoch, idx = divmod(step, batches_per_epoch)
        if epoch != cached_epoch:
            cached_batches = make_batches(
                records,
                cfg.batch_size,
                _epoch_rng(cfg.seed, epoch),
                n_v_max=model.cfg.n_v_max,
                gamma=cfg.augment_gamma,
                training=True,
            )
            cached_epoch = epoch
        batch = cached_batches[idx]

        optimizer.zero_grad()
        scale = 1.0 / len(batch)
        total = 0.0
        for row in range(len(batch)):
            pred = model.forward(
                batch.features[row],
                batch.mask[row],
                training=True,
                rng=_dropout_rng(cfg.seed, step, row),
            )
            loss = hungarian_loss(
                batch.targets[row],
                pred,
                cfg.weights,
                no_action_weight=cfg.no_action_weight,
            )
            total += loss.item()
            backward(loss * Tensor(scale))
        mean_loss = total * scale

        if not np.isfinite(mean_loss):
            raise NumericError(
                f"non-finite loss at step {step + 1}; last good checkpoint: {last_checkpoint}"
            )

        optimizer.lr = _lr_at(cfg, step + 1)
        optimizer.step()
        loss_curve.append((step + 1, mean_loss, optimizer.lr))
        if log is not None and (step + 1) % 50 == 0:
            log(f"step {step + 1}/{cfg.total_steps}  loss {mean_loss:.4f}  lr {optimizer.lr:g}")

        if (step + 1) % cfg.eval_interval == 0:
            recalibrate_running_stats(model, records)
            if eval_records:
                report = evaluate_model(model, eval_records, eval_thresholds)
                eval_history.append((step + 1, report))
                if log is not None:
                    log(f"step {step + 1}: eval avg mAP {report.avg_map:.4f}")
            checkpoint(step + 1)

    if cfg.total_steps % cfg.eval_interval != 0:
        recalibrate_running_stats(model, records)
        checkpoint(cfg.total_steps)
    return TrainResult(
        loss_curve=loss_curve, eval_history=eval_history, final_checkpoint=last_checkpoint
    )
