"""Dataset records, the synthetic untrimmed-sequence generator, train-time
augmentation, and duration-sorted zero-padded batching.

The generator stands in for a video feature extractor: each video is a
sequence of per-chunk feature vectors (one chunk per second) carrying class
prototypes wherever an instance is active, plus distinct start/end boundary
markers on an instance's first and last chunk, under i.i.d. Gaussian noise.
Overlapping and recurring instances are produced with configurable
probabilities, so exact boundaries stay recoverable from the features alone.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ContractError, DatasetFormatError
from .matching import GroundTruth

DATASET_MAGIC = b"SETLOC.DATA.1\n"


class Annotation(NamedTuple):
    label: int
    start: float  # seconds
    end: float  # seconds


@dataclass
class VideoRecord:
    id: str
    duration: float  # seconds
    features: np.ndarray  # (t_chunks, c_in) float64
    annotations: list[Annotation]

    def validate(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ContractError(f"{self.id}: features must be a nonempty (t, c) matrix")
        if not np.isfinite(feats).all():
            raise ContractError(f"{self.id}: features contain non-finite values")
        if not (np.isfinite(self.duration) and self.duration > 0):
            raise ContractError(f"{self.id}: duration must be positive")
        for ann in self.annotations:
            if not 0.0 <= ann.start <= ann.end <= self.duration:
                raise ContractError(
                    f"{self.id}: annotation {tuple(ann)} outside [0, {self.duration}]"
                )
        self.features = feats
        return self

    def normalized_ground_truth(self) -> GroundTruth:
        """Annotations as a GroundTruth with times divided by the duration."""
        if not self.annotations:
            return GroundTruth(np.empty(0, dtype=np.intp), np.empty((0, 2)))
        labels = np.array([a.label for a in self.annotations], dtype=np.intp)
        segs = np.array(
            [[a.start / self.duration, a.end / self.duration] for a in self.annotations]
        )
        return GroundTruth(labels, segs)


@dataclass
class SyntheticSpec:
    num_videos: int = 20
    c_in: int = 2048
    c_cls: int = 20
    chunks_min: int = 20
    chunks_max: int = 40
    instances_min: int = 1
    instances_max: int = 5
    len_frac_min: float = 0.1  # instance length as a fraction of the video
    len_frac_max: float = 0.5
    overlap_prob: float = 0.25
    recurrence_prob: float = 0.3
    noise_sigma: float = 0.1
    prototype_scale: float = 1.0
    marker_scale: float = 1.0  # amplitude of the start/end boundary vectors
    seed: int = 0

    def validate(self):
        if self.num_videos <= 0:
            raise ContractError("num_videos must be positive")
        if self.c_in <= 0 or self.c_cls <= 0:
            raise ContractError("c_in and c_cls must be positive")
        if self.c_cls > self.c_in:
            raise ContractError(
                f"c_cls={self.c_cls} prototypes do not fit in c_in={self.c_in} dimensions"
            )
        if not 1 <= self.chunks_min <= self.chunks_max:
            raise ContractError("empty chunk-count range")
        if not 0 <= self.instances_min <= self.instances_max:
            raise ContractError("empty instance-count range")
        if not 0.0 < self.len_frac_min <= self.len_frac_max <= 1.0:
            raise ContractError("instance length fractions must satisfy 0 < min <= max <= 1")
        for name in ("overlap_prob", "recurrence_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1]")
        if self.noise_sigma < 0 or self.prototype_scale <= 0 or self.marker_scale <= 0:
            raise ContractError(
                "noise_sigma must be >= 0; prototype_scale and marker_scale positive"
            )
        return self


def _draw_prototypes(rng: np.random.Generator, spec: SyntheticSpec):
    protos = rng.normal(size=(spec.c_cls, spec.c_in))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    markers = rng.normal(size=(2, spec.c_in))
    markers /= np.linalg.norm(markers, axis=1, keepdims=True)
    return protos * spec.prototype_scale, markers * spec.marker_scale


def class_prototypes(spec: SyntheticSpec):
    """The fixed per-class prototype vectors and the boundary markers implied
    by a spec's seed; unit-normalized random directions times the scale."""
    return _draw_prototypes(np.random.default_rng(spec.seed), spec)


def synthesize_dataset(spec: SyntheticSpec) -> list[VideoRecord]:
    """A pure function of the spec: same spec, bitwise-identical records."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    protos, (marker_start, marker_end) = _draw_prototypes(rng, spec)

    records = []
    for v in range(spec.num_videos):
        t = int(rng.integers(spec.chunks_min, spec.chunks_max + 1))
        n_inst = int(rng.integers(spec.instances_min, spec.instances_max + 1))
        placed: list[tuple[int, int, int]] = []  # (label, first chunk, last chunk)
        for _ in range(n_inst):
            if placed and rng.random() < spec.recurrence_prob:
                label = placed[int(rng.integers(0, len(placed)))][0]
            else:
                label = int(rng.integers(0, spec.c_cls))
            frac = rng.uniform(spec.len_frac_min, spec.len_frac_max)
            length = int(np.clip(round(t * frac), 1, t))
            allow_overlap = rng.random() < spec.overlap_prob
            a = int(rng.integers(0, t - length + 1))
            if not allow_overlap:
                for _ in range(64):
                    if not any(a <= pb and pa <= a + length - 1 for _, pa, pb in placed):
                        break
                    a = int(rng.integers(0, t - length + 1))
            placed.append((label, a, a + length - 1))

        features = spec.noise_sigma * rng.standard_normal((t, spec.c_in))
        for label, a, b in placed:
            features[a : b + 1] += protos[label]
            features[a] += marker_start
            features[b] += marker_end

        annotations = sorted(
            (Annotation(label, float(a), float(b + 1)) for label, a, b in placed),
            key=lambda ann: (ann.start, ann.end, ann.label),
        )
        records.append(
            VideoRecord(
                id=f"synth{v:04d}", duration=float(t), features=features, annotations=annotations
            ).validate()
        )
    return records


# ---------------------------------------------------------------------------
# augmentation


def augment_features(
    features: np.ndarray,
    n_v_max: int,
    gamma: int,
    rng: np.random.Generator | None,
    training: bool,
) -> np.ndarray:
    """Temporal resampling; the output always has min(t, n_v_max) rows.

    Training, t <= n_v_max: repeat every row ``gamma`` times, then draw t rows
    without replacement in temporal order. Training, t > n_v_max: draw
    n_v_max rows without replacement in temporal order. Eval: passthrough
    when the input fits, else a uniform temporal subsample of n_v_max rows.
    """
    features = np.asarray(features)
    t = features.shape[0]
    if t == 0:
        raise ContractError("cannot augment an empty feature sequence")
    if gamma < 1:
        raise ContractError(f"gamma must be >= 1, got {gamma}")
    if n_v_max < 1:
        raise ContractError(f"n_v_max must be >= 1, got {n_v_max}")

    if training:
        if rng is None:
            raise ContractError("training-mode augmentation needs an rng")
        if t <= n_v_max:
            repeated = np.repeat(features, gamma, axis=0)
            idx = np.sort(rng.choice(gamma * t, size=t, replace=False))
            return repeated[idx]
        idx = np.sort(rng.choice(t, size=n_v_max, replace=False))
        return features[idx]

    if t <= n_v_max:
        return features
    idx = np.round(np.linspace(0, t - 1, n_v_max)).astype(np.intp)
    return features[idx]


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    features: np.ndarray  # (b, n_max, c_in), zero-padded
    mask: np.ndarray  # (b, n_max) bool, true on real rows
    targets: list[GroundTruth]  # normalized times
    ids: list[str]

    def __len__(self):
        return self.features.shape[0]


def make_batches(
    records: list[VideoRecord],
    batch_size: int,
    rng: np.random.Generator,
    *,
    n_v_max: int,
    gamma: int = 4,
    training: bool = False,
) -> list[Batch]:
    """Duration-sorted contiguous groups, zero-padded per group, with the
    group order shuffled. Each record appears exactly once."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    for r in records:
        if r.duration <= 0:
            raise ContractError(f"{r.id}: zero-duration record cannot be batched")
    if not records:
        return []

    order = sorted(range(len(records)), key=lambda i: (records[i].duration, records[i].id))
    groups = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    groups = [groups[i] for i in rng.permutation(len(groups))]

    batches = []
    for group in groups:
        augmented = [
            augment_features(records[i].features, n_v_max, gamma, rng, training) for i in group
        ]
        n_max = max(a.shape[0] for a in augmented)
        c_in = augmented[0].shape[1]
        feats = np.zeros((len(group), n_max, c_in))
        mask = np.zeros((len(group), n_max), dtype=bool)
        for row, a in enumerate(augmented):
            feats[row, : a.shape[0]] = a
            mask[row, : a.shape[0]] = True
        batches.append(
            Batch(
                features=feats,
                mask=mask,
                targets=[records[i].normalized_ground_truth() for i in group],
                ids=[records[i].id for i in group],
            )
        )
    return batches


# ---------------------------------------------------------------------------
# dataset files: magic, little-endian uint64 header length, JSON header with
# ids/durations/annotations/shapes, then per-record float64 LE payloads in
# header order.


def save_dataset(records: list[VideoRecord], path):
    meta = [
        {
            "id": r.id,
            "duration": r.duration,
            "shape": list(r.features.shape),
            "annotations": [[int(a.label), float(a.start), float(a.end)] for a in r.annotations],
        }
        for r in records
    ]
    header = json.dumps({"version": 1, "records": meta}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for r in records:
            fh.write(np.ascontiguousarray(r.features, dtype="<f8").tobytes())


def load_dataset(path) -> list[VideoRecord]:
    """Strict inverse of :func:`save_dataset`; raises on any malformation and
    never returns a partial dataset."""
    with open(path, "rb") as fh:
        magic = fh.read(len(DATASET_MAGIC))
        if magic != DATASET_MAGIC:
            raise DatasetFormatError(f"{path}: not a dataset file (bad magic)")
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
        if header.get("version") != 1:
            raise DatasetFormatError(f"{path}: unsupported version {header.get('version')}")

        records = []
        for meta in header["records"]:
            rid = meta.get("id", "<missing id>")
            shape = tuple(meta["shape"])
            if len(shape) != 2 or shape[0] < 1 or shape[1] < 1:
                raise DatasetFormatError(f"{path}: record {rid} has invalid shape {shape}")
            count = shape[0] * shape[1]
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise DatasetFormatError(f"{path}: record {rid} payload truncated")
            features = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            record = VideoRecord(
                id=rid,
                duration=float(meta["duration"]),
                features=features,
                annotations=[Annotation(int(l), float(s), float(e)) for l, s, e in meta["annotations"]],
            )
            try:
                record.validate()
            except ContractError as exc:
                raise DatasetFormatError(f"{path}: {exc}") from exc
            records.append(record)
        if fh.read(1):
            raise DatasetFormatError(f"{path}: trailing bytes after payload")
    return records
