import numpy as np
import pytest

from setloc.data import (
    Annotation,
    SyntheticSpec,
    VideoRecord,
    augment_features,
    class_prototypes,
    load_dataset,
    make_batches,
    save_dataset,
    synthesize_dataset,
)
from setloc.errors import ContractError, DatasetFormatError


def small_spec(**kw):
    base = dict(num_videos=6, c_in=8, c_cls=3, chunks_min=5, chunks_max=12, seed=7)
    base.update(kw)
    return SyntheticSpec(**base)


# ---------------------------------------------------------------------------
# generator


def test_synthesize_deterministic_bitwise():
    a = synthesize_dataset(small_spec())
    b = synthesize_dataset(small_spec())
    assert [r.id for r in a] == [r.id for r in b]
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.features, rb.features)
        assert ra.annotations == rb.annotations
        assert ra.duration == rb.duration


def test_synthesize_respects_ranges():
    records = synthesize_dataset(small_spec(num_videos=20))
    for r in records:
        assert 5 <= r.features.shape[0] <= 12
        assert 1 <= len(r.annotations) <= 5
        assert r.duration == float(r.features.shape[0])
        for ann in r.annotations:
            assert 0 <= ann.start < ann.end <= r.duration
            assert 0 <= ann.label < 3


def test_synthesize_noise_free_construction():
    # one instance spanning every chunk: features are exactly prototype plus
    # boundary markers at the two ends
    spec = small_spec(
        num_videos=1,
        noise_sigma=0.0,
        instances_min=1,
        instances_max=1,
        len_frac_min=1.0,
        len_frac_max=1.0,
        chunks_min=6,
        chunks_max=6,
    )
    (record,) = synthesize_dataset(spec)
    protos, (m_start, m_end) = class_prototypes(spec)
    (ann,) = record.annotations
    assert (ann.start, ann.end) == (0.0, 6.0)
    base = protos[ann.label]
    assert np.allclose(record.features[1:-1], np.tile(base, (4, 1)), atol=1e-12)
    assert np.allclose(record.features[0], base + m_start, atol=1e-12)
    assert np.allclose(record.features[-1], base + m_end, atol=1e-12)


def test_synthesize_recurrence_forces_shared_class():
    spec = small_spec(
        num_videos=30, recurrence_prob=1.0, instances_min=2, instances_max=2
    )
    for r in synthesize_dataset(spec):
        labels = {a.label for a in r.annotations}
        assert len(labels) == 1


def test_synthesize_rejects_prototype_overflow():
    with pytest.raises(ContractError):
        synthesize_dataset(small_spec(c_cls=9, c_in=8))


def test_synthesize_validates_ranges():
    with pytest.raises(ContractError):
        small_spec(chunks_min=10, chunks_max=5).validate()
    with pytest.raises(ContractError):
        small_spec(overlap_prob=1.5).validate()
    with pytest.raises(ContractError):
        small_spec(num_videos=0).validate()


def test_features_encode_annotations():
    # with low noise, chunks covered by an instance lie closer to that class
    # prototype than uncovered chunks do
    spec = small_spec(num_videos=10, noise_sigma=0.05, overlap_prob=0.0)
    protos, _ = class_prototypes(spec)
    for r in synthesize_dataset(spec):
        for ann in r.annotations:
            inside = r.features[int(ann.start) : int(ann.end)] @ protos[ann.label]
            assert inside.mean() > 0.5


# ---------------------------------------------------------------------------
# augmentation


def test_augment_eval_passthrough():
    feats = np.random.default_rng(0).normal(size=(10, 4))
    out = augment_features(feats, n_v_max=256, gamma=4, rng=None, training=False)
    assert np.array_equal(out, feats)


def test_augment_output_length_always_min():
    rng = np.random.default_rng(1)
    feats = np.random.default_rng(2).normal(size=(300, 4))
    for training in (True, False):
        out = augment_features(feats, 256, 4, rng, training)
        assert out.shape == (256, 4)
    short = feats[:40]
    for training in (True, False):
        out = augment_features(short, 256, 4, rng, training)
        assert out.shape == (40, 4)


def test_augment_train_rows_come_from_input_in_order():
    feats = np.arange(10.0)[:, None] * np.ones((1, 3))
    for seed in range(50):
        out = augment_features(feats, 256, 4, np.random.default_rng(seed), True)
        assert out.shape == (10, 3)
        values = out[:, 0]
        assert np.all(np.diff(values) >= 0)  # temporal order preserved
        assert set(values).issubset(set(feats[:, 0]))


def test_augment_eval_long_input_uniform_subsample():
    feats = np.arange(300.0)[:, None]
    out = augment_features(feats, 256, 4, None, False)
    assert out.shape == (256, 1)
    idx = out[:, 0]
    assert idx[0] == 0 and idx[-1] == 299
    assert np.all(np.diff(idx) > 0)


def test_augment_rejects_bad_inputs():
    with pytest.raises(ContractError):
        augment_features(np.zeros((0, 3)), 10, 4, None, False)
    with pytest.raises(ContractError):
        augment_features(np.zeros((5, 3)), 10, 0, None, False)
    with pytest.raises(ContractError):
        augment_features(np.zeros((5, 3)), 10, 4, None, True)  # no rng


# ---------------------------------------------------------------------------
# batching


def make_records(lengths, c_in=4):
    rng = np.random.default_rng(3)
    return [
        VideoRecord(
            id=f"r{i}",
            duration=float(t),
            features=rng.normal(size=(t, c_in)),
            annotations=[Annotation(0, 0.0, float(t) / 2)],
        ).validate()
        for i, t in enumerate(lengths)
    ]


def test_batch_identical_lengths_no_padding():
    records = make_records([5, 5, 5, 5])
    batches = make_batches(records, 2, np.random.default_rng(4), n_v_max=16)
    assert len(batches) == 2
    for b in batches:
        assert b.mask.all()
        assert b.features.shape == (2, 5, 4)


def test_batch_padding_and_mask():
    records = make_records([3, 5])
    (batch,) = make_batches(records, 2, np.random.default_rng(5), n_v_max=16)
    assert batch.features.shape == (2, 5, 4)
    row_of_3 = batch.ids.index("r0")
    assert batch.mask[row_of_3].sum() == 3
    assert np.array_equal(batch.features[row_of_3, 3:], np.zeros((2, 4)))


def test_batches_partition_corpus():
    records = make_records([3, 7, 4, 9, 2, 6, 5])
    batches = make_batches(records, 3, np.random.default_rng(6), n_v_max=16)
    seen = [i for b in batches for i in b.ids]
    assert sorted(seen) == sorted(r.id for r in records)
    assert len(seen) == len(records)


def test_batch_targets_normalized():
    records = make_records([8])
    (batch,) = make_batches(records, 1, np.random.default_rng(7), n_v_max=16)
    gt = batch.targets[0]
    assert np.allclose(gt.segments, [[0.0, 0.5]])


def test_sorted_batches_minimize_padding():
    rng = np.random.default_rng(8)
    lengths = rng.integers(4, 60, size=24).tolist()
    records = make_records(lengths)

    def padded_cells(batches):
        return sum(int((~b.mask).sum()) for b in batches)

    sorted_pad = padded_cells(make_batches(records, 4, np.random.default_rng(9), n_v_max=64))
    # adversarial grouping: interleave shortest with longest
    order = np.argsort(lengths)
    shuffled = [records[i] for i in np.concatenate([order[::2], order[1::2][::-1]])]
    worst = 0
    for i in range(0, len(shuffled), 4):
        group = shuffled[i : i + 4]
        n_max = max(r.features.shape[0] for r in group)
        worst += sum(n_max - r.features.shape[0] for r in group)
    assert sorted_pad <= worst


def test_batch_rejects_zero_duration():
    record = make_records([5])[0]
    record.duration = 0.0
    with pytest.raises(ContractError):
        make_batches([record], 1, np.random.default_rng(10), n_v_max=16)


def test_batch_deterministic_given_rng_seed():
    records = make_records([3, 7, 4, 9])
    a = make_batches(records, 2, np.random.default_rng(11), n_v_max=16, training=True)
    b = make_batches(records, 2, np.random.default_rng(11), n_v_max=16, training=True)
    assert [x.ids for x in a] == [x.ids for x in b]
    for ba, bb in zip(a, b):
        assert np.array_equal(ba.features, bb.features)


# ---------------------------------------------------------------------------
# file round trip


def test_dataset_round_trip_bitwise(tmp_path):
    records = synthesize_dataset(small_spec())
    path = tmp_path / "corpus.slds"
    save_dataset(records, path)
    loaded = load_dataset(path)
    assert len(loaded) == len(records)
    for a, b in zip(records, loaded):
        assert a.id == b.id and a.duration == b.duration
        assert np.array_equal(a.features, b.features)
        assert a.annotations == b.annotations
    # saving the loaded corpus reproduces the same bytes
    path2 = tmp_path / "again.slds"
    save_dataset(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_dataset_rejects_out_of_range_annotation(tmp_path):
    records = make_records([5])
    records[0].annotations = [Annotation(0, 0.0, 99.0)]
    path = tmp_path / "bad.slds"
    save_dataset(records, path)
    with pytest.raises(DatasetFormatError, match="r0"):
        load_dataset(path)


def test_dataset_rejects_truncation(tmp_path):
    records = make_records([5, 6])
    path = tmp_path / "cut.slds"
    save_dataset(records, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(DatasetFormatError):
        load_dataset(path)


def test_dataset_rejects_bad_magic(tmp_path):
    path = tmp_path / "nope.slds"
    path.write_bytes(b"garbage garbage garbage")
    with pytest.raises(DatasetFormatError):
        load_dataset(path)
