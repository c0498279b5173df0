import numpy as np
import pytest

from setloc.data import SyntheticSpec, synthesize_dataset
from setloc.errors import ContractError, NumericError
from setloc.matching import LossWeights
from setloc.model import Model, ModelConfig
from setloc.tensor import Tensor
from setloc.trainer import AdamW, TrainConfig, evaluate_model, predict_corpus, train


def tiny_records(num=8, seed=3):
    spec = SyntheticSpec(
        num_videos=num,
        c_in=8,
        c_cls=2,
        chunks_min=6,
        chunks_max=10,
        instances_min=1,
        instances_max=2,
        seed=seed,
    )
    return synthesize_dataset(spec)


def tiny_model(seed=0):
    cfg = ModelConfig(c_in=8, d=8, l_e=1, l_d=1, k=2, n_o=4, n_v_max=12, c_cls=2)
    return Model(cfg, np.random.default_rng(seed))


def tiny_train_cfg(**kw):
    base = dict(lr=1e-3, total_steps=6, decay_step=4, batch_size=4, seed=1, eval_interval=3)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# AdamW


def make_param(value):
    t = Tensor(np.array(value, dtype=float), requires_grad=True)
    return [("p", t)], t


def test_adamw_zero_grad_no_decay_keeps_params():
    params, p = make_param([1.0, -2.0])
    opt = AdamW(params, lr=0.1, weight_decay=0.0)
    p.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adamw_zero_grad_pure_decoupled_decay():
    params, p = make_param([1.0, -2.0])
    opt = AdamW(params, lr=0.1, weight_decay=0.5)
    start = p.data.copy()
    for i in range(3):
        p.grad = np.zeros(2)
        opt.step()
        assert np.allclose(p.data, start * (1 - 0.1 * 0.5) ** (i + 1), atol=1e-15)


def test_adamw_exempt_names_not_decayed():
    params, p = make_param([1.0])
    opt = AdamW(params, lr=0.1, weight_decay=0.5, exempt={"p"})
    p.grad = np.zeros(1)
    opt.step()
    assert np.array_equal(p.data, [1.0])


def test_adamw_descends_quadratic():
    # lr small enough that the normalized Adam step cannot overshoot zero
    params, p = make_param([1.0])
    opt = AdamW(params, lr=0.008, weight_decay=0.0)
    values = [p.data[0]]
    for _ in range(100):
        p.grad = 2.0 * p.data  # d/dp of p^2
        opt.step()
        values.append(p.data[0])
    assert all(b < a for a, b in zip(values, values[1:]))
    assert 0.0 < values[-1] < 0.35


def test_adamw_rejects_nonfinite_grad():
    params, p = make_param([1.0])
    opt = AdamW(params, lr=0.1)
    p.grad = np.array([np.nan])
    with pytest.raises(NumericError, match="p"):
        opt.step()


def test_adamw_none_grad_treated_as_zero():
    params, p = make_param([2.0])
    opt = AdamW(params, lr=0.1, weight_decay=0.0)
    opt.step()
    assert np.array_equal(p.data, [2.0])


def test_adamw_grad_clip():
    params, p = make_param([0.0, 0.0])
    opt = AdamW(params, lr=1.0, grad_clip=1.0)
    p.grad = np.array([30.0, 40.0])  # norm 50, clipped to 1
    opt.step()
    # both coordinates move by the same adaptive step; clip only affects scale
    assert np.isfinite(p.data).all()
    state = opt.state_arrays()
    assert np.allclose(state["optimizer.m.p"], 0.1 * np.array([0.6, 0.8]))


def test_adamw_state_round_trip():
    params, p = make_param([1.0, 2.0])
    opt = AdamW(params, lr=0.1)
    for _ in range(3):
        p.grad = p.data.copy()
        opt.step()
    arrays = {k: v.copy() for k, v in opt.state_arrays().items()}
    params2, p2 = make_param([1.0, 2.0])
    opt2 = AdamW(params2, lr=0.1)
    opt2.load_state(arrays)
    assert opt2.step_count == 3
    assert np.array_equal(opt2.m["p"], opt.m["p"])
    assert np.array_equal(opt2.v["p"], opt.v["p"])


# ---------------------------------------------------------------------------
# training loop


def test_train_runs_and_records_curve(tmp_path):
    records = tiny_records()
    model = tiny_model()
    result = train(model, records, tiny_train_cfg(), out_dir=str(tmp_path))
    assert len(result.loss_curve) == 6
    steps = [s for s, _, _ in result.loss_curve]
    assert steps == list(range(1, 7))
    assert result.final_checkpoint is not None
    assert (tmp_path / "loss_curve.csv").exists()


def test_train_lr_decay_applied():
    records = tiny_records()
    model = tiny_model()
    result = train(model, records, tiny_train_cfg(total_steps=6, decay_step=4))
    lrs = [lr for _, _, lr in result.loss_curve]
    assert lrs[:4] == [1e-3] * 4
    assert lrs[4:] == [1e-4] * 2


def test_train_same_seed_identical_curves():
    records = tiny_records()
    a = train(tiny_model(seed=5), records, tiny_train_cfg())
    b = train(tiny_model(seed=5), records, tiny_train_cfg())
    assert a.loss_curve == b.loss_curve  # bitwise: floats compare equal


def test_train_default_loss_weights_match_training_recipe():
    cfg = TrainConfig()
    assert cfg.weights.lam_l1 == 5.0 and cfg.weights.lam_iou == 3.0


def test_train_resume_bitwise(tmp_path):
    records = tiny_records()
    cfg = tiny_train_cfg(total_steps=6, eval_interval=3)

    full = train(tiny_model(seed=9), records, cfg, out_dir=str(tmp_path / "full"))
    midway = str(tmp_path / "full" / "step0000003.ckpt")

    resumed = train(
        tiny_model(seed=777),  # different init: everything comes from the checkpoint
        records,
        cfg,
        out_dir=str(tmp_path / "resumed"),
        resume_from=midway,
    )
    assert resumed.loss_curve == full.loss_curve[3:]


def test_train_rejects_too_many_instances():
    records = tiny_records()
    cfg = ModelConfig(c_in=8, d=8, l_e=1, l_d=1, k=2, n_o=1, n_v_max=12, c_cls=2)
    with pytest.raises(ContractError):
        train(Model(cfg, np.random.default_rng(0)), records, tiny_train_cfg())


def test_train_rejects_label_overflow():
    records = tiny_records()
    cfg = ModelConfig(c_in=8, d=8, l_e=1, l_d=1, k=2, n_o=4, n_v_max=12, c_cls=1)
    with pytest.raises(ContractError):
        train(Model(cfg, np.random.default_rng(0)), records, tiny_train_cfg())


def test_train_loss_decreases_on_fixed_tiny_problem():
    records = tiny_records(num=4)
    model = tiny_model(seed=11)
    cfg = tiny_train_cfg(total_steps=50, decay_step=50, batch_size=4, lr=3e-3, eval_interval=50)
    result = train(model, records, cfg)
    losses = [l for _, l, _ in result.loss_curve]
    first, last = np.mean(losses[:5]), np.mean(losses[-5:])
    assert last < first


def test_evaluate_model_and_predict_corpus():
    records = tiny_records(num=4)
    model = tiny_model(seed=12)
    detections, ground_truth, by_video = predict_corpus(model, records)
    assert set(ground_truth) == {r.id for r in records}
    assert set(by_video) == {r.id for r in records}
    report = evaluate_model(model, records, thresholds=(0.5,))
    assert 0.0 <= report.avg_map <= 1.0


def test_train_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(lr=0.0).validate()
    with pytest.raises(ContractError):
        TrainConfig(decay_step=0).validate()
    with pytest.raises(ContractError):
        TrainConfig(grad_clip=-1.0).validate()
    with pytest.raises(ContractError):
        LossWeights(lam_l1=-1.0)
