"""
test_train.py
Loss, AdamW and its schedule, mIoU, evaluation and the training loop.
"""
import math

import numpy as np
import pandas as pd
import pytest

import config
import tensor_core as tc
import train
from data import Domain, SceneConfig, augment_batch, generate_corpus, make_loader
from encoder import ModelConfig, build_model
from exceptions import LabelError, ScheduleError, TrainingError
from train import (OptimConfig, adamw_step, compute_miou, compute_miou_setwise, cross_entropy_loss, evaluate,
                   init_opt_state, loss_trend_ok, param_group, train_loop)

TINY = dict(stage_widths=(8, 8, 16, 16), blocks_per_stage=(1, 1, 1, 1), heads_per_stage=(1, 2, 2, 4),
            decoder_width=8)


@pytest.fixture(scope='module')
def small_corpus():
    return generate_corpus(3, 8, SceneConfig(32, 32, 5), Domain.SOURCE)


def tiny_model(**overrides):
    return build_model(ModelConfig(**{**TINY, **overrides}), tc.Rng(3))


# -------------------------------------------------------------------- loss

def test_uniform_logits_give_log_c():
    loss = cross_entropy_loss(tc.Tensor(np.zeros((2, 5, 3, 3))), np.zeros((2, 3, 3), dtype=np.int64))
    assert loss.shape == ()
    assert loss.item() == pytest.approx(math.log(5), abs=1e-12)


def test_confident_correct_logits_give_zero_loss():
    labels = np.array([[[0, 1], [2, 1]]])
    logits = np.zeros((1, 3, 2, 2))
    for i in range(2):
        for j in range(2):
            logits[0, labels[0, i, j], i, j] = 60.0
    assert cross_entropy_loss(tc.Tensor(logits), labels).item() < 1e-20


def test_cross_entropy_gradient(rng):
    logits = tc.Tensor(rng.normal(0.0, 1.0, size=(2, 4, 3, 3)))
    labels = np.array([rng.integers(0, 4) for _ in range(18)]).reshape(2, 3, 3)
    assert tc.fd_check(lambda p: cross_entropy_loss(p, labels), [logits]) < 1e-6


def test_invalid_label_rejected():
    with pytest.raises(LabelError):
        cross_entropy_loss(tc.Tensor(np.zeros((1, 3, 2, 2))), np.full((1, 2, 2), 3))


# ------------------------------------------------------------------- AdamW

def _step(p, g, **overrides):
    cfg = OptimConfig(**{**dict(lr_backbone=0.1, lr_classifier=0.1, weight_decay=0.0, warmup_steps=0,
                                total_steps=10), **overrides})
    params = {'decoder.classify.w': tc.Tensor([p])}
    state = init_opt_state(params, cfg)
    new_params, new_state = adamw_step(params, {'decoder.classify.w': np.array([g])}, state, cfg.schedule())
    return new_params['decoder.classify.w'].data[0], new_state


def test_adamw_closed_form_single_step():
    value, state = _step(1.0, 0.5)
    # bias-corrected m = 0.5, v = 0.25, so the step is lr * 0.5 / (0.5 + eps)
    assert value == pytest.approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8), abs=1e-12)
    assert value == pytest.approx(0.9, abs=1e-7)
    assert state.step == 1
    assert state.m['decoder.classify.w'][0] == pytest.approx(0.05)
    assert state.v['decoder.classify.w'][0] == pytest.approx(0.00025)


def test_adamw_decoupled_decay():
    value, _ = _step(2.0, 0.0, weight_decay=0.5)
    assert value == pytest.approx(2.0 * (1.0 - 0.1 * 0.5))


def test_adamw_zero_gradient_zero_decay_is_identity():
    value, _ = _step(1.25, 0.0)
    assert value == 1.25


def test_adamw_zero_lr_is_identity():
    value, _ = _step(-3.5, 0.7, lr_backbone=0.0, lr_classifier=0.0, weight_decay=0.3)
    assert value == -3.5


def test_schedule_endpoints():
    schedule = OptimConfig(warmup_steps=60, total_steps=2000).schedule()
    assert schedule.factor(0) == pytest.approx(1 / 60)
    assert schedule.factor(59) == 1.0
    assert schedule.factor(60) == 1.0
    assert schedule.factor(1999) == pytest.approx(1 / 1940)
    with pytest.raises(ScheduleError):
        schedule.factor(2000)
    lrs = schedule.lrs(60)
    assert lrs == {train.BACKBONE: config.LR_BACKBONE, train.CLASSIFIER: config.LR_CLASSIFIER}


def test_parameter_groups():
    assert param_group('stage1.patch.w') == train.BACKBONE
    assert param_group('stage3.block1.attn.w_q') == train.BACKBONE
    assert param_group('fusion2.attn.w_k') == train.CLASSIFIER
    assert param_group('decoder.fuse.b') == train.CLASSIFIER


def test_optim_config_round_trip():
    cfg = OptimConfig(lr_backbone=2e-4, warmup_steps=5, total_steps=50)
    assert OptimConfig.from_dict(cfg.to_dict()) == cfg


# -------------------------------------------------------------------- mIoU

def test_miou_perfect_and_disjoint():
    truth = np.array([[0, 1], [2, 2]])
    assert compute_miou(truth, truth, 3).miou == 1.0
    report = compute_miou(np.ones((2, 2), dtype=int), np.zeros((2, 2), dtype=int), 2)
    assert report.per_class_iou.tolist() == [0.0, 0.0]
    assert report.miou == 0.0


def test_miou_hand_example():
    report = compute_miou(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]), 2)
    np.testing.assert_allclose(report.per_class_iou, [1 / 2, 2 / 3])
    assert report.miou == pytest.approx(7 / 12)
    assert report.confusion.sum() == 4


def test_absent_classes_leave_the_mean():
    report = compute_miou(np.array([0, 1, 1]), np.array([0, 1, 1]), 5)
    assert np.isnan(report.per_class_iou[2:]).all()
    assert report.miou == 1.0


def test_confusion_and_setwise_miou_agree(rng):
    for _ in range(50):
        truth = np.array([rng.integers(0, 4) for _ in range(64)]).reshape(8, 8)
        pred = np.array([rng.integers(0, 4) for _ in range(64)]).reshape(8, 8)
        report = compute_miou(pred, truth, 4)
        assert abs(report.miou - compute_miou_setwise(pred, truth, 4)) < 1e-12
        assert report.confusion.sum() == 64
        assert np.all((report.per_class_iou >= 0) & (report.per_class_iou <= 1))


def test_eval_report_row():
    row = compute_miou(np.array([0, 1]), np.array([0, 1]), 2, domain='target', mode='single').row(10)
    assert row == {'step': 10, 'domain': 'target', 'mode': 'single', 'miou': 1.0, 'iou_0': 1.0, 'iou_1': 1.0}


def test_parallel_evaluation_matches_serial(small_corpus):
    model = tiny_model(block1_kind='miba')
    serial = evaluate(model, small_corpus, 5, batch_size=3)
    threaded = evaluate(model, small_corpus, 5, batch_size=3, workers=3)
    assert np.array_equal(serial.confusion, threaded.confusion)
    assert serial.confusion.sum() == 8 * 32 * 32


# -------------------------------------------------------------- train loop

def _run(corpus, steps, seed=0, **overrides):
    model = tiny_model(**overrides)
    loader = make_loader(corpus, 2, tc.Rng(seed),
                         augment=lambda x, y, r: augment_batch(x, y, r, strength=0.5, crop_pad=2))
    cfg = OptimConfig(lr_backbone=1e-3, lr_classifier=1e-2, warmup_steps=1, total_steps=max(steps, 1))
    return model, train_loop(model, loader, cfg, steps, log_every=1)


def test_zero_steps_leave_model_unchanged(small_corpus):
    model, result = _run(small_corpus, 0)
    assert result.log.empty
    assert all(np.array_equal(model.params[k].data, result.model.params[k].data) for k in model.params)


def test_training_is_deterministic(small_corpus):
    _, first = _run(small_corpus, 3, block1_kind='eiba', fusion_kind='miba')
    _, second = _run(small_corpus, 3, block1_kind='eiba', fusion_kind='miba')
    assert list(first.log.columns) == ['step', 'loss', 'lr_backbone', 'lr_classifier']
    assert len(first.log) == 3
    pd.testing.assert_frame_equal(first.log, second.log)
    assert all(np.array_equal(first.model.params[k].data, second.model.params[k].data)
               for k in first.model.params)


def test_training_runs_eval_hooks(small_corpus):
    model = tiny_model()
    loader = make_loader(small_corpus, 2, tc.Rng(0))
    cfg = OptimConfig(warmup_steps=1, total_steps=4)

    def hook(m, step):
        return [evaluate(m, small_corpus, 5, batch_size=4, intra_batch=mode) for mode in (True, False)]

    result = train_loop(model, loader, cfg, eval_fn=hook, eval_every=2, log_every=0)
    assert result.evals['step'].tolist() == [2, 2, 4, 4]
    assert result.evals['mode'].tolist() == ['batch', 'single', 'batch', 'single']


def test_steps_beyond_schedule_raise(small_corpus):
    model = tiny_model()
    loader = make_loader(small_corpus, 2, tc.Rng(0))
    with pytest.raises(ScheduleError):
        train_loop(model, loader, OptimConfig(warmup_steps=0, total_steps=2), steps=3, log_every=0)


def test_non_finite_loss_names_the_step(small_corpus, monkeypatch):
    monkeypatch.setattr(train, 'segmentation_loss', lambda *args, **kwargs: tc.Tensor(float('nan')))
    model = tiny_model()
    loader = make_loader(small_corpus, 2, tc.Rng(0))
    with pytest.raises(TrainingError) as err:
        train_loop(model, loader, OptimConfig(warmup_steps=0, total_steps=2), log_every=0)
    assert err.value.step == 0


def test_loss_trend_criterion():
    falling = pd.DataFrame({'loss': np.linspace(2.0, 0.5, 300)})
    assert loss_trend_ok(falling)
    assert not loss_trend_ok(pd.DataFrame({'loss': np.linspace(0.5, 2.0, 300)}))
    assert not loss_trend_ok(pd.DataFrame({'loss': [1.0]}))


@pytest.mark.slow
def test_baseline_reaches_source_miou_floor():
    cfg = SceneConfig()
    source = generate_corpus(config.SEED, config.N_SOURCE, cfg, Domain.SOURCE)
    target = generate_corpus(config.SEED, config.N_TARGET, cfg, Domain.TARGET)
    rng = tc.Rng(config.SEED)
    model = build_model(ModelConfig(), rng.spawn(0))
    loader = make_loader(source, config.BATCH_SIZE, rng.spawn(1), augment=augment_batch)
    result = train_loop(model, loader, OptimConfig())
    assert loss_trend_ok(result.log)
    src = evaluate(result.model, source, cfg.num_classes, intra_batch=False, domain='source')
    tgt = evaluate(result.model, target, cfg.num_classes, intra_batch=False, domain='target')
    assert src.miou >= 0.85
    assert src.miou >= tgt.miou
