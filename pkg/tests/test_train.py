import numpy as np
import pytest

from oracles import miou_loop
from tatkd.checkpoint import to_bytes
from tatkd.config import RunConfig
from tatkd.data import Dataset, gen_shapes_classification, make_splits
from tatkd.tensor import Tensor
from tatkd.train import (
    METRIC_COLUMNS,
    SGD,
    AdamW,
    TrainingDivergedError,
    accuracy,
    distill_student,
    evaluate,
    evaluate_model,
    lr_at,
    mean_iou,
    model_from_checkpoint,
    train_teacher,
)

SMALL = dict(n_train=64, n_test=32, image_size=8, patch_h=4, patch_w=4, groups=4, batch_size=16, eval_every=0)


def small_cfg(**kw):
    return RunConfig(**{**SMALL, "epochs": 2, "teacher_epochs": 2, **kw})


@pytest.fixture(scope="module")
def cls_setup():
    cfg = small_cfg()
    train, test = make_splits("classification", 64, 32, 8, 4, 0.3, seed=0)
    teacher, _ = train_teacher(cfg, train, test=test)
    return cfg, train, test, teacher


# metrics ----------------------------------------------------------------------------


def test_accuracy_perfect():
    y = np.array([0, 1, 2, 1])
    assert accuracy(y, y) == 1.0


def test_accuracy_constant_predictor_balanced():
    assert accuracy(np.zeros(10, int), np.array([0, 1] * 5)) == 0.5


def test_miou_hand_built_map():
    label = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    assert mean_iou(pred, label, 2) == pytest.approx(miou_loop(pred, label, 2))
    assert mean_iou(pred, label, 2) == pytest.approx((1 / 2 + 2 / 3) / 2)


def test_miou_ignores_classes_absent_from_ground_truth():
    label = np.zeros((2, 2), int)
    pred = np.array([[0, 2], [0, 0]])
    assert mean_iou(pred, label, 3) == pytest.approx(miou_loop(pred, label, 3)) == pytest.approx(0.75)


def test_miou_random_against_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        label, pred = rng.integers(0, 4, size=(2, 5, 5)), rng.integers(0, 4, size=(2, 5, 5))
        assert mean_iou(pred, label, 4) == pytest.approx(miou_loop(pred, label, 4))


# optimisers -----------------------------------------------------------------------


@pytest.mark.parametrize("make", [lambda p: SGD(p, 0.0, 0.9, 5e-4), lambda p: AdamW(p, 0.0, weight_decay=0.01)])
def test_zero_lr_step_leaves_parameters(make):
    w = Tensor(np.random.default_rng(0).normal(size=(3, 3)), requires_grad=True)
    before = w.data.copy()
    opt = make({"w": w})
    (w * w).sum().backward()
    opt.step()
    np.testing.assert_array_equal(w.data, before)


def test_sgd_momentum_matches_hand_update():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD({"w": w}, lr=0.1, momentum=0.9, weight_decay=0.0)
    for _ in range(2):
        opt.zero_grad()
        (w * w).sum().backward()
        opt.step()
    # v1 = 2, w1 = 0.8; v2 = 0.9*2 + 1.6 = 3.4, w2 = 0.8 - 0.34
    assert w.data.item() == pytest.approx(0.46)


def test_step_schedule():
    cfg = RunConfig(lr=0.1, schedule="step")
    assert [lr_at(cfg, e, 10) for e in (0, 5, 6, 8, 9)] == pytest.approx([0.1, 0.1, 0.01, 0.001, 0.001])


# teacher ----------------------------------------------------------------------------


def test_teacher_fits_separable_two_class_set():
    train = gen_shapes_classification(128, 16, 2, 0.0, seed=3)
    cfg = RunConfig(num_classes=2, teacher_epochs=30, batch_size=32, eval_every=0)
    ckpt, _ = train_teacher(cfg, train, test=train)
    model, _ = model_from_checkpoint(ckpt)
    assert evaluate_model(model, train) > 0.95


def test_teacher_deterministic(cls_setup):
    cfg, train, test, teacher = cls_setup
    again, _ = train_teacher(cfg, train, test=test)
    assert to_bytes(again) == to_bytes(teacher)


def test_teacher_empty_dataset():
    empty = Dataset.__new__(Dataset)
    empty.images = np.zeros((0, 8, 8, 1), np.float32)
    empty.labels = np.zeros(0, np.int64)
    with pytest.raises(ValueError):
        train_teacher(small_cfg(), empty)


def test_divergence_aborts_with_diagnostic(cls_setup):
    _, train, test, _ = cls_setup
    cfg = small_cfg(lr=1e30, momentum=0.0, weight_decay=0.0, schedule="constant", teacher_epochs=3)
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError, match="non-finite loss"):
        train_teacher(cfg, train)


# distillation -----------------------------------------------------------------------


def test_zero_weights_reproduce_vanilla(cls_setup):
    cfg, train, test, teacher = cls_setup
    vanilla, mv = distill_student(cfg.replace(distill="none"), teacher, train, seed=1, test=test)
    zeroed, mz = distill_student(cfg.replace(distill="tat", epsilon=0.0, beta=0.0), teacher, train, seed=1, test=test)
    for k, v in vanilla.section("model").items():
        np.testing.assert_array_equal(zeroed.section("model")[k], v)
    assert mv.column("loss_task") == mz.column("loss_task")


def test_teacher_untouched_by_distillation(cls_setup):
    cfg, train, test, teacher = cls_setup
    before = to_bytes(teacher)
    distill_student(cfg.replace(beta=0.5), teacher, train, seed=0)
    assert to_bytes(teacher) == before


@pytest.mark.parametrize("distill", ["fm", "tat"])
def test_total_is_weighted_sum_of_components(cls_setup, distill):
    cfg, train, test, teacher = cls_setup
    cfg = cfg.replace(distill=distill, alpha=0.7, beta=0.4, epsilon=0.3)
    _, m = distill_student(cfg, teacher, train, seed=0, test=test)
    for r in m.records:
        expect = 0.7 * r.loss_task + 0.4 * r.loss_kl + 0.3 * r.loss_tat
        assert r.loss_total == pytest.approx(expect, abs=1e-5)
        assert all(np.isfinite(getattr(r, "loss_" + c)) for c in ("task", "kl", "tat", "pg", "ap"))
    assert 0.0 <= m.final_metric <= 1.0


def test_class_count_mismatch(cls_setup):
    cfg, train, _, teacher = cls_setup
    other, _ = make_splits("classification", 16, 8, 8, 3, 0.3, seed=0)
    with pytest.raises(ValueError):
        distill_student(cfg.replace(num_classes=3), teacher, other)
    with pytest.raises(ValueError):
        evaluate(teacher, other)


def test_resume_matches_uninterrupted(cls_setup):
    cfg, train, test, teacher = cls_setup
    cfg = cfg.replace(schedule="constant")
    half, _ = distill_student(cfg.replace(epochs=2), teacher, train, seed=2)
    full, _ = distill_student(cfg.replace(epochs=4), teacher, train, seed=2)
    # resuming continues from the saved epoch, optimiser and RNG state
    resumed, _ = distill_student(cfg.replace(epochs=4), teacher, train, seed=2, resume=half)
    for k, v in full.tensors.items():
        np.testing.assert_array_equal(resumed.tensors[k], v, err_msg=k)
    assert resumed.epoch == 4


def test_evaluate_checkpoint(cls_setup):
    cfg, train, test, teacher = cls_setup
    m = evaluate(teacher, test)
    assert m.task == "classification" and 0.0 <= m.final_metric <= 1.0
    assert m.to_csv().splitlines()[0] == ",".join(METRIC_COLUMNS)


def test_segmentation_distillation_logs_hierarchical_losses():
    cfg = small_cfg(task="segmentation", num_classes=3, groups=2, pool_k=2)
    train, test = make_splits("segmentation", 32, 16, 8, 3, 0.1, seed=0)
    teacher, _ = train_teacher(cfg, train)
    ckpt, m = distill_student(cfg, teacher, train, seed=0, test=test)
    rec = m.records[-1]
    assert rec.loss_pg > 0 and rec.loss_ap > 0 and rec.loss_kl == 0
    assert rec.loss_total == pytest.approx(rec.loss_task + 0.1 * rec.loss_pg + 0.05 * rec.loss_ap, abs=1e-5)
    assert 0.0 <= m.final_metric <= 1.0
    assert any(k.startswith("pg_proj/") for k in ckpt.tensors)


@pytest.mark.slow
def test_tat_loss_decreases_over_first_ten_epochs():
    # the first 10 epochs of a default 60-epoch run all use the base lr
    cfg = RunConfig(n_train=256, n_test=64, epochs=10, teacher_epochs=10, eval_every=0, schedule="constant")
    train, test = make_splits("classification", 256, 64, 16, 4, 0.3, seed=0)
    teacher, _ = train_teacher(cfg, train)
    decreasing = 0
    for seed in range(5):
        _, m = distill_student(cfg, teacher, train, seed=seed)
        trace = m.column("loss_tat")
        decreasing += all(b < a for a, b in zip(trace, trace[1:]))
    assert decreasing >= 4
