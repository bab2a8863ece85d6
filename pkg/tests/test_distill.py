import math

import numpy as np
import pytest

from ontoclr import autodiff as ad
from ontoclr.autodiff import Tensor
from ontoclr.data import SynthConfig, synthesize
from ontoclr.distill import (
    DistillConfig,
    LabeledExample,
    finetune,
    hard_loss,
    kd_loss,
    labeled_examples,
    predict_student,
    predict_teacher,
    select_note_input,
    train_student,
    train_teacher,
)
from ontoclr.encoders import EncoderConfig
from ontoclr.errors import (
    DegenerateConfig,
    LabelOutOfRange,
    NonFiniteInput,
    ShapeMismatch,
    TaskMismatch,
)
from ontoclr.metrics import auroc
from ontoclr.pretrain import stream_rng


# -- config -----------------------------------------------------------------------

def test_config_validation():
    for kw in (dict(temperature=0.0), dict(lambda_distill=-1.0),
               dict(raw_note_prob=1.5), dict(raw_note_prob=-0.1),
               dict(learning_rate=0.0), dict(epochs=0),
               dict(task="regression"), dict(task="binary", n_classes=3),
               dict(task="multiclass", n_classes=1), dict(val_fraction=0.0),
               dict(val_fraction=1.0)):
        with pytest.raises(DegenerateConfig):
            DistillConfig(**kw)


def test_head_dim():
    assert DistillConfig(task="binary").head_dim == 1
    assert DistillConfig(task="multiclass", n_classes=10).head_dim == 10


# -- note selection -----------------------------------------------------------------

def _example(seed=0, dim=4):
    rng = np.random.default_rng(seed)
    from ontoclr.data import VitalsSeries
    obs = np.ones((2, 2))
    return LabeledExample("p0", VitalsSeries("p0", rng.normal(size=(2, 2)), obs),
                          rng.normal(size=dim).astype(np.float32),
                          rng.normal(size=dim).astype(np.float32), 1)


def test_select_note_extremes():
    ex = _example()
    for i in range(10):
        assert select_note_input(ex, 1.0, stream_rng(i)) is ex.note_raw
        assert select_note_input(ex, 0.0, stream_rng(i)) is ex.note_summary


def test_select_note_balance():
    ex = _example()
    raw = sum(
        select_note_input(ex, 0.5, stream_rng(7, i)) is ex.note_raw
        for i in range(10_000))
    assert 0.48 <= raw / 10_000 <= 0.52


def test_select_note_bad_probability():
    with pytest.raises(DegenerateConfig):
        select_note_input(_example(), 1.2, stream_rng(0))


def test_example_dim_mismatch():
    ex = _example()
    with pytest.raises(ShapeMismatch):
        LabeledExample("p1", ex.vitals, ex.note_raw, ex.note_summary[:2], 0)


# -- hard loss ----------------------------------------------------------------------

def test_hard_loss_uniform_logits():
    k = 5
    loss = hard_loss(Tensor(np.zeros((3, k))), [0, 2, 4], "multiclass")
    assert float(loss.data) == pytest.approx(math.log(k), abs=1e-12)


def test_hard_loss_zero_logit_binary():
    loss = hard_loss(Tensor(np.zeros((4, 1))), [0, 1, 1, 0], "binary")
    assert float(loss.data) == pytest.approx(math.log(2), abs=1e-12)


def test_hard_loss_multiclass_closed_form():
    z = np.array([[1.0, 2.0, 0.5]])
    want = math.log(sum(math.exp(v) for v in z[0])) - z[0][1]
    got = float(hard_loss(Tensor(z), [1], "multiclass").data)
    assert got == pytest.approx(want, abs=1e-12)


def test_hard_loss_binary_closed_form():
    z = np.array([[0.7], [-1.2]])
    y = [1, 0]
    want = np.mean([math.log(1 + math.exp(-0.7)),
                    math.log(1 + math.exp(-1.2))])
    got = float(hard_loss(Tensor(z), y, "binary").data)
    assert got == pytest.approx(want, abs=1e-12)


def test_hard_loss_label_range():
    with pytest.raises(LabelOutOfRange):
        hard_loss(Tensor(np.zeros((2, 3))), [0, 3], "multiclass")
    with pytest.raises(LabelOutOfRange):
        hard_loss(Tensor(np.zeros((2, 1))), [0, 2], "binary")


def test_hard_loss_requires_finite():
    with pytest.raises(NonFiniteInput):
        hard_loss(Tensor(np.array([[np.inf]])), [0], "binary")


def test_hard_loss_gradients():
    rng = np.random.default_rng(0)
    z = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    assert ad.grad_check(lambda: hard_loss(z, [1, 0, 3], "multiclass"), [z]) < 1e-6
    zb = Tensor(rng.normal(size=(5, 1)), requires_grad=True)
    assert ad.grad_check(lambda: hard_loss(zb, [1, 0, 1, 1, 0], "binary"), [zb]) < 1e-6


# -- kd loss ------------------------------------------------------------------------

def test_kd_matching_multiclass_is_exact_zero():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(4, 3))
    zs = Tensor(z.copy(), requires_grad=True)
    loss = kd_loss(z, zs, 2.0, "multiclass")
    assert float(loss.data) == 0.0
    ad.backward(loss)
    assert np.abs(zs.grad).max() < 1e-12


def test_kd_matching_binary_equals_teacher_entropy():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(5, 1))
    t = 2.0
    p = 1.0 / (1.0 + np.exp(-z.ravel() / t))
    entropy = float(np.mean(-(p * np.log(p) + (1 - p) * np.log(1 - p))))
    zs = Tensor(z.copy(), requires_grad=True)
    loss = kd_loss(z, zs, t, "binary")
    assert float(loss.data) == pytest.approx(entropy, abs=1e-12)
    ad.backward(loss)
    assert np.abs(zs.grad).max() < 1e-12


def test_kd_multiclass_closed_form():
    zt = np.array([[1.0, 0.0, -1.0]])
    zs_v = np.array([[0.5, 0.2, 0.1]])
    t = 2.0

    def softmax(v):
        e = [math.exp(x / t) for x in v]
        s = sum(e)
        return [x / s for x in e]

    pt, ps = softmax(zt[0]), softmax(zs_v[0])
    want = sum(a * (math.log(a) - math.log(b)) for a, b in zip(pt, ps))
    got = float(kd_loss(zt, Tensor(zs_v), t, "multiclass").data)
    assert got == pytest.approx(want, abs=1e-12)


def test_kd_nonnegative_multiclass():
    rng = np.random.default_rng(3)
    for _ in range(30):
        zt = rng.normal(size=(3, 4))
        zs = rng.normal(size=(3, 4))
        val = float(kd_loss(zt, Tensor(zs), 1.5, "multiclass").data)
        assert val >= -1e-15
        assert val > 0.0  # random logits never match exactly


def test_kd_huge_temperature_uniformizes_targets():
    rng = np.random.default_rng(4)
    z = rng.uniform(-5, 5, size=(6, 7))
    p = np.exp(ad.log_softmax(Tensor(z / 1e6), axis=1).data)
    assert np.abs(p - 1.0 / 7).max() < 1e-6


def test_kd_teacher_gets_no_gradient():
    rng = np.random.default_rng(5)
    zt = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    zs = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    loss = kd_loss(zt, zs, 2.0, "multiclass")
    ad.backward(loss)
    assert zt.grad is None
    assert zs.grad is not None


def test_kd_validation():
    with pytest.raises(DegenerateConfig):
        kd_loss(np.zeros((2, 2)), Tensor(np.zeros((2, 2))), 0.0, "multiclass")
    with pytest.raises(ShapeMismatch):
        kd_loss(np.zeros((2, 3)), Tensor(np.zeros((2, 2))), 1.0, "multiclass")
    with pytest.raises(NonFiniteInput):
        kd_loss(np.array([[np.nan, 0.0]]), Tensor(np.zeros((1, 2))), 1.0,
                "multiclass")


def test_kd_gradient_matches_fd():
    rng = np.random.default_rng(6)
    zt = rng.normal(size=(3, 4))
    zs = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    assert ad.grad_check(lambda: kd_loss(zt, zs, 2.0, "multiclass"), [zs]) < 1e-6
    ztb = rng.normal(size=(4, 1))
    zsb = Tensor(rng.normal(size=(4, 1)), requires_grad=True)
    assert ad.grad_check(lambda: kd_loss(ztb, zsb, 5.0, "binary"), [zsb]) < 1e-6


# -- training loops -----------------------------------------------------------------

TINY_ENC = EncoderConfig(layers=1, heads=2, model_dim=8, input_channels=4,
                         max_timesteps=4, ffn_factor=2)


def tiny_bundle(seed=0, n=40, label_noise=0.0):
    bundle, tree = synthesize(SynthConfig(
        n_patients=n, n_clusters=2, seed=seed, horizon_hours=4, channels=2,
        note_dim=6, label_noise=label_noise))
    return bundle


def quick_cfg(**kw):
    base = dict(epochs=3, learning_rate=3e-3, batch_size=16, seed=0)
    base.update(kw)
    return DistillConfig(**base)


def test_labeled_examples_validation():
    bundle = tiny_bundle()
    exs = labeled_examples(bundle, quick_cfg())
    assert len(exs) == 40
    bad = quick_cfg(task="multiclass", n_classes=3)
    with pytest.raises(LabelOutOfRange):
        labeled_examples(bundle, bad)  # ten-class labels exceed k=3
    with pytest.raises(TaskMismatch):
        from dataclasses import replace
        labeled_examples(replace(bundle, labels={}), quick_cfg())


def test_teacher_learns_separable_task():
    bundle = tiny_bundle(seed=1)
    model = train_teacher(bundle, quick_cfg(epochs=30), enc_cfg=TINY_ENC)
    ids = bundle.ids_for("train")
    scores = predict_teacher(bundle, model, ids)
    labels = [bundle.labels["binary"][p] for p in ids]
    assert auroc(scores, labels) > 0.95


def test_teacher_note_hashes_distinguish_p():
    bundle = tiny_bundle(seed=2)
    raw = train_teacher(bundle, quick_cfg(epochs=1, raw_note_prob=1.0),
                        enc_cfg=TINY_ENC)
    summ = train_teacher(bundle, quick_cfg(epochs=1, raw_note_prob=0.0),
                         enc_cfg=TINY_ENC)
    assert raw.note_input_hashes != summ.note_input_hashes


def test_teacher_deterministic():
    bundle = tiny_bundle(seed=3)
    a = train_teacher(bundle, quick_cfg(epochs=2), enc_cfg=TINY_ENC)
    b = train_teacher(bundle, quick_cfg(epochs=2), enc_cfg=TINY_ENC)
    assert a.loss_trace == b.loss_trace
    assert a.val_trace == b.val_trace
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_teacher_best_checkpoint_is_val_argmax():
    bundle = tiny_bundle(seed=4)
    model = train_teacher(bundle, quick_cfg(epochs=5), enc_cfg=TINY_ENC)
    finite = [(e, v) for e, v in model.val_trace if np.isfinite(v)]
    assert finite
    best = max(finite, key=lambda t: t[1])
    assert model.best_val_auroc == best[1]
    assert model.val_trace[model.best_epoch][1] == best[1]


def test_student_lambda_zero_bitwise_equals_finetune():
    bundle = tiny_bundle(seed=5)
    cfg = quick_cfg(epochs=2, lambda_distill=0.0)
    a = train_student(bundle, cfg, teacher=None, enc_cfg=TINY_ENC)
    b = finetune(bundle, quick_cfg(epochs=2, lambda_distill=7.0), enc_cfg=TINY_ENC)
    assert a.loss_trace == b.loss_trace
    for k in a.final_params:
        np.testing.assert_array_equal(a.final_params[k], b.final_params[k])


def test_student_task_mismatch():
    bundle = tiny_bundle(seed=6)
    teacher = train_teacher(bundle, quick_cfg(epochs=1), enc_cfg=TINY_ENC)
    with pytest.raises(TaskMismatch):
        train_student(bundle, quick_cfg(task="multiclass", n_classes=10,
                                        epochs=1), teacher, enc_cfg=TINY_ENC)
    with pytest.raises(TaskMismatch):
        train_student(bundle, quick_cfg(epochs=1, lambda_distill=1.0), None,
                      enc_cfg=TINY_ENC)


def test_student_leaves_teacher_untouched():
    bundle = tiny_bundle(seed=7)
    teacher = train_teacher(bundle, quick_cfg(epochs=1), enc_cfg=TINY_ENC)
    before = {k: v.tobytes() for k, v in teacher.params.items()}
    train_student(bundle, quick_cfg(epochs=2, lambda_distill=5.0), teacher,
                  enc_cfg=TINY_ENC)
    after = {k: v.tobytes() for k, v in teacher.params.items()}
    assert before == after


def test_student_combined_loss_is_component_sum():
    bundle = tiny_bundle(seed=8)
    teacher = train_teacher(bundle, quick_cfg(epochs=1), enc_cfg=TINY_ENC)
    lam = 5.0
    model = train_student(bundle, quick_cfg(epochs=1, lambda_distill=lam),
                          teacher, enc_cfg=TINY_ENC)
    for _, _, total, hard, kd in model.loss_trace:
        assert total == hard + lam * kd
        assert kd >= 0.0


def test_student_huge_lambda_swamps_hard_loss():
    bundle = tiny_bundle(seed=9)
    teacher = train_teacher(bundle, quick_cfg(epochs=1), enc_cfg=TINY_ENC)
    model = train_student(bundle, quick_cfg(epochs=1, lambda_distill=1e6),
                          teacher, enc_cfg=TINY_ENC)
    _, _, total, hard, _ = model.loss_trace[0]
    assert hard / total < 1e-3


def test_student_initializes_encoder_from_checkpoint():
    bundle = tiny_bundle(seed=10)
    from ontoclr.encoders import init_encoder_params
    init = {k: t.data.copy() for k, t in
            init_encoder_params(TINY_ENC, stream_rng(99)).items()}
    cfg = quick_cfg(epochs=1, learning_rate=1e-30, lambda_distill=0.0)
    model = train_student(bundle, cfg, None, init_params=init, enc_cfg=TINY_ENC)
    np.testing.assert_allclose(model.final_params["enc.in.w"], init["enc.in.w"],
                               atol=1e-12)
    bad = dict(init)
    bad["enc.in.w"] = np.zeros((3, 3))
    with pytest.raises(ShapeMismatch):
        train_student(bundle, cfg, None, init_params=bad, enc_cfg=TINY_ENC)


def test_student_multiclass_runs():
    bundle = tiny_bundle(seed=11)
    cfg = quick_cfg(task="multiclass", n_classes=10, epochs=2,
                    lambda_distill=1.0)
    teacher = train_teacher(bundle, cfg, enc_cfg=TINY_ENC)
    model = train_student(bundle, cfg, teacher, enc_cfg=TINY_ENC)
    scores = predict_student(bundle, model, bundle.ids_for("train"))
    assert scores.shape == (40, 10)
    np.testing.assert_allclose(scores.sum(axis=1), 1.0, atol=1e-12)


def test_student_deterministic():
    bundle = tiny_bundle(seed=12)
    teacher = train_teacher(bundle, quick_cfg(epochs=1), enc_cfg=TINY_ENC)
    a = train_student(bundle, quick_cfg(epochs=2, lambda_distill=2.0), teacher,
                      enc_cfg=TINY_ENC)
    b = train_student(bundle, quick_cfg(epochs=2, lambda_distill=2.0), teacher,
                      enc_cfg=TINY_ENC)
    assert a.loss_trace == b.loss_trace
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_combined_objective_grad_check():
    # one batch of the student objective as a single differentiable function
    rng = np.random.default_rng(13)
    from ontoclr.encoders import init_student_params, student_forward, init_teacher_params, teacher_forward
    enc = EncoderConfig(layers=1, heads=2, model_dim=8, input_channels=4,
                        max_timesteps=3, ffn_factor=2)
    params = init_student_params(enc, rng, n_outputs=1)
    for p in params.values():
        p.requires_grad = True
    x = rng.normal(size=(3, 3, 4))
    y = np.array([0, 1, 1])
    zt = rng.normal(size=(3, 1))

    def f():
        z = student_forward(enc, params, x)
        return ad.add(hard_loss(z, y, "binary"),
                      ad.scale(kd_loss(zt, z, 2.0, "binary"), 5.0))

    assert ad.grad_check(f, params.values()) < 1e-4
