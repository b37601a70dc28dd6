"""Training loops, variants, evaluation, and probing on toy-sized problems."""

import os

import numpy as np
import pytest

from kdkit.io import Dataset, load_dataset, save_bundle
from kdkit.kd_layer import init_kd_layer
from kdkit.model import ConvSpec, ModelSpec, SmallCNN, StudentModel, arch_spec
from kdkit.persist import LabelerBundle, save_checkpoint, load_checkpoint
from kdkit.train import (
    TrainPlan,
    build_labelers,
    build_student,
    evaluate,
    linear_probe,
    map_dims,
    run_training,
    train_student,
    train_teacher,
)

SIZE = 12


def toy_spec(classes=2, widths=(6, 8), strides=(2, 2)):
    return ModelSpec(blocks=[ConvSpec(w, s) for w, s in zip(widths, strides)],
                     classes=classes, final_stage_start=1)


def make_separable_dataset(n_train=80, n_test=40, classes=2, seed=0):
    """Class c = bright vs dark blocks: trivially separable by mean intensity."""
    rng = np.random.default_rng(seed)

    def split(n):
        y = rng.integers(classes, size=n).astype(np.int64)
        x = rng.normal(0.0, 0.08, size=(n, SIZE, SIZE, 3))
        x += (y[:, None, None, None] * 2 - 1) * 0.4
        u8 = np.clip((x + 1.0) * 127.5, 0, 255).astype(np.uint8)
        return u8, y

    tr_x, tr_y = split(n_train)
    te_x, te_y = split(n_test)
    flat = tr_x.reshape(-1, 3).astype(np.float64) / 255.0
    return Dataset(train_images=tr_x, train_labels=tr_y, test_images=te_x,
                   test_labels=te_y, classes=classes,
                   mean=flat.mean(axis=0), std=flat.std(axis=0))


@pytest.fixture(scope="module")
def toy_data():
    return make_separable_dataset()


def quick_plan(**kw):
    base = dict(epochs=3, lr=0.05, decay_epochs=[], batch_size=16, seed=0,
                flip=False, dtype="f64")
    base.update(kw)
    return TrainPlan(**base)


class TestCore:
    def test_separable_data_reaches_full_train_accuracy(self, toy_data):
        model = StudentModel(SmallCNN(toy_spec(), seed=0))
        summary = run_training(model, quick_plan(epochs=15), toy_data)
        assert summary["train_top1"] == 1.0

    def test_zero_epochs_checkpoint_equals_init(self, toy_data, tmp_path):
        model = StudentModel(SmallCNN(toy_spec(), seed=3))
        fresh = StudentModel(SmallCNN(toy_spec(), seed=3))
        summary = run_training(model, quick_plan(epochs=0), toy_data)
        assert summary["test_top1"] is None
        save_checkpoint(str(tmp_path / "ck"), model)
        for (_, a), (_, b) in zip(model.parameters(), fresh.parameters()):
            assert np.array_equal(a.data, b.data)

    def test_same_seed_identical_checkpoints(self, toy_data, tmp_path):
        for tag in ("a", "b"):
            model = StudentModel(SmallCNN(toy_spec(), seed=1))
            run_training(model, quick_plan(), toy_data)
            save_checkpoint(str(tmp_path / tag), model)
        blob_a = (tmp_path / "a" / "tensors.bin").read_bytes()
        blob_b = (tmp_path / "b" / "tensors.bin").read_bytes()
        assert blob_a == blob_b

    def test_metrics_file_contents(self, toy_data, tmp_path):
        model = StudentModel(SmallCNN(toy_spec(), seed=0))
        path = str(tmp_path / "metrics.csv")
        run_training(model, quick_plan(epochs=2), toy_data, metrics_path=path)
        lines = open(path).read().splitlines()
        assert lines[0].startswith("epoch,split,")
        assert len(lines) == 1 + 2 * 2  # header + (train, test) x 2 epochs
        assert all(len(line.split(",")) == 7 for line in lines[1:])

    def test_lr_decay_schedule(self):
        from kdkit.train import _current_lr
        plan = quick_plan(lr=1.0, decay_epochs=[2, 4], decay_factor=0.1)
        assert _current_lr(plan, 0) == 1.0
        assert _current_lr(plan, 2) == pytest.approx(0.1)
        assert _current_lr(plan, 4) == pytest.approx(0.01)

    def test_wall_seconds_zero_without_timing(self, toy_data, tmp_path):
        model = StudentModel(SmallCNN(toy_spec(), seed=0))
        path = str(tmp_path / "m.csv")
        run_training(model, quick_plan(epochs=1, record_timing=False), toy_data,
                     metrics_path=path)
        rows = [line.split(",") for line in open(path).read().splitlines()[1:]]
        assert all(r[-1] == "0.000" for r in rows)


class TestVariants:
    def _teacher(self, toy_data):
        spec = toy_spec(widths=(8, 10))
        return train_teacher(spec, quick_plan(epochs=6, seed=9), toy_data)[0]

    def test_baseline_matches_teacher_semantics(self, toy_data, tmp_path):
        spec = toy_spec()
        plan = quick_plan(epochs=4, seed=5)
        teacher, _ = train_teacher(spec, plan, toy_data)
        student, _ = train_student(spec, plan, toy_data)
        save_checkpoint(str(tmp_path / "t"), teacher)
        save_checkpoint(str(tmp_path / "s"), student)
        assert (tmp_path / "t" / "tensors.bin").read_bytes() == \
            (tmp_path / "s" / "tensors.bin").read_bytes()

    def test_forced_matching_labels_reduce_total_to_ce(self, toy_data, tmp_path):
        spec = toy_spec()

        def hook(out, y):
            return out.p_s_penult.data.copy(), None

        hooked = build_student(spec, quick_plan(variant="kd-penult"),
                               LabelerBundle(_fake_penult_labeler(8)))
        path = str(tmp_path / "hooked.csv")
        run_training(hooked, quick_plan(epochs=2, variant="kd-penult"),
                     toy_data, label_hook=hook, metrics_path=path)
        rows = [line.split(",") for line in open(path).read().splitlines()[1:]]
        # KL(p, p) = 0, so the distillation column vanishes and total == CE
        assert all(float(r[3]) == 0.0 for r in rows)

    def test_match_loss_is_kd_penult_with_zero_alpha(self, toy_data, tmp_path):
        teacher = self._teacher(toy_data)
        spec = toy_spec()
        lab = build_labelers(teacher, toy_data,
                             quick_plan(variant="kd-penult", k_penult=4), spec)
        for tag, variant, alpha in (("m", "match-loss", 1.0), ("k", "kd-penult", 0.0)):
            plan = quick_plan(epochs=3, variant=variant, alpha_penult=alpha,
                              k_penult=4)
            student, _ = train_student(spec, plan, toy_data, teacher=teacher,
                                       labelers=lab)
            save_checkpoint(str(tmp_path / tag), student)
        assert (tmp_path / "m" / "tensors.bin").read_bytes() == \
            (tmp_path / "k" / "tensors.bin").read_bytes()

    def test_teacher_parameters_frozen_during_distillation(self, toy_data):
        teacher = self._teacher(toy_data)
        before = [t.data.copy() for _, t in teacher.parameters()]
        spec = toy_spec()
        lab = build_labelers(teacher, toy_data,
                             quick_plan(variant="kd-penult", k_penult=4), spec)
        train_student(spec, quick_plan(epochs=2, variant="kd-penult", k_penult=4),
                      toy_data, teacher=teacher, labelers=lab)
        for b, (_, t) in zip(before, teacher.parameters()):
            assert np.array_equal(b, t.data)

    def test_cache_matches_online_teacher_passes(self, toy_data, tmp_path):
        teacher = self._teacher(toy_data)
        spec = toy_spec()
        lab = build_labelers(teacher, toy_data,
                             quick_plan(variant="kd-penult", k_penult=4), spec)
        for tag, cached in (("on", True), ("off", False)):
            plan = quick_plan(epochs=2, variant="kd-penult", k_penult=4,
                              cache_teacher=cached)
            student, _ = train_student(spec, plan, toy_data, teacher=teacher,
                                       labelers=lab)
            save_checkpoint(str(tmp_path / tag), student)
        assert (tmp_path / "on" / "tensors.bin").read_bytes() == \
            (tmp_path / "off" / "tensors.bin").read_bytes()

    def test_kd_both_trains_and_evaluates(self, toy_data):
        teacher = self._teacher(toy_data)
        spec = toy_spec()
        plan = quick_plan(epochs=2, variant="kd-both", k_penult=4, k_inter=2)
        lab = build_labelers(teacher, toy_data, plan, spec)
        student, summary = train_student(spec, plan, toy_data, teacher=teacher,
                                         labelers=lab)
        assert student.kd_penult is not None and student.kd_inter is not None
        assert 0.0 <= summary["test_top1"] <= 1.0

    def test_logit_kd_runs(self, toy_data):
        teacher = self._teacher(toy_data)
        student, summary = train_student(toy_spec(), quick_plan(epochs=2, variant="logit-kd"),
                                         toy_data, teacher=teacher)
        assert 0.0 <= summary["test_top1"] <= 1.0

    def test_kd_variant_without_teacher_rejected(self, toy_data):
        with pytest.raises(ValueError):
            train_student(toy_spec(), quick_plan(variant="kd-penult"), toy_data)


class TestEvaluate:
    def test_perfect_model_scores_one(self, toy_data):
        model = StudentModel(SmallCNN(toy_spec(), seed=0))
        run_training(model, quick_plan(epochs=15), toy_data)
        assert evaluate(model, toy_data, split="train") == 1.0

    def test_untrained_net_near_chance_on_balanced_data(self):
        data = make_separable_dataset(n_train=200, n_test=1000, classes=2, seed=4)
        # scramble labels so nothing is learnable, then train briefly
        rng = np.random.default_rng(0)
        data.train_labels = rng.integers(2, size=data.train_labels.shape[0])
        data.test_labels = rng.integers(2, size=data.test_labels.shape[0])
        model = StudentModel(SmallCNN(toy_spec(), seed=0))
        run_training(model, quick_plan(epochs=1), data)
        acc = evaluate(model, data)
        assert abs(acc - 0.5) < 0.1  # ~3 binomial sigma at n=1000 is 0.047

    def test_evaluate_twice_identical(self, toy_data):
        model = StudentModel(SmallCNN(toy_spec(), seed=0))
        run_training(model, quick_plan(epochs=2), toy_data)
        assert evaluate(model, toy_data) == evaluate(model, toy_data)


class TestProbe:
    def test_clustered_features_probe_to_one(self, toy_data):
        model = StudentModel(SmallCNN(toy_spec(), seed=0))
        run_training(model, quick_plan(epochs=15), toy_data)
        acc = linear_probe(model, toy_data, layer_tag="penultimate")
        assert acc > 0.9

    def test_unknown_layer_tag_rejected(self, toy_data):
        model = StudentModel(SmallCNN(toy_spec(), seed=0))
        run_training(model, quick_plan(epochs=1), toy_data)
        with pytest.raises(ValueError):
            linear_probe(model, toy_data, layer_tag="nope")


class TestMapDims:
    def test_strided_dims(self):
        spec = arch_spec("cnn4", 10)
        dims = map_dims(spec, (32, 32))
        assert dims["penult"] == (4, 4)
        assert dims["inter"] == (4, 4)

    def test_teacher_dims_align_with_student(self):
        tdims = map_dims(arch_spec("cnn8", 10), (32, 32))
        sdims = map_dims(arch_spec("cnn4", 10), (32, 32))
        assert tdims["penult"][0] % sdims["penult"][0] == 0
        assert tdims["inter"][0] % sdims["inter"][0] == 0


def _fake_penult_labeler(k):
    from kdkit.penultimate import PenultimateLabeler
    return PenultimateLabeler(centers=np.random.default_rng(0).normal(size=(k, 8)),
                              tau=1.0, source="kmeans")
