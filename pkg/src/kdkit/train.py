"""Model assembly and training loops: teacher pre-training, the distillation
variants, evaluation, linear probing, and the residual-weight ablation grid.

Variants:
  baseline    cross-entropy only, no KD layers
  logit-kd    classical logit matching with temperature-scaled softmax + KL
  match-loss  penultimate assignment loss only (KD layer with zero residual)
  kd-penult   KD layer + loss at the penultimate point
  kd-both     KD layers + losses at the penultimate and intermediate points
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .intermediate import fit_lda, fit_subclass_model, intermediate_soft_labels
from .io import Dataset, MetricsWriter, flip_mask, np_dtype
from .kd_layer import init_kd_layer, kd_distill_loss
from .model import ModelSpec, SmallCNN, StudentModel
from .optim import SGD
from .penultimate import (
    PenultimateLabeler,
    align_spatial,
    fit_penultimate_centers,
    labels_from_3x3_kernels,
    penultimate_soft_labels,
)
from .persist import LabelerBundle
from .tensor import Tensor, add, backward, channel_softmax, cross_entropy, kl_div, mul, no_grad

KD_LAYER_VARIANTS = ("match-loss", "kd-penult", "kd-both")


@dataclass
class TrainPlan:
    epochs: int = 60
    lr: float = 0.05
    decay_epochs: list[int] = field(default_factory=lambda: [35, 45, 55])
    decay_factor: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    batch_size: int = 64
    seed: int = 0
    variant: str = "baseline"
    lambda_kd: float = 1.0            # fixed at 1 for the KD-layer variants
    alpha_penult: float = 1.0
    alpha_inter: float = 1.0
    k_penult: int = 64
    k_inter: int = 8
    label_temperature: float = 1.0
    table_temperature: float = 0.0    # 0 disables decision-table smoothing
    pred_temperature: float = 1.0
    assignment: str = "bn_relu"
    labeler_source: str = "kmeans"
    logit_temperature: float = 4.0
    logit_weight: float = 0.9
    dtype: str = "f64"
    record_timing: bool = False
    cache_teacher: bool = True
    flip: bool = True

    @classmethod
    def from_config(cls, cfg) -> "TrainPlan":
        kd, tr, io_ = cfg["kd"], cfg["train"], cfg["io"]
        return cls(
            epochs=tr["epochs"], lr=tr["lr"], decay_epochs=list(tr["decay_epochs"]),
            decay_factor=tr["decay_factor"], momentum=tr["momentum"],
            nesterov=tr["nesterov"], weight_decay=tr["weight_decay"],
            batch_size=tr["batch_size"], seed=io_["seed"], variant=kd["variant"],
            alpha_penult=kd["alpha_penult"], alpha_inter=kd["alpha_inter"],
            k_penult=kd["k_penult"], k_inter=kd["k_inter"],
            label_temperature=kd["label_temperature"],
            table_temperature=kd["table_temperature"],
            pred_temperature=kd["pred_temperature"], assignment=kd["assignment"],
            labeler_source=kd["labeler_source"],
            logit_temperature=kd["logit_temperature"], logit_weight=kd["logit_weight"],
            dtype=tr["dtype"], record_timing=io_["record_timing"],
            flip=cfg["data"]["flip"],
        )


def map_dims(spec: ModelSpec, input_hw: tuple[int, int]) -> dict:
    """Spatial extents of the intermediate and penultimate maps."""
    h, w = input_hw
    dims = {}
    for i, b in enumerate(spec.blocks):
        h = (h + 2 - 3) // b.stride + 1
        w = (w + 2 - 3) // b.stride + 1
        if i == spec.final_stage_start:
            dims["inter"] = (h, w)
    dims["penult"] = (h, w)
    return dims


def build_student(spec: ModelSpec, plan: TrainPlan, labelers: LabelerBundle | None,
                  teacher_feature_dim: int | None = None) -> StudentModel:
    """Instantiate the student CNN plus the KD layers the variant requires."""
    dtype = np_dtype(plan.dtype)
    cnn = SmallCNN(spec, seed=plan.seed, dtype=dtype)
    kd_penult = kd_inter = None
    if plan.variant in KD_LAYER_VARIANTS:
        if labelers is None:
            raise ValueError(f"variant {plan.variant!r} requires teacher labelers")
        if labelers.penultimate.source == "kmeans":
            k = labelers.penultimate.centers.shape[0]
        else:
            if teacher_feature_dim is None:
                teacher_feature_dim = int(labelers.meta.get("penult_k", 0))
            k = teacher_feature_dim
        alpha = 0.0 if plan.variant == "match-loss" else plan.alpha_penult
        kd_penult = init_kd_layer(cnn.feature_dim, k, alpha, mode=plan.assignment,
                                  seed=plan.seed + 101,
                                  pred_temperature=plan.pred_temperature, dtype=dtype)
    if plan.variant == "kd-both":
        k = labelers.subclass.classes * labelers.subclass.k_inter
        kd_inter = init_kd_layer(cnn.inter_dim, k, plan.alpha_inter, mode=plan.assignment,
                                 seed=plan.seed + 202,
                                 pred_temperature=plan.pred_temperature, dtype=dtype)
    return StudentModel(cnn, kd_penult=kd_penult, kd_inter=kd_inter)


# ---------------------------------------------------------------------------
# teacher feature extraction


class TeacherFeatures:
    """Teacher maps for one batch, spatially aligned to the student's grids."""

    def __init__(self, penult=None, preact=None, inter=None, logits=None):
        self.penult = penult
        self.preact = preact
        self.inter = inter
        self.logits = logits


def _teacher_forward(teacher: SmallCNN, x: np.ndarray, dims: dict, need: dict) -> TeacherFeatures:
    with no_grad():
        taps = teacher.forward(Tensor(x), mode="eval", want_preact=need.get("preact", False))
    out = TeacherFeatures()
    if need.get("penult"):
        out.penult = align_spatial(taps.penult_map.data, *dims["penult"])
    if need.get("preact"):
        out.preact = align_spatial(taps.penult_preact.data, *dims["penult"])
    if need.get("inter"):
        out.inter = align_spatial(taps.inter_map.data, *dims["inter"])
    if need.get("logits"):
        out.logits = taps.logits.data
    return out


class TeacherCache:
    """Precomputed per-image teacher features for both flip states.

    Lookup is bit-equal to online computation as long as the BLAS kernels are
    row-stable across batch sizes (verified by the test suite on this
    platform); disable via plan.cache_teacher=False to force online passes.
    """

    def __init__(self, teacher: SmallCNN, dataset: Dataset, dims: dict, need: dict,
                 dtype, use_flip: bool, chunk: int = 256):
        self.store = {}
        images = dataset.train_images
        variantflips = [False, True] if use_flip else [False]
        for flipped in variantflips:
            feats = {k: [] for k, v in need.items() if v}
            for start in range(0, images.shape[0], chunk):
                u8 = images[start:start + chunk]
                if flipped:
                    u8 = u8[:, :, ::-1, :]
                x = dataset.normalize(u8, dtype)
                tf = _teacher_forward(teacher, x, dims, need)
                for k in feats:
                    feats[k].append(getattr(tf, k))
            self.store[flipped] = {k: np.concatenate(v) for k, v in feats.items()}

    def lookup(self, indices: np.ndarray, flips: np.ndarray) -> TeacherFeatures:
        out = TeacherFeatures()
        sample = self.store[False]
        for k in sample:
            arrs = np.empty((indices.size,) + sample[k].shape[1:], dtype=sample[k].dtype)
            for flipped in self.store:
                mask = flips == flipped
                if mask.any():
                    arrs[mask] = self.store[flipped][k][indices[mask]]
            setattr(out, k, arrs)
        return out


def _teacher_needs(plan: TrainPlan) -> dict:
    need = {"penult": False, "preact": False, "inter": False, "logits": False}
    if plan.variant in KD_LAYER_VARIANTS:
        if plan.labeler_source == "kmeans":
            need["penult"] = True
        else:
            need["preact"] = True
    if plan.variant == "kd-both":
        need["inter"] = True
    if plan.variant == "logit-kd":
        need["logits"] = True
    return need


# ---------------------------------------------------------------------------
# training core


def _current_lr(plan: TrainPlan, epoch: int) -> float:
    drops = sum(1 for d in plan.decay_epochs if epoch >= d)
    return plan.lr * (plan.decay_factor ** drops)


def run_training(student: StudentModel, plan: TrainPlan, dataset: Dataset,
                 teacher: SmallCNN | None = None, labelers: LabelerBundle | None = None,
                 metrics_path: str | None = None, label_hook=None,
                 teacher_cache: TeacherCache | None = None) -> dict:
    """Train ``student`` under the plan's variant; returns summary metadata.

    ``label_hook(out, y_batch)``, when given, overrides the teacher labels
    with (p_t_penult, p_t_inter) arrays (testing aid). ``teacher_cache`` lets
    runs sharing the same teacher and student layout reuse one feature cache.
    """
    dtype = np_dtype(plan.dtype)
    need = _teacher_needs(plan)
    uses_teacher = any(need.values()) and label_hook is None
    if uses_teacher and teacher is None:
        raise ValueError(f"variant {plan.variant!r} requires a teacher model")
    input_hw = dataset.train_images.shape[1:3]
    dims = map_dims(student.cnn.spec, input_hw)
    cache = teacher_cache
    if uses_teacher and plan.cache_teacher and cache is None:
        cache = TeacherCache(teacher, dataset, dims, need, dtype, use_flip=plan.flip)

    params = [t for _, t in student.parameters()]
    opt = SGD(params, plan.lr, momentum=plan.momentum, nesterov=plan.nesterov,
              weight_decay=plan.weight_decay)
    writer = MetricsWriter(metrics_path) if metrics_path else None
    n = dataset.train_images.shape[0]
    summary = {}
    t_temp = plan.logit_temperature

    try:
        for epoch in range(plan.epochs):
            tic = time.perf_counter()
            opt.lr = _current_lr(plan, epoch)
            order = np.random.default_rng(
                np.random.SeedSequence([plan.seed, 7, epoch])).permutation(n)
            epoch_flips = flip_mask(plan.seed, epoch, np.arange(n)) if plan.flip else None
            sums = {"ce": 0.0, "kd_penult": 0.0, "kd_inter": 0.0, "correct": 0}
            batches = 0
            for start in range(0, n, plan.batch_size):
                idx = order[start:start + plan.batch_size]
                if idx.size < 2:
                    continue  # batch-norm needs at least 2 samples
                u8 = dataset.train_images[idx]
                y = dataset.train_labels[idx]
                if plan.flip:
                    flips = epoch_flips[idx]
                    u8 = u8.copy()
                    u8[flips] = u8[flips][:, :, ::-1, :]
                else:
                    flips = np.zeros(idx.size, dtype=bool)
                x = dataset.normalize(u8, dtype)

                tf = None
                if uses_teacher:
                    tf = cache.lookup(idx, flips) if cache is not None else \
                        _teacher_forward(teacher, x, dims, need)

                out = student.forward(Tensor(x), mode="train")
                loss_ce = cross_entropy(out.logits, y)
                total = loss_ce
                kd_pen = kd_int = None

                if plan.variant in KD_LAYER_VARIANTS:
                    if label_hook is not None:
                        p_t_pen, p_t_int = label_hook(out, y)
                    else:
                        p_t_pen = _penult_labels(tf, labelers, plan)
                        p_t_int = (_inter_labels(tf, y, labelers)
                                   if plan.variant == "kd-both" else None)
                    kd_pen = kd_distill_loss(out.p_s_penult, p_t_pen)
                    total = add(total, kd_pen)
                    if plan.variant == "kd-both":
                        kd_int = kd_distill_loss(out.p_s_inter, p_t_int)
                        total = add(total, kd_int)
                elif plan.variant == "logit-kd":
                    p_t = _np_softmax(tf.logits / t_temp)
                    p_s = channel_softmax(out.logits, 1.0 / t_temp)
                    kd_pen = mul(plan.logit_weight * t_temp * t_temp, kl_div(p_t, p_s))
                    total = add(total, kd_pen)

                backward(total)
                opt.step()
                student.renormalize()
                opt.zero_grad()

                sums["ce"] += loss_ce.item()
                sums["kd_penult"] += kd_pen.item() if kd_pen is not None else 0.0
                sums["kd_inter"] += kd_int.item() if kd_int is not None else 0.0
                sums["correct"] += int((out.logits.data.argmax(axis=1) == y).sum())
                batches += 1

            wall = time.perf_counter() - tic if plan.record_timing else 0.0
            if writer:
                writer.write(epoch, "train", sums["ce"] / batches,
                             sums["kd_penult"] / batches, sums["kd_inter"] / batches,
                             sums["correct"] / n, wall)
                test_ce, test_top1 = _eval_loss_top1(student, dataset, dtype)
                writer.write(epoch, "test", test_ce, 0.0, 0.0, test_top1, 0.0)
    finally:
        if writer:
            writer.close()

    if plan.epochs > 0:
        summary["train_top1"] = evaluate(student, dataset, split="train", dtype=dtype)
        summary["test_top1"] = evaluate(student, dataset, split="test", dtype=dtype)
    else:  # zero epochs: parameters are untouched and batch norm has no stats yet
        summary["train_top1"] = None
        summary["test_top1"] = None
    summary["variant"] = plan.variant
    summary["seed"] = plan.seed
    summary["epochs"] = plan.epochs
    return summary


def _np_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _penult_labels(tf: TeacherFeatures, labelers: LabelerBundle, plan: TrainPlan) -> np.ndarray:
    if labelers.penultimate.source == "kmeans":
        return penultimate_soft_labels(tf.penult, labelers.penultimate)
    return labels_from_3x3_kernels(tf.preact, labelers.penultimate.tau)


def _inter_labels(tf: TeacherFeatures, y: np.ndarray, labelers: LabelerBundle) -> np.ndarray:
    return intermediate_soft_labels(tf.inter, y, labelers.lda, labelers.subclass)


def _eval_batches(model: StudentModel, images: np.ndarray, dataset: Dataset, dtype,
                  chunk: int = 256):
    for start in range(0, images.shape[0], chunk):
        x = dataset.normalize(images[start:start + chunk], dtype)
        with no_grad():
            yield model.forward(Tensor(x), mode="eval")


def evaluate(model: StudentModel | SmallCNN, dataset: Dataset, split: str = "test",
             dtype=np.float64) -> float:
    """Eval-mode top-1 accuracy (exact fraction)."""
    if isinstance(model, SmallCNN):
        model = StudentModel(model)
    images = dataset.test_images if split == "test" else dataset.train_images
    labels = dataset.test_labels if split == "test" else dataset.train_labels
    correct = 0
    pos = 0
    for out in _eval_batches(model, images, dataset, dtype):
        k = out.logits.data.shape[0]
        correct += int((out.logits.data.argmax(axis=1) == labels[pos:pos + k]).sum())
        pos += k
    return correct / labels.shape[0]


def _eval_loss_top1(model: StudentModel, dataset: Dataset, dtype) -> tuple[float, float]:
    total_ce = 0.0
    correct = 0
    pos = 0
    labels = dataset.test_labels
    for out in _eval_batches(model, dataset.test_images, dataset, dtype):
        k = out.logits.data.shape[0]
        y = labels[pos:pos + k]
        total_ce += cross_entropy(out.logits, y).item() * k
        correct += int((out.logits.data.argmax(axis=1) == y).sum())
        pos += k
    return total_ce / labels.shape[0], correct / labels.shape[0]


# ---------------------------------------------------------------------------
# teacher training and labeler fitting


def train_teacher(spec: ModelSpec, plan: TrainPlan, dataset: Dataset,
                  metrics_path: str | None = None) -> tuple[SmallCNN, dict]:
    """CE-only training; the teacher is just a baseline run of the given spec."""
    teacher_plan = replace(plan, variant="baseline")
    model = StudentModel(SmallCNN(spec, seed=plan.seed, dtype=np_dtype(plan.dtype)))
    summary = run_training(model, teacher_plan, dataset, metrics_path=metrics_path)
    return model.cnn, summary


def collect_teacher_maps(teacher: SmallCNN, dataset: Dataset, dims: dict, need: dict,
                         dtype=np.float64, chunk: int = 256) -> TeacherFeatures:
    feats = {k: [] for k, v in need.items() if v}
    images = dataset.train_images
    for start in range(0, images.shape[0], chunk):
        x = dataset.normalize(images[start:start + chunk], dtype)
        tf = _teacher_forward(teacher, x, dims, need)
        for k in feats:
            feats[k].append(getattr(tf, k))
    out = TeacherFeatures()
    for k, v in feats.items():
        setattr(out, k, np.concatenate(v))
    return out


def build_labelers(teacher: SmallCNN, dataset: Dataset, plan: TrainPlan,
                   student_spec: ModelSpec, max_lda_pixels: int = 500_000) -> LabelerBundle:
    """Fit the frozen teacher supervision artifacts for one student layout."""
    input_hw = dataset.train_images.shape[1:3]
    dims = map_dims(student_spec, input_hw)
    dtype = np_dtype(plan.dtype)
    want_inter = plan.variant == "kd-both"
    need = {"penult": plan.labeler_source == "kmeans",
            "preact": plan.labeler_source != "kmeans",
            "inter": want_inter, "logits": False}
    maps = collect_teacher_maps(teacher, dataset, dims, need, dtype)

    if plan.labeler_source == "kmeans":
        pixels = maps.penult.reshape(-1, maps.penult.shape[-1])
        centers = fit_penultimate_centers(pixels, plan.k_penult, seed=plan.seed)
        pen = PenultimateLabeler(centers=centers, tau=plan.label_temperature, source="kmeans")
        penult_k = plan.k_penult
    else:
        pen = PenultimateLabeler(centers=None, tau=plan.label_temperature,
                                 source="teacher_3x3_block")
        penult_k = teacher.feature_dim

    lda = subclass = None
    if want_inter:
        feats = maps.inter.reshape(-1, maps.inter.shape[-1])
        n_img, h, w = maps.inter.shape[:3]
        labels = np.repeat(dataset.train_labels, h * w)
        if feats.shape[0] > max_lda_pixels:
            rng = np.random.default_rng(plan.seed)
            idx = rng.choice(feats.shape[0], size=max_lda_pixels, replace=False)
            idx.sort()
            feats, labels = feats[idx], labels[idx]
        lda = fit_lda(feats, labels, shrinkage=0.1)
        z = lda.project(feats)
        tau = plan.table_temperature if plan.table_temperature > 0 else None
        subclass = fit_subclass_model(z, labels, plan.k_inter, seed=plan.seed,
                                      table_temperature=tau)
    meta = {"penult_k": penult_k, "variant": plan.variant, "seed": plan.seed}
    return LabelerBundle(pen, lda, subclass, meta)


def train_student(student_spec: ModelSpec, plan: TrainPlan, dataset: Dataset,
                  teacher: SmallCNN | None = None, labelers: LabelerBundle | None = None,
                  metrics_path: str | None = None, label_hook=None,
                  teacher_cache: TeacherCache | None = None) -> tuple[StudentModel, dict]:
    teacher_dim = teacher.feature_dim if teacher is not None else None
    student = build_student(student_spec, plan,
                            labelers if plan.variant in KD_LAYER_VARIANTS else None,
                            teacher_feature_dim=teacher_dim)
    summary = run_training(student, plan, dataset, teacher=teacher, labelers=labelers,
                           metrics_path=metrics_path, label_hook=label_hook,
                           teacher_cache=teacher_cache)
    return student, summary


# ---------------------------------------------------------------------------
# probing and ablation


def linear_probe(model: StudentModel, dataset: Dataset, layer_tag: str = "intermediate",
                 use_kd_output: bool = False, dtype=np.float64,
                 shrinkage: float = 0.1) -> float:
    """Accuracy of an LDA classifier on global-average-pooled frozen features."""
    if layer_tag not in ("intermediate", "penultimate"):
        raise ValueError(f"linear_probe: unknown layer tag {layer_tag!r}")

    def collect(images):
        feats = []
        for out in _eval_batches(model, images, dataset, dtype):
            if layer_tag == "intermediate":
                tap = out.inter_xhat if use_kd_output else out.inter_x
                if tap is None:  # no intermediate KD layer: x_hat == x
                    raise ValueError("linear_probe: model has no intermediate KD layer tap")
            else:
                tap = out.penult_xhat if use_kd_output else out.penult_x
                if tap is None:
                    tap = out.penult_x
            feats.append(tap.data.mean(axis=(1, 2)))
        return np.concatenate(feats)

    train_feats = collect(dataset.train_images)
    test_feats = collect(dataset.test_images)
    lda = fit_lda(train_feats, dataset.train_labels, shrinkage=shrinkage)
    z_train = lda.project(train_feats)
    z_test = lda.project(test_feats)
    means = np.stack([z_train[dataset.train_labels == c].mean(axis=0)
                      for c in range(dataset.classes)])
    d2 = ((z_test[:, None, :] - means[None]) ** 2).sum(axis=2)
    pred = d2.argmin(axis=1)
    return float((pred == dataset.test_labels).mean())


def ablate_alpha(base_plan: TrainPlan, dataset: Dataset, teacher: SmallCNN,
                 labelers: LabelerBundle, student_spec: ModelSpec,
                 seeds=(0, 1, 2)) -> list[dict]:
    """Train the (alpha_inter, alpha_penult) in {0,1}^2 grid with shared seeds."""
    rows = []
    base = replace(base_plan, variant="kd-both")
    cache = None
    if base.cache_teacher:
        dims = map_dims(student_spec, dataset.train_images.shape[1:3])
        cache = TeacherCache(teacher, dataset, dims, _teacher_needs(base),
                             np_dtype(base.dtype), use_flip=base.flip)
    for alpha_inter in (0.0, 1.0):
        for alpha_penult in (0.0, 1.0):
            for seed in seeds:
                plan = replace(base, alpha_inter=alpha_inter,
                               alpha_penult=alpha_penult, seed=seed)
                _, summary = train_student(student_spec, plan, dataset,
                                           teacher=teacher, labelers=labelers,
                                           teacher_cache=cache)
                rows.append({"alpha_inter": alpha_inter, "alpha_penult": alpha_penult,
                             "seed": seed, "top1": summary["test_top1"]})
    return rows
