"""Checkpoint and labeler-bundle persistence on top of the tensor containers."""

from __future__ import annotations

import numpy as np

from .intermediate import LdaModel, SubclassModel
from .io import FormatError, load_bundle, save_bundle
from .kd_layer import KDLayerParams, init_kd_layer
from .model import ConvSpec, ModelSpec, SmallCNN, StudentModel
from .penultimate import PenultimateLabeler


def _spec_meta(spec: ModelSpec) -> dict:
    return {
        "blocks": [[b.out_channels, b.stride] for b in spec.blocks],
        "classes": spec.classes,
        "in_channels": spec.in_channels,
        "final_stage_start": spec.final_stage_start,
    }


def spec_from_meta(meta: dict) -> ModelSpec:
    return ModelSpec(
        blocks=[ConvSpec(o, s) for o, s in meta["blocks"]],
        classes=meta["classes"],
        in_channels=meta["in_channels"],
        final_stage_start=meta["final_stage_start"],
    )


def _kd_meta(layer: KDLayerParams) -> dict:
    return {
        "num_kernels": layer.num_kernels,
        "channels": layer.channels,
        "alpha": layer.alpha,
        "mode": layer.mode,
        "mu": layer.mu,
        "epsilon": layer.epsilon,
        "pred_temperature": layer.pred_temperature,
    }


def save_checkpoint(path: str, model: StudentModel | SmallCNN, meta: dict | None = None,
                    optimizer_state: list[np.ndarray] | None = None) -> None:
    if isinstance(model, SmallCNN):
        model = StudentModel(model)
    tensors: dict[str, np.ndarray] = {}
    for name, t in model.parameters():
        tensors[f"param.{name}"] = t.data
    for name, bn in model.bn_states():
        tensors[f"bn.{name}.running_mean"] = bn.running_mean
        tensors[f"bn.{name}.running_var"] = bn.running_var
        tensors[f"bn.{name}.initialized"] = np.asarray([1 if bn.initialized else 0], dtype=np.int64)
    if optimizer_state is not None:
        for i, v in enumerate(optimizer_state):
            tensors[f"opt.velocity.{i}"] = v
    full_meta = dict(meta or {})
    full_meta["spec"] = _spec_meta(model.cnn.spec)
    full_meta["dtype"] = "f32" if model.cnn.dtype == np.float32 else "f64"
    full_meta["kd_penult"] = _kd_meta(model.kd_penult) if model.kd_penult else None
    full_meta["kd_inter"] = _kd_meta(model.kd_inter) if model.kd_inter else None
    save_bundle(path, tensors, full_meta)


def load_checkpoint(path: str) -> tuple[StudentModel, dict, list[np.ndarray]]:
    """Rebuild the model; every tensor shape is validated against the stored spec."""
    tensors, meta = load_bundle(path)
    spec = spec_from_meta(meta["spec"])
    dtype = np.float32 if meta.get("dtype") == "f32" else np.float64
    cnn = SmallCNN(spec, seed=0, dtype=dtype)

    def rebuild_kd(info: dict | None) -> KDLayerParams | None:
        if info is None:
            return None
        return init_kd_layer(info["channels"], info["num_kernels"], info["alpha"],
                             mode=info["mode"], mu=info["mu"], epsilon=info["epsilon"],
                             pred_temperature=info["pred_temperature"], dtype=dtype)

    model = StudentModel(cnn, kd_penult=rebuild_kd(meta.get("kd_penult")),
                         kd_inter=rebuild_kd(meta.get("kd_inter")))
    for name, t in model.parameters():
        key = f"param.{name}"
        if key not in tensors:
            raise FormatError(f"checkpoint missing tensor {key!r}")
        arr = tensors[key]
        if arr.shape != t.data.shape:
            raise FormatError(f"checkpoint tensor {key!r} has shape {arr.shape}, "
                              f"expected {t.data.shape}")
        t.data = arr.astype(dtype)
    for name, bn in model.bn_states():
        bn.running_mean = tensors[f"bn.{name}.running_mean"].astype(np.float64)
        bn.running_var = tensors[f"bn.{name}.running_var"].astype(np.float64)
        bn.initialized = bool(tensors[f"bn.{name}.initialized"][0])
    opt_state = []
    i = 0
    while f"opt.velocity.{i}" in tensors:
        opt_state.append(tensors[f"opt.velocity.{i}"].astype(dtype))
        i += 1
    return model, meta, opt_state


class LabelerBundle:
    """Frozen teacher supervision artifacts for one student configuration."""

    def __init__(self, penultimate: PenultimateLabeler,
                 lda: LdaModel | None = None,
                 subclass: SubclassModel | None = None,
                 meta: dict | None = None):
        self.penultimate = penultimate
        self.lda = lda
        self.subclass = subclass
        self.meta = dict(meta or {})


def save_labelers(path: str, bundle: LabelerBundle) -> None:
    tensors: dict[str, np.ndarray] = {}
    meta = dict(bundle.meta)
    meta["penult_source"] = bundle.penultimate.source
    meta["penult_tau"] = bundle.penultimate.tau
    if bundle.penultimate.centers is not None:
        tensors["penult.centers"] = bundle.penultimate.centers
    meta["has_intermediate"] = bundle.lda is not None
    if bundle.lda is not None:
        tensors["lda.W"] = bundle.lda.W
        tensors["lda.b"] = bundle.lda.b
        meta["lda_shrinkage"] = bundle.lda.shrinkage
        tensors["subclass.prototypes"] = bundle.subclass.prototypes
        tensors["subclass.s_t"] = bundle.subclass.s_t
        meta["subclass_classes"] = bundle.subclass.classes
        meta["subclass_k"] = bundle.subclass.k_inter
        meta["subclass_empty_rows"] = bundle.subclass.empty_rows
    save_bundle(path, tensors, meta)


def load_labelers(path: str) -> LabelerBundle:
    tensors, meta = load_bundle(path)
    pen = PenultimateLabeler(centers=tensors.get("penult.centers"),
                             tau=float(meta["penult_tau"]),
                             source=meta["penult_source"])
    lda = subclass = None
    if meta.get("has_intermediate"):
        lda = LdaModel(W=tensors["lda.W"], b=tensors["lda.b"],
                       shrinkage=float(meta["lda_shrinkage"]))
        subclass = SubclassModel(prototypes=tensors["subclass.prototypes"],
                                 s_t=tensors["subclass.s_t"],
                                 classes=int(meta["subclass_classes"]),
                                 k_inter=int(meta["subclass_k"]),
                                 empty_rows=list(meta.get("subclass_empty_rows", [])))
    return LabelerBundle(pen, lda, subclass, meta)
