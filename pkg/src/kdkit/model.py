"""Small configurable CNNs and the student wrapper with KD layers.

A model is a chain of conv3x3-BN-ReLU blocks followed by global average
pooling and a linear classifier. The block index starting the final stage
marks the intermediate supervision point (output of the first conv-BN-ReLU
group of the final stage); the penultimate point is the output of the last
block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kd_layer import KDLayerParams, kd_forward
from .tensor import (
    BatchNormState,
    Tensor,
    batch_norm,
    conv3x3,
    global_avg_pool,
    linear_map_1x1,
    relu,
)


@dataclass
class ConvSpec:
    out_channels: int
    stride: int = 1


@dataclass
class ModelSpec:
    blocks: list[ConvSpec]
    classes: int
    in_channels: int = 3
    final_stage_start: int = 0   # index of the first block of the final stage

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("ModelSpec: at least one conv block required")
        if not (0 <= self.final_stage_start < len(self.blocks)):
            raise ValueError("ModelSpec: final_stage_start out of range")


ARCHS = {
    # teacher: 8 conv blocks, three stages (strides mark stage starts)
    "cnn8": ([ConvSpec(16, 2), ConvSpec(16), ConvSpec(24, 2), ConvSpec(24),
              ConvSpec(32, 2), ConvSpec(32), ConvSpec(32), ConvSpec(32)], 4),
    # student: 4 conv blocks, final stage is the last two
    "cnn4": ([ConvSpec(12, 2), ConvSpec(24, 2), ConvSpec(32, 2), ConvSpec(32)], 2),
}


def arch_spec(name: str, classes: int, in_channels: int = 3) -> ModelSpec:
    if name not in ARCHS:
        raise ValueError(f"unknown architecture {name!r}; choices: {sorted(ARCHS)}")
    blocks, fss = ARCHS[name]
    return ModelSpec(blocks=[ConvSpec(b.out_channels, b.stride) for b in blocks],
                     classes=classes, in_channels=in_channels, final_stage_start=fss)


class ConvBlock:
    """conv3x3 (no bias) + BN + ReLU."""

    def __init__(self, in_ch: int, spec: ConvSpec, rng: np.random.Generator, dtype):
        fan_in = in_ch * 9
        w = rng.standard_normal((spec.out_channels, in_ch, 3, 3)) * np.sqrt(2.0 / fan_in)
        self.W = Tensor(w.astype(dtype), requires_grad=True)
        self.bn = BatchNormState(spec.out_channels, dtype=dtype)
        self.stride = spec.stride

    def forward(self, x: Tensor, mode: str, want_preact: bool = False):
        pre = conv3x3(x, self.W, stride=self.stride, pad=1)
        out = relu(batch_norm(pre, self.bn, mode))
        return (out, pre) if want_preact else (out, None)


@dataclass
class ForwardTaps:
    logits: Tensor
    inter_map: Tensor            # output of the first block of the final stage
    penult_map: Tensor           # output of the last block
    penult_preact: Tensor | None  # pre-BN output of the last 3x3 conv


class SmallCNN:
    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float64):
        self.spec = spec
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.blocks: list[ConvBlock] = []
        in_ch = spec.in_channels
        for b in spec.blocks:
            self.blocks.append(ConvBlock(in_ch, b, rng, dtype))
            in_ch = b.out_channels
        self.feature_dim = in_ch
        w = rng.standard_normal((spec.classes, in_ch)) * np.sqrt(1.0 / in_ch)
        self.fc_w = Tensor(w.astype(dtype), requires_grad=True)
        self.fc_b = Tensor(np.zeros(spec.classes, dtype=dtype), requires_grad=True)

    def parameters(self) -> list[tuple[str, Tensor]]:
        named = []
        for i, blk in enumerate(self.blocks):
            named.append((f"block{i}.conv", blk.W))
            named.append((f"block{i}.bn_gamma", blk.bn.gamma))
            named.append((f"block{i}.bn_beta", blk.bn.beta))
        named.append(("fc.weight", self.fc_w))
        named.append(("fc.bias", self.fc_b))
        return named

    def bn_states(self) -> list[tuple[str, BatchNormState]]:
        return [(f"block{i}", blk.bn) for i, blk in enumerate(self.blocks)]

    def forward(self, x: Tensor, mode: str = "train",
                want_preact: bool = False) -> ForwardTaps:
        inter_map = None
        pre = None
        last = len(self.blocks) - 1
        for i, blk in enumerate(self.blocks):
            x, p = blk.forward(x, mode, want_preact=(want_preact and i == last))
            if i == last:
                pre = p
            if i == self.spec.final_stage_start:
                inter_map = x
        pooled = global_avg_pool(x)
        logits = linear_map_1x1(pooled, self.fc_w, self.fc_b)
        return ForwardTaps(logits=logits, inter_map=inter_map, penult_map=x,
                           penult_preact=pre)

    @property
    def inter_dim(self) -> int:
        return self.spec.blocks[self.spec.final_stage_start].out_channels


@dataclass
class StudentOutput:
    logits: Tensor
    inter_x: Tensor | None = None       # KD-layer input at the intermediate point
    inter_xhat: Tensor | None = None    # KD-layer output at the intermediate point
    p_s_inter: Tensor | None = None
    penult_x: Tensor | None = None
    penult_xhat: Tensor | None = None
    p_s_penult: Tensor | None = None


class StudentModel:
    """A SmallCNN with optional KD layers at the two supervision points."""

    def __init__(self, cnn: SmallCNN, kd_penult: KDLayerParams | None = None,
                 kd_inter: KDLayerParams | None = None):
        self.cnn = cnn
        self.kd_penult = kd_penult
        self.kd_inter = kd_inter

    def parameters(self) -> list[tuple[str, Tensor]]:
        named = self.cnn.parameters()
        if self.kd_inter is not None:
            named += [(f"kd_inter.{n}", t) for n, t in self.kd_inter.parameters()]
        if self.kd_penult is not None:
            named += [(f"kd_penult.{n}", t) for n, t in self.kd_penult.parameters()]
        return named

    def bn_states(self) -> list[tuple[str, BatchNormState]]:
        states = self.cnn.bn_states()
        if self.kd_inter is not None:
            states.append(("kd_inter", self.kd_inter.bn))
        if self.kd_penult is not None:
            states.append(("kd_penult", self.kd_penult.bn))
        return states

    def renormalize(self) -> None:
        for layer in (self.kd_inter, self.kd_penult):
            if layer is not None:
                layer.renormalize()

    def forward(self, x: Tensor, mode: str = "train") -> StudentOutput:
        out = StudentOutput(logits=None)
        spec = self.cnn.spec
        last = len(self.cnn.blocks) - 1
        for i, blk in enumerate(self.cnn.blocks):
            x, _ = blk.forward(x, mode)
            if i == spec.final_stage_start and self.kd_inter is not None:
                out.inter_x = x
                x, p_s = kd_forward(x, self.kd_inter, mode)
                out.inter_xhat = x
                out.p_s_inter = p_s
            if i == last:
                out.penult_x = x
                if self.kd_penult is not None:
                    x, p_s = kd_forward(x, self.kd_penult, mode)
                    out.penult_xhat = x
                    out.p_s_penult = p_s
        pooled = global_avg_pool(x)
        out.logits = linear_map_1x1(pooled, self.cnn.fc_w, self.cnn.fc_b)
        return out
