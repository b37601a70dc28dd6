"""The residual knowledge-distillation layer.

A 1x1-BN-ReLU-1x1 residual block: cosine template matching against a bank of
unit-norm kernels, an assignment stage (BN-ReLU surrogate or explicit smoothed
softmax with a rejection threshold), an embedding 1x1 that maps assignment
weights to semantic vectors, and a scaled residual add. The layer also exposes
the per-pixel student prediction distribution used by the distillation loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assignment import bn_relu_assignment
from .tensor import (
    BatchNormState,
    ShapeError,
    Tensor,
    channel_softmax,
    kl_div,
    l2_normalize,
    linear_map_1x1,
    mul,
    smooth_assignment_channels,
)

MODE_BN_RELU = "bn_relu"
MODE_EXPLICIT = "explicit_softmax"


@dataclass
class KDLayerParams:
    """Learnable state of one KD layer.

    ``omega`` rows are the matching kernels, ``nu`` rows the embedding vectors
    (one per kernel); both are kept unit-l2-normalized, with learnable scalar
    scales. ``alpha`` is the fixed residual weight.
    """

    omega: Tensor                 # (K, d), unit rows
    gamma_omega: Tensor           # scalar scale for the matching scores
    nu: Tensor                    # (d, K), unit columns; d must equal input channels
    gamma_nu: Tensor              # scalar scale for the embedding output
    bn: BatchNormState            # assignment-branch batch norm (bn_relu mode)
    alpha: float
    mode: str = MODE_BN_RELU
    mu: float = 0.0               # rejection threshold (explicit mode)
    epsilon: float = 4.0          # smoothness (explicit mode)
    pred_temperature: float = 1.0

    @property
    def num_kernels(self) -> int:
        return self.omega.shape[0]

    @property
    def channels(self) -> int:
        return self.omega.shape[1]

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [
            ("omega", self.omega),
            ("gamma_omega", self.gamma_omega),
            ("nu", self.nu),
            ("gamma_nu", self.gamma_nu),
            ("bn_gamma", self.bn.gamma),
            ("bn_beta", self.bn.beta),
        ]

    def renormalize(self) -> None:
        """Restore unit l2 norm of every kernel (call after optimizer steps)."""
        for t, axis in ((self.omega, 1), (self.nu, 0)):
            norms = np.sqrt((t.data * t.data).sum(axis=axis, keepdims=True))
            t.data /= np.where(norms > 0, norms, 1.0)


def init_kd_layer(d: int, K: int, alpha: float, mode: str = MODE_BN_RELU,
                  seed: int = 0, mu: float = 0.0, epsilon: float = 4.0,
                  pred_temperature: float = 1.0, dtype=np.float64) -> KDLayerParams:
    """Seeded isotropic kernel init, normalized to unit rows; scales start at 1."""
    if d < 1 or K < 1:
        raise ValueError("init_kd_layer: d and K must be >= 1")
    if mode not in (MODE_BN_RELU, MODE_EXPLICIT):
        raise ValueError(f"init_kd_layer: unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((K, d)).astype(dtype)
    nu = rng.standard_normal((d, K)).astype(dtype)
    params = KDLayerParams(
        omega=Tensor(omega, requires_grad=True),
        gamma_omega=Tensor(np.asarray(1.0, dtype=dtype), requires_grad=True),
        nu=Tensor(nu, requires_grad=True),
        gamma_nu=Tensor(np.asarray(1.0, dtype=dtype), requires_grad=True),
        bn=BatchNormState(K, dtype=dtype),
        alpha=float(alpha),
        mode=mode,
        mu=mu,
        epsilon=epsilon,
        pred_temperature=pred_temperature,
    )
    params.renormalize()
    return params


def kd_forward(x: Tensor, params: KDLayerParams, mode: str = "train"):
    """Apply the KD layer to an (..., d) feature map.

    Returns (x_hat, p_S): the residual-enhanced features and the per-pixel
    student prediction distribution over the K kernels. No teacher quantity
    enters here; inference uses only the layer's own parameters.
    """
    if x.shape[-1] != params.channels:
        raise ShapeError(
            f"kd_forward: expected {params.channels} input channels, got {x.shape[-1]}")
    xn = l2_normalize(x, axis=-1)          # zero-norm pixels -> zero scores
    on = l2_normalize(params.omega, axis=-1)
    a = mul(params.gamma_omega, linear_map_1x1(xn, on))

    if params.mode == MODE_BN_RELU:
        p = bn_relu_assignment(a, params.bn, mode)
    else:
        p = smooth_assignment_channels(a, params.mu, params.epsilon)

    p_s = channel_softmax(a, params.pred_temperature)

    if params.alpha == 0.0:
        return x, p_s
    nun = l2_normalize(params.nu, axis=0)
    x_prime = mul(params.gamma_nu, linear_map_1x1(p, nun))
    x_hat = x + mul(Tensor(np.asarray(params.alpha, dtype=x.dtype)), x_prime)
    return x_hat, p_s


def kd_distill_loss(p_s: Tensor, p_t: np.ndarray) -> Tensor:
    """Mean per-pixel KL(p_T || p_S)."""
    if tuple(np.shape(p_t)) != tuple(p_s.shape):
        raise ShapeError(f"kd_distill_loss: shape mismatch {np.shape(p_t)} vs {p_s.shape}")
    return kl_div(p_t, p_s)
