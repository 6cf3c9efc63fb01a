"""
Objective components for intra-subject self-supervised training: batch
representations, the cosine distance matrix, hard and adaptive soft label
cross entropies, the pre-final regularization term and their weighted total.
"""
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from encoders import EncoderParams, forward, forward_layers
from tensor_core import (
    DEFAULT_EPS,
    DimensionError,
    GradTape,
    Tensor,
    add,
    as_tensor,
    concat_columns,
    cosine_distance_matrix,
    row_cosine_distance,
    scale,
    soft_cross_entropy,
    softmax,
    tsum,
)

DEFAULT_LAMBDA = 0.7
DEFAULT_K = 4
DEFAULT_GAMMA = 2.0
DEFAULT_EXPONENT_T = 1.0


class LossError(Exception):
    """Base class for loss-related exceptions."""


class BatchTooSmallError(LossError):
    """Raised when a batch has fewer than two rows."""


class LossConfigError(LossError):
    """Raised when k, gamma, exponent_t or lambda are out of range."""


@dataclass(frozen=True)
class LossSettings:
    lam: float = DEFAULT_LAMBDA
    k: float = DEFAULT_K
    k_as_ratio: bool = False
    gamma: float = DEFAULT_GAMMA
    exponent_t: float = DEFAULT_EXPONENT_T
    use_reg_loss: bool = True
    use_adaptive_soft_label: bool = True
    use_topk_gamma: bool = True


@dataclass(frozen=True)
class BatchRepresentations:
    r: Tensor
    q: Tensor
    v: Tensor
    z: Tensor
    r_pre: Tensor
    q_pre: Tensor
    w_leaves: tuple = ()
    theta_leaves: tuple = ()


@dataclass(frozen=True)
class SoftLabelMatrix:
    ass: Tensor
    beta: Tensor
    alpha: Tensor
    k: int
    gamma: float
    exponent_t: float


@dataclass(frozen=True)
class LossBreakdown:
    insub: Tensor
    reg: Tensor
    total: Tensor
    labels: object


def representations_from_layers(
    psi: EncoderParams,
    w_layers: Sequence[Tensor],
    theta_layers: Sequence[Tensor],
    batch,
    config=None,
) -> BatchRepresentations:
    config = config or psi.config
    batch = as_tensor(batch)
    if batch.data.ndim != 2 or batch.data.shape[0] < 2:
        raise BatchTooSmallError(f"Losses need at least two rows, batch shape is {batch.shape}")
    r, r_pre = forward_layers(w_layers, batch, config)
    q, q_pre = forward_layers(theta_layers, batch, config)
    v = forward(psi, batch.data).final
    return BatchRepresentations(
        r=r,
        q=q,
        v=v,
        z=concat_columns(r, q),
        r_pre=r_pre,
        q_pre=q_pre,
        w_leaves=tuple(w_layers),
        theta_leaves=tuple(theta_layers),
    )


def build_representations(
    psi: EncoderParams,
    w: EncoderParams,
    theta: EncoderParams,
    batch,
    tape: GradTape,
) -> BatchRepresentations:
    """r and q are recorded on the tape; v comes from the frozen encoder off tape."""
    if w.config != theta.config:
        raise DimensionError("Global and personalized encoders must share one architecture.")
    return representations_from_layers(psi, w.tensors(tape), theta.tensors(tape), batch, w.config)


def lift(v: Tensor, width: int) -> Tensor:
    """Self-concatenate v until it is as wide as z (v ⊕ v for a two-model z)."""
    v = as_tensor(v)
    columns = v.data.shape[1]
    if width % columns:
        raise DimensionError(f"Cannot lift width {columns} to {width}")
    lifted = v
    for _ in range(width // columns - 1):
        lifted = concat_columns(lifted, v)
    return lifted


def cosine_matrix(z: Tensor, v: Tensor) -> Tensor:
    z = as_tensor(z)
    return cosine_distance_matrix(z, lift(v, z.data.shape[1]), DEFAULT_EPS)


def hard_label_loss(cosm: Tensor) -> Tensor:
    cosm = as_tensor(cosm)
    rows = cosm.data.shape[0]
    if cosm.data.ndim != 2 or rows != cosm.data.shape[1] or rows < 2:
        raise DimensionError(f"Hard label loss needs a square matrix with N >= 2, got {cosm.shape}")
    return soft_cross_entropy(cosm, np.eye(rows))


def resolve_k(k: float, n: int, k_as_ratio: bool = False) -> int:
    """Number of off-diagonal scores kept per row, clamped to N - 1."""
    if k_as_ratio:
        if not 0 < k <= 1:
            raise LossConfigError(f"k as a ratio must be in (0, 1], got {k}")
        return max(1, min(math.ceil(k * n), n - 1))
    if k < 1 or int(k) != k:
        raise LossConfigError(f"k must be a positive integer, got {k}")
    return min(int(k), n - 1)


def adaptive_soft_labels(z, v, k: int, gamma: float, exponent_t: float) -> SoftLabelMatrix:
    z_data = as_tensor(z).data
    v_data = lift(as_tensor(v).detach(), z_data.shape[1]).data
    n = z_data.shape[0]
    if not 1 <= k <= n - 1:
        raise LossConfigError(f"k={k} outside [1, {n - 1}]")
    if gamma <= 0 or exponent_t <= 0:
        raise LossConfigError(f"gamma and exponent_t must be positive, got {gamma}, {exponent_t}")

    ass = z_data @ v_data.T
    beta = np.zeros_like(ass)
    alpha = np.zeros_like(ass)
    columns = np.arange(n)
    for i in range(n):
        others = columns[columns != i]
        # descending score, lower column index first on ties
        ranked = others[np.lexsort((others, -ass[i, others]))]
        kept = ranked[:k]
        beta[i, kept] = ass[i, kept]
        beta[i, i] = gamma * ass[i, i]
        powered = softmax(beta[i]).data ** exponent_t
        alpha[i] = powered / powered.sum()
    return SoftLabelMatrix(Tensor(ass), Tensor(beta), Tensor(alpha), k, gamma, exponent_t)


def intra_subject_loss(cosm: Tensor, alpha) -> Tensor:
    cosm = as_tensor(cosm)
    targets = alpha.alpha if isinstance(alpha, SoftLabelMatrix) else as_tensor(alpha)
    if targets.shape != cosm.shape:
        raise DimensionError(f"Labels {targets.shape} do not match cosine matrix {cosm.shape}")
    return soft_cross_entropy(cosm, targets)


def regularization_loss(r_pre: Tensor, q_pre: Tensor) -> Tensor:
    r_pre = as_tensor(r_pre)
    return scale(tsum(row_cosine_distance(r_pre, q_pre, DEFAULT_EPS)), 1.0 / r_pre.data.shape[0])


def total_loss(insub, reg, lam: float) -> Tensor:
    if not 0.0 <= lam <= 1.0:
        raise LossConfigError(f"lambda must be in [0, 1], got {lam}")
    return add(scale(as_tensor(insub), lam), scale(as_tensor(reg), 1.0 - lam))


def objective(reps: BatchRepresentations, settings: LossSettings) -> LossBreakdown:
    """Total loss with the ablation switches applied."""
    n = reps.z.data.shape[0]
    cosm = cosine_matrix(reps.z, reps.v)
    if settings.use_adaptive_soft_label:
        if settings.use_topk_gamma:
            k, gamma = resolve_k(settings.k, n, settings.k_as_ratio), settings.gamma
        else:
            k, gamma = n - 1, 1.0
        labels = adaptive_soft_labels(reps.z, reps.v, k, gamma, settings.exponent_t)
        insub = intra_subject_loss(cosm, labels)
    else:
        labels = None
        insub = hard_label_loss(cosm)
    reg = regularization_loss(reps.r_pre, reps.q_pre)
    lam = settings.lam if settings.use_reg_loss else 1.0
    return LossBreakdown(insub, reg, total_loss(insub, reg, lam), labels)
