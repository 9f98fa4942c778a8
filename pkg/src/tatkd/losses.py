"""Distillation objectives: logit KL, one-to-one feature matching and the
target-aware correlation loss.

The correlation loss lets every teacher pixel be reconstructed from *all*
student pixels.  With flattened maps ``f_t`` (N x C) and ``f_s`` (N x C')::

    W[i, j] = softmax_j < gamma(f_s)_j , theta(f_t)_i >
    f_s'    = W @ phi(f_s)
    loss    = dist(f_s', theta(f_t))

Rows of ``W`` are indexed by teacher positions and normalised over student
positions.  Teacher tensors never receive gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from . import tensor as T
from .layers import ProjectorSet
from .tensor import Tensor

REDUCTIONS = ("mean-squared", "literal-sum")
ROLES = ("teacher", "student")


@dataclass
class FeatureMap:
    """A ``H x W x C`` (or batched ``B x H x W x C``) activation tagged by role."""

    tensor: Tensor
    role: str = "student"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        if self.tensor.ndim not in (3, 4) or min(self.tensor.shape) < 1:
            raise T.ShapeError(f"feature map must be H x W x C (optionally batched), got {self.tensor.shape}")

    @property
    def height(self) -> int:
        return self.tensor.shape[-3]

    @property
    def width(self) -> int:
        return self.tensor.shape[-2]

    @property
    def channels(self) -> int:
        return self.tensor.shape[-1]


MapLike = Union[FeatureMap, Tensor]


def _unwrap(x: MapLike) -> Tensor:
    return x.tensor if isinstance(x, FeatureMap) else x


@dataclass
class CorrelationMap:
    """Row-stochastic ``N x N`` matrix; entry ``(i, j)`` weighs student ``j`` for teacher ``i``."""

    matrix: Tensor

    @property
    def size(self) -> int:
        return self.matrix.shape[-1]

    def row_sums(self) -> np.ndarray:
        return self.matrix.data.sum(axis=-1)


@dataclass
class KDConfig:
    alpha: float = 1.0
    beta: float = 0.0
    epsilon: float = 0.1
    tau: float = 1.0
    kl_tau_square_correction: bool = False
    fm_reduction: str = "mean-squared"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        for name in ("alpha", "beta", "epsilon"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.fm_reduction not in REDUCTIONS:
            raise ValueError(f"fm_reduction must be one of {REDUCTIONS}")


# (alpha, beta, epsilon)
CLS_PRESETS: dict[str, KDConfig] = {
    "imagenet": KDConfig(alpha=0.5, beta=0.5, epsilon=0.1),
    "cifar-wrn40_2-wrn16_2": KDConfig(alpha=0.8, beta=0.0, epsilon=4.0),
    "cifar-wrn40_2-wrn40_1": KDConfig(alpha=0.7, beta=0.0, epsilon=3.6),
    "cifar-resnet56-resnet20": KDConfig(alpha=0.8, beta=0.0, epsilon=0.4),
    "cifar-resnet110-resnet20": KDConfig(alpha=1.0, beta=0.0, epsilon=0.75),
    "cifar-resnet110-resnet32": KDConfig(alpha=1.0, beta=0.0, epsilon=1.0),
    "cifar-resnet32x4-resnet8x4": KDConfig(alpha=6.0, beta=0.0, epsilon=39.0),
    "cifar-vgg13-vgg8": KDConfig(alpha=0.1, beta=0.0, epsilon=8.0),
}


def _reduce(diff: Tensor, reduction: str) -> Tensor:
    """``diff`` is ``[..., N, C]``; leading axes are averaged for literal-sum."""
    if reduction == "mean-squared":
        return T.mean(diff * diff)
    if reduction == "literal-sum":
        norms = T.sqrt(T.tsum(diff * diff, axis=-1))
        per_map = T.tsum(norms, axis=-1)
        return T.mean(per_map) if per_map.ndim else per_map
    raise ValueError(f"unknown reduction {reduction!r}; expected one of {REDUCTIONS}")


def kl_distill_loss(teacher_logits: Tensor, student_logits: Tensor, tau: float = 1.0, correction: bool = False) -> Tensor:
    """Batch-mean ``KL(softmax(T/tau) || softmax(S/tau))``, optionally times ``tau**2``."""
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if teacher_logits.shape != student_logits.shape:
        raise T.ShapeError(f"logit shapes differ: {teacher_logits.shape} vs {student_logits.shape}")
    K = student_logits.shape[-1]
    t = teacher_logits.data.reshape(-1, K).astype(np.float64) / tau
    log_p = t - t.max(axis=-1, keepdims=True)
    log_p = log_p - np.log(np.exp(log_p).sum(axis=-1, keepdims=True))
    p = np.exp(log_p)
    dtype = student_logits.dtype
    log_q = T.log_softmax(T.reshape(student_logits, (-1, K)) * (1.0 / tau), axis=-1)
    # sum_k p (log p - log q), averaged over rows
    cross = T.tsum(log_q * Tensor(p.astype(dtype)), axis=-1)
    entropy_term = (p * log_p).sum(axis=-1).astype(dtype)
    loss = T.mean(Tensor(entropy_term) - cross)
    return loss * (tau * tau) if correction else loss


def fm_loss(student: MapLike, teacher: MapLike, reduction: str = "mean-squared") -> Tensor:
    """One-to-one matching: pixel ``i`` of the student regresses pixel ``i`` of the teacher."""
    s, t = _unwrap(student), _unwrap(teacher).detach()
    if s.shape != t.shape:
        raise T.ShapeError(f"feature shapes differ: student {s.shape} vs teacher {t.shape}")
    return _reduce(T.flatten_spatial(s) - T.flatten_spatial(t), reduction)


def tat_correlation(student_proj: Tensor, teacher_proj: Tensor) -> CorrelationMap:
    if student_proj.shape[-1] != teacher_proj.shape[-1]:
        raise T.ShapeError(
            f"correlation needs equal channels: student {student_proj.shape} vs teacher {teacher_proj.shape}"
        )
    if student_proj.shape[-2] < 1:
        raise T.ShapeError("correlation needs at least one position")
    logits = T.matmul(teacher_proj, T.swap_last(student_proj))
    return CorrelationMap(T.softmax_axis(logits, axis=-1))


def tat_reconfigure(corr: CorrelationMap, student_agg: Tensor) -> Tensor:
    m = corr.matrix
    if m.shape[-1] != m.shape[-2] or m.shape[-1] != student_agg.shape[-2]:
        raise T.ShapeError(f"cannot reconfigure {student_agg.shape} with correlation {m.shape}")
    return T.matmul(m, student_agg)


@dataclass
class TaTOutputs:
    loss: Tensor
    correlation: CorrelationMap
    reconfigured: Tensor
    target: Tensor


def tat_forward(
    student: MapLike,
    teacher: MapLike,
    projectors: ProjectorSet | None = None,
    reduction: str = "mean-squared",
) -> TaTOutputs:
    """Full correlation-loss pipeline, returning the intermediates as well."""
    s, t = _unwrap(student), _unwrap(teacher).detach()
    if s.shape[:-1] != t.shape[:-1]:
        raise T.ShapeError(f"student {s.shape} and teacher {t.shape} must share batch and spatial extents")
    if projectors is None:
        if s.shape[-1] != t.shape[-1]:
            raise ValueError(f"identity projectors need equal channels, got student {s.shape[-1]} vs teacher {t.shape[-1]}")
        target_map, corr_map, agg_map = t, s, s
    else:
        target_map = projectors.theta(t)
        corr_map = projectors.gamma(s)
        agg_map = projectors.phi(s)
    target = T.flatten_spatial(target_map)
    corr = tat_correlation(T.flatten_spatial(corr_map), target)
    rec = tat_reconfigure(corr, T.flatten_spatial(agg_map))
    if rec.shape != target.shape:
        raise T.ShapeError(f"reconfigured student {rec.shape} does not match target {target.shape}")
    return TaTOutputs(_reduce(rec - target, reduction), corr, rec, target)


def tat_loss(
    student: MapLike,
    teacher: MapLike,
    projectors: ProjectorSet | None = None,
    reduction: str = "mean-squared",
) -> Tensor:
    return tat_forward(student, teacher, projectors, reduction).loss


def total_loss_cls(task: Tensor, kl: Tensor, tat: Tensor, cfg: KDConfig) -> Tensor:
    return task * cfg.alpha + kl * cfg.beta + tat * cfg.epsilon


def export_correlation(corr: CorrelationMap | np.ndarray, path: str | Path, pgm_path: str | Path | None = None) -> None:
    """Write the matrix as CSV (``%.6f``) and optionally an 8-bit min-max scaled PGM."""
    m = corr.matrix.data if isinstance(corr, CorrelationMap) else np.asarray(corr)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise T.ShapeError(f"expected an N x N matrix, got {m.shape}")
    lines = [",".join(f"{v:.6f}" for v in row) for row in m.astype(np.float64)]
    Path(path).write_text("\n".join(lines) + "\n")
    if pgm_path is not None:
        lo, hi = float(m.min()), float(m.max())
        scaled = np.zeros(m.shape) if hi == lo else (m - lo) / (hi - lo) * 255.0
        pixels = np.rint(scaled).astype(np.uint8)
        n = m.shape[0]
        Path(pgm_path).write_bytes(f"P5\n{n} {n}\n255\n".encode("ascii") + pixels.tobytes())


def read_correlation_csv(path: str | Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, _maxval, body = raw.split(b"\n", 3)
    if magic != b"P5":
        raise ValueError("not a binary PGM file")
    width, height = (int(v) for v in dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width)
