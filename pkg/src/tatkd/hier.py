"""Hierarchical distillation for large maps: patch groups and anchor points.

A full correlation over ``N = H*W`` positions costs ``O(N**2)``.  Patch-group
distillation cuts the map into ``h x w`` patches, concatenates ``p``
consecutive patches channel-wise into one of ``g`` groups and runs the
correlation loss inside each group.  Anchor-point distillation average-pools
the map with a ``k x k`` kernel and runs the correlation loss on the pooled
(anchor) map.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .layers import ProjectorSet
from .losses import MapLike, _unwrap, tat_loss
from .tensor import Tensor


class HierarchyConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PatchGroupConfig:
    patch_h: int
    patch_w: int
    groups: int = 1
    theta_mode: str = "linear"

    def grid(self, height: int, width: int) -> tuple[int, int, int]:
        """``(n, m, p)``: patch rows, patch columns and patches per group."""
        if self.patch_h < 1 or self.patch_w < 1 or self.groups < 1:
            raise HierarchyConfigError("patch sizes and groups must be >= 1")
        if height % self.patch_h or width % self.patch_w:
            raise HierarchyConfigError(
                f"patch {self.patch_h}x{self.patch_w} does not tile a {height}x{width} map"
            )
        n, m = height // self.patch_h, width // self.patch_w
        if (n * m) % self.groups:
            raise HierarchyConfigError(f"groups={self.groups} does not divide the {n * m} patches")
        return n, m, n * m // self.groups


@dataclass(frozen=True)
class AnchorConfig:
    pool_k: int = 2

    def check(self, height: int, width: int) -> None:
        if self.pool_k < 1 or height % self.pool_k or width % self.pool_k:
            raise HierarchyConfigError(f"pool_k={self.pool_k} does not divide a {height}x{width} map")


@dataclass(frozen=True)
class SegLossWeights:
    alpha: float = 1.0
    delta: float = 0.1
    zeta: float = 0.05

    def __post_init__(self):
        for name in ("alpha", "delta", "zeta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


SEG_PRESETS: dict[str, SegLossWeights] = {
    "voc": SegLossWeights(1.0, 0.1, 0.05),
    "cocostuff-resnet18": SegLossWeights(1.0, 0.6, 0.6),
    "cocostuff-mobilenetv2": SegLossWeights(1.0, 0.4, 0.4),
}


def partition_patches(x: Tensor, cfg: PatchGroupConfig) -> list[Tensor]:
    """Row-major list of the ``n*m`` patches (works on single or batched maps)."""
    H, W = x.shape[-3], x.shape[-2]
    n, m, _ = cfg.grid(H, W)
    h, w = cfg.patch_h, cfg.patch_w
    lead = (slice(None),) * (x.ndim - 3)
    return [
        x[lead + (slice(r * h, (r + 1) * h), slice(c * w, (c + 1) * w))]
        for r in range(n)
        for c in range(m)
    ]


def group_concat(patches: list[Tensor], cfg: PatchGroupConfig) -> list[Tensor]:
    """Consecutive runs of ``p`` patches stacked along channels, patch order kept."""
    if len(patches) % cfg.groups:
        raise HierarchyConfigError(f"{len(patches)} patches cannot form {cfg.groups} groups")
    p = len(patches) // cfg.groups
    return [T.concat(patches[g * p : (g + 1) * p], axis=-1) for g in range(cfg.groups)]


def ungroup(groups: list[Tensor], channels: int) -> list[Tensor]:
    out = []
    for grp in groups:
        for q in range(grp.shape[-1] // channels):
            out.append(grp[..., q * channels : (q + 1) * channels])
    return out


def reassemble(patches: list[Tensor], n: int, m: int) -> Tensor:
    rows = [T.concat(patches[r * m : (r + 1) * m], axis=-2) for r in range(n)]
    return T.concat(rows, axis=-3)


def grouped_batch(x: Tensor, cfg: PatchGroupConfig) -> Tensor:
    """All groups stacked on the batch axis: ``(g*B) x h x w x (p*C)``.

    Group ``k`` of batch item ``b`` lands at row ``k*B + b``; equal to
    stacking :func:`group_concat` outputs.
    """
    x4 = x if x.ndim == 4 else T.reshape(x, (1,) + x.shape)
    B, H, W, C = x4.shape
    n, m, p = cfg.grid(H, W)
    h, w, g = cfg.patch_h, cfg.patch_w, cfg.groups
    y = T.reshape(x4, (B, n, h, m, w, C))
    y = T.transpose(y, (0, 1, 3, 2, 4, 5))  # B n m h w C
    y = T.reshape(y, (B, g, p, h, w, C))
    y = T.transpose(y, (1, 0, 3, 4, 2, 5))  # g B h w p C
    return T.reshape(y, (g * B, h, w, p * C))


def patch_group_loss(
    student: MapLike,
    teacher: MapLike,
    cfg: PatchGroupConfig,
    projectors: ProjectorSet | None = None,
    reduction: str = "mean-squared",
) -> Tensor:
    """Mean over groups of the correlation loss on each grouped pair.

    Groups are evaluated together along the batch axis; batch-norm projectors
    therefore normalise with statistics pooled across groups.
    """
    s, t = _unwrap(student), _unwrap(teacher).detach()
    if s.shape[:-1] != t.shape[:-1]:
        raise T.ShapeError(f"student {s.shape} and teacher {t.shape} must share spatial extents")
    return tat_loss(grouped_batch(s, cfg), grouped_batch(t, cfg), projectors, reduction)


def anchor_pool_map(x: Tensor, cfg: AnchorConfig) -> Tensor:
    cfg.check(x.shape[-3], x.shape[-2])
    return T.avg_pool2d(x, cfg.pool_k)


def anchor_point_loss(
    student: MapLike,
    teacher: MapLike,
    cfg: AnchorConfig,
    projectors: ProjectorSet | None = None,
    reduction: str = "mean-squared",
) -> Tensor:
    s, t = _unwrap(student), _unwrap(teacher).detach()
    if s.shape[:-1] != t.shape[:-1]:
        raise T.ShapeError(f"student {s.shape} and teacher {t.shape} must share spatial extents")
    return tat_loss(anchor_pool_map(s, cfg), anchor_pool_map(t, cfg), projectors, reduction)


def total_loss_seg(ce: Tensor, pg: Tensor, ap: Tensor, w: SegLossWeights) -> Tensor:
    return ce * w.alpha + pg * w.delta + ap * w.zeta


def tat_cost_estimate(
    H: int,
    W: int,
    C: int,
    patch_group: PatchGroupConfig | None = None,
    anchor: AnchorConfig | None = None,
) -> int:
    """Multiply-adds of the correlation and aggregation products.

    Without hierarchy configs this is the full ``2 * N**2 * C``; otherwise it
    is the sum over the configured hierarchical terms.
    """
    if min(H, W, C) < 1:
        raise ValueError("dimensions must be positive")
    if patch_group is None and anchor is None:
        N = H * W
        return 2 * N * N * C
    total = 0
    if patch_group is not None:
        _, _, p = patch_group.grid(H, W)
        n_g = patch_group.patch_h * patch_group.patch_w
        total += patch_group.groups * 2 * n_g * n_g * C * p
    if anchor is not None:
        anchor.check(H, W)
        n_a = (H // anchor.pool_k) * (W // anchor.pool_k)
        total += 2 * n_a * n_a * C
    return total
