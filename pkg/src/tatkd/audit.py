"""Registered gradient audits for every distillation loss.

Each case builds float64 inputs (and projectors) from a fixed seed and
reports the worst relative error of analytic vs. central-difference
gradients over the student input and every projector parameter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .gradcheck import finite_diff_check
from .hier import AnchorConfig, PatchGroupConfig, anchor_point_loss, patch_group_loss
from .layers import ProjectorSet
from .losses import fm_loss, kl_distill_loss, tat_loss
from .nets import build_projectors
from .tensor import Tensor

TOLERANCE = 1e-4
STEP = 1e-3


@dataclass
class AuditResult:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _pair(rng, shape, c_t=None):
    s = Tensor(rng.normal(size=shape))
    t_shape = shape[:-1] + (c_t or shape[-1],)
    t = Tensor(np.abs(rng.normal(size=t_shape)))
    return s, t


def _projectors(modes, c_t, c_s, seed) -> ProjectorSet:
    return build_projectors(*modes, c_t, c_s, c_t, seed).astype(np.float64)


def _check(loss: Callable[[], Tensor], student: Tensor, projectors: ProjectorSet | None) -> float:
    worst = finite_diff_check(lambda s: loss(), student, STEP)
    if projectors is not None:
        params = projectors.parameters()
        if params:
            worst = max(worst, finite_diff_check(lambda *p: loss(), params, STEP))
    return worst


TAT_MODES = {
    "non-parametric": ("identity", "identity", "identity"),
    "semi-parametric": ("identity", "conv", "conv"),
    "fully-parametric": ("conv", "conv", "conv"),
    "linear": ("linear", "linear", "linear"),
}


def run_audit(seed: int = 0) -> list[AuditResult]:
    rng = np.random.default_rng(seed)
    results = []

    t_logits = Tensor(rng.normal(size=(3, 5)))
    s_logits = Tensor(rng.normal(size=(3, 5)))
    for tau, corr in ((1.0, False), (2.0, True)):
        err = finite_diff_check(lambda s: kl_distill_loss(t_logits, s, tau, corr), s_logits, STEP)
        results.append(AuditResult(f"kl tau={tau} correction={corr}", err))

    for red in ("mean-squared", "literal-sum"):
        s, t = _pair(rng, (4, 4, 3))
        results.append(AuditResult(f"fm {red}", finite_diff_check(lambda x: fm_loss(x, t, red), s, STEP)))

    for name, modes in TAT_MODES.items():
        s, t = _pair(rng, (4, 4, 3))
        proj = _projectors(modes, 3, 3, seed)
        results.append(AuditResult(f"tat {name}", _check(lambda: tat_loss(s, t, proj), s, proj)))

    # channel alignment through gamma/phi
    s, t = _pair(rng, (4, 4, 2), c_t=3)
    proj = _projectors(("identity", "conv", "conv"), 3, 2, seed)
    results.append(AuditResult("tat semi-parametric C'!=C", _check(lambda: tat_loss(s, t, proj), s, proj)))

    s, t = _pair(rng, (4, 4, 3))
    results.append(
        AuditResult("tat literal-sum", finite_diff_check(lambda x: tat_loss(x, t, None, "literal-sum"), s, STEP))
    )

    pg = PatchGroupConfig(4, 4, groups=2)
    s, t = _pair(rng, (8, 8, 2))
    proj = _projectors(("linear", "conv", "conv"), 2 * 2, 2 * 2, seed)
    results.append(AuditResult("patch-group", _check(lambda: patch_group_loss(s, t, pg, proj), s, proj)))

    ap = AnchorConfig(2)
    s, t = _pair(rng, (8, 8, 2))
    proj = _projectors(("identity", "conv", "conv"), 2, 2, seed)
    results.append(AuditResult("anchor-point", _check(lambda: anchor_point_loss(s, t, ap, proj), s, proj)))
    return results
