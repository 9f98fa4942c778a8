"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields

from .hier import AnchorConfig, HierarchyConfigError, PatchGroupConfig, SegLossWeights
from .layers import PROJECTOR_MODES
from .losses import REDUCTIONS, KDConfig
from .nets import PRESETS


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class RunConfig:
    seed: int = 0
    task: str = "classification"

    # data
    data: str = "shapes"
    data_seed: int = 0
    image_size: int = 16
    num_classes: int = 4
    noise: float = 0.3
    n_train: int = 512
    n_test: int = 512
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    flip: bool = False
    crop: bool = False

    # models
    teacher_preset: str = "fig1-teacher"
    student_preset: str = "fig1-student"
    teacher_checkpoint: str = ""

    # distillation (classification objective)
    distill: str = "tat"
    alpha: float = 1.0
    beta: float = 0.0
    epsilon: float = 0.1
    tau: float = 1.0
    kl_tau_square_correction: bool = False
    fm_reduction: str = "mean-squared"
    theta_mode: str = "identity"
    gamma_mode: str = "conv"
    phi_mode: str = "conv"

    # hierarchical distillation (segmentation objective)
    patch_h: int = 4
    patch_w: int = 4
    groups: int = 4
    pg_theta_mode: str = "linear"
    pool_k: int = 2
    delta: float = 0.1
    zeta: float = 0.05

    # optimisation
    optimizer: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 5e-4
    schedule: str = "step"
    batch_size: int = 32
    epochs: int = 60
    teacher_epochs: int = 60
    eval_every: int = 1
    log_wall_time: bool = False

    def __post_init__(self):
        validate(self)

    # -- nested views ---------------------------------------------------
    @property
    def kd(self) -> KDConfig:
        return KDConfig(self.alpha, self.beta, self.epsilon, self.tau, self.kl_tau_square_correction, self.fm_reduction)

    @property
    def patch_group(self) -> PatchGroupConfig:
        return PatchGroupConfig(self.patch_h, self.patch_w, self.groups, self.pg_theta_mode)

    @property
    def anchor(self) -> AnchorConfig:
        return AnchorConfig(self.pool_k)

    @property
    def seg_weights(self) -> SegLossWeights:
        return SegLossWeights(self.alpha, self.delta, self.zeta)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_CHOICES = {
    "task": ("classification", "segmentation"),
    "data": ("shapes", "idx"),
    "teacher_preset": tuple(PRESETS),
    "student_preset": tuple(PRESETS),
    "distill": ("none", "fm", "tat"),
    "fm_reduction": REDUCTIONS,
    "theta_mode": PROJECTOR_MODES,
    "gamma_mode": PROJECTOR_MODES,
    "phi_mode": PROJECTOR_MODES,
    "pg_theta_mode": PROJECTOR_MODES,
    "optimizer": ("sgd", "adamw"),
    "schedule": ("step", "constant", "cosine"),
}

_NON_NEGATIVE = ("alpha", "beta", "epsilon", "delta", "zeta", "noise", "lr", "momentum", "weight_decay")
_POSITIVE_INT = ("image_size", "n_train", "n_test", "patch_h", "patch_w", "groups", "pool_k", "batch_size")


def validate(cfg: RunConfig) -> None:
    for key, allowed in _CHOICES.items():
        if getattr(cfg, key) not in allowed:
            raise ConfigError(key, f"{getattr(cfg, key)!r} not in {list(allowed)}")
    for key in _NON_NEGATIVE:
        if getattr(cfg, key) < 0:
            raise ConfigError(key, "must be >= 0")
    for key in _POSITIVE_INT:
        if getattr(cfg, key) < 1:
            raise ConfigError(key, "must be >= 1")
    if not cfg.tau > 0:
        raise ConfigError("tau", "must be > 0")
    if cfg.epochs < 0 or cfg.teacher_epochs < 0:
        raise ConfigError("epochs", "must be >= 0")
    if not 2 <= cfg.num_classes <= 8 and cfg.data == "shapes":
        raise ConfigError("num_classes", "synthetic shapes support 2..8 classes")
    if cfg.data == "shapes" and cfg.image_size < 8:
        raise ConfigError("image_size", "synthetic shapes need image_size >= 8")

    hw = cfg.image_size
    if hw % cfg.patch_h:
        raise ConfigError("patch_h", f"{cfg.patch_h} does not divide image_size {hw}")
    if hw % cfg.patch_w:
        raise ConfigError("patch_w", f"{cfg.patch_w} does not divide image_size {hw}")
    try:
        cfg.patch_group.grid(hw, hw)
    except HierarchyConfigError as exc:
        raise ConfigError("groups", str(exc)) from None
    if hw % cfg.pool_k:
        raise ConfigError("pool_k", f"{cfg.pool_k} does not divide image_size {hw}")

    c_t = PRESETS[cfg.teacher_preset][-1]
    c_s = PRESETS[cfg.student_preset][-1]
    if cfg.distill == "tat" or cfg.task == "segmentation":
        if cfg.gamma_mode == "identity" and c_s != c_t:
            raise ConfigError("gamma_mode", f"identity needs equal channels (student {c_s}, teacher {c_t})")
        if cfg.phi_mode == "identity" and c_s != c_t:
            raise ConfigError("phi_mode", f"identity needs equal channels (student {c_s}, teacher {c_t})")
    if cfg.distill == "fm" and cfg.phi_mode == "identity" and c_s != c_t:
        raise ConfigError("phi_mode", "fm with mismatched channels needs a conv or linear regressor")
    if len(PRESETS[cfg.teacher_preset]) <= len(PRESETS[cfg.student_preset]):
        raise ConfigError("teacher_preset", "teacher must be deeper than the student")


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    ftype = _FIELDS[key].type
    try:
        if ftype == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"expected {ftype}, got {raw!r}") from None
    return raw


def _parse_pairs(lines, values: dict) -> None:
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(key, "unknown key")
        values[key] = _coerce(key, raw)


def parse_config(text: str, overrides: list[str] | None = None) -> RunConfig:
    """Parse config text, then apply ``key=value`` overrides, then validate."""
    values: dict = {}
    _parse_pairs(text.splitlines(), values)
    _parse_pairs(overrides or [], values)
    return RunConfig(**values)


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()
