"""Teacher training, student distillation and evaluation."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint
from .config import RunConfig, config_hash, parse_config, serialize_config
from .data import Dataset, augment, make_splits, read_idx
from .hier import anchor_point_loss, patch_group_loss, total_loss_seg
from .layers import Module, Projector, ProjectorSet
from .losses import fm_loss, kl_distill_loss, tat_loss, total_loss_cls
from .nets import ConvNet, build_convnet, build_projectors, preset_spec
from .tensor import Tensor

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "loss_task", "loss_kl", "loss_tat", "loss_pg", "loss_ap", "metric", "seconds")
COMPONENTS = ("task", "kl", "tat", "pg", "ap")


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# metrics


@dataclass
class EpochRecord:
    epoch: int
    loss_task: float = 0.0
    loss_kl: float = 0.0
    loss_tat: float = 0.0
    loss_pg: float = 0.0
    loss_ap: float = 0.0
    loss_total: float = 0.0
    metric: float | None = None
    seconds: float = 0.0


@dataclass
class RunMetrics:
    records: list[EpochRecord] = field(default_factory=list)
    task: str = "classification"

    @property
    def final_metric(self) -> float | None:
        for rec in reversed(self.records):
            if rec.metric is not None:
                return rec.metric
        return None

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.records]

    def to_csv(self, include_time: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in self.records:
            w.writerow(
                [
                    r.epoch,
                    *(f"{getattr(r, 'loss_' + c):.9g}" for c in COMPONENTS),
                    "" if r.metric is None else f"{r.metric:.9g}",
                    f"{r.seconds:.3f}" if include_time else "0",
                ]
            )
        return buf.getvalue()

    def write_csv(self, path: str | Path, include_time: bool = False) -> None:
        Path(path).write_text(self.to_csv(include_time))


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.asarray(predictions) == np.asarray(labels)))


def confusion_matrix(predictions: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    idx = np.asarray(labels).reshape(-1) * num_classes + np.asarray(predictions).reshape(-1)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def mean_iou(predictions: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    """Mean IoU over the classes that occur in ``labels``."""
    cm = confusion_matrix(predictions, labels, num_classes)
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    present = cm.sum(axis=1) > 0
    return float(np.mean(inter[present] / union[present]))


# ---------------------------------------------------------------------------
# optimisers


class SGD:
    kind = "sgd"

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        if lr < 0:
            raise ValueError("lr must be >= 0")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.steps = 0
        self.buffers = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        T.zero_grads(self.params.values())

    def step(self) -> None:
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            buf = self.buffers[k]
            buf *= self.momentum
            buf += g
            p.data -= self.lr * buf
        self.steps += 1

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {f"momentum/{k}": v for k, v in self.buffers.items()}

    def scalars(self) -> dict:
        return {"kind": self.kind, "steps": self.steps}

    def load(self, tensors: dict[str, np.ndarray], scalars: dict) -> None:
        for k in self.buffers:
            self.buffers[k] = tensors[f"momentum/{k}"].astype(self.buffers[k].dtype)
        self.steps = scalars["steps"]


class AdamW:
    kind = "adamw"

    def __init__(self, params, lr, betas=(0.9, 0.999), weight_decay=0.0, eps=1e-8):
        if lr < 0:
            raise ValueError("lr must be >= 0")
        self.params = params
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.steps = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        T.zero_grads(self.params.values())

    def step(self) -> None:
        self.steps += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.steps
        c2 = 1 - b2**self.steps
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * p.grad
            self.v[k] = b2 * self.v[k] + (1 - b2) * p.grad * p.grad
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data -= (self.lr * (update + self.weight_decay * p.data)).astype(p.dtype)

    def state_tensors(self):
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    def scalars(self):
        return {"kind": self.kind, "steps": self.steps}

    def load(self, tensors, scalars):
        for k in self.m:
            self.m[k] = tensors[f"m/{k}"].astype(self.m[k].dtype)
            self.v[k] = tensors[f"v/{k}"].astype(self.v[k].dtype)
        self.steps = scalars["steps"]


def make_optimizer(cfg: RunConfig, params: dict[str, Tensor]):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    return AdamW(params, cfg.lr, (cfg.adam_beta1, cfg.adam_beta2), cfg.weight_decay)


def lr_at(cfg: RunConfig, epoch: int, total_epochs: int) -> float:
    if cfg.schedule == "constant" or total_epochs == 0:
        return cfg.lr
    if cfg.schedule == "cosine":
        return 0.5 * cfg.lr * (1 + math.cos(math.pi * epoch / total_epochs))
    milestones = (int(0.6 * total_epochs), int(0.8 * total_epochs))
    return cfg.lr * 0.1 ** sum(epoch >= m for m in milestones)


# ---------------------------------------------------------------------------
# data and models from config


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    if cfg.data == "idx":
        train = read_idx(cfg.train_images, cfg.train_labels, cfg.num_classes, "train")
        test = read_idx(cfg.test_images, cfg.test_labels, cfg.num_classes, "test")
        return train, test
    return make_splits(cfg.task, cfg.n_train, cfg.n_test, cfg.image_size, cfg.num_classes, cfg.noise, cfg.data_seed)


def _seeds(seed: int) -> dict[str, int]:
    names = ("teacher", "student", "projectors", "data")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


def _net(cfg: RunConfig, role: str, in_channels: int, seed: int) -> ConvNet:
    preset = cfg.teacher_preset if role == "teacher" else cfg.student_preset
    return build_convnet(preset_spec(preset, in_channels, cfg.num_classes, cfg.task), seed)


class DistillHeads(Module):
    """Every trainable module attached to the student for one objective."""

    def __init__(self, cfg: RunConfig, c_t: int, c_s: int, seed: int):
        rng_seeds = np.random.SeedSequence(seed).spawn(3)
        s0, s1, s2 = (int(s.generate_state(1)[0]) for s in rng_seeds)
        self.proj = None
        self.regressor = None
        self.pg_proj = None
        if cfg.distill == "fm":
            self.regressor = Projector(cfg.phi_mode, c_s, c_t, np.random.default_rng(s0))
        elif cfg.distill == "tat" and cfg.task == "classification":
            self.proj = build_projectors(cfg.theta_mode, cfg.gamma_mode, cfg.phi_mode, c_t, c_s, c_t, s0)
        elif cfg.distill == "tat":
            _, _, p = cfg.patch_group.grid(cfg.image_size, cfg.image_size)
            self.pg_proj = build_projectors(cfg.pg_theta_mode, cfg.gamma_mode, cfg.phi_mode, c_t * p, c_s * p, c_t * p, s1)
            self.proj = build_projectors(cfg.theta_mode, cfg.gamma_mode, cfg.phi_mode, c_t, c_s, c_t, s2)


def _params(**modules: Module | None) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for prefix, mod in modules.items():
        if mod is not None:
            out.update(mod.named_parameters(prefix + "/"))
    return out


def _module_state(**modules: Module | None) -> dict[str, np.ndarray]:
    out = {}
    for prefix, mod in modules.items():
        if mod is not None:
            out.update({f"{prefix}/{k}": v for k, v in mod.state_dict().items()})
    return out


def model_from_checkpoint(ckpt: Checkpoint | str | Path, role: str | None = None) -> tuple[ConvNet, RunConfig]:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    cfg = parse_config(ckpt.meta["config"])
    role = role or ckpt.meta["role"]
    model = _net(cfg, role, int(ckpt.meta["in_channels"]), 0)
    model.load_state_dict(ckpt.section("model"))
    return model.eval(), cfg


def heads_from_checkpoint(ckpt: Checkpoint) -> DistillHeads:
    cfg = parse_config(ckpt.meta["config"])
    heads = DistillHeads(cfg, int(ckpt.meta["teacher_channels"]), int(ckpt.meta["student_channels"]), 0)
    state = {}
    for k, v in ckpt.tensors.items():
        prefix = k.split("/", 1)[0]
        if prefix in ("proj", "regressor", "pg_proj"):
            state[k.replace("/", ".", 1)] = v
    heads.load_state_dict(state)
    return heads.eval()


# ---------------------------------------------------------------------------
# evaluation


def predict(model: ConvNet, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    was_training = model.training
    model.eval()
    preds = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            _, logits = model(Tensor(images[i : i + batch_size]))
            preds.append(logits.data.argmax(axis=-1))
    model.train(was_training)
    return np.concatenate(preds)


def evaluate_model(model: ConvNet, dataset: Dataset) -> float:
    if dataset.num_classes != model.spec.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, model predicts {model.spec.num_classes}")
    preds = predict(model, dataset.images)
    if model.spec.head == "segmentation":
        return mean_iou(preds, dataset.labels, dataset.num_classes)
    return accuracy(preds, dataset.labels)


def evaluate(ckpt: Checkpoint | str | Path, dataset: Dataset, task: str | None = None) -> RunMetrics:
    """Top-1 accuracy (classification) or mean IoU (segmentation) of a checkpoint."""
    model, cfg = model_from_checkpoint(ckpt)
    task = task or cfg.task
    if task != model.spec.head:
        raise ValueError(f"checkpoint was trained for {model.spec.head}, asked to evaluate {task}")
    start = time.perf_counter()
    metric = evaluate_model(model, dataset)
    rec = EpochRecord(epoch=int(ckpt.epoch if isinstance(ckpt, Checkpoint) else 0), metric=metric)
    rec.seconds = time.perf_counter() - start
    return RunMetrics([rec], task)


# ---------------------------------------------------------------------------
# the loop


def _fit(
    cfg: RunConfig,
    model: ConvNet,
    params: dict[str, Tensor],
    compute,
    train: Dataset,
    test: Dataset | None,
    rng: np.random.Generator,
    epochs: int,
    resume: Checkpoint | None,
    trainables: list[Module],
):
    opt = make_optimizer(cfg, params)
    start_epoch = 0
    if resume is not None:
        opt.load(resume.section("optim"), resume.meta["optimizer"])
        rng.bit_generator.state = resume.meta["rng_state"]
        start_epoch = resume.epoch
    metrics = RunMetrics(task=cfg.task)
    n = len(train)
    for epoch in range(start_epoch, epochs):
        t0 = time.perf_counter()
        opt.lr = lr_at(cfg, epoch, epochs)
        for mod in trainables:
            mod.train()
        sums = dict.fromkeys(COMPONENTS + ("total",), 0.0)
        order = rng.permutation(n)
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo : lo + cfg.batch_size]
            xb, yb = augment(train.images[idx], train.labels[idx], rng, cfg.flip, cfg.crop)
            opt.zero_grad()
            comps = compute(Tensor(xb), yb)
            total = comps["total"]
            if not np.isfinite(total.data).all():
                detail = ", ".join(f"{k}={float(v.data):.4g}" for k, v in comps.items())
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch} batch {b}: {detail}")
            total.backward()
            opt.step()
            for k in sums:
                sums[k] += float(comps[k].data) * len(idx)
        rec = EpochRecord(epoch=epoch + 1)
        for k in COMPONENTS:
            setattr(rec, "loss_" + k, sums[k] / n)
        rec.loss_total = sums["total"] / n
        last = epoch + 1 == epochs
        # eval_every = 0 evaluates after the final epoch only
        if test is not None and (last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0)):
            rec.metric = evaluate_model(model, test)
        rec.seconds = time.perf_counter() - t0
        metrics.records.append(rec)
        log.info("epoch %d total=%.4f metric=%s", rec.epoch, rec.loss_total, rec.metric)
    return opt, metrics


def _checkpoint(cfg, role, in_channels, modules: dict, opt, rng, epoch, extra_meta=None) -> Checkpoint:
    tensors = _module_state(**modules)
    tensors.update({f"optim/{k}": v for k, v in opt.state_tensors().items()})
    meta = {
        "role": role,
        "config": serialize_config(cfg),
        "config_hash": config_hash(cfg),
        "epoch": epoch,
        "in_channels": in_channels,
        "optimizer": opt.scalars(),
        "rng_state": rng.bit_generator.state,
    }
    meta.update(extra_meta or {})
    return Checkpoint(tensors, meta)


def _zero(dtype=T.DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


def train_teacher(
    cfg: RunConfig,
    dataset: Dataset,
    seed: int | None = None,
    test: Dataset | None = None,
    resume: Checkpoint | None = None,
) -> tuple[Checkpoint, RunMetrics]:
    """Cross-entropy training of the teacher preset."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    seed = cfg.seed if seed is None else seed
    cfg = cfg.replace(seed=seed)
    s = _seeds(seed)
    model = _net(cfg, "teacher", dataset.in_channels, s["teacher"])
    if resume is not None:
        model.load_state_dict(resume.section("model"))
    rng = np.random.default_rng(s["data"])
    params = _params(model=model)

    def compute(x, y):
        _, logits = model(x)
        task = T.cross_entropy(logits, y)
        z = _zero()
        return {"task": task, "kl": z, "tat": z, "pg": z, "ap": z, "total": task}

    opt, metrics = _fit(cfg, model, params, compute, dataset, test, rng, cfg.teacher_epochs, resume, [model])
    ckpt = _checkpoint(cfg, "teacher", dataset.in_channels, {"model": model}, opt, rng, cfg.teacher_epochs)
    return ckpt, metrics


def distill_student(
    cfg: RunConfig,
    teacher_ckpt: Checkpoint | str | Path,
    dataset: Dataset,
    seed: int | None = None,
    test: Dataset | None = None,
    resume: Checkpoint | None = None,
) -> tuple[Checkpoint, RunMetrics]:
    """Train the student (and its projectors) against a frozen teacher."""
    seed = cfg.seed if seed is None else seed
    cfg = cfg.replace(seed=seed)
    teacher, _ = model_from_checkpoint(teacher_ckpt, "teacher")
    teacher.eval()
    if teacher.spec.num_classes != dataset.num_classes:
        raise ValueError(f"teacher predicts {teacher.spec.num_classes} classes, dataset has {dataset.num_classes}")
    if teacher.spec.head != cfg.task:
        raise ValueError(f"teacher head {teacher.spec.head!r} does not match task {cfg.task!r}")

    s = _seeds(seed)
    student = _net(cfg, "student", dataset.in_channels, s["student"])
    c_t, c_s = teacher.spec.feature_channels, student.spec.feature_channels
    heads = DistillHeads(cfg, c_t, c_s, s["projectors"])
    if resume is not None:
        student.load_state_dict(resume.section("model"))
        heads.load_state_dict({k.replace("/", ".", 1): v for k, v in resume.tensors.items()
                               if k.split("/", 1)[0] in ("proj", "regressor", "pg_proj")})
    rng = np.random.default_rng(s["data"])
    params = _params(model=student, proj=heads.proj, regressor=heads.regressor, pg_proj=heads.pg_proj)
    kd = cfg.kd
    red = cfg.fm_reduction
    seg = cfg.task == "segmentation"

    def compute(x, y):
        with T.no_grad():
            t_feat, t_logits = teacher(x)
        s_feat, s_logits = student(x)
        task = T.cross_entropy(s_logits, y)
        z = _zero()
        out = {"task": task, "kl": z, "tat": z, "pg": z, "ap": z}
        if not seg:
            out["kl"] = kl_distill_loss(t_logits, s_logits, kd.tau, kd.kl_tau_square_correction)
        if cfg.distill == "fm":
            out["tat"] = fm_loss(heads.regressor(s_feat), t_feat, red)
        elif cfg.distill == "tat" and not seg:
            out["tat"] = tat_loss(s_feat, t_feat, heads.proj, red)
        elif cfg.distill == "tat":
            out["pg"] = patch_group_loss(s_feat, t_feat, cfg.patch_group, heads.pg_proj, red)
            out["ap"] = anchor_point_loss(s_feat, t_feat, cfg.anchor, heads.proj, red)
        if seg:
            out["total"] = total_loss_seg(task, out["pg"], out["ap"], cfg.seg_weights) + out["tat"] * kd.epsilon
        else:
            out["total"] = total_loss_cls(task, out["kl"], out["tat"], kd)
        return out

    opt, metrics = _fit(cfg, student, params, compute, dataset, test, rng, cfg.epochs, resume, [student, heads])
    ckpt = _checkpoint(
        cfg,
        "student",
        dataset.in_channels,
        {"model": student, "proj": heads.proj, "regressor": heads.regressor, "pg_proj": heads.pg_proj},
        opt,
        rng,
        cfg.epochs,
        {"teacher_channels": c_t, "student_channels": c_s},
    )
    return ckpt, metrics
