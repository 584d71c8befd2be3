"""SGD training, checkpoints and the frozen-teacher distillation loop."""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .data import Sample, augment
from .losses import (
    LossWeights,
    batch_channel_kld,
    batch_i2ckd,
    batch_task_cross_entropy,
    total_loss,
)
from .metrics import ConfusionMatrix, miou
from .nn import ConfigError, NetConfig, SegNetwork, strict_from_dict
from .tensor import load_stf, save_stf

log = logging.getLogger(__name__)

EVAL_BATCH = 10


class TrainingError(RuntimeError):
    """Raised when training diverges."""


@dataclass
class OptimConfig:
    lr0: float = 0.02
    momentum: float = 0.9
    total_iter: int = 2000
    poly_power: float = 0.9
    batch_size: int = 8

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.total_iter < 1:
            raise ConfigError("total_iter must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "OptimConfig":
        return strict_from_dict(cls, data, "optim config")


@dataclass
class DistillConfig:
    teacher_checkpoint: str
    student: NetConfig = field(default_factory=lambda: NetConfig(widths=[16, 32], projection=64))
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    eval_every: int = 100
    augment: bool = True


def poly_lr(cfg: OptimConfig, iteration: int) -> float:
    """lr0 * (1 - iter/total_iter) ** poly_power."""
    if not 0 <= iteration <= cfg.total_iter:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.total_iter}]")
    return cfg.lr0 * (1.0 - iteration / cfg.total_iter) ** cfg.poly_power


def sgd_step(params, grads, velocity, lr: float, momentum: float):
    """Classic momentum: v <- mu*v + g; p <- p - lr*v.

    Returns new (params, velocity) lists; nothing is modified if any
    gradient is non-finite.
    """
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient; step aborted")
    new_v = [momentum * v + g for v, g in zip(velocity, grads)]
    new_p = [p - lr * v for p, v in zip(params, new_v)]
    return new_p, new_v


class SGD:
    def __init__(self, parameters, momentum: float):
        self.parameters = [p for p in parameters if p.requires_grad]
        self.momentum = momentum
        self.velocity = {p.name: np.zeros_like(p.value) for p in self.parameters}

    def step(self, lr: float) -> None:
        params, vel = sgd_step(
            [p.value for p in self.parameters],
            [p.grad for p in self.parameters],
            [self.velocity[p.name] for p in self.parameters],
            lr,
            self.momentum,
        )
        for p, value, v in zip(self.parameters, params, vel):
            p.value = value
            self.velocity[p.name] = v


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, net: SegNetwork, optimizer: Optional[SGD] = None, state: Optional[dict] = None) -> None:
    """One STF1 file per parameter (and velocity slot) plus manifest.json."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = []
    for p in net.parameters:
        save_stf(path / f"{p.name}.stf", p.value, "f64")
        names.append(p.name)
    slots = []
    if optimizer is not None:
        for name, v in optimizer.velocity.items():
            fname = f"velocity.{name}.stf"
            save_stf(path / fname, v, "f64")
            slots.append({"parameter": name, "file": fname})
    state = dict(state or {})
    manifest = {
        "config": net.config.to_dict(),
        "parameters": names,
        "training_state": {
            "iter": state.pop("iter", 0),
            "optimizer": None
            if optimizer is None
            else {"type": "sgd_momentum", "momentum": optimizer.momentum, "slots": slots},
            **state,
        },
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[SegNetwork, dict]:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    net = SegNetwork(NetConfig.from_dict(manifest["config"]))
    net.load_values({name: load_stf(path / f"{name}.stf") for name in manifest["parameters"]})
    return net, manifest


# ---------------------------------------------------------------- loops


def evaluate_network(net: SegNetwork, images: np.ndarray, masks: np.ndarray) -> tuple[float, ConfusionMatrix]:
    cm = ConfusionMatrix(net.config.num_classes)
    preds = net.predict(images, batch_size=EVAL_BATCH)
    for pred, gt in zip(preds, masks):
        cm.update(pred, gt)
    return miou(cm), cm


def check_pair(student: NetConfig, teacher: NetConfig) -> None:
    """Configuration errors that must surface before any training step."""
    if student.num_classes != teacher.num_classes:
        raise ConfigError(
            f"student predicts {student.num_classes} classes, teacher {teacher.num_classes}"
        )
    if student.feature_channels != teacher.feature_channels:
        raise ConfigError(
            f"student features have {student.feature_channels} channels but the teacher has "
            f"{teacher.feature_channels}; set student projection to {teacher.feature_channels}"
        )


def distill_objective(features, scores, masks, weights: LossWeights, teacher_out=None):
    """Build the weighted training loss node and its logged parts.

    Parts with zero weight are not evaluated and are logged as 0.
    """
    num_classes = scores.value.shape[1]
    l_task, g_task = batch_task_cross_entropy(scores.value, masks)
    parts = {"l_task": l_task, "l_sm": 0.0, "l_i2ckd": 0.0}
    task_node = ad.external(l_task, [scores], [g_task])
    sm_node = i2_node = ad.constant(0.0)
    active_pairs = 0
    if weights.lambda_sm > 0 or weights.lambda_i2ckd > 0:
        if teacher_out is None:
            raise ConfigError("distillation terms need teacher outputs")
        feats_t, scores_t = teacher_out
    if weights.lambda_sm > 0:
        l_sm, g_sm = batch_channel_kld(scores_t, scores.value, weights.temperature)
        parts["l_sm"] = l_sm
        sm_node = ad.external(l_sm, [scores], [g_sm])
    if weights.lambda_i2ckd > 0:
        l_i2, g_i2, stats = batch_i2ckd(feats_t, features.value, masks, num_classes, weights.margin)
        parts["l_i2ckd"] = l_i2
        active_pairs = stats["active_pairs"]
        i2_node = ad.external(l_i2, [features], [g_i2])
    total = ad.weighted_sum(
        [i2_node, sm_node, task_node], [weights.lambda_i2ckd, weights.lambda_sm, 1.0]
    )
    parts["l_total"] = total_loss(parts, weights)
    parts["active_pairs"] = active_pairs
    return total, parts


@dataclass
class TrainResult:
    net: SegNetwork
    optimizer: SGD
    log: list[dict]
    final_miou: float


def _batch_indices(order_rng, n, batch_size, state):
    idx = []
    while len(idx) < batch_size:
        if state["cursor"] == n:
            state["perm"], state["cursor"] = order_rng.permutation(n), 0
        take = min(batch_size - len(idx), n - state["cursor"])
        idx.extend(state["perm"][state["cursor"] : state["cursor"] + take].tolist())
        state["cursor"] += take
    return idx


def train_networks(
    nets: list[SegNetwork],
    weights: list[LossWeights],
    train_data: tuple[np.ndarray, np.ndarray],
    val_data: tuple[np.ndarray, np.ndarray],
    optim: OptimConfig,
    seed: int,
    teacher: Optional[SegNetwork] = None,
    eval_every: int = 100,
    use_augment: bool = True,
    on_record: Optional[Callable[[int, dict], None]] = None,
) -> list[TrainResult]:
    """Train several networks in lockstep on one shared batch stream.

    Batch order and augmentation draw from streams derived from ``seed``
    alone, so every network sees exactly the batches it would see if it
    were trained on its own; results are bit-identical to separate runs.
    The teacher, if given, is only ever run forward, once per batch.
    """
    images, masks = train_data
    n = len(images)
    order_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    aug_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA06]))
    needs = [w.lambda_sm > 0 or w.lambda_i2ckd > 0 for w in weights]
    for net, need in zip(nets, needs):
        if need:
            if teacher is None:
                raise ConfigError("non-zero distillation weights need a teacher")
            check_pair(net.config, teacher.config)

    opts = [SGD(net.parameters, optim.momentum) for net in nets]
    records: list[list[dict]] = [[] for _ in nets]
    finals = [float("nan")] * len(nets)
    state = {"perm": order_rng.permutation(n), "cursor": 0}
    for it in range(optim.total_iter):
        idx = _batch_indices(order_rng, n, optim.batch_size, state)
        if use_augment:
            batch = [augment(Sample(images[i], masks[i], ""), aug_rng) for i in idx]
            x = np.stack([s.image for s in batch])
            m = np.stack([s.mask for s in batch])
        else:
            x, m = images[idx], masks[idx]
        lr = poly_lr(optim, it)
        teacher_out = None
        if any(needs):
            with ad.no_grad():
                ft, st = teacher.forward(x)
            teacher_out = (ft.value, st.value)
        done = it + 1
        evaluate_now = done % eval_every == 0 or done == optim.total_iter

        for k, (net, w, opt) in enumerate(zip(nets, weights, opts)):
            net.zero_grads()
            features, scores = net.forward(x)
            loss, parts = distill_objective(
                features, scores, m, w, teacher_out if needs[k] else None
            )
            if not np.isfinite(parts["l_total"]):
                raise TrainingError(f"loss diverged at iteration {it}: {parts}")
            ad.backward(loss)
            del features, scores, loss
            opt.step(lr)
            if evaluate_now:
                finals[k], _ = evaluate_network(net, *val_data)
                rec = {
                    "iter": done,
                    "lr": lr,
                    "l_task": parts["l_task"],
                    "l_sm": parts["l_sm"],
                    "l_i2ckd": parts["l_i2ckd"],
                    "l_total": parts["l_total"],
                    "val_miou": finals[k],
                }
                records[k].append(rec)
                log.info(
                    "[%d] iter %d lr %.5f task %.4f sm %.4f i2ckd %.4f total %.4f val mIoU %.4f",
                    k, done, lr, rec["l_task"], rec["l_sm"], rec["l_i2ckd"], rec["l_total"], finals[k],
                )
                if on_record is not None:
                    on_record(k, rec)
    return [TrainResult(net, opt, rec, fin) for net, opt, rec, fin in zip(nets, opts, records, finals)]


def train_network(net, train_data, val_data, optim, weights, seed, teacher=None,
                  eval_every=100, use_augment=True) -> TrainResult:
    """Single-network form of :func:`train_networks`."""
    return train_networks([net], [weights], train_data, val_data, optim, seed, teacher,
                          eval_every, use_augment)[0]


def write_log(path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def train_teacher(train_data, val_data, net_config: NetConfig, optim: OptimConfig, seed: int = 0,
                  eval_every: int = 100, use_augment: bool = True) -> TrainResult:
    """Train a network on the task loss alone."""
    net = SegNetwork(net_config, seed=seed)
    return train_network(net, train_data, val_data, optim, LossWeights(0.0, 0.0),
                         seed, eval_every=eval_every, use_augment=use_augment)


def distill_student(train_data, val_data, cfg: DistillConfig, optim: OptimConfig) -> TrainResult:
    teacher, _ = load_checkpoint(cfg.teacher_checkpoint)
    teacher.freeze()
    check_pair(cfg.student, teacher.config)
    student = SegNetwork(cfg.student, seed=cfg.seed)
    return train_network(student, train_data, val_data, optim, cfg.weights, cfg.seed,
                         teacher=teacher, eval_every=cfg.eval_every, use_augment=cfg.augment)


def result_state(result: TrainResult, optim: OptimConfig) -> dict:
    return {"iter": optim.total_iter, "val_miou": result.final_miou}


def config_dict(obj) -> dict:
    return dataclasses.asdict(obj)
