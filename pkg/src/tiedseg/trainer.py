"""SGD with momentum, learning-rate schedules and staged training.

A stage plan is a list of entries, each training one stage network for a
number of epochs. Between entries the surviving parameters are carried over
by name. When the stage grows, the class-map head keeps its weights for the
channels it already saw and starts the new deconvolution channels at zero,
so a new stage begins as the function the previous one ended with. Each
entry starts with a fresh optimizer.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from tiedseg import layers as L
from tiedseg.data import Sample, augment, training_arrays
from tiedseg.errors import ConfigError, InputError, StateError
from tiedseg.model import NetworkConfig, StageNet, TiedParamStore, build, read_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

POLICIES = ("all", "new", "tied")


@dataclass
class StagePlan:
    stage: int
    epochs: int
    lr0: float
    schedule: str = "constant"  # or "halve"
    halve_every: int = 20
    trainable: str | list[str] = "new"

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "constant":
            return self.lr0
        if self.schedule == "halve":
            return self.lr0 * 0.5 ** (epoch // self.halve_every)
        raise ConfigError(f"unknown schedule {self.schedule!r}")


@dataclass
class TrainConfig:
    stages: list[StagePlan] = field(default_factory=list)
    momentum: float = 0.9
    batch_size: int = 16
    seed: int = 0
    crop_margin: int = 0
    mirror: bool = False
    widen_head: bool = True

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        last = -1
        for p in self.stages:
            if p.lr0 < 0:
                raise ConfigError("lr0 must be non-negative")
            if p.stage < last:
                raise ConfigError("stage plan must be in ascending stage order")
            if isinstance(p.trainable, str) and p.trainable not in POLICIES:
                raise ConfigError(f"trainable policy must be one of {POLICIES} or a name list")
            p.lr_at(0)
            last = p.stage

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        d = dict(d)
        try:
            stages = [StagePlan(**s) for s in d.pop("stages", [])]
            return cls(stages=stages, **d)
        except TypeError as exc:
            raise ConfigError(f"malformed train config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptState:
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class EpochMetrics:
    loss: float
    accuracy: float


# --------------------------------------------------------------------------
# objective
# --------------------------------------------------------------------------


def loss_and_grad(y: np.ndarray, t: np.ndarray, config: NetworkConfig) -> tuple[float, np.ndarray]:
    if config.task == "binary":
        return L.categorical_ce_loss(y, t)
    return L.bce_multilabel_loss(y, t, link=config.loss_link)


def predict_labels(y: np.ndarray, config: NetworkConfig) -> np.ndarray:
    """Image-level 0/1 predictions from pooled scores."""
    if config.task == "binary":
        out = np.zeros_like(y)
        out[np.arange(len(y)), y.argmax(axis=1)] = 1.0
        return out
    threshold = 0.0 if config.loss_link == "logistic" else 0.5
    return (y >= threshold).astype(y.dtype)


def label_accuracy(y: np.ndarray, t: np.ndarray, config: NetworkConfig) -> float:
    """Fraction of images whose whole label vector is predicted exactly."""
    return float(np.mean(np.all(predict_labels(y, config) == t, axis=1)))


# --------------------------------------------------------------------------
# optimization
# --------------------------------------------------------------------------


def sgd_step(store: TiedParamStore, opt: OptState, lr: float, trainable) -> None:
    """v <- momentum*v - lr*g ; p <- p + v for trainable parameters, then zero grads."""
    for name in sorted(trainable):
        if name not in store.grads:
            raise StateError(f"no gradient for trainable parameter {name}")
        p = store.params[name]
        v = opt.velocity.get(name)
        if v is None or v.shape != p.shape:
            v = opt.velocity[name] = np.zeros_like(p)
        v *= opt.momentum
        v -= lr * store.grads[name]
        p += v
    store.zero_grad()


def train_epoch(
    net: StageNet,
    samples: Sequence[Sample],
    cfg: TrainConfig,
    opt: OptState,
    lr: float,
    rng: np.random.Generator,
) -> EpochMetrics:
    if not samples:
        raise InputError("empty dataset")
    order = rng.permutation(len(samples))
    expected = (net.config.in_channels, *net.config.input_size)
    total_loss = 0.0
    correct = 0.0
    for start in range(0, len(order), cfg.batch_size):
        # masks are dropped here so nothing below can reach them
        batch = [Sample(samples[i].image, samples[i].label, None, samples[i].id) for i in order[start: start + cfg.batch_size]]
        if cfg.crop_margin or cfg.mirror:
            batch = [augment(s, rng, cfg.crop_margin, cfg.mirror) for s in batch]
        for s in batch:
            if s.image.shape[1:] != expected:
                raise InputError(f"sample {s.id}: image shape {s.image.shape[1:]} != expected {expected}")
        x, t = training_arrays(batch)
        y, _ = net.forward(x)
        loss, d_y = loss_and_grad(y, t, net.config)
        net.backward(d_y)
        sgd_step(net.store, opt, lr, net.trainable)
        total_loss += loss * len(batch)
        correct += label_accuracy(y, t, net.config) * len(batch)
    net.clear_cache()
    return EpochMetrics(total_loss / len(samples), correct / len(samples))


def resolve_trainable(net: StageNet, policy, loaded: Sequence[str]) -> set[str]:
    """Parameter names updated at this stage under a plan policy."""
    names = net.store.names()
    if isinstance(policy, list):
        chosen = {n for n in names if any(n == p or n.startswith(p + ".") or n.startswith(p + "_") for p in policy)}
    elif policy == "all":
        chosen = set(names)
    elif policy == "new":
        loaded = set(loaded)
        chosen = {n for n in names if n not in loaded}
        for view, partner in net.store.ties.items():
            if view.split(".")[0].split("_")[0] == f"deconv{net.stage}":
                chosen.add(partner)
        chosen |= {"head.weight", "head.bias"}
    elif policy == "tied":
        chosen = {n for n in names if n.startswith("deconv") or n.startswith("head.")}
        chosen |= set(net.store.ties.values())
    else:
        raise ConfigError(f"unknown trainable policy {policy!r}")
    return chosen


def widen_head(net: StageNet, params: dict[str, np.ndarray]) -> list[str]:
    """Copy a narrower head into the leading input channels of ``net``'s head.

    Stacked maps are ordered top conv first, then deconv1, deconv2, ..., so
    a previous stage's channels are a prefix of this stage's.
    """
    old_w, old_b = params.get("head.weight"), params.get("head.bias")
    if old_w is None or old_b is None:
        return []
    w = net.store.params["head.weight"]
    if old_w.shape[0] != w.shape[0] or old_w.shape[2:] != w.shape[2:] or old_w.shape[1] > w.shape[1]:
        return []
    w[...] = 0.0
    w[:, : old_w.shape[1]] = old_w
    net.store.params["head.bias"][...] = old_b
    return ["head.weight", "head.bias"]


def train_stage_plan(
    config: NetworkConfig,
    cfg: TrainConfig,
    samples: Sequence[Sample],
    out_dir,
    base: dict[str, np.ndarray] | None = None,
    eval_fn=None,
) -> dict[str, np.ndarray]:
    """Run every plan entry; write ``stage<N>.ckpt`` and ``metrics.csv``.

    Returns the final parameters (``base`` unchanged for an empty plan).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")
    (out / "plan.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    params = base
    prev_stage = None
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0xD5])))
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "epoch", "loss", "accuracy", "lr"])
        for entry_idx, entry in enumerate(cfg.stages):
            init_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, entry.stage, entry_idx])))
            widen = prev_stage is not None and prev_stage != entry.stage
            net = build(config, entry.stage, init_rng)
            loaded = net.load_state(params, exclude=("head",) if widen else ()) if params is not None else []
            if widen and cfg.widen_head:
                widen_head(net, params)
            net.set_trainable(resolve_trainable(net, entry.trainable, loaded))
            log.info("stage %d: training %d parameter tensors", entry.stage, len(net.trainable))
            opt = OptState(cfg.momentum)
            for epoch in range(entry.epochs):
                lr = entry.lr_at(epoch)
                m = train_epoch(net, samples, cfg, opt, lr, rng)
                writer.writerow([entry.stage, epoch, repr(m.loss), repr(m.accuracy), repr(lr)])
                fh.flush()
                log.info("stage %d epoch %d loss %.5f acc %.4f lr %g", entry.stage, epoch, m.loss, m.accuracy, lr)
            params = net.store.state()
            save_checkpoint(params, out / f"stage{entry.stage}.ckpt")
            if eval_fn is not None:
                eval_fn(net, entry.stage)
            prev_stage = entry.stage
    return params if params is not None else {}


def load_params(path) -> dict[str, np.ndarray]:
    return read_checkpoint(path)
