"""Adam, learning-rate schedules and the training loop."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint, rng_state_from_json, rng_state_to_json
from .errors import ConfigError, DomainError, IncompatibleError, NumericError
from .graph import SkeletonGraph, parse_graph
from .mdn import mixture_loss
from .network import BackboneConfig, GraphMDN, NetworkParams, param_specs
from .numeric import Rng

log = logging.getLogger(__name__)

# Rng stream indices; fixed so that replays line up.
STREAM_INIT, STREAM_SHUFFLE, STREAM_DROPOUT = 0, 1, 2


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 2
    kernels: int = 5
    dropout: float = 0.1
    num_blocks: int = 4
    hidden_dim: int = 128
    loss_mode: str = "pose"
    seed: int = 0
    schedule: str = "one_cycle"
    peak_lr: float = 6e-3
    pct_up: float = 0.3
    div_factor: float = 25.0
    final_div: float = 1e4
    initial_lr: float = 1e-3
    gamma: float = 0.96
    grad_clip: float | None = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.loss_mode not in ("pose", "node"):
            raise ConfigError(f"loss_mode must be 'pose' or 'node', got {self.loss_mode!r}")
        if self.schedule not in ("one_cycle", "exponential"):
            raise ConfigError(f"schedule must be 'one_cycle' or 'exponential', got {self.schedule!r}")
        if not 0.0 < self.pct_up < 1.0:
            raise ConfigError("pct_up must lie in (0, 1)")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive when set")
        self.backbone()  # validates the architecture fields

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.num_blocks, self.hidden_dim, self.dropout, self.kernels)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(names))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, val in d.items():
            default = names[key].default
            if key == "grad_clip":
                kwargs[key] = None if val is None else float(val)
            elif isinstance(default, bool) or isinstance(default, str):
                if not isinstance(val, str):
                    raise ConfigError(f"{key} must be a string")
                kwargs[key] = val
            elif isinstance(default, int):
                if isinstance(val, bool) or not isinstance(val, int):
                    raise ConfigError(f"{key} must be an integer")
                kwargs[key] = val
            else:
                if isinstance(val, bool) or not isinstance(val, (int, float)):
                    raise ConfigError(f"{key} must be a number")
                kwargs[key] = float(val)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text())
        except ValueError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)


WIDE_PRESET = {"num_blocks": 3, "hidden_dim": 512}


# -- schedules ---------------------------------------------------------------


@dataclass(frozen=True)
class OneCycleSchedule:
    """Cosine warm-up from ``peak/div_factor`` to ``peak`` over the first
    ``pct_up`` of steps, then cosine annealing to ``peak/final_div``."""

    total_steps: int
    peak_lr: float = 6e-3
    pct_up: float = 0.3
    div_factor: float = 25.0
    final_div: float = 1e4

    @property
    def peak_step(self) -> int:
        return min(max(int(round(self.pct_up * self.total_steps)), 0), self.total_steps - 1)

    def lr_at(self, step: int) -> float:
        if not 0 <= step < self.total_steps:
            raise DomainError(f"step {step} outside [0, {self.total_steps})")
        up = self.peak_step
        start = self.peak_lr / self.div_factor
        end = self.peak_lr / self.final_div
        if step <= up:
            if up == 0:
                return self.peak_lr
            frac = step / up
            return start + (self.peak_lr - start) * 0.5 * (1.0 - math.cos(math.pi * frac))
        frac = (step - up) / (self.total_steps - 1 - up)
        return end + (self.peak_lr - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass(frozen=True)
class ExponentialSchedule:
    """``initial_lr * gamma ** epoch`` with the epoch derived from the step."""

    total_steps: int
    steps_per_epoch: int
    initial_lr: float = 1e-3
    gamma: float = 0.96

    def lr_at(self, step: int) -> float:
        if not 0 <= step < self.total_steps:
            raise DomainError(f"step {step} outside [0, {self.total_steps})")
        return self.initial_lr * self.gamma ** (step // self.steps_per_epoch)


def lr_at(schedule, step: int) -> float:
    return schedule.lr_at(step)


def make_schedule(config: TrainConfig, steps_per_epoch: int):
    total = config.epochs * steps_per_epoch
    if config.schedule == "one_cycle":
        return OneCycleSchedule(total, config.peak_lr, config.pct_up, config.div_factor, config.final_div)
    return ExponentialSchedule(total, steps_per_epoch, config.initial_lr, config.gamma)


# -- Adam --------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float, mask=None):
    """One bias-corrected Adam update, in place. Returns ``(params, state)``.

    Non-finite gradients abort the step before anything is modified.
    ``mask`` (boolean) limits the update to trainable coordinates.
    """
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise DomainError("params, grads and moments must be aligned")
    bad = ~np.isfinite(grads)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NumericError(f"non-finite gradient at parameter {i}", index=i)
    if mask is not None:
        grads = np.where(mask, grads, 0.0)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1**state.step)
    v_hat = state.v / (1.0 - b2**state.step)
    update = lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if mask is not None:
        update = np.where(mask, update, 0.0)
    params -= update
    return params, state


def clip_grad_norm(grads: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grads))
    if norm > max_norm:
        return grads * (max_norm / norm)
    return grads


# -- training loop -----------------------------------------------------------


@dataclass
class LogRow:
    step: int
    epoch: int
    lr: float
    loss: float


@dataclass
class FitResult:
    network: GraphMDN
    log: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    @property
    def params(self) -> NetworkParams:
        return self.network.params


def steps_per_epoch(n: int, batch_size: int) -> int:
    """Full batches plus the remainder, unless the remainder is a lone
    sample trailing other batches (its batch-norm statistics would come
    from the K nodes of one pose only)."""
    full, rest = divmod(n, batch_size)
    return full + (1 if rest >= 2 or (full == 0 and rest > 0) else 0)


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "lr", "loss"])
        for r in rows:
            w.writerow([r.step, r.epoch, repr(r.lr), repr(r.loss)])


class Trainer:
    """Mutable training state that can be snapshotted at epoch ends."""

    def __init__(self, config: TrainConfig, skeleton: SkeletonGraph):
        self.config = config
        self.skeleton = skeleton
        self.net = GraphMDN(config.backbone(), skeleton)
        rng = Rng(config.seed)
        self.net.init_params(rng.stream(STREAM_INIT))
        self.shuffle_rng = rng.stream(STREAM_SHUFFLE)
        self.dropout_rng = rng.stream(STREAM_DROPOUT)
        self.adam = AdamState.zeros(len(self.net.params))
        self.epoch = 0
        self.step = 0
        self.trainable = self.net.params.trainable_mask()

    # snapshots

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.config.to_dict(),
            skeleton_hash=self.skeleton.hash,
            skeleton_text=self.skeleton.canonical_text(),
            arrays={"params": self.net.params.vector.copy(), "adam.m": self.adam.m.copy(), "adam.v": self.adam.v.copy()},
            meta={
                "epoch": self.epoch,
                "step": self.step,
                "adam_step": self.adam.step,
                "backbone": self.config.backbone().to_dict(),
                "node_names": list(self.skeleton.node_names),
                "rng": {
                    "shuffle": rng_state_to_json(Rng.get_state(self.shuffle_rng)),
                    "dropout": rng_state_to_json(Rng.get_state(self.dropout_rng)),
                },
            },
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, skeleton: SkeletonGraph | None = None) -> "Trainer":
        config = TrainConfig.from_dict(ckpt.config)
        if skeleton is None:
            skeleton = skeleton_from_checkpoint(ckpt)
        ckpt.validate_skeleton(skeleton.hash)
        t = cls(config, skeleton)
        t.net.params.vector[:] = ckpt.arrays["params"]
        t.adam.m[:] = ckpt.arrays["adam.m"]
        t.adam.v[:] = ckpt.arrays["adam.v"]
        t.adam.step = int(ckpt.meta["adam_step"])
        t.epoch = int(ckpt.meta["epoch"])
        t.step = int(ckpt.meta["step"])
        t.shuffle_rng = Rng.from_state(rng_state_from_json(ckpt.meta["rng"]["shuffle"]))
        t.dropout_rng = Rng.from_state(rng_state_from_json(ckpt.meta["rng"]["dropout"]))
        return t

    # one epoch

    def run_epoch(self, inputs, targets, schedule, on_step: Callable | None = None) -> tuple[float, list]:
        cfg = self.config
        n = inputs.shape[0]
        perm = self.shuffle_rng.permutation(n)
        rows = []
        total = 0.0
        for b in range(steps_per_epoch(n, cfg.batch_size)):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            x, y = inputs[idx], targets[idx]
            logits, cache = self.net.forward(x, training=True, rng=self.dropout_rng)
            try:
                loss, dlogits = mixture_loss(logits, y, cfg.kernels, cfg.loss_mode)
            except NumericError as exc:
                raise NumericError(f"epoch {self.epoch} batch {b}: {exc}", exc.index) from None
            if not np.isfinite(loss):
                raise NumericError(f"epoch {self.epoch} batch {b}: non-finite loss")
            grads = self.net.backward(cache, dlogits)
            bad = ~np.isfinite(grads)
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise NumericError(
                    f"epoch {self.epoch} batch {b}: non-finite gradient at {self.net.params.coordinate_name(i)}", i
                )
            if cfg.grad_clip is not None:
                grads = clip_grad_norm(grads, cfg.grad_clip)
            lr = schedule.lr_at(self.step)
            adam_step(self.adam, self.net.params.vector, grads, lr, self.trainable)
            self.net.update_running_stats(cache)
            row = LogRow(self.step, self.epoch, lr, float(loss))
            rows.append(row)
            total += float(loss)
            self.step += 1
            if on_step is not None:
                on_step(row)
        self.epoch += 1
        return total / max(len(rows), 1), rows


def skeleton_from_checkpoint(ckpt: Checkpoint) -> SkeletonGraph:
    g = parse_graph(ckpt.skeleton_text)
    names = ckpt.meta.get("node_names")
    if names and len(names) == g.node_count:
        g = SkeletonGraph(g.node_count, g.edges, tuple(names))
    return g


def network_from_checkpoint(ckpt: Checkpoint, skeleton: SkeletonGraph | None = None) -> GraphMDN:
    if skeleton is None:
        skeleton = skeleton_from_checkpoint(ckpt)
    ckpt.validate_skeleton(skeleton.hash)
    cfg = BackboneConfig(**ckpt.meta["backbone"])
    params = NetworkParams(param_specs(cfg, skeleton.node_count), ckpt.arrays["params"].copy())
    return GraphMDN(cfg, skeleton, params)


def _arrays(dataset, skeleton):
    k = skeleton.node_count
    x = np.asarray(dataset.inputs, dtype=np.float64).reshape(-1, k, 2)
    y = np.asarray(dataset.targets, dtype=np.float64).reshape(-1, k, 3)
    if x.shape[0] == 0:
        raise DomainError("cannot train on an empty dataset")
    return x, y


def fit(
    config: TrainConfig,
    dataset,
    skeleton: SkeletonGraph,
    resume: Checkpoint | None = None,
    checkpoint_dir=None,
    on_epoch: Callable | None = None,
    stop_after_epoch: int | None = None,
) -> FitResult:
    """Train a GraphMDN with Adam under the configured schedule.

    ``dataset`` needs ``inputs`` (N x 2K) and ``targets`` (N x 3K). A
    checkpoint is taken at the end of every epoch (kept in the result and,
    with ``checkpoint_dir``, written as ``epoch_XXX.ckpt``). Passing a
    checkpoint as ``resume`` continues that run; the result is bitwise equal
    to an uninterrupted run. ``stop_after_epoch`` ends early (for replay tests).
    """
    x, y = _arrays(dataset, skeleton)
    if resume is not None:
        if TrainConfig.from_dict(resume.config) != config:
            raise IncompatibleError("resume checkpoint was written with a different config")
        trainer = Trainer.from_checkpoint(resume, skeleton)
    else:
        trainer = Trainer(config, skeleton)
    schedule = make_schedule(config, steps_per_epoch(x.shape[0], config.batch_size))
    result = FitResult(trainer.net)
    last = config.epochs if stop_after_epoch is None else min(stop_after_epoch, config.epochs)
    while trainer.epoch < last:
        mean_loss, rows = trainer.run_epoch(x, y, schedule)
        result.log.extend(rows)
        result.epoch_losses.append(mean_loss)
        ckpt = trainer.checkpoint()
        result.checkpoints.append(ckpt)
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            ckpt.save(Path(checkpoint_dir) / f"epoch_{trainer.epoch:03d}.ckpt")
        log.info("epoch %d mean loss %.6f", trainer.epoch, mean_loss)
        if on_epoch is not None:
            on_epoch(trainer.epoch, mean_loss)
    return result
