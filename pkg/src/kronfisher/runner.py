"""Training loop shared by the CLI commands and the acceptance experiments."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_io import Dataset, batch_iter
from .distsim import DistributedExecutor
from .errors import DivergenceError, ValidationError
from .kfactor import KFState, build_efims, compute_raw_factors, ema_update
from .nn import Network, accuracy, build_network, nll_softmax_loss
from .optim import (
    AdamState, AdaFisherState, Constant, Cosine, SgdState, StepLR,
    adafisher_step, adam_step, adamw_step, schedule_lr, sgd_momentum_step,
)
from .tensor import SeededRng

METRICS_HEADER = ["step", "epoch", "split", "loss", "accuracy", "lr",
                  "step_time_ms", "optimizer", "seed"]

FISHER_OPTIMIZERS = ("adafisher", "adafisherw")


@dataclass
class OptimizerSpec:
    name: str = "adafisher"
    alpha: float = 0.001
    beta: float = 0.9
    gamma: float = 0.8
    lam: float = 0.001
    kappa: float = 0.0005
    eps: float = 1e-8
    beta2: float = 0.999


@dataclass
class RunResult:
    rows: list = field(default_factory=list)
    final_params: dict = field(default_factory=dict)
    kf_snapshots: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)
    trajectory_losses: list = field(default_factory=list)
    mean_step_ms: float = 0.0
    best_test_acc: float = 0.0
    final_loss: float = float("nan")


def make_schedule(spec: dict | None, epochs: int):
    if not spec or spec.get("kind", "constant") == "constant":
        return Constant()
    kind = spec["kind"]
    if kind == "step":
        return StepLR(int(spec.get("period", max(epochs // 3, 1))), float(spec.get("factor", 0.5)))
    if kind == "cosine":
        return Cosine(int(spec.get("t_max", epochs)), float(spec.get("alpha_min", 0.0)))
    raise ValidationError(f"unknown schedule kind {kind!r}")


class Trainer:
    """One model + one optimizer, stepping over batches with optional workers."""

    def __init__(self, net: Network, opt: OptimizerSpec, seed: int,
                 workers: int = 1, shard_mode: str = "strict"):
        self.net = net
        self.opt = opt
        self.seed = seed
        self.name = opt.name
        if self.name not in ("adafisher", "adafisherw", "adam", "adamw", "sgd"):
            raise ValidationError(f"unknown optimizer {opt.name!r}")
        self.use_kf = self.name in FISHER_OPTIMIZERS
        params = self._params()
        self.kf_state = KFState.for_network(net, opt.gamma) if self.use_kf else None
        if self.name in FISHER_OPTIMIZERS:
            self.state = AdaFisherState.for_params(
                params, alpha=opt.alpha, beta=opt.beta, lam=opt.lam, kappa=opt.kappa)
        elif self.name in ("adam", "adamw"):
            self.state = AdamState.for_params(
                params, beta1=opt.beta, beta2=opt.beta2, eps=opt.eps, kappa=opt.kappa)
        else:
            self.state = SgdState.for_params(params, momentum=opt.beta)
        self.executor = DistributedExecutor(net, workers, shard_mode) if workers > 1 else None
        self.global_step = 0
        self._step_times: list[float] = []

    def _params(self):
        return {lid: layer.params for lid, layer in self.net.parametric_layers()}

    def _apply_update(self, params, grads, efims, lr):
        if self.name == "adafisher":
            adafisher_step(self.state, params, grads, efims, lr, variant="plain")
        elif self.name == "adafisherw":
            adafisher_step(self.state, params, grads, efims, lr, variant="w")
        elif self.name == "adam":
            adam_step(self.state, params, grads, lr)
        elif self.name == "adamw":
            adamw_step(self.state, params, grads, lr)
        else:
            sgd_momentum_step(self.state, params, grads, lr)

    def step(self, xb, yb, lr: float):
        """One optimization step; returns (loss, accuracy).

        IEEE overflow inside a diverging run is tolerated arithmetic; the
        non-finite loss guard below converts it into a DivergenceError.
        """
        t0 = time.perf_counter()
        with np.errstate(over="ignore", invalid="ignore"):
            if self.executor is not None:
                loss, acc = self.executor.step(
                    xb, yb, self.kf_state, self.opt.lam, self._apply_update, lr, self.use_kf)
            else:
                logits = self.net.forward(xb, training=True)
                loss, dlogits = nll_softmax_loss(logits, yb)
                acc = accuracy(logits, yb)
                grads = self.net.backward(dlogits)
                efims = None
                if self.use_kf:
                    ema_update(self.kf_state, compute_raw_factors(self.net))
                    efims = build_efims(self.kf_state, self.opt.lam, self.net)
                self._apply_update(self._params(), grads, efims, lr)
        self._step_times.append((time.perf_counter() - t0) * 1e3)
        self.global_step += 1
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {self.global_step}")
        return loss, acc

    def evaluate(self, ds: Dataset, batch_size: int):
        losses, accs, weights = [], [], []
        with np.errstate(over="ignore", invalid="ignore"):
            for idx in batch_iter(ds, min(batch_size, ds.n), seed=0, shuffle=False):
                logits = self.net.forward(ds.features[idx], training=False)
                loss, _ = nll_softmax_loss(logits, ds.labels[idx])
                losses.append(loss)
                accs.append(accuracy(logits, ds.labels[idx]))
                weights.append(len(idx))
        total = float(sum(weights))
        return (float(np.dot(weights, losses) / total), float(np.dot(weights, accs) / total))

    @property
    def mean_step_ms(self) -> float:
        return float(np.mean(self._step_times)) if self._step_times else 0.0


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(SeededRng(seed).spawn(1000 + epoch).seed)


def train_run(model_spec, opt: OptimizerSpec, train_ds: Dataset, test_ds: Dataset | None,
              epochs: int, batch_size: int, seed: int, schedule=None, workers: int = 1,
              shard_mode: str = "strict", shuffle: bool = True, tracker=None,
              record_timings: bool = False, log_every: int = 0,
              snapshot_every: int = 0, on_epoch_end=None) -> RunResult:
    """Run one training job and collect metrics rows plus side artifacts.

    ``tracker`` is ``(layer_id, [(j, k), (j, k)])`` naming exactly two weight
    coordinates whose per-epoch history feeds the landscape export.
    """
    net = build_network(model_spec).init_params(SeededRng(seed))
    schedule = schedule if schedule is not None else Constant()
    trainer = Trainer(net, opt, seed, workers=workers, shard_mode=shard_mode)
    result = RunResult()
    if tracker is not None and len(tracker[1]) != 2:
        raise ValidationError("tracker must name exactly 2 weight coordinates")

    def _record_tracker(epoch_loss):
        lid, coords = tracker
        w = net.layers[lid].params["weight"]
        result.trajectory.append([float(w[j, k]) for j, k in coords])
        result.trajectory_losses.append(epoch_loss)

    for epoch in range(epochs):
        lr = schedule_lr(schedule, epoch, opt.alpha)
        epoch_losses, epoch_accs = [], []
        batches = batch_iter(train_ds, batch_size, _epoch_seed(seed, epoch), shuffle)
        for i, idx in enumerate(batches):
            loss, acc = trainer.step(train_ds.features[idx], train_ds.labels[idx], lr)
            epoch_losses.append(loss)
            epoch_accs.append(acc)
            # the epoch-end row owns the final step, keeping steps strictly ordered
            if log_every and trainer.global_step % log_every == 0 and i < len(batches) - 1:
                result.rows.append(_row(trainer, epoch, "train", loss, acc, lr, record_timings))
        train_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        train_acc = float(np.mean(epoch_accs)) if epoch_accs else float("nan")
        if test_ds is not None:
            ev_loss, ev_acc = trainer.evaluate(test_ds, batch_size)
            result.rows.append(_row(trainer, epoch, "test", ev_loss, ev_acc, lr, record_timings))
            result.best_test_acc = max(result.best_test_acc, ev_acc)
            result.final_loss = ev_loss
        else:
            result.rows.append(_row(trainer, epoch, "train", train_loss, train_acc, lr, record_timings))
            result.final_loss = train_loss
        if tracker is not None:
            _record_tracker(train_loss)
        if trainer.use_kf and snapshot_every and (epoch + 1) % snapshot_every == 0:
            result.kf_snapshots.append((epoch, trainer.kf_state.snapshot()))
        if on_epoch_end is not None:
            on_epoch_end(epoch, trainer)
    if trainer.use_kf:
        result.kf_snapshots.append((epochs, trainer.kf_state.snapshot()))
    result.final_params = net.get_params()
    result.mean_step_ms = trainer.mean_step_ms
    return result


def _row(trainer: Trainer, epoch: int, split: str, loss: float, acc: float,
         lr: float, record_timings: bool) -> dict:
    timed = record_timings and split == "train" and trainer._step_times
    return {
        "step": trainer.global_step,
        "epoch": epoch,
        "split": split,
        "loss": loss,
        "accuracy": acc,
        "lr": lr,
        "step_time_ms": trainer._step_times[-1] if timed else 0.0,
        "optimizer": trainer.name,
        "seed": trainer.seed,
    }


def write_metrics_csv(rows, path):
    """Append-only metrics file; floats via repr so bytes are reproducible."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow([
                row["step"], row["epoch"], row["split"], repr(float(row["loss"])),
                repr(float(row["accuracy"])), repr(float(row["lr"])),
                repr(float(row["step_time_ms"])), row["optimizer"], row["seed"],
            ])


def save_params_json(params, path):
    payload = {str(lid): {k: v.tolist() for k, v in group.items()} for lid, group in params.items()}
    with open(path, "w") as fh:
        json.dump(payload, fh)


def save_snapshot_json(snapshot, path):
    with open(path, "w") as fh:
        json.dump(snapshot, fh)


def load_snapshot_json(path):
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValidationError("snapshot must be a list of layer records")
    for rec in data:
        for key in ("layer_id", "H_diag", "S_diag", "step"):
            if key not in rec:
                raise ValidationError(f"snapshot record missing {key!r}")
    return data


def ensure_out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out
