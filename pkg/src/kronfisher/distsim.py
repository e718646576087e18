"""In-process simulation of multi-worker data-parallel training.

A global batch is cut into per-worker shards; each worker replica runs its own
forward/backward, then gradients and raw Kronecker factors are averaged in a
fixed worker-id order (adjacent pairwise reduction) so runs are bitwise
reproducible regardless of how the workers would be scheduled. One optimizer
step is applied to the aggregate and every replica receives the same updated
parameters.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .kfactor import KFState, build_efims, compute_raw_factors, ema_update
from .nn import Network, accuracy, nll_softmax_loss


def pairwise_reduce(values):
    """Sum a list by repeatedly adding adjacent pairs: ((v0+v1)+(v2+v3))..."""
    if not values:
        raise ValidationError("cannot reduce an empty list")
    level = list(values)
    while len(level) > 1:
        nxt = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def aggregate_kfs(locals_):
    """Arithmetic mean of per-worker (H_diag, S_diag) pairs, fixed order."""
    if not locals_:
        raise ValidationError("no worker factors to aggregate")
    k = len(locals_)
    h_list = [h for h, _ in locals_]
    s_list = [s for _, s in locals_]
    shape = h_list[0].shape
    if any(h.shape != shape for h in h_list):
        raise ValidationError("worker factors are not congruent")
    return pairwise_reduce(h_list) / k, pairwise_reduce(s_list) / k


def _mean_grad_dicts(grad_dicts):
    k = len(grad_dicts)
    out = {}
    for lid in grad_dicts[0]:
        out[lid] = {}
        for key in grad_dicts[0][lid]:
            out[lid][key] = pairwise_reduce([g[lid][key] for g in grad_dicts]) / k
    return out


class WorkerShard:
    """One simulated worker: an id, its batch slice, and a network replica."""

    def __init__(self, worker_id: int, net: Network):
        self.worker_id = worker_id
        self.net = net

    def local_pass(self, xb, yb):
        logits = self.net.forward(xb, training=True)
        loss, dlogits = nll_softmax_loss(logits, yb)
        grads = self.net.backward(dlogits)
        raw = compute_raw_factors(self.net)
        return loss, accuracy(logits, yb), grads, raw


def shard_slices(batch_size: int, k: int, mode: str = "strict"):
    """Contiguous per-worker index ranges covering [0, batch_size)."""
    if k < 1:
        raise ValidationError("need at least one worker")
    if mode == "strict":
        if batch_size % k:
            raise ValidationError(f"batch of {batch_size} not divisible by {k} workers")
        size = batch_size // k
        return [slice(i * size, (i + 1) * size) for i in range(k)]
    if mode == "weighted":
        base, extra = divmod(batch_size, k)
        bounds = [0]
        for i in range(k):
            bounds.append(bounds[-1] + base + (1 if i < extra else 0))
        return [slice(bounds[i], bounds[i + 1]) for i in range(k)]
    raise ValidationError(f"unknown shard mode {mode!r}")


class DistributedExecutor:
    """Owns the worker replicas and performs one synchronized global step."""

    def __init__(self, net: Network, k: int, mode: str = "strict"):
        if k < 1:
            raise ValidationError("worker count must be >= 1")
        self.k = k
        self.mode = mode
        self.master = net
        self.replicas = [WorkerShard(i, net.clone()) for i in range(k)]

    def sync_replicas(self):
        params = self.master.get_params()
        for shard in self.replicas:
            shard.net.set_params(params)

    def step(self, xb, yb, kf_state: KFState | None, lam: float,
             apply_update, lr: float, use_kf: bool):
        """One distributed step; ``apply_update(params, grads, efims, lr)``.

        Returns ``(loss, accuracy)`` averaged over workers. Factor EMAs are
        applied once, to the aggregated raw factors.
        """
        slices = shard_slices(xb.shape[0], self.k, self.mode)
        weights = [sl.stop - sl.start for sl in slices]
        losses, accs, grad_dicts, raw_dicts = [], [], [], []
        self.sync_replicas()
        for shard, sl in zip(self.replicas, slices):
            loss, acc, grads, raw = shard.local_pass(xb[sl], yb[sl])
            losses.append(loss)
            accs.append(acc)
            grad_dicts.append(grads)
            raw_dicts.append(raw)

        if self.mode == "weighted" and len(set(weights)) > 1:
            total = sum(weights)
            scaled = []
            for w, g in zip(weights, grad_dicts):
                scaled.append({lid: {key: (w / total) * arr * self.k for key, arr in grp.items()}
                               for lid, grp in g.items()})
            grads = _mean_grad_dicts(scaled)
        else:
            grads = _mean_grad_dicts(grad_dicts)

        efims = None
        if use_kf:
            agg = {}
            for lid in raw_dicts[0]:
                agg[lid] = aggregate_kfs([raw[lid] for raw in raw_dicts])
            ema_update(kf_state, agg)
            efims = build_efims(kf_state, lam, self.master)

        params = {lid: layer.params for lid, layer in self.master.parametric_layers()}
        apply_update(params, grads, efims, lr)
        self.sync_replicas()
        loss = pairwise_reduce(losses) / self.k
        acc = float(np.dot(weights, accs) / sum(weights))
        return loss, acc

    def replica_params_identical(self) -> bool:
        ref = self.master.get_params()
        for shard in self.replicas:
            other = shard.net.get_params()
            for lid in ref:
                for key in ref[lid]:
                    if not np.array_equal(ref[lid][key], other[lid][key]):
                        return False
        return True
