"""Cross-module integration: norm layers inside the Fisher loop, conv factor
math under stride/padding, weighted sharding."""

import numpy as np

from kronfisher.data_io import Dataset
from kronfisher.distsim import DistributedExecutor, _mean_grad_dicts
from kronfisher.kfactor import build_efims, layer_kf_diag
from kronfisher.nn import BatchNorm, Conv2D, build_network, im2col, nll_softmax_loss
from kronfisher.runner import OptimizerSpec, Trainer, train_run
from kronfisher.tensor import SeededRng, gaussian_fill


class TestNormLayersInFisherLoop:
    MODEL = [
        {"kind": "dense", "in": 8, "out": 12},
        {"kind": "batchnorm", "channels": 12},
        {"kind": "relu"},
        {"kind": "dense", "in": 12, "out": 10},
        {"kind": "layernorm", "features": 10},
        {"kind": "dense", "in": 10, "out": 3},
    ]

    def _toy_ds(self, n=96):
        rng = SeededRng(60)
        feats = gaussian_fill(rng, (n, 8))
        labels = rng.integers(n, 3)
        return Dataset(feats, labels, 3, "toy")

    def test_trains_and_preconditions_scale_and_shift(self):
        ds = self._toy_ds()
        result = train_run(self.MODEL, OptimizerSpec(name="adafisher"), ds, None,
                           epochs=5, batch_size=32, seed=6)
        assert np.isfinite(result.final_loss)
        # factor snapshot carries the norm layers with channel-length diagonals
        snap = {rec["layer_id"]: rec for rec in result.kf_snapshots[-1][1]}
        assert len(snap[1]["H_diag"]) == 12 and len(snap[1]["S_diag"]) == 12
        assert len(snap[4]["H_diag"]) == 10

    def test_norm_efim_floor_and_ceiling(self):
        ds = self._toy_ds()
        net = build_network(self.MODEL).init_params(SeededRng(6))
        tr = Trainer(net, OptimizerSpec(name="adafisher"), seed=6)
        for idx in [np.arange(0, 32), np.arange(32, 64)]:
            tr.step(ds.features[idx], ds.labels[idx], 0.001)
        efims = build_efims(tr.kf_state, tr.opt.lam, tr.net)
        for lid in (1, 4):
            assert set(efims[lid]) == {"scale", "shift"}
            for arr in efims[lid].values():
                assert np.all(arr >= tr.opt.lam)
                assert np.all(arr <= 1.0 + tr.opt.lam + 1e-15)

    def test_batchnorm_4d_factor_matches_brute_force(self):
        bn = BatchNorm(3)
        x = gaussian_fill(SeededRng(61), (4, 3, 5, 5)) * 2.0 + 0.3
        bn.forward(x, training=True)
        dy = gaussian_fill(SeededRng(62), (4, 3, 5, 5))
        bn.backward(dy, batch_size=4)
        h_new, s_new = layer_kf_diag(bn)
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        var = x.var(axis=(0, 2, 3), keepdims=True)
        x_hat = (x - mu) / np.sqrt(var + 1e-5)
        # channel-wise mean of squares over batch and spatial positions
        expected_h = (x_hat**2).mean(axis=(0, 2, 3))
        expected_s = ((dy * 4) ** 2).mean(axis=(0, 2, 3))
        assert np.max(np.abs(h_new - expected_h)) <= 1e-12
        assert np.max(np.abs(s_new - expected_s)) <= 1e-12


class TestConvFactorsStridePadding:
    def test_strided_padded_factor_matches_explicit_expansion(self):
        conv = Conv2D(2, 3, 3, 3, stride=2, padding=1)
        conv.init_params(SeededRng(63))
        x = gaussian_fill(SeededRng(64), (2, 2, 5, 5))
        conv.forward(x, training=True)
        dy = gaussian_fill(SeededRng(65), (2, 3, 3, 3))
        conv.backward(dy, batch_size=2)
        h_new, s_new = layer_kf_diag(conv)
        cols, oh, ow = im2col(x, 3, 3, 2, 1)
        cols = np.vstack([cols, np.ones(cols.shape[1])])
        n_cols = cols.shape[1]  # batch * |T|
        assert np.max(np.abs(h_new - np.diag(cols @ cols.T) / n_cols)) <= 1e-12
        s_mat = (dy * 2).transpose(1, 0, 2, 3).reshape(3, n_cols)
        assert np.max(np.abs(s_new - np.diag(s_mat @ s_mat.T) / n_cols)) <= 1e-12

    def test_conv_net_with_batchnorm_trains(self, digits_train):
        model = [
            {"kind": "conv2d", "c_in": 1, "c_out": 4, "k_h": 3, "k_w": 3,
             "stride": 2, "padding": 1},
            {"kind": "batchnorm", "channels": 4},
            {"kind": "relu"},
            {"kind": "dense", "in": 4 * 14 * 14, "out": 10},
        ]
        small = digits_train.subset(np.arange(512))
        result = train_run(model, OptimizerSpec(name="adafisher"), small, None,
                           epochs=8, batch_size=64, seed=8)
        losses = [row["loss"] for row in result.rows]
        assert all(np.isfinite(l) for l in losses)
        assert losses[-1] < losses[0]
        assert losses[-1] < 2.3  # well below uniform-logits entropy by epoch 8


class TestMetricsOrdering:
    def test_step_logging_keeps_steps_strictly_increasing(self, digits_train):
        small = digits_train.subset(np.arange(256))
        model = [{"kind": "dense", "in": 784, "out": 16}, {"kind": "relu"},
                 {"kind": "dense", "in": 16, "out": 10}]
        test_ds = digits_train.subset(np.arange(256, 320))
        result = train_run(model, OptimizerSpec(name="adam"), small, test_ds,
                           epochs=3, batch_size=64, seed=2, log_every=1)
        steps = [row["step"] for row in result.rows]
        assert all(b > a for a, b in zip(steps, steps[1:]))
        # train rows present between the epoch-end test rows
        assert sum(1 for row in result.rows if row["split"] == "train") == 3 * 3
        assert sum(1 for row in result.rows if row["split"] == "test") == 3


class TestWeightedSharding:
    def test_weighted_mean_equals_full_batch_gradient(self):
        model = [{"kind": "dense", "in": 6, "out": 4}, {"kind": "tanh"},
                 {"kind": "dense", "in": 4, "out": 3}]
        x = gaussian_fill(SeededRng(66), (10, 6))
        y = SeededRng(67).integers(10, 3)

        oracle = build_network(model).init_params(SeededRng(68))
        logits = oracle.forward(x, training=True)
        _, dl = nll_softmax_loss(logits, y)
        full = oracle.backward(dl)

        ex = DistributedExecutor(build_network(model).init_params(SeededRng(68)),
                                 4, mode="weighted")
        ex.sync_replicas()
        from kronfisher.distsim import shard_slices

        slices = shard_slices(10, 4, "weighted")
        weights = [sl.stop - sl.start for sl in slices]
        grad_dicts = [shard.local_pass(x[sl], y[sl])[2]
                      for shard, sl in zip(ex.replicas, slices)]
        total = sum(weights)
        scaled = [{lid: {k: (w / total) * arr * 4 for k, arr in grp.items()}
                   for lid, grp in g.items()} for w, g in zip(weights, grad_dicts)]
        agg = _mean_grad_dicts(scaled)
        for lid in full:
            for key in full[lid]:
                assert np.max(np.abs(agg[lid][key] - full[lid][key])) <= 1e-12
