"""
Adversarial training loop: convergence on a toy task, schedule counters,
reproducibility, collapse handling and input validation.
"""

import numpy as np
import pytest

from ccdgan.ccgan import DiscriminatorConfig, GeneratorConfig, TrainingConfig, gan_train
from ccdgan.ccgan.nets import Generator
from ccdgan.ccgan.train import standing_statistics
from ccdgan.errors import BadConfig, EmptyClass, ShapeMismatch

S = 8
GCFG = GeneratorConfig(resolution=S, latent_dim=8, embed_dim=4, base_channels=8)
DCFG = DiscriminatorConfig(resolution=S, channels=4)


def toy(n_per_class=32):
    grids = [np.full((S, S), 0.5)] * n_per_class + [np.full((S, S), -0.5)] * n_per_class
    return grids, [0] * n_per_class + [1] * n_per_class


@pytest.fixture(scope="module")
def toy_run():
    grids, labels = toy()
    tcfg = TrainingConfig(batch_size=16, lr=1e-3, max_iters=500, checkpoint_every=100, collapse_window=100)
    return gan_train(grids, labels, GCFG, DCFG, tcfg)


class TestToyConvergence:
    def test_class_means_separate(self, toy_run):
        # 500 iterations still oscillate around the targets; the sign and the
        # class gap are what conditioning must get right
        g = toy_run.final.generator()
        z = np.random.default_rng(0).standard_normal((64, GCFG.latent_dim))
        hi, lo = g(z, 0).mean(), g(z, 1).mean()
        assert hi > 0.2 and lo < -0.2 and hi - lo >= 0.5

    def test_schedule_counters(self, toy_run):
        assert toy_run.g_updates == 2 * toy_run.d_updates
        assert toy_run.d_updates == len(toy_run.loss_history)

    def test_checkpoint_cadence(self, toy_run):
        assert [ck.iteration for ck in toy_run.checkpoints] == [100, 200, 300, 400, 500]
        assert toy_run.final.iteration == 500 and not toy_run.collapsed

    def test_learning_rate_decays_per_epoch(self, toy_run):
        epochs_done = (500 - 1) // (64 // 16)
        assert toy_run.final.lr == pytest.approx(1e-3 * 0.99**epochs_done, rel=1e-12)


class TestReproducibility:
    def test_loss_history_bitwise(self):
        grids, labels = toy(8)
        tcfg = TrainingConfig(batch_size=8, max_iters=12, checkpoint_every=6, seed=3)
        a = gan_train(grids, labels, GCFG, DCFG, tcfg)
        b = gan_train(grids, labels, GCFG, DCFG, tcfg)
        assert a.loss_history.tobytes() == b.loss_history.tobytes()
        z = np.ones((2, GCFG.latent_dim))
        assert np.array_equal(a.final.generator()(z, [0, 1]), b.final.generator()(z, [0, 1]))

    def test_seed_matters(self):
        grids, labels = toy(8)
        a = gan_train(grids, labels, GCFG, DCFG, TrainingConfig(batch_size=8, max_iters=3, seed=0))
        b = gan_train(grids, labels, GCFG, DCFG, TrainingConfig(batch_size=8, max_iters=3, seed=1))
        assert not np.array_equal(a.loss_history, b.loss_history)

    def test_three_generator_steps(self):
        grids, labels = toy(8)
        r = gan_train(grids, labels, GCFG, DCFG, TrainingConfig(batch_size=8, max_iters=4, g_steps_per_d=3))
        assert (r.d_updates, r.g_updates) == (4, 12)


class TestCollapse:
    def test_forced_collapse_stops_and_flags(self):
        grids, labels = toy(8)
        tcfg = TrainingConfig(batch_size=8, max_iters=50, collapse_window=5, collapse_accuracy=-1.0,
                              checkpoint_every=2)
        r = gan_train(grids, labels, GCFG, DCFG, tcfg)
        assert r.collapsed and r.collapse_iter == 5 and r.d_updates == 5
        # no checkpoint predates the window, so the collapse point itself is returned
        assert r.final.iteration == 5 and r.final.meta["collapsed"]


class TestStandingStatistics:
    def test_matches_batch_moments(self):
        g = Generator(GCFG, np.random.default_rng(0))
        standing_statistics(g, np.array([0, 1]), np.random.default_rng(1), 3, 16)
        rng = np.random.default_rng(1)
        ref = Generator(GCFG, np.random.default_rng(0))
        means = []
        for _ in range(3):
            z = rng.standard_normal((16, GCFG.latent_dim))
            c = rng.choice(np.array([0, 1]), 16)
            before = {k: v.copy() for k, v in ref.buffers.items()}
            ref.forward(z, c, train=True)
            means.append((ref.buffers["out_bn.rm"] - 0.9 * before["out_bn.rm"]) / 0.1)
            ref.buffers = before
        np.testing.assert_allclose(g.buffers["out_bn.rm"], np.mean(means, axis=0), atol=1e-12)


class TestValidation:
    def test_single_class(self):
        with pytest.raises(EmptyClass):
            gan_train([np.zeros((S, S))] * 4, [0] * 4, GCFG, DCFG, TrainingConfig(batch_size=2, max_iters=1))

    def test_batch_larger_than_dataset(self):
        grids, labels = toy(2)
        with pytest.raises(BadConfig):
            gan_train(grids, labels, GCFG, DCFG, TrainingConfig(batch_size=8, max_iters=1))

    def test_mismatched_networks(self):
        grids, labels = toy(4)
        with pytest.raises(BadConfig):
            gan_train(grids, labels, GCFG, DiscriminatorConfig(resolution=16), TrainingConfig(batch_size=4))

    def test_wrong_grid_size(self):
        with pytest.raises(ShapeMismatch):
            gan_train([np.zeros((4, 4))] * 4, [0, 1, 0, 1], GCFG, DCFG, TrainingConfig(batch_size=2))

    @pytest.mark.parametrize("kw", [dict(lr=0.0), dict(beta2=1.0), dict(g_steps_per_d=0), dict(collapse_window=0)])
    def test_bad_training_config(self, kw):
        with pytest.raises(BadConfig):
            TrainingConfig(**kw)

    def test_desk_preset(self):
        c = TrainingConfig.desk(seed=4)
        assert (c.lr, c.max_iters, c.seed, c.g_steps_per_d, c.lr_decay) == (1e-3, 400, 4, 2, 0.99)
