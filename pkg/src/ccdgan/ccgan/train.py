"""
Alternating conditional GAN training.

One iteration = one discriminator update on a real batch plus an equal
number of fakes, followed by ``g_steps_per_d`` generator updates with
the non-saturating loss. Learning rates decay once per epoch (one pass
over the dataset in discriminator batches).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..errors import BadConfig, DivergedLoss, EmptyClass, ShapeMismatch
from . import layers as L
from .checkpoint import Checkpoint
from .nets import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig
from .optim import AdamState, adam_step, orthogonal_regularizer


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 32
    lr: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.9
    g_steps_per_d: int = 2
    lr_decay: float = 0.99
    max_iters: int = 2000
    collapse_window: int = 50
    collapse_accuracy: float = 0.99
    checkpoint_every: int = 100
    ortho_beta: float = 1e-4
    latent_std: float = 1.0
    standing_batches: int = 8
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise BadConfig("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise BadConfig("Adam betas must lie in [0, 1)")
        if self.batch_size < 1 or self.g_steps_per_d < 1 or self.max_iters < 1:
            raise BadConfig("batch_size, g_steps_per_d and max_iters must be >= 1")
        if self.collapse_window < 1 or self.checkpoint_every < 1:
            raise BadConfig("collapse_window and checkpoint_every must be >= 1")

    @classmethod
    def desk(cls, **overrides) -> "TrainingConfig":
        """Short single-core schedule for 32x32 grids; pair with an 8-channel discriminator."""
        base = dict(lr=1e-3, max_iters=400, checkpoint_every=50, collapse_window=100)
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainResult:
    final: Checkpoint
    checkpoints: list
    loss_history: np.ndarray
    d_accuracy: np.ndarray
    d_updates: int
    g_updates: int
    collapsed: bool
    collapse_iter: Optional[int] = None
    meta: dict = field(default_factory=dict)


def _as_dataset(grids, labels, n_classes: int, size: int):
    x = np.stack([np.asarray(getattr(g, "values", g), dtype=np.float64) for g in grids])
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 3 or x.shape[1:] != (size, size):
        raise ShapeMismatch(f"dataset grids must be {size}x{size}, got {x.shape[1:]}")
    if y.shape != (x.shape[0],):
        raise ShapeMismatch("one label per grid required")
    counts = np.bincount(y[(y >= 0) & (y < n_classes)], minlength=n_classes)
    if np.any(y < 0) or np.any(y >= n_classes):
        raise ShapeMismatch("label outside [0, n_classes)")
    if np.any(counts == 0):
        raise EmptyClass(f"classes without samples: {np.flatnonzero(counts == 0).tolist()}")
    return x, y


def _rgb(x):
    return np.repeat(x[:, None], 3, axis=1)


def _ortho(net, beta, grads):
    total = 0.0
    if beta == 0:
        return total
    for name in net.weight_names():
        pen, g = orthogonal_regularizer(net.params[name], beta)
        total += pen
        grads[name] += g
    return total


def standing_statistics(gen: Generator, class_ids: np.ndarray, rng: np.random.Generator,
                        n_batches: int, batch_size: int, latent_std: float = 1.0) -> None:
    """Replace running batch-norm statistics with exact averages over fresh batches."""
    saved_sn = copy.deepcopy(gen.sn)
    sums = {k: np.zeros_like(v) for k, v in gen.buffers.items()}
    for _ in range(n_batches):
        z = latent_std * rng.standard_normal((batch_size, gen.cfg.latent_dim))
        c = rng.choice(class_ids, batch_size)
        before = {k: v.copy() for k, v in gen.buffers.items()}
        gen.forward(z, c, train=True)
        for k in sums:
            # running <- 0.9 running + 0.1 batch, so recover the batch statistic
            sums[k] += (gen.buffers[k] - 0.9 * before[k]) / 0.1
        gen.buffers = before
    gen.buffers = {k: v / n_batches for k, v in sums.items()}
    gen.sn = saved_sn


def gan_train(grids, labels, gcfg: GeneratorConfig, dcfg: DiscriminatorConfig,
              tcfg: TrainingConfig, progress: Optional[Callable[[int, float, float], None]] = None
              ) -> TrainResult:
    if dcfg.resolution != gcfg.resolution or dcfg.n_classes != gcfg.n_classes:
        raise BadConfig("generator and discriminator disagree on resolution or class count")
    x, y = _as_dataset(grids, labels, gcfg.n_classes, gcfg.resolution)
    n = x.shape[0]
    bs = tcfg.batch_size
    if bs > n:
        raise BadConfig(f"batch_size {bs} exceeds dataset size {n}")
    rng = np.random.default_rng(tcfg.seed)
    gen = Generator(gcfg, rng)
    disc = Discriminator(dcfg, rng)
    opt_g, opt_d = AdamState(), AdamState()
    stats_rng = np.random.default_rng([tcfg.seed, 1])
    per_epoch = max(1, n // bs)
    history, accuracy, checkpoints = [], [], []
    d_updates = g_updates = 0
    lr = tcfg.lr
    order = rng.permutation(n)
    collapsed, collapse_iter = False, None

    def snapshot(it):
        # recalibrate a shallow copy so training continues on the live statistics
        probe = Generator(gen.cfg, init=False)
        probe.params, probe.buffers, probe.sn = gen.params, dict(gen.buffers), copy.deepcopy(gen.sn)
        standing_statistics(probe, np.unique(y), stats_rng, tcfg.standing_batches, bs, tcfg.latent_std)
        live = gen.buffers
        gen.buffers = probe.buffers
        ck = Checkpoint.capture(gen, disc, opt_g, opt_d, it, history, rng, lr)
        gen.buffers = live
        return ck

    for it in range(1, tcfg.max_iters + 1):
        pos = ((it - 1) % per_epoch) * bs
        if it > 1 and pos == 0:
            order = rng.permutation(n)
            lr *= tcfg.lr_decay
        idx = order[pos:pos + bs]
        real, c_real = x[idx], y[idx]

        # discriminator step
        z = tcfg.latent_std * rng.standard_normal((bs, gcfg.latent_dim))
        fake, _ = gen.forward(z, c_real, train=True)
        batch = np.concatenate([_rgb(real), _rgb(fake)])
        cls = np.concatenate([c_real, c_real])
        target = np.concatenate([np.ones(bs), np.zeros(bs)])
        logits, trace = disc.forward(batch, cls, train=True)
        d_loss, dlog = L.bce_with_logits(logits, target)
        d_loss *= 2.0
        grads, _ = disc.backward(trace, 2.0 * dlog)
        d_loss += _ortho(disc, tcfg.ortho_beta, grads)
        adam_step(disc.params, grads, opt_d, opt_d.t + 1, lr, tcfg.beta1, tcfg.beta2)
        disc.bump()
        d_updates += 1
        acc = float(np.mean((logits > 0) == (target > 0.5)))

        # generator steps
        g_loss = 0.0
        for _ in range(tcfg.g_steps_per_d):
            z = tcfg.latent_std * rng.standard_normal((bs, gcfg.latent_dim))
            c = y[rng.integers(0, n, bs)]
            fake, g_trace = gen.forward(z, c, train=True)
            logits, d_trace = disc.forward(_rgb(fake), c, train=True)
            g_loss, dlog = L.bce_with_logits(logits, np.ones(bs))
            _, dx = disc.backward(d_trace, dlog)
            grads, _ = gen.backward(g_trace, dx.sum(axis=1))
            g_loss += _ortho(gen, tcfg.ortho_beta, grads)
            adam_step(gen.params, grads, opt_g, opt_g.t + 1, lr, tcfg.beta1, tcfg.beta2)
            gen.bump()
            g_updates += 1

        if not (np.isfinite(d_loss) and np.isfinite(g_loss)):
            raise DivergedLoss(f"non-finite loss at iteration {it}: d={d_loss}, g={g_loss}")
        history.append((d_loss, g_loss))
        accuracy.append(acc)
        if progress is not None:
            progress(it, d_loss, g_loss)

        w = tcfg.collapse_window
        if len(accuracy) >= w and np.mean(accuracy[-w:]) > tcfg.collapse_accuracy:
            collapsed, collapse_iter = True, it
            break
        if it % tcfg.checkpoint_every == 0 or it == tcfg.max_iters:
            checkpoints.append(snapshot(it))

    if collapsed:
        onset = collapse_iter - tcfg.collapse_window + 1
        healthy = [ck for ck in checkpoints if ck.iteration < onset]
        final = healthy[-1] if healthy else snapshot(collapse_iter)
    else:
        final = checkpoints[-1]
    meta = {"d_updates": d_updates, "g_updates": g_updates, "collapsed": collapsed}
    final.meta.update(meta)
    return TrainResult(final, checkpoints, np.array(history).reshape(-1, 2), np.array(accuracy),
                       d_updates, g_updates, collapsed, collapse_iter, meta)
