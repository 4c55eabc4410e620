"""
Small convolutional classifier over unit grids, used as the victim model.

conv3x3(1->C) -> ReLU -> avgpool -> conv3x3(C->C) -> ReLU -> avgpool ->
flatten -> linear(n_classes).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..ccgan import layers as L
from ..ccgan.optim import AdamState, adam_step, orthogonal_init
from ..errors import CorruptFile, EmptyClass, MissingArtifact, ShapeMismatch


@dataclass
class ProbeClassifier:
    n_classes: int
    size: int
    params: dict
    train_accuracy: float = float("nan")
    heldout_accuracy: float = float("nan")
    history: list = field(default_factory=list)

    @classmethod
    def init(cls, n_classes: int, size: int, channels: int = 8,
             rng: np.random.Generator | None = None) -> "ProbeClassifier":
        rng = rng if rng is not None else np.random.default_rng(0)
        feat = channels * (size // 4) ** 2
        p = {
            "c1.w": orthogonal_init(channels, 9, 1.0, rng).reshape(channels, 1, 3, 3),
            "c1.b": np.zeros(channels),
            "c2.w": orthogonal_init(channels, channels * 9, 1.0, rng).reshape(channels, channels, 3, 3),
            "c2.b": np.zeros(channels),
            "fc.w": orthogonal_init(feat, n_classes, 1.0, rng) / np.sqrt(size // 4),
            "fc.b": np.zeros(n_classes),
        }
        return cls(n_classes, size, {k: np.ascontiguousarray(v) for k, v in p.items()})

    def forward(self, grids):
        x = np.asarray(grids, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != (self.size, self.size):
            raise ShapeMismatch(f"probe expects {self.size}x{self.size} grids, got {x.shape[1:]}")
        p = self.params
        h, c1 = L.conv_forward(x[:, None], p["c1.w"], p["c1.b"])
        h, r1 = L.relu_forward(h)
        h, a1 = L.avgpool_forward(h)
        h, c2 = L.conv_forward(h, p["c2.w"], p["c2.b"])
        h, r2 = L.relu_forward(h)
        h, a2 = L.avgpool_forward(h)
        shape = h.shape
        logits, fc = L.linear_forward(h.reshape(shape[0], -1), p["fc.w"], p["fc.b"])
        return logits, (c1, r1, a1, c2, r2, a2, shape, fc)

    def backward(self, cache, dlogits):
        """Returns (param grads, d grids)."""
        c1, r1, a1, c2, r2, a2, shape, fc = cache
        g = {}
        d, g["fc.w"], g["fc.b"] = L.linear_backward(dlogits, fc)
        d = L.avgpool_backward(d.reshape(shape), a2)
        d = L.relu_backward(d, r2)
        d, g["c2.w"], g["c2.b"] = L.conv_backward(d, c2)
        d = L.avgpool_backward(d, a1)
        d = L.relu_backward(d, r1)
        d, g["c1.w"], g["c1.b"] = L.conv_backward(d, c1)
        return g, d[:, 0]

    def predict(self, grids) -> np.ndarray:
        return np.argmax(self.forward(grids)[0], axis=1)

    def accuracy(self, grids, labels) -> float:
        return float(np.mean(self.predict(grids) == np.asarray(labels)))


def train_probe(grids, labels, epochs: int = 5, seed: int = 0, heldout: float = 0.25,
                batch_size: int = 16, lr: float = 3e-3, channels: int = 8) -> ProbeClassifier:
    """Train on a seeded split; the last ``heldout`` fraction (after shuffling) is held out."""
    x = np.stack([np.asarray(getattr(g, "values", g), dtype=np.float64) for g in grids])
    y = np.asarray(labels, dtype=np.int64)
    classes = np.unique(y)
    if classes.size < 2:
        raise EmptyClass("probe training needs at least two classes")
    n_classes = int(y.max()) + 1
    missing = set(range(n_classes)) - set(classes.tolist())
    if missing:
        raise EmptyClass(f"classes without samples: {sorted(missing)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    n_hold = int(round(heldout * len(y)))
    train_idx, hold_idx = order[:len(y) - n_hold], order[len(y) - n_hold:]
    probe = ProbeClassifier.init(n_classes, x.shape[1], channels, rng)
    opt = AdamState()
    for _ in range(epochs):
        perm = rng.permutation(train_idx)
        for start in range(0, perm.size, batch_size):
            idx = perm[start:start + batch_size]
            logits, cache = probe.forward(x[idx])
            loss, dlog = L.softmax_cross_entropy(logits, y[idx])
            grads, _ = probe.backward(cache, dlog)
            adam_step(probe.params, grads, opt, opt.t + 1, lr, 0.9, 0.999)
            probe.history.append(loss)
    probe.train_accuracy = probe.accuracy(x[train_idx], y[train_idx])
    if n_hold:
        probe.heldout_accuracy = probe.accuracy(x[hold_idx], y[hold_idx])
    return probe


def save_probe(probe: ProbeClassifier, path) -> None:
    meta = np.array([probe.n_classes, probe.size], dtype=np.int64)
    acc = np.array([probe.train_accuracy, probe.heldout_accuracy])
    with open(path, "wb") as fh:
        np.savez(fh, __meta=meta, __acc=acc, **{f"p.{k}": v for k, v in probe.params.items()})


def load_probe(path) -> ProbeClassifier:
    if not Path(path).is_file():
        raise MissingArtifact(f"probe file not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            n_classes, size = (int(v) for v in data["__meta"])
            acc = data["__acc"]
            params = {k[2:]: data[k].copy() for k in data.files if k.startswith("p.")}
    except (OSError, ValueError, KeyError) as exc:
        raise CorruptFile(f"unreadable probe file {path}: {exc}") from exc
    return ProbeClassifier(n_classes, size, params, float(acc[0]), float(acc[1]))
