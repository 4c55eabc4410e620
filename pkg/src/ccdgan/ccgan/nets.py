"""
Class-conditional generator and projection discriminator.

Generator: [z, embed(c)] -> linear -> 4x4xC0 -> nearest upsampling to
reach the block input size -> residual up-blocks (C0 -> C0/4 -> 1
channels) -> non-local block -> batch norm -> tanh. The up-block shortcut
is a 3x3 conv: a 1x1 conv on a nearest-upsampled map keeps exact 2x2
duplicates, and where the residual branch goes quiet those duplicated
rows make the output grid exactly singular.

Discriminator: one residual down-block (two 3x3 convs, average pooling,
pooled 1x1 shortcut) -> non-local block -> ReLU -> max pooling -> flatten
-> linear logit plus class projection of the flattened features.

Both keep parameters in flat ``{name: ndarray}`` dicts so the optimizer
and checkpoint code can treat them uniformly. ``forward`` returns the
output plus a :class:`Trace`; ``backward(trace, dout)`` returns
parameter gradients and the input gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import ShapeMismatch, StaleTrace
from . import layers as L
from .optim import SpectralState, orthogonal_init, spectral_backward, spectral_init, spectral_normalize


@dataclass(frozen=True)
class GeneratorConfig:
    n_classes: int = 2
    latent_dim: int = 32
    embed_dim: int = 16
    base_channels: int = 16
    resolution: int = 32
    use_nonlocal: bool = True
    attn_pool: int = 4
    spectral_norm: bool = True

    def __post_init__(self):
        s = self.resolution
        if s < 8 or s & (s - 1):
            raise ValueError(f"resolution must be a power of two >= 8, got {s}")
        if self.n_classes < 1 or self.latent_dim < 1 or self.embed_dim < 1 or self.base_channels < 1:
            raise ValueError("generator dimensions must be positive")

    @property
    def n_up(self) -> int:
        return int(np.log2(self.resolution // 4))

    @property
    def n_blocks(self) -> int:
        return min(2, self.n_up)

    @property
    def channels(self) -> list[int]:
        c0 = self.base_channels
        if self.n_blocks == 1:
            return [c0, 1]
        return [c0, max(1, c0 // 4), 1]

    @classmethod
    def paper(cls, n_classes: int) -> "GeneratorConfig":
        return cls(n_classes=n_classes, latent_dim=128, embed_dim=50, base_channels=16, resolution=128)


@dataclass(frozen=True)
class DiscriminatorConfig:
    n_classes: int = 2
    resolution: int = 32
    channels: int = 16
    use_nonlocal: bool = True
    attn_pool: int = 2

    def __post_init__(self):
        s = self.resolution
        if s < 8 or s & (s - 1):
            raise ValueError(f"resolution must be a power of two >= 8, got {s}")

    @classmethod
    def paper(cls, n_classes: int) -> "DiscriminatorConfig":
        return cls(n_classes=n_classes, resolution=128, channels=16)


@dataclass
class Trace:
    kind: str
    version: int
    batch: int
    steps: list = field(default_factory=list)
    sn_states: dict = field(default_factory=dict)


class _Net:
    """Parameter/buffer bookkeeping shared by both networks."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.version = 0

    def bump(self) -> None:
        self.version += 1

    def weight_names(self) -> list[str]:
        """Matrix-like weights (targets of orthogonal regularization)."""
        return [k for k, v in self.params.items() if k.endswith(".w") and v.ndim >= 2 and min(v.shape[:2]) > 0]

    def _check_trace(self, trace: Trace, kind: str) -> None:
        if trace.kind != kind:
            raise StaleTrace(f"trace from a {trace.kind} cannot be replayed on a {kind}")
        if trace.version != self.version:
            raise StaleTrace("parameters changed since this trace was recorded")

    def _bn(self, name, x, train, steps, update_stats=True):
        out, cache, (rm, rv) = L.batchnorm_forward(
            x, self.params[f"{name}.g"], self.params[f"{name}.b"],
            self.buffers[f"{name}.rm"], self.buffers[f"{name}.rv"], train)
        if train and update_stats:
            self.buffers[f"{name}.rm"], self.buffers[f"{name}.rv"] = rm, rv
        steps.append(("bn", name, cache))
        return out

    def _add_bn(self, name, c):
        self.params[f"{name}.g"] = np.ones(c)
        self.params[f"{name}.b"] = np.zeros(c)
        self.buffers[f"{name}.rm"] = np.zeros(c)
        self.buffers[f"{name}.rv"] = np.ones(c)


def _conv_init(rng, cout, cin, k):
    return orthogonal_init(cout, cin * k * k, 1.0, rng).reshape(cout, cin, k, k)


class Generator(_Net):
    def __init__(self, cfg: GeneratorConfig, rng: Optional[np.random.Generator] = None,
                 init: bool = True):
        super().__init__()
        self.cfg = cfg
        self.sn: dict[str, SpectralState] = {}
        if init:
            self._init(rng if rng is not None else np.random.default_rng(0))
            self.params = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in self.params.items()}

    # -- construction -----------------------------------------------------
    def _init(self, rng):
        cfg = self.cfg
        p = self.params
        c0 = cfg.base_channels
        p["embed"] = rng.standard_normal((cfg.n_classes, cfg.embed_dim))
        p["lin.w"] = orthogonal_init(cfg.latent_dim + cfg.embed_dim, 16 * c0, 1.0, rng)
        p["lin.b"] = np.zeros(16 * c0)
        chans = cfg.channels
        for i in range(cfg.n_blocks):
            cin, cout = chans[i], chans[i + 1]
            self._add_bn(f"b{i}.bn1", cin)
            p[f"b{i}.conv1.w"] = _conv_init(rng, cout, cin, 3)
            p[f"b{i}.conv1.b"] = np.zeros(cout)
            self._add_bn(f"b{i}.bn2", cout)
            p[f"b{i}.conv2.w"] = _conv_init(rng, cout, cout, 3)
            p[f"b{i}.conv2.b"] = np.zeros(cout)
            self._add_bn(f"b{i}.bn3", cout)
            p[f"b{i}.conv3.w"] = _conv_init(rng, cout, cout, 3)
            p[f"b{i}.conv3.b"] = np.zeros(cout)
            p[f"b{i}.sc.w"] = _conv_init(rng, cout, cin, 3)
            p[f"b{i}.sc.b"] = np.zeros(cout)
        c = chans[-1]
        if cfg.use_nonlocal:
            _init_attention(p, rng, c)
        self._add_bn("out_bn", c)
        if cfg.spectral_norm:
            for name in self.sn_names():
                self.sn[name] = spectral_init(p[name], rng)

    def sn_names(self) -> list[str]:
        return [k for k in self.params if k.endswith(".w")]

    # -- forward ----------------------------------------------------------
    def _weight(self, name, train, trace):
        w = self.params[name]
        if not self.cfg.spectral_norm or name not in self.sn:
            return w
        w_eff, state = spectral_normalize(w, self.sn[name], update=train)
        if train:
            self.sn[name] = state
        trace.sn_states[name] = state
        return w_eff

    def forward(self, z, class_ids, train: bool = False):
        """z: (N, latent_dim) or (latent_dim,); returns ((N, S, S) images in (-1, 1), trace)."""
        cfg = self.cfg
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        n = z.shape[0]
        ids = np.broadcast_to(np.asarray(class_ids, dtype=np.int64), (n,)).copy()
        if z.shape[1] != cfg.latent_dim:
            raise ShapeMismatch(f"latent has {z.shape[1]} dims, generator expects {cfg.latent_dim}")
        if np.any(ids < 0) or np.any(ids >= cfg.n_classes):
            raise ShapeMismatch(f"class id out of range [0, {cfg.n_classes})")
        trace = Trace("generator", self.version, n)
        s = trace.steps
        emb, c_emb = L.embedding_forward(ids, self.params["embed"])
        s.append(("embed", "embed", c_emb))
        h, c_cat = L.concat_forward([z, emb])
        s.append(("concat", None, c_cat))
        h, c_lin = L.linear_forward(h, self._weight("lin.w", train, trace), self.params["lin.b"])
        s.append(("linear", "lin", c_lin))
        c0 = cfg.base_channels
        h = h.reshape(n, c0, 4, 4)
        s.append(("reshape", None, (n, 16 * c0)))
        for _ in range(cfg.n_up - cfg.n_blocks):
            h, c_up = L.upsample_forward(h)
            s.append(("upsample", None, c_up))
        for i in range(cfg.n_blocks):
            h = self._block(i, h, train, trace)
        if cfg.use_nonlocal:
            h = _attention_forward(self, h, train, trace, cfg.attn_pool)
        h = self._bn("out_bn", h, train, s)
        h, c_tanh = L.tanh_forward(h)
        s.append(("tanh", None, c_tanh))
        return h[:, 0], trace

    def _block(self, i, x, train, trace):
        s = trace.steps
        pre = f"b{i}"
        sub = []
        h = self._bn(f"{pre}.bn1", x, train, sub)
        h, c_r1 = L.relu_forward(h)
        h, c_u = L.upsample_forward(h)
        h, c_1 = L.conv_forward(h, self._weight(f"{pre}.conv1.w", train, trace), self.params[f"{pre}.conv1.b"])
        h = self._bn(f"{pre}.bn2", h, train, sub)
        h, c_r2 = L.relu_forward(h)
        h, c_2 = L.conv_forward(h, self._weight(f"{pre}.conv2.w", train, trace), self.params[f"{pre}.conv2.b"])
        h = self._bn(f"{pre}.bn3", h, train, sub)
        h, c_r3 = L.relu_forward(h)
        h, c_3 = L.conv_forward(h, self._weight(f"{pre}.conv3.w", train, trace), self.params[f"{pre}.conv3.b"])
        sk, c_su = L.upsample_forward(x)
        sk, c_sc = L.conv_forward(sk, self._weight(f"{pre}.sc.w", train, trace), self.params[f"{pre}.sc.b"])
        s.append(("gblock", pre, (sub, c_r1, c_u, c_1, c_r2, c_2, c_r3, c_3, c_su, c_sc)))
        return h + sk

    def __call__(self, z, class_ids):
        """Inference-mode images (N, S, S); never mutates the generator."""
        return self.forward(z, class_ids, train=False)[0]

    # -- backward ---------------------------------------------------------
    def backward(self, trace: Trace, dout):
        """Returns (grads w.r.t. raw params, dz)."""
        self._check_trace(trace, "generator")
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        eff = {}  # gradients w.r.t. spectrally normalized weights
        d = np.asarray(dout, dtype=np.float64)[:, None]

        def acc(name, g):
            if name in trace.sn_states:
                eff[name] = eff.get(name, 0) + g
            else:
                grads[name] += g

        for kind, name, cache in reversed(trace.steps):
            if kind == "tanh":
                d = L.tanh_backward(d, cache)
            elif kind == "bn":
                d, dg, db = L.batchnorm_backward(d, cache)
                grads[f"{name}.g"] += dg
                grads[f"{name}.b"] += db
            elif kind == "attn":
                d = _attention_backward(d, cache, acc)
            elif kind == "gblock":
                d = self._block_backward(name, d, cache, acc, grads)
            elif kind == "upsample":
                d = L.upsample_backward(d, cache)
            elif kind == "reshape":
                d = d.reshape(cache)
            elif kind == "linear":
                d, dw, db = L.linear_backward(d, cache)
                acc(f"{name}.w", dw)
                grads[f"{name}.b"] += db
            elif kind == "concat":
                dz, demb = L.concat_backward(d, cache)
                d = (dz, demb)
            elif kind == "embed":
                grads["embed"] += L.embedding_backward(d[1], cache)
                d = d[0]
        for name, g in eff.items():
            grads[name] += spectral_backward(g, self.params[name], trace.sn_states[name])
        return grads, d

    def _block_backward(self, pre, d, cache, acc, grads):
        sub, c_r1, c_u, c_1, c_r2, c_2, c_r3, c_3, c_su, c_sc = cache
        dsk, dw, db = L.conv_backward(d, c_sc)
        acc(f"{pre}.sc.w", dw)
        grads[f"{pre}.sc.b"] += db
        dx = L.upsample_backward(dsk, c_su)
        bn1, bn2, bn3 = sub
        h, dw, db = L.conv_backward(d, c_3)
        acc(f"{pre}.conv3.w", dw)
        grads[f"{pre}.conv3.b"] += db
        h = L.relu_backward(h, c_r3)
        h = _bn_back(h, bn3, grads)
        h, dw, db = L.conv_backward(h, c_2)
        acc(f"{pre}.conv2.w", dw)
        grads[f"{pre}.conv2.b"] += db
        h = L.relu_backward(h, c_r2)
        h = _bn_back(h, bn2, grads)
        h, dw, db = L.conv_backward(h, c_1)
        acc(f"{pre}.conv1.w", dw)
        grads[f"{pre}.conv1.b"] += db
        h = L.upsample_backward(h, c_u)
        h = L.relu_backward(h, c_r1)
        h = _bn_back(h, bn1, grads)
        return dx + h

    # -- misc -------------------------------------------------------------
    def spectral_sigmas(self) -> dict[str, float]:
        """Largest singular value of each effective (normalized) weight matrix."""
        from .optim import as_matrix

        out = {}
        for name, state in self.sn.items():
            w_eff = self.params[name] / state.sigma
            out[name] = float(np.linalg.svd(as_matrix(w_eff), compute_uv=False)[0])
        return out


class Discriminator(_Net):
    def __init__(self, cfg: DiscriminatorConfig, rng: Optional[np.random.Generator] = None,
                 init: bool = True):
        super().__init__()
        self.cfg = cfg
        if init:
            self._init(rng if rng is not None else np.random.default_rng(0))
            self.params = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in self.params.items()}

    def _init(self, rng):
        c = self.cfg.channels
        p = self.params
        p["blk.conv1.w"] = _conv_init(rng, c, 3, 3)
        p["blk.conv1.b"] = np.zeros(c)
        p["blk.conv2.w"] = _conv_init(rng, c, c, 3)
        p["blk.conv2.b"] = np.zeros(c)
        p["blk.sc.w"] = _conv_init(rng, c, 3, 1)
        p["blk.sc.b"] = np.zeros(c)
        if self.cfg.use_nonlocal:
            _init_attention(p, rng, c)
        feat = c * (self.cfg.resolution // 4) ** 2
        p["lin.w"] = orthogonal_init(feat, 1, 1.0, rng)
        p["lin.b"] = np.zeros(1)
        p["embed"] = orthogonal_init(self.cfg.n_classes, feat, 1.0, rng)

    def _weight(self, name, train, trace):
        return self.params[name]

    def forward(self, x, class_ids, train: bool = False):
        """x: (N, 3, S, S) in [-1, 1]; returns (logits (N,), trace)."""
        cfg = self.cfg
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != (3, cfg.resolution, cfg.resolution):
            raise ShapeMismatch(f"discriminator expects (N, 3, {cfg.resolution}, {cfg.resolution}), got {x.shape}")
        n = x.shape[0]
        ids = np.broadcast_to(np.asarray(class_ids, dtype=np.int64), (n,)).copy()
        if np.any(ids < 0) or np.any(ids >= cfg.n_classes):
            raise ShapeMismatch("class id out of range")
        trace = Trace("discriminator", self.version, n)
        s = trace.steps
        p = self.params
        h, c1 = L.conv_forward(x, p["blk.conv1.w"], p["blk.conv1.b"])
        h, cr = L.relu_forward(h)
        h, c2 = L.conv_forward(h, p["blk.conv2.w"], p["blk.conv2.b"])
        h, cp = L.avgpool_forward(h)
        sk, csp = L.avgpool_forward(x)
        sk, csc = L.conv_forward(sk, p["blk.sc.w"], p["blk.sc.b"])
        s.append(("dblock", "blk", (c1, cr, c2, cp, csp, csc)))
        h = h + sk
        if cfg.use_nonlocal:
            h = _attention_forward(self, h, train, trace, cfg.attn_pool)
        h, crelu = L.relu_forward(h)
        s.append(("relu", None, crelu))
        h, cmp = L.maxpool_forward(h)
        s.append(("maxpool", None, cmp))
        pooled = h.reshape(n, -1)
        s.append(("flatten", None, h.shape))
        logit, clin = L.linear_forward(pooled, p["lin.w"], p["lin.b"])
        emb, cemb = L.embedding_forward(ids, p["embed"])
        proj = np.sum(emb * pooled, axis=1)
        s.append(("head", None, (clin, cemb, emb, pooled)))
        return logit[:, 0] + proj, trace

    def pooled_features(self, x, class_ids) -> np.ndarray:
        trace = self.forward(x, class_ids)[1]
        return trace.steps[-1][2][3]

    def backward(self, trace: Trace, dout):
        """Returns (grads, dx)."""
        self._check_trace(trace, "discriminator")
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}

        def acc(name, g):
            grads[name] += g

        d = np.asarray(dout, dtype=np.float64)
        for kind, name, cache in reversed(trace.steps):
            if kind == "head":
                clin, cemb, emb, pooled = cache
                dpool, dw, db = L.linear_backward(d[:, None], clin)
                grads["lin.w"] += dw
                grads["lin.b"] += db
                grads["embed"] += L.embedding_backward(d[:, None] * pooled, cemb)
                d = dpool + d[:, None] * emb
            elif kind == "flatten":
                d = d.reshape(cache)
            elif kind == "maxpool":
                d = L.maxpool_backward(d, cache)
            elif kind == "relu":
                d = L.relu_backward(d, cache)
            elif kind == "attn":
                d = _attention_backward(d, cache, acc)
            elif kind == "dblock":
                c1, cr, c2, cp, csp, csc = cache
                dsk, dw, db = L.conv_backward(d, csc)
                grads["blk.sc.w"] += dw
                grads["blk.sc.b"] += db
                dx = L.avgpool_backward(dsk, csp)
                h = L.avgpool_backward(d, cp)
                h, dw, db = L.conv_backward(h, c2)
                grads["blk.conv2.w"] += dw
                grads["blk.conv2.b"] += db
                h = L.relu_backward(h, cr)
                h, dw, db = L.conv_backward(h, c1)
                grads["blk.conv1.w"] += dw
                grads["blk.conv1.b"] += db
                d = dx + h
        return grads, d


# shared pieces --------------------------------------------------------------

def _init_attention(p, rng, c):
    ck = max(1, c // 8)
    cv = max(1, c // 2)
    p["attn.theta.w"] = orthogonal_init(ck, c, 1.0, rng)
    p["attn.phi.w"] = orthogonal_init(ck, c, 1.0, rng)
    p["attn.g.w"] = orthogonal_init(cv, c, 1.0, rng)
    p["attn.out.w"] = orthogonal_init(c, cv, 1.0, rng)
    p["attn.gain"] = np.array(0.0)


def _attention_forward(net, h, train, trace, pool):
    size = h.shape[2]
    pool = pool if pool > 1 and size % pool == 0 else 1
    out, cache = L.nonlocal_forward(
        h,
        net._weight("attn.theta.w", train, trace),
        net._weight("attn.phi.w", train, trace),
        net._weight("attn.g.w", train, trace),
        net._weight("attn.out.w", train, trace),
        net.params["attn.gain"].item(),
        pool,
    )
    trace.steps.append(("attn", "attn", cache))
    return out


def _attention_backward(d, cache, acc):
    dx, dth, dph, dg, dout_w, dgain = L.nonlocal_backward(d, cache)
    acc("attn.theta.w", dth)
    acc("attn.phi.w", dph)
    acc("attn.g.w", dg)
    acc("attn.out.w", dout_w)
    acc("attn.gain", dgain)
    return dx


def _bn_back(d, step, grads):
    _, name, cache = step
    d, dg, db = L.batchnorm_backward(d, cache)
    grads[f"{name}.g"] += dg
    grads[f"{name}.b"] += db
    return d
