"""
Forward/backward pairs for every layer type the generator and
discriminator use.

Convention: ``*_forward`` returns ``(out, cache)`` and ``*_backward``
takes ``(dout, cache)`` and returns the input gradient followed by the
parameter gradients. Image tensors are NCHW. Nothing here keeps state;
batch-norm running statistics are returned, not mutated.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


# linear -------------------------------------------------------------------

def linear_forward(x, w, b):
    """x: (N, D), w: (D, M), b: (M,)."""
    return x @ w + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


# convolution --------------------------------------------------------------

def conv_forward(x, w, b=None, pad=None):
    """Stride-1 2-D convolution (cross-correlation) via im2col. w: (F, C, k, k)."""
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    if pad is None:
        pad = k // 2
    if k == 1 and pad == 0:
        out = np.einsum("nchw,fc->nfhw", x, w[:, :, 0, 0], optimize=True)
        cols = None
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))  # (N, C, Ho, Wo, k, k)
        ho, wo = win.shape[2], win.shape[3]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
        out = (cols @ w.reshape(f, -1).T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out), (x, w, pad, cols, b is not None)


def conv_backward(dout, cache):
    x, w, pad, cols, has_bias = cache
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    db = dout.sum(axis=(0, 2, 3)) if has_bias else None
    if cols is None:
        dw = np.einsum("nfhw,nchw->fc", dout, x, optimize=True)[:, :, None, None]
        dx = np.einsum("nfhw,fc->nchw", dout, w[:, :, 0, 0], optimize=True)
        return dx, dw, db
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (dmat.T @ cols).reshape(w.shape)
    # input gradient is a full correlation with the flipped, channel-swapped kernel
    flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx, _ = conv_forward(dout, flipped, None, pad=k - 1 - pad)
    return dx, dw, db


# batch norm ---------------------------------------------------------------

def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bn_shape(x):
    return (1, -1) if x.ndim == 2 else (1, -1, 1, 1)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train,
                      momentum=0.1, eps=1e-5):
    """Per-channel batch norm over (N[, H, W]).

    Returns ``(out, cache, (new_running_mean, new_running_var))``.
    """
    axes, shape = _bn_axes(x), _bn_shape(x)
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        new_stats = ((1 - momentum) * running_mean + momentum * mean,
                     (1 - momentum) * running_var + momentum * var)
    else:
        mean, var = running_mean, running_var
        new_stats = (running_mean, running_var)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out, (xhat, gamma, inv_std, train), new_stats


def batchnorm_backward(dout, cache):
    xhat, gamma, inv_std, train = cache
    axes, shape = _bn_axes(dout), _bn_shape(dout)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma.reshape(shape)
    if not train:
        return dxhat * inv_std.reshape(shape), dgamma, dbeta
    m = dout.size // dout.shape[1]
    dx = (inv_std.reshape(shape) / m) * (
        m * dxhat
        - dxhat.sum(axis=axes).reshape(shape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
    )
    return dx, dgamma, dbeta


# pointwise ----------------------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dout, cache):
    return dout * cache


def tanh_forward(x):
    out = np.tanh(x)
    return out, out


def tanh_backward(dout, cache):
    return dout * (1.0 - cache * cache)


# resampling ---------------------------------------------------------------

def upsample_forward(x, factor=2):
    """Nearest-neighbour upsampling."""
    return x.repeat(factor, axis=2).repeat(factor, axis=3), factor


def upsample_backward(dout, factor):
    n, c, h, w = dout.shape
    return dout.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))


def avgpool_forward(x, size=2):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5)), size


def avgpool_backward(dout, size):
    return dout.repeat(size, axis=2).repeat(size, axis=3) / (size * size)


def maxpool_forward(x, size=2):
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // size, size, w // size, size).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // size, w // size, size * size)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape, size)


def maxpool_backward(dout, cache):
    idx, shape, size = cache
    n, c, h, w = shape
    grad = np.zeros((n, c, h // size, w // size, size * size), dtype=dout.dtype)
    np.put_along_axis(grad, idx[..., None], dout[..., None], axis=-1)
    grad = grad.reshape(n, c, h // size, w // size, size, size).transpose(0, 1, 2, 4, 3, 5)
    return grad.reshape(shape)


# embedding / concat -------------------------------------------------------

def embedding_forward(ids, table):
    ids = np.asarray(ids, dtype=np.int64)
    return table[ids], (ids, table.shape)


def embedding_backward(dout, cache):
    ids, shape = cache
    dtable = np.zeros(shape, dtype=dout.dtype)
    np.add.at(dtable, ids, dout)
    return dtable


def concat_forward(parts, axis=1):
    sizes = [p.shape[axis] for p in parts]
    return np.concatenate(parts, axis=axis), (sizes, axis)


def concat_backward(dout, cache):
    sizes, axis = cache
    return np.split(dout, np.cumsum(sizes)[:-1], axis=axis)


# non-local attention ------------------------------------------------------

def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    e /= e.sum(axis=-1, keepdims=True)
    return e


def nonlocal_forward(x, w_theta, w_phi, w_g, w_out, gain, pool=2):
    """Dot-product self-attention over spatial positions with a residual gain.

    Keys and values are max-pooled by ``pool`` (1 disables pooling).
    Weights are 1x1 convolutions: w_theta, w_phi: (Ck, C); w_g: (Cv, C); w_out: (C, Cv).
    """
    n, c, h, w = x.shape
    theta, c_theta = conv_forward(x, w_theta[:, :, None, None])
    phi, c_phi = conv_forward(x, w_phi[:, :, None, None])
    g, c_g = conv_forward(x, w_g[:, :, None, None])
    if pool > 1:
        phi, p_phi = maxpool_forward(phi, pool)
        g, p_g = maxpool_forward(g, pool)
    else:
        p_phi = p_g = None
    th = theta.reshape(n, theta.shape[1], h * w)
    ph = phi.reshape(n, phi.shape[1], -1)
    gv = g.reshape(n, g.shape[1], -1)
    attn = _softmax(np.matmul(th.transpose(0, 2, 1), ph))
    o = np.matmul(gv, attn.transpose(0, 2, 1)).reshape(n, gv.shape[1], h, w)
    y, c_out = conv_forward(o, w_out[:, :, None, None])
    out = x + gain * y
    cache = (th, ph, gv, attn, y, gain, c_theta, c_phi, c_g, c_out, p_phi, p_g,
             phi.shape, g.shape)
    return out, cache


def nonlocal_backward(dout, cache):
    """Returns dx, dw_theta, dw_phi, dw_g, dw_out, dgain."""
    (th, ph, gv, attn, y, gain, c_theta, c_phi, c_g, c_out, p_phi, p_g,
     phi_shape, g_shape) = cache
    n = dout.shape[0]
    dgain = np.array(float(np.sum(dout * y)))
    do, dw_out, _ = conv_backward(gain * dout, c_out)
    do = do.reshape(n, gv.shape[1], -1)
    dgv = np.matmul(do, attn)
    dattn = np.matmul(do.transpose(0, 2, 1), gv)
    dlogits = dattn - np.sum(dattn * attn, axis=-1, keepdims=True)
    dlogits *= attn
    dth = np.matmul(ph, dlogits.transpose(0, 2, 1))
    dph = np.matmul(th, dlogits)
    dphi = dph.reshape(phi_shape)
    dg = dgv.reshape(g_shape)
    if p_phi is not None:
        dphi = maxpool_backward(dphi, p_phi)
        dg = maxpool_backward(dg, p_g)
    dtheta = dth.reshape(n, th.shape[1], *dout.shape[2:])
    dx1, dw_theta, _ = conv_backward(dtheta, c_theta)
    dx2, dw_phi, _ = conv_backward(dphi, c_phi)
    dx3, dw_g, _ = conv_backward(dg, c_g)
    dx = dout + dx1 + dx2 + dx3
    return (dx, dw_theta[:, :, 0, 0], dw_phi[:, :, 0, 0], dw_g[:, :, 0, 0],
            dw_out[:, :, 0, 0], dgain)


# losses -------------------------------------------------------------------

def bce_with_logits(logits, target):
    """Mean binary cross-entropy on logits; returns (loss, dlogits)."""
    z = np.asarray(logits, dtype=np.float64)
    loss = np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    return float(loss.mean()), (sig - target) / z.size


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy; returns (loss, dlogits)."""
    p = _softmax(logits)
    n = logits.shape[0]
    loss = -np.mean(np.log(p[np.arange(n), labels] + 1e-300))
    d = p.copy()
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n
