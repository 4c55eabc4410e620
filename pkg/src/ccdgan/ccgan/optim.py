"""Orthogonal init/regularization, spectral normalization and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatch, ZeroMatrix


def as_matrix(w: np.ndarray) -> np.ndarray:
    """Weights viewed as (fan_out, fan_in)-style 2-D matrices."""
    return w.reshape(w.shape[0], -1) if w.ndim > 2 else np.atleast_2d(w)


def orthogonal_init(rows: int, cols: int, gain: float = 1.0,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Gram matrix of the smaller dimension equals gain**2 * I."""
    if rows < 1 or cols < 1:
        raise ValueError("orthogonal_init needs positive dimensions")
    rng = rng if rng is not None else np.random.default_rng()
    big, small = max(rows, cols), min(rows, cols)
    a = rng.standard_normal((big, small))
    q, r = np.linalg.qr(a)
    # sign fix makes the draw -> matrix map unique
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    w = q if rows >= cols else q.T
    return gain * w


def orthogonal_regularizer(w: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    """beta * ||Gram(W) * (1 - I)||_F^2 over the smaller Gram; returns (penalty, dW)."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    m = as_matrix(w)
    tall = m.shape[0] >= m.shape[1]
    gram = m.T @ m if tall else m @ m.T
    off = gram - np.diag(np.diag(gram))
    penalty = beta * float(np.sum(off * off))
    grad = 4.0 * beta * (m @ off if tall else off @ m)
    return penalty, grad.reshape(w.shape)


@dataclass
class SpectralState:
    u: np.ndarray
    v: np.ndarray | None = None
    sigma: float = 1.0


def spectral_init(w: np.ndarray, rng: np.random.Generator, warmup: int = 20) -> SpectralState:
    m = as_matrix(w)
    u = rng.standard_normal(m.shape[0])
    u /= np.linalg.norm(u)
    state = SpectralState(u)
    for _ in range(warmup):
        _, state = spectral_normalize(w, state)
    return state


def spectral_normalize(w: np.ndarray, state: SpectralState, update: bool = True):
    """One power-iteration step; returns (w / sigma_hat, new_state).

    With ``update=False`` the stored vector is reused unchanged (inference).
    """
    m = as_matrix(w)
    if not np.any(m):
        raise ZeroMatrix("cannot spectrally normalize an all-zero matrix")
    u = state.u
    v = m.T @ u
    v /= np.linalg.norm(v)
    if update:
        u = m @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            raise ZeroMatrix("power iteration collapsed to zero")
        u = u / nu
    sigma = float(u @ m @ v)
    return w / sigma, SpectralState(u, v, sigma)


def spectral_backward(dw_norm: np.ndarray, w: np.ndarray, state: SpectralState) -> np.ndarray:
    """Gradient w.r.t. raw W of L(W / sigma) with sigma = u^T W v (u, v held fixed)."""
    m = as_matrix(w)
    u, v, sigma = state.u, state.v, state.sigma
    g = as_matrix(dw_norm)
    wn = m / sigma
    grad = (g - np.sum(g * wn) * np.outer(u, v)) / sigma
    return grad.reshape(w.shape)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, t: int, lr: float,
              beta1: float = 0.0, beta2: float = 0.9, eps: float = 1e-8) -> None:
    """Bias-corrected Adam, updating ``params`` and ``state`` in place."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ShapeMismatch(f"{name}: param {p.shape} vs grad {g.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        state.m[name] = m
        state.v[name] = v
    state.t = t
