"""
Gradient-sign perturbations against the probe classifier.

The probe sees ``to_unit(resize(frame_db(|W x|)))``. Every stage except the
min-max normalization is differentiated exactly; the normalization range
is frozen at the clean input's values (a linearization), which is why
the gradient is only used for its sign.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import GradientUnavailable, SilentSignal
from ..signal import Perturbation, Waveform, loudness_db, psd_distortion_db, relative_loudness_db
from ..tfa import TfaConfig, _interp_axis, _transform, _transform_adjoint, frame_centers
from ..ccgan import layers as L
from .probe import ProbeClassifier


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix of the corner-aligned linear interpolation."""
    return _interp_axis(np.eye(n_in), n_out, 0)


class FeatureMap:
    """Waveform -> unit grid with an exact reverse pass for fixed normalization range."""

    def __init__(self, n_samples: int, size: int, cfg: TfaConfig = TfaConfig()):
        self.cfg = cfg
        self.size = size
        n = n_samples
        centers = frame_centers(n, cfg.hop)
        self.starts = np.clip(centers - cfg.hop // 2, 0, n)
        self.lengths = np.append(self.starts[1:], n) - self.starts
        self.frame_of = np.repeat(np.arange(centers.size), self.lengths)
        self.rows = _interp_matrix(cfg.n_scales, size)
        self.cols = _interp_matrix(centers.size, size)

    def grid_db(self, samples: np.ndarray):
        w = _transform(samples, self.cfg)
        mag = np.abs(w)
        pooled = np.add.reduceat(mag, self.starts, axis=1) / self.lengths[None, :]
        frames = 20.0 * np.log10(pooled + self.cfg.log_floor_eps)
        return self.rows @ frames @ self.cols.T, (w, mag, pooled)

    def unit_backward(self, dunit: np.ndarray, lo: float, hi: float, cache) -> np.ndarray:
        w, mag, pooled = cache
        dgrid = dunit * (2.0 / (hi - lo))
        dframes = self.rows.T @ dgrid @ self.cols
        dpooled = dframes * (20.0 / np.log(10.0)) / (pooled + self.cfg.log_floor_eps)
        dmag = (dpooled / self.lengths[None, :])[:, self.frame_of]
        safe = np.where(mag > 0, mag, 1.0)
        dw = np.where(mag > 0, dmag / safe, 0.0) * w
        return _transform_adjoint(dw, self.cfg)


@dataclass
class CraftedPerturbation:
    perturbation: Perturbation
    eps_used: float
    loudness_db_rel: float
    psd_distortion_db: float
    target: int


def craft_perturbation(x: Waveform, probe: ProbeClassifier, target: int, eps: float,
                       tfa_cfg: TfaConfig = TfaConfig(), loudness_bound_db: float = -15.0,
                       steps: int = 1) -> CraftedPerturbation:
    """Targeted gradient-sign perturbation with peak |delta| <= eps and the loudness bound.

    ``steps > 1`` iterates sign steps of eps/steps*2 projected onto the eps ball.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    samples = x.samples
    n = samples.size
    peak = float(np.max(np.abs(samples)))
    if peak == 0.0:
        raise SilentSignal("cannot scale a perturbation against a silent input")
    limit = min(eps, peak * 10.0 ** (loudness_bound_db / 20.0))
    # log rounding can put a limit at the bound a few ulp over it
    while limit > 0.0 and 20.0 * np.log10(limit) - 20.0 * np.log10(peak) > loudness_bound_db:
        limit = np.nextafter(limit, 0.0)
    if limit == 0.0:
        delta = np.zeros(n)
    else:
        fmap = FeatureMap(n, probe.size, tfa_cfg)
        grid0, _ = fmap.grid_db(samples)
        lo, hi = float(grid0.min()), float(grid0.max())
        delta = np.zeros(n)
        step = limit if steps == 1 else 2.0 * limit / steps
        for _ in range(steps):
            grid, cache = fmap.grid_db(samples + delta)
            unit = 2.0 * (grid - lo) / (hi - lo) - 1.0
            logits, pcache = probe.forward(unit)
            _, dlog = L.softmax_cross_entropy(logits, np.array([target]))
            _, dunit = probe.backward(pcache, dlog)
            grad = fmap.unit_backward(dunit[0], lo, hi, cache)
            if not np.all(np.isfinite(grad)):
                raise GradientUnavailable("non-finite gradient through the analysis path")
            if not np.any(grad):
                raise GradientUnavailable("zero gradient; sign step undefined")
            delta = np.clip(delta - step * np.sign(grad), -limit, limit)
        # never exceed full scale once injected
        delta = np.clip(np.clip(samples + delta, -1.0, 1.0) - samples, -limit, limit)
    pert = Perturbation(delta)
    if np.any(delta):
        rel = relative_loudness_db(x, pert)
        psd_d = psd_distortion_db(x, pert, tfa_cfg.frame_samples, tfa_cfg.hop)
    else:
        rel = psd_d = float("-inf")
    return CraftedPerturbation(Perturbation(delta, rel), float(limit), rel, psd_d, int(target))
