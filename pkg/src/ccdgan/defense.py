"""
Purification by projection onto the generator's range.

A suspect waveform is analyzed, its log-magnitude frame grid is resized
to the generator resolution, and a latent vector is searched whose
generated grid minimizes the adjusted chordal distance to it. The
generated grid is mapped back to dB and native dimensions and combined
with the untouched analysis phase for reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ccgan.nets import Generator
from .errors import BadConfig, GeneratorUnavailable, ShapeMismatch
from .pencil import chordal_loss, matrix_eigenvalues
from .signal import Waveform
from .tfa import (
    Spectrogram,
    SquareGrid,
    TfaConfig,
    cwt_forward,
    cwt_inverse,
    expand_frames,
    frame_magnitude_db,
    from_unit,
    grid_range,
    resize_bilinear,
    to_unit,
    unresize_bilinear,
)

CLASS_STRATEGIES = ("known", "search-all-classes")


@dataclass(frozen=True)
class DefenseConfig:
    k_max: int = 400
    xi_coeff: float = 0.05
    perturb_std: float = 0.4
    restarts: int = 4
    class_strategy: str = "known"
    use_gradient_refinement: bool = False
    refine_steps: int = 50
    refine_lr: float = 0.05
    tol_beta: float = 1e-6
    qz_backend: str = "lapack"
    seed: int = 0

    def __post_init__(self):
        if self.k_max < 1 or self.restarts < 1:
            raise BadConfig("k_max and restarts must be >= 1")
        if not self.perturb_std > 0:
            raise BadConfig("perturb_std must be positive")
        if self.class_strategy not in CLASS_STRATEGIES:
            raise BadConfig(f"class_strategy must be one of {CLASS_STRATEGIES}")
        if self.xi_coeff < 0:
            raise BadConfig("xi_coeff must be non-negative")


@dataclass
class SearchResult:
    z_star: np.ndarray
    class_id: int
    k_used: int
    loss_trace: list
    final_loss: float
    converged: bool
    xi: float


@dataclass
class DefenseResult:
    z_star: np.ndarray
    class_used: int
    k_used: int
    loss_trace: list
    final_loss: float
    converged: bool
    output: Waveform
    xi: float = 0.0
    analysis: Optional[Spectrogram] = None
    synthesized: Optional[Spectrogram] = None
    per_class: dict = field(default_factory=dict)


def _check_generator(gen, size: int) -> None:
    if gen is None or not isinstance(gen, Generator) or not gen.params:
        raise GeneratorUnavailable("no usable generator was supplied")
    if gen.cfg.resolution != size:
        raise ShapeMismatch(f"grid is {size}x{size} but the generator emits "
                            f"{gen.cfg.resolution}x{gen.cfg.resolution}")


def _search_rng(seed: int, class_id: int, restart: int) -> np.random.Generator:
    return np.random.default_rng([seed, class_id, restart])


def latent_search(x, class_id: int, gen: Generator, cfg: DefenseConfig = DefenseConfig()) -> SearchResult:
    """Accept-if-better random search over z for min chordal_loss(G(z), x)."""
    target = np.asarray(getattr(x, "values", x), dtype=np.float64)
    if target.ndim != 2 or target.shape[0] != target.shape[1]:
        raise ShapeMismatch(f"latent search needs a square grid, got {target.shape}")
    _check_generator(gen, target.shape[0])
    backend = cfg.qz_backend
    lam_x = matrix_eigenvalues(target, backend)
    xi = cfg.xi_coeff * float(np.mean(np.abs(lam_x)))
    d = gen.cfg.latent_dim

    def loss(z):
        return chordal_loss(gen(z[None], class_id)[0], target, cfg.tol_beta,
                            backend=backend, lam_x=lam_x).total

    best_z, best = None, np.inf
    trace: list[float] = []
    k_used = 0
    for r in range(cfg.restarts):
        rng = _search_rng(cfg.seed, class_id, r)
        z = cfg.perturb_std * rng.standard_normal(d)
        cur = loss(z)
        if cur < best:
            best_z, best = z.copy(), cur
            trace.append(best)
        k = 0
        while k < cfg.k_max and cur > xi:
            k += 1
            step = 1.0 - rng.random()  # uniform in (0, 1]
            cand = z + step * cfg.perturb_std * rng.standard_normal(d)
            val = loss(cand)
            if val < cur:
                z, cur = cand, val
                if cur < best:
                    best_z, best = z.copy(), cur
                    trace.append(best)
        k_used += k
        if best <= xi:
            break

    if cfg.use_gradient_refinement:
        best_z, best = _refine(gen, class_id, target, best_z, best, loss, cfg, trace)
    return SearchResult(best_z, class_id, k_used, trace, best, bool(best <= xi), xi)


def _refine(gen, class_id, target, z, cur, loss, cfg, trace):
    """Gradient steps on mean squared grid error; chordal-loss increases are rejected."""
    lr = cfg.refine_lr
    for _ in range(cfg.refine_steps):
        out, tr = gen.forward(z[None], class_id, train=False)
        _, dz = gen.backward(tr, 2.0 * (out - target[None]) / target.size)
        cand = z - lr * dz[0]
        val = loss(cand)
        if val <= cur:
            z, cur = cand, val
            trace.append(cur)
        else:
            lr *= 0.5
    return z, cur


def analysis_grid(x: Waveform, size: int, tfa_cfg: TfaConfig = TfaConfig()):
    """(spectrogram, native frame grid in dB, resized grid, (lo, hi) dB range, unit grid)."""
    s = cwt_forward(x, tfa_cfg)
    frames = frame_magnitude_db(s)
    grid = resize_bilinear(frames, size)
    lo, hi = grid_range(grid)
    return s, frames, grid, (lo, hi), to_unit(grid, lo, hi)


def defend(x_in: Waveform, gen: Generator, class_id: Optional[int] = None,
           tfa_cfg: TfaConfig = TfaConfig(), cfg: DefenseConfig = DefenseConfig()) -> DefenseResult:
    """Project ``x_in`` onto the generator manifold and resynthesize with the original phase.

    ``class_id=None`` (or class_strategy search-all-classes) searches every class and
    keeps the lowest final loss, ties going to the lower class id.
    """
    if gen is None:
        raise GeneratorUnavailable("no generator loaded")
    size = gen.cfg.resolution
    s, frames, grid, (lo, hi), unit = analysis_grid(x_in, size, tfa_cfg)
    if class_id is None or cfg.class_strategy == "search-all-classes":
        classes = range(gen.cfg.n_classes)
    else:
        if not 0 <= class_id < gen.cfg.n_classes:
            raise ShapeMismatch(f"class {class_id} outside [0, {gen.cfg.n_classes})")
        classes = [class_id]
    results = {c: latent_search(unit, c, gen, cfg) for c in classes}
    best = min(results.values(), key=lambda r: (r.final_loss, r.class_id))

    generated = gen(best.z_star[None], best.class_id)[0]
    synth_db = from_unit(generated, lo, hi)
    native = unresize_bilinear(SquareGrid(synth_db, tuple(frames.shape)))
    synthesized = s.with_magnitude(expand_frames(native, s))
    output = cwt_inverse(synthesized)
    return DefenseResult(
        z_star=best.z_star,
        class_used=best.class_id,
        k_used=sum(r.k_used for r in results.values()),
        loss_trace=best.loss_trace,
        final_loss=best.final_loss,
        converged=best.converged,
        output=output,
        xi=best.xi,
        analysis=s,
        synthesized=synthesized,
        per_class={c: r.final_loss for c, r in results.items()},
    )


def trace_document(result: DefenseResult) -> str:
    """Key-value text record of a defense run."""
    lines = [
        f"class_used = {result.class_used}",
        f"k_used = {result.k_used}",
        f"final_loss = {result.final_loss!r}",
        f"converged = {str(result.converged).lower()}",
        f"xi = {result.xi!r}",
        "loss_trace = " + " ".join(repr(float(v)) for v in result.loss_trace),
    ]
    lines += [f"class_loss.{c} = {v!r}" for c, v in sorted(result.per_class.items())]
    return "\n".join(lines) + "\n"
