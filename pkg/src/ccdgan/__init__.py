"""Wavelet-spectrogram GAN purification of adversarial audio, in numpy."""

from .errors import CCDGanError, DataError, NumericalError, UsageError
from .pencil import Pencil, GeneralizedEigen, qz_decompose, chordal_distance, chordal_loss
from .signal import Waveform, Perturbation, load_wav, save_wav, inject_perturbation
from .tfa import TfaConfig, Spectrogram, cwt_forward, cwt_inverse
from .defense import DefenseConfig, DefenseResult, defend, latent_search

__version__ = "0.1.0"

__all__ = [
    "CCDGanError", "DataError", "NumericalError", "UsageError",
    "Pencil", "GeneralizedEigen", "qz_decompose", "chordal_distance", "chordal_loss",
    "Waveform", "Perturbation", "load_wav", "save_wav", "inject_perturbation",
    "TfaConfig", "Spectrogram", "cwt_forward", "cwt_inverse",
    "DefenseConfig", "DefenseResult", "defend", "latent_search",
]
