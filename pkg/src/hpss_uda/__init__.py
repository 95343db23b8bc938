"""Harmonic/percussive source separation with adversarial domain adaptation.

A numpy convolutional encoder/decoder separates magnitude-spectrogram
patches into harmonic and percussive estimates. A domain discriminator on
the encoder output drives unsupervised adaptation to an unlabelled target
domain. Hot convolution and pooling kernels run through numba, with a pure
numpy fallback selected by ``HPSS_UDA_BACKEND=numpy``.
"""
from ._kernels import get_backend, set_backend
from .data import Track, synth_track
from .model import ParamSet, SeparatorConfig, init_params, load_checkpoint, save_checkpoint
from .pipeline import evaluate, separate_signal
from .training import LossWeights, TrainConfig, TrainingData, fit

__version__ = "0.1.0"

__all__ = [
    "LossWeights", "ParamSet", "SeparatorConfig", "TrainConfig", "TrainingData", "Track",
    "evaluate", "fit", "get_backend", "init_params", "load_checkpoint", "save_checkpoint",
    "separate_signal", "set_backend", "synth_track",
]
