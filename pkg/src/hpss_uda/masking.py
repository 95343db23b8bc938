"""Oracle masks, single-channel Wiener refinement and mixture-phase resynthesis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import ComplexSpectrogram, PhaseRecord, istft

EPS = 1e-10
WIENER_POWER = 2.0


@dataclass
class MaskPair:
    harmonic: np.ndarray
    percussive: np.ndarray


def _pair(h, p, name):
    h = np.asarray(h, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if h.shape != p.shape:
        raise ValueError(f"{name}: shape mismatch {h.shape} vs {p.shape}")
    return h, p


def _split_exact(total, part):
    """``(a, b)`` with ``a ~= part`` and ``a + b == total`` bit-exactly.

    Double complement: whichever of ``part`` and ``total - part`` is at least
    ``total / 2`` makes the other subtraction exact (Sterbenz).
    """
    b = total - part
    return total - b, b


def ibm(h_mag, p_mag) -> MaskPair:
    """Ideal binary mask; ties go to the harmonic source."""
    h, p = _pair(h_mag, p_mag, "ibm")
    mh = (h >= p).astype(np.float64)
    return MaskPair(mh, 1.0 - mh)


def irm(h_mag, p_mag) -> MaskPair:
    """Ideal ratio mask ``h / (h + p + eps)``, renormalised to sum to one."""
    h, p = _pair(h_mag, p_mag, "irm")
    mh = h / (h + p + EPS)
    mp = p / (h + p + EPS)
    total = mh + mp
    # silent bins (h = p = 0) split evenly
    mh = np.where(total > 0, mh / np.where(total > 0, total, 1.0), 0.5)
    return MaskPair(*_split_exact(1.0, mh))


def wiener_masks(est_h, est_p, power: float = WIENER_POWER) -> MaskPair:
    h, p = _pair(est_h, est_p, "wiener_masks")
    ph = h ** power
    pp = p ** power
    mh = ph / (ph + pp + EPS)
    return MaskPair(*_split_exact(1.0, mh))


def wiener_refine(est_h, est_p, mix_mag, power: float = WIENER_POWER):
    """Redistribute the mixture magnitude with power-ratio soft masks.

    Returns ``(refined_h, refined_p)``; their sum is exactly ``mix_mag``.
    """
    h, p = _pair(est_h, est_p, "wiener_refine")
    mix = np.asarray(mix_mag, dtype=np.float64)
    if mix.shape != h.shape:
        raise ValueError(f"wiener_refine: mixture shape {mix.shape} vs estimate shape {h.shape}")
    if np.any(h < 0) or np.any(p < 0):
        raise ValueError("wiener_refine: estimates must be non-negative")
    masks = wiener_masks(h, p, power)
    return _split_exact(mix, masks.harmonic * mix)


def reconstruct(source_mag, phase: PhaseRecord, original_length: int | None = None) -> np.ndarray:
    """Attach the mixture phase to a magnitude and invert.

    ``source_mag`` may include the Nyquist row (F bins) or omit it (F - 1
    bins, zero-filled).
    """
    mag = np.asarray(source_mag, dtype=np.float64)
    n_bins, n_frames = phase.phase.shape
    if mag.shape == (n_bins - 1, n_frames):
        mag = np.vstack([mag, np.zeros((1, n_frames))])
    if mag.shape != (n_bins, n_frames):
        raise ValueError(f"reconstruct: magnitude {mag.shape} does not match phase {phase.phase.shape}")
    spec = ComplexSpectrogram(mag * np.exp(1j * phase.phase), phase.sample_rate, phase.fft_size,
                              phase.hop, phase.length, phase.window)
    return istft(spec, phase.length if original_length is None else original_length)


def apply_masks(mix: ComplexSpectrogram, masks: MaskPair):
    """Mask the full complex mixture; masks without the Nyquist row reuse the top bin's value."""
    mh = np.asarray(masks.harmonic, dtype=np.float64)
    if mh.shape[0] == mix.n_bins - 1:
        mh = np.vstack([mh, mh[-1:]])
    if mh.shape != mix.values.shape:
        raise ValueError(f"apply_masks: mask {mh.shape} vs spectrogram {mix.values.shape}")
    h = istft(mix.with_values(mix.values * mh))
    p = istft(mix.with_values(mix.values * (1.0 - mh)))
    return h, p
