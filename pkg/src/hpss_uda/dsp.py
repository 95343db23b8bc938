"""STFT/ISTFT and fixed-size magnitude patches.

The analysis window is a periodic Hann, which overlap-adds to a constant at
75% overlap. Signals are zero-padded by ``fft_size - hop`` samples on both
ends so every original sample is covered by the same number of frames;
inversion is then a weighted overlap-add divided by the summed squared
window.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SAMPLE_RATE = 16000
FFT_SIZE = 512
HOP = 128
NORM_FLOOR = 1e-8


@dataclass
class ComplexSpectrogram:
    """One-sided STFT, ``values`` shaped (fft_size // 2 + 1, frames)."""

    values: np.ndarray
    sample_rate: int
    fft_size: int
    hop: int
    length: int
    window: str = "hann"

    @property
    def n_bins(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.values)

    def with_values(self, values: np.ndarray) -> "ComplexSpectrogram":
        return ComplexSpectrogram(values, self.sample_rate, self.fft_size, self.hop, self.length, self.window)


@dataclass
class MagnitudePatch:
    """A normalised (F', T') magnitude block; ``pad`` trailing frames are zero fill."""

    values: np.ndarray
    norm_factor: float
    track_id: str
    offset: int
    pad: int = 0


@dataclass
class PhaseRecord:
    """What :func:`assemble_patches` needs to rebuild a full complex spectrogram."""

    phase: np.ndarray
    sample_rate: int
    fft_size: int
    hop: int
    length: int
    patch_frames: int
    track_id: str = ""
    window: str = "hann"
    offsets: list = field(default_factory=list)


def hann(fft_size: int) -> np.ndarray:
    n = np.arange(fft_size)
    return 0.5 - 0.5 * np.cos(2 * np.pi * n / fft_size)


def _check_params(fft_size, hop):
    if fft_size < 2 or fft_size % 2:
        raise ValueError(f"fft_size must be a positive even number, got {fft_size}")
    if hop < 1 or fft_size % hop:
        raise ValueError(f"hop must divide fft_size, got hop={hop}, fft_size={fft_size}")


def n_frames_for(length: int, fft_size: int = FFT_SIZE, hop: int = HOP) -> int:
    pad = fft_size - hop
    return 1 + -(-(length + 2 * pad - fft_size) // hop)


def stft(signal, fft_size: int = FFT_SIZE, hop: int = HOP, sample_rate: int = SAMPLE_RATE) -> ComplexSpectrogram:
    """Periodic-Hann STFT of a mono signal."""
    _check_params(fft_size, hop)
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"stft expects a mono 1-D signal, got shape {x.shape}")
    if x.size < fft_size:
        raise ValueError(f"signal of {x.size} samples is shorter than fft_size={fft_size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal contains non-finite samples")
    pad = fft_size - hop
    n_frames = n_frames_for(x.size, fft_size, hop)
    total = (n_frames - 1) * hop + fft_size
    padded = np.zeros(total)
    padded[pad:pad + x.size] = x
    idx = np.arange(fft_size)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * hann(fft_size)
    values = np.fft.rfft(frames, axis=1).T
    return ComplexSpectrogram(values, sample_rate, fft_size, hop, x.size)


def istft(spec: ComplexSpectrogram, original_length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    fft_size, hop = spec.fft_size, spec.hop
    _check_params(fft_size, hop)
    if spec.values.ndim != 2 or spec.n_bins != fft_size // 2 + 1:
        raise ValueError(f"spectrogram shape {spec.values.shape} inconsistent with fft_size={fft_size}")
    length = spec.length if original_length is None else int(original_length)
    if spec.window != "hann":
        raise ValueError(f"unsupported window {spec.window!r}")
    n_frames = spec.n_frames
    win = hann(fft_size)
    frames = np.fft.irfft(spec.values.T, n=fft_size, axis=1) * win
    total = (n_frames - 1) * hop + fft_size
    out = np.zeros(total)
    wsum = np.zeros(total)
    for t in range(n_frames):
        out[t * hop:t * hop + fft_size] += frames[t]
        wsum[t * hop:t * hop + fft_size] += win * win
    pad = fft_size - hop
    if pad + length > total:
        raise ValueError(f"spectrogram with {n_frames} frames cannot cover {length} samples")
    nz = wsum > 1e-10
    out[nz] /= wsum[nz]
    return out[pad:pad + length]


def extract_patches(
    spec: ComplexSpectrogram,
    patch_frames: int,
    track_id: str = "",
    norm_factors=None,
):
    """Cut the magnitude (Nyquist bin dropped) into consecutive patches.

    Each patch is divided by its own maximum (floored at 1e-8) unless
    ``norm_factors`` supplies the factors, which is how target stems share
    the mixture's gain. Returns ``(patches, phase_record)``.
    """
    if patch_frames < 1:
        raise ValueError(f"patch_frames must be >= 1, got {patch_frames}")
    mag = np.abs(spec.values[:-1])
    n_frames = mag.shape[1]
    n_patches = -(-n_frames // patch_frames)
    if norm_factors is not None and len(norm_factors) != n_patches:
        raise ValueError(f"{len(norm_factors)} norm factors for {n_patches} patches")
    patches = []
    for k in range(n_patches):
        start = k * patch_frames
        block = mag[:, start:start + patch_frames]
        pad = patch_frames - block.shape[1]
        if pad:
            block = np.pad(block, ((0, 0), (0, pad)))
        if norm_factors is None:
            factor = max(float(block.max()), NORM_FLOOR)
        else:
            factor = float(norm_factors[k])
        patches.append(MagnitudePatch(block / factor, factor, track_id, start, pad))
    record = PhaseRecord(
        phase=np.angle(spec.values),
        sample_rate=spec.sample_rate,
        fft_size=spec.fft_size,
        hop=spec.hop,
        length=spec.length,
        patch_frames=patch_frames,
        track_id=track_id,
        window=spec.window,
        offsets=[p.offset for p in patches],
    )
    return patches, record


def patches_to_magnitude(patches, phase: PhaseRecord) -> np.ndarray:
    """De-normalise and concatenate patches into an (F', T) magnitude."""
    if not patches:
        raise ValueError("no patches to assemble")
    ordered = sorted(patches, key=lambda p: p.offset)
    for k, p in enumerate(ordered):
        if p.offset != k * phase.patch_frames:
            raise ValueError(f"missing patch at frame offset {k * phase.patch_frames} (found {p.offset})")
    mag = np.concatenate([p.values * p.norm_factor for p in ordered], axis=1)
    n_frames = phase.phase.shape[1]
    if mag.shape[1] < n_frames:
        raise ValueError(f"patches cover {mag.shape[1]} frames but the track has {n_frames}")
    return mag[:, :n_frames]


def assemble_patches(patches, phase: PhaseRecord) -> ComplexSpectrogram:
    """Inverse of :func:`extract_patches` with a zero Nyquist row."""
    mag = patches_to_magnitude(patches, phase)
    full = np.vstack([mag, np.zeros((1, mag.shape[1]))])
    values = full * np.exp(1j * phase.phase)
    return ComplexSpectrogram(values, phase.sample_rate, phase.fft_size, phase.hop, phase.length, phase.window)
