"""Synthetic two-domain tracks, WAV I/O, track-level splits and batching.

Domain A imitates band music: a few sawtooth-like harmonic voices over
broadband noise-burst drums. Domain B imitates solo fiddle with foot
tapping: one vibrato voice over sparse low thumps.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from . import dsp

SAMPLE_RATE = dsp.SAMPLE_RATE
PEAK = 0.9
STEMS = ("mixture", "harmonic", "percussive")


@dataclass
class Track:
    id: str
    domain: str
    mixture: np.ndarray
    harmonic: np.ndarray | None = None
    percussive: np.ndarray | None = None
    sample_rate: int = SAMPLE_RATE
    seed: int | None = None

    @property
    def labelled(self) -> bool:
        return self.harmonic is not None and self.percussive is not None

    def __post_init__(self):
        n = len(self.mixture)
        for stem in (self.harmonic, self.percussive):
            if stem is not None and len(stem) != n:
                raise ValueError(f"track {self.id}: stems and mixture differ in length")


@dataclass
class DatasetSplit:
    train: list
    validation: list
    seed: int


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

def _harmonic_stack(f0, sr, rolloff=1.0, phase0=0.0):
    """Sum of harmonics k * f0 (below Nyquist) with 1/k^rolloff amplitudes.

    ``f0`` is an instantaneous-frequency array.
    """
    phase = phase0 + 2 * np.pi * np.cumsum(f0) / sr
    out = np.zeros_like(f0)
    top = int(0.45 * sr / max(float(f0.max()), 1.0))
    for k in range(1, max(top, 1) + 1):
        audible = (k * f0) < 0.45 * sr
        out += audible * np.sin(k * phase) / k ** rolloff
    return out


def _envelope(n, sr, attack, release):
    env = np.ones(n)
    a = min(n, max(1, int(attack * sr)))
    r = min(n - a, max(1, int(release * sr)))
    env[:a] = np.linspace(0.0, 1.0, a)
    if r > 0:
        env[n - r:] *= np.linspace(1.0, 0.0, r)
    return env


def _domain_a(rng, n, sr):
    harm = np.zeros(n)
    for _ in range(rng.integers(2, 5)):
        pos = 0
        voice = np.zeros(n)
        while pos < n:
            dur = int(rng.uniform(0.4, 1.2) * sr)
            seg = min(dur, n - pos)
            f0 = np.full(seg, np.exp(rng.uniform(np.log(80), np.log(800))))
            tone = _harmonic_stack(f0, sr, rolloff=1.0, phase0=rng.uniform(0, 2 * np.pi))
            swell = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.2, 0.8) * np.arange(seg) / sr + rng.uniform(0, 6.3))
            voice[pos:pos + seg] = tone * swell * _envelope(seg, sr, 0.06, 0.08) * rng.uniform(0.4, 1.0)
            pos += seg
        harm += voice
    perc = np.zeros(n)
    step = 60.0 / rng.uniform(90, 150) / 2 * sr
    t = rng.uniform(0, step)
    while t < n:
        if rng.random() < 0.75:
            start = int(max(0, t + rng.normal(0, 0.01 * sr)))
            length = int(rng.uniform(0.005, 0.02) * sr)
            tail = min(length * 4, n - start)
            if tail > 0:
                decay = np.exp(-np.arange(tail) / length)
                perc[start:start + tail] += rng.uniform(0.5, 1.0) * decay * rng.standard_normal(tail)
        t += step
    return harm, perc


def _lowpass(x, cutoff, sr):
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(x.size, 1 / sr)
    spec *= 1.0 / (1.0 + (freqs / cutoff) ** 4)
    return np.fft.irfft(spec, x.size)


def _domain_b(rng, n, sr):
    # fiddle: legato phrases of notes, continuous phase, 5-7 Hz vibrato
    f0 = np.zeros(n)
    amp = np.zeros(n)
    pos = 0
    while pos < n:
        phrase = min(int(rng.uniform(1.5, 3.5) * sr), n - pos)
        env = _envelope(phrase, sr, 0.08, 0.15)
        q = 0
        while q < phrase:
            note = min(int(rng.uniform(0.2, 0.7) * sr), phrase - q)
            f0[pos + q:pos + q + note] = np.exp(rng.uniform(np.log(200), np.log(1000)))
            q += note
        amp[pos:pos + phrase] = env
        pos += phrase
        rest = int(rng.uniform(0.05, 0.2) * sr)
        pos += rest
    # rests hold the previous pitch; note changes glide over ~20 ms
    filled = np.maximum.accumulate(np.where(f0 > 0, np.arange(n), 0))
    f0 = f0[filled]
    f0[f0 == 0] = f0[f0 > 0][0]
    k = max(1, int(0.02 * sr))
    f0 = np.convolve(np.pad(f0, (k, k), mode="edge"), np.ones(k) / k, mode="same")[k:-k]
    t = np.arange(n) / sr
    vib = 1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(5, 7) * t + rng.uniform(0, 6.3))
    harm = _harmonic_stack(f0 * vib, sr, rolloff=1.3) * amp
    # foot taps: low thumps, roughly one per beat
    perc = np.zeros(n)
    beat = 60.0 / rng.uniform(90, 160) * sr
    tpos = rng.uniform(0, beat)
    while tpos < n:
        if rng.random() < 0.8:
            start = int(max(0, tpos + rng.normal(0, 0.015 * sr)))
            length = min(int(rng.uniform(0.08, 0.15) * sr), n - start)
            if length > 0:
                tt = np.arange(length) / sr
                f_thump = rng.uniform(50, 120)
                body = np.sin(2 * np.pi * f_thump * tt * (1 + 0.5 * np.exp(-tt / 0.02)))
                click = _lowpass(rng.standard_normal(length), 300.0, sr) * np.exp(-tt / 0.01)
                hit = (body + 0.5 * click) * np.exp(-tt / rng.uniform(0.02, 0.05))
                perc[start:start + length] += rng.uniform(0.6, 1.0) * hit
        tpos += beat
    return harm, perc


def synth_track(domain: str, seed: int, duration_s: float = 8.0, sample_rate: int = SAMPLE_RATE,
                track_id: str | None = None) -> Track:
    """Deterministic labelled synthetic track for domain ``"A"`` or ``"B"``."""
    if domain not in ("A", "B"):
        raise ValueError(f"domain must be 'A' or 'B', got {domain!r}")
    if duration_s < 2.0:
        raise ValueError(f"duration must be at least 2 s, got {duration_s}")
    n = int(round(duration_s * sample_rate))
    rng = np.random.default_rng([int(seed), ord(domain)])
    harm, perc = (_domain_a if domain == "A" else _domain_b)(rng, n, sample_rate)
    # stem balance: percussive 3-9 dB below harmonic
    harm_rms = np.sqrt(np.mean(harm ** 2)) or 1.0
    perc_rms = np.sqrt(np.mean(perc ** 2)) or 1.0
    perc *= harm_rms / perc_rms * 10 ** (-rng.uniform(3, 9) / 20)
    peak = np.max(np.abs(harm + perc))
    gain = PEAK / peak if peak > 0 else 1.0
    harm = harm * gain
    perc = perc * gain
    return Track(track_id or f"{domain}{seed:05d}", domain, harm + perc, harm, perc, sample_rate, int(seed))


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def write_wav(path, samples, sample_rate: int = SAMPLE_RATE, encoding: str = "float32"):
    x = np.asarray(samples, dtype=np.float64)
    if encoding == "float32":
        data = x.astype("<f4")
    elif encoding == "pcm16":
        data = np.round(np.clip(x, -1.0, 1.0) * 32767).astype("<i2")
    else:
        raise ValueError(f"unsupported WAV encoding {encoding!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), int(sample_rate), data)


def resample_linear(x, rate_in: int, rate_out: int) -> np.ndarray:
    if rate_in == rate_out:
        return np.asarray(x, dtype=np.float64)
    n_out = int(round(len(x) * rate_out / rate_in))
    t_out = np.arange(n_out) * (rate_in / rate_out)
    return np.interp(t_out, np.arange(len(x)), x)


def load_wav(path, target_rate: int = SAMPLE_RATE):
    """Read PCM16 / PCM32 / float32 WAV as mono float64 at ``target_rate``."""
    try:
        rate, data = wavfile.read(str(path))
    except (ValueError, EOFError) as exc:
        raise ValueError(f"{path}: cannot decode WAV ({exc})") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32767.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483647.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        x = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    x = np.clip(resample_linear(x, rate, target_rate), -1.0, 1.0)
    return x, target_rate


def save_track(track: Track, directory, encoding: str = "float32"):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_wav(d / "mixture.wav", track.mixture, track.sample_rate, encoding)
    if track.harmonic is not None:
        write_wav(d / "harmonic.wav", track.harmonic, track.sample_rate, encoding)
    if track.percussive is not None:
        write_wav(d / "percussive.wav", track.percussive, track.sample_rate, encoding)


def load_track(directory, domain: str = "?") -> Track:
    d = Path(directory)
    if not (d / "mixture.wav").exists():
        raise FileNotFoundError(f"{d}: no mixture.wav")
    mix, sr = load_wav(d / "mixture.wav")
    stems = {}
    for name in ("harmonic", "percussive"):
        if (d / f"{name}.wav").exists():
            stems[name] = load_wav(d / f"{name}.wav")[0]
    return Track(d.name, domain, mix, stems.get("harmonic"), stems.get("percussive"), sr)


def load_corpus_dir(directory, domain: str = "?") -> list:
    """All tracks in ``<directory>/<track>/``, sorted by track id."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"corpus directory {d} does not exist")
    return [load_track(p, domain) for p in sorted(d.iterdir()) if p.is_dir()]


# ---------------------------------------------------------------------------
# splitting and batching
# ---------------------------------------------------------------------------

def split(tracks, fraction: float = 0.2, seed: int = 0) -> DatasetSplit:
    """Track-level train/validation split with ``max(1, floor(fraction * n))`` held out."""
    tracks = list(tracks)
    if len(tracks) < 2:
        raise ValueError(f"need at least 2 tracks to split, got {len(tracks)}")
    n_val = max(1, int(np.floor(fraction * len(tracks) + 1e-9)))
    order = np.random.default_rng(seed).permutation(len(tracks))
    val_idx = set(order[:n_val].tolist())
    train = [t for i, t in enumerate(tracks) if i not in val_idx]
    val = [t for i, t in enumerate(tracks) if i in val_idx]
    return DatasetSplit(train, val, seed)


@dataclass
class PatchSet:
    """Stacked network inputs: mixtures (n, 1, F', T') and optional targets (n, 2, F', T')."""

    mixtures: np.ndarray
    targets: np.ndarray | None
    track_ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.mixtures)

    @property
    def labelled(self):
        return self.targets is not None


def track_patches(track: Track, patch_frames: int, fft_size: int, hop: int, labelled: bool = True):
    """Mixture patches plus, when labelled, stem patches sharing the mixture's gains."""
    mix_spec = dsp.stft(track.mixture, fft_size, hop, track.sample_rate)
    mix_p, phase = dsp.extract_patches(mix_spec, patch_frames, track.id)
    x = np.stack([p.values for p in mix_p])[:, None]
    if not labelled:
        return x, None, mix_p, phase
    if not track.labelled:
        raise ValueError(f"track {track.id} has no ground-truth stems")
    factors = [p.norm_factor for p in mix_p]
    ys = []
    for stem in (track.harmonic, track.percussive):
        stem_p, _ = dsp.extract_patches(dsp.stft(stem, fft_size, hop, track.sample_rate),
                                        patch_frames, track.id, norm_factors=factors)
        ys.append(np.stack([p.values for p in stem_p]))
    return x, np.stack(ys, axis=1), mix_p, phase


def build_patchset(tracks, patch_frames: int, fft_size: int = dsp.FFT_SIZE, hop: int = dsp.HOP,
                   labelled: bool = True) -> PatchSet:
    tracks = list(tracks)
    if not tracks:
        raise ValueError("no tracks to build patches from")
    xs, ys, ids = [], [], []
    for t in tracks:
        x, y, mix_p, _ = track_patches(t, patch_frames, fft_size, hop, labelled)
        xs.append(x)
        if y is not None:
            ys.append(y)
        ids += [t.id] * len(x)
    x = np.concatenate(xs).astype(np.float32)
    y = np.concatenate(ys).astype(np.float32) if labelled else None
    return PatchSet(x, y, ids)


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray | None
    index: np.ndarray


def make_batches(patches: PatchSet, batch_size: int, seed: int):
    """One shuffled pass over ``patches`` in batches of ``batch_size`` (last may be short)."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if len(patches) == 0:
        raise ValueError("no patches to batch")
    order = np.random.default_rng(seed).permutation(len(patches))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield Batch(patches.mixtures[idx], None if patches.targets is None else patches.targets[idx], idx)


class BatchStream:
    """Endless sampler drawing without replacement, reshuffling each cycle."""

    def __init__(self, patches: PatchSet, seed: int):
        if len(patches) == 0:
            raise ValueError("no patches to stream")
        self.patches = patches
        self.rng = np.random.default_rng(seed)
        self._order = self.rng.permutation(len(patches))
        self._pos = 0

    def take(self, n: int) -> Batch:
        picks = []
        while len(picks) < n:
            if self._pos >= len(self._order):
                self._order = self.rng.permutation(len(self.patches))
                self._pos = 0
            k = min(n - len(picks), len(self._order) - self._pos)
            picks.extend(self._order[self._pos:self._pos + k].tolist())
            self._pos += k
        idx = np.asarray(picks)
        y = None if self.patches.targets is None else self.patches.targets[idx]
        return Batch(self.patches.mixtures[idx], y, idx)


CORPUS_SPLITS = ("a_labelled", "a_test", "b_labelled", "b_test", "b_unlabelled")


def corpus_layout(root, split_name: str) -> Path:
    """``<root>/<split>``; each track lives in its own subdirectory below it."""
    if split_name not in CORPUS_SPLITS:
        raise ValueError(f"unknown corpus split {split_name!r}; expected one of {CORPUS_SPLITS}")
    return Path(root) / split_name


def env_output_root(default="."):
    return Path(os.environ.get("HPSS_UDA_OUTPUT_ROOT", default))
