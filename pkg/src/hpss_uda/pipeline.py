"""Full-track separation and evaluation.

Separation: STFT -> patches -> encoder/decoder -> reassembled magnitudes ->
Wiener refinement against the mixture -> mixture-phase resynthesis.
"""
from __future__ import annotations

import numpy as np

from . import dsp
from . import masking as MK
from . import metrics as ME
from . import model as M

ORACLES = ("ibm", "irm", "mixture")


def stft_params(config: M.SeparatorConfig):
    """FFT size and hop (75% overlap) implied by a separator's patch height."""
    fft = 2 * config.patch_height
    return fft, fft // 4


def estimate_magnitudes(params: M.ParamSet, spec: dsp.ComplexSpectrogram, batch_size: int = 16):
    """Network estimates (harmonic, percussive) on the non-Nyquist bins."""
    cfg = params.config
    if spec.n_bins - 1 != cfg.patch_height:
        raise ValueError(f"spectrogram has {spec.n_bins - 1} usable bins, model expects {cfg.patch_height}")
    patches, phase = dsp.extract_patches(spec, cfg.patch_width)
    x = np.stack([p.values for p in patches])[:, None].astype(np.float32)
    enc, dec = params.frozen("encoder"), params.frozen("decoder")
    outs = []
    for start in range(0, len(x), batch_size):
        xb = x[start:start + batch_size]
        outs.append(M.decode(M.encode(xb, enc, cfg), dec, cfg, xb).data)
    y = np.concatenate(outs).astype(np.float64)
    est = []
    for ch in range(2):
        ps = [dsp.MagnitudePatch(y[k, ch], p.norm_factor, p.track_id, p.offset, p.pad) for k, p in enumerate(patches)]
        est.append(dsp.patches_to_magnitude(ps, phase))
    return est[0], est[1]


def separate_signal(params: M.ParamSet, mixture, sample_rate: int = dsp.SAMPLE_RATE):
    """Separate a mono signal into (harmonic, percussive) of the same length.

    The two outputs sum to the input up to ISTFT round-off.
    """
    fft, hop = stft_params(params.config)
    spec = dsp.stft(mixture, fft, hop, sample_rate)
    est_h, est_p = estimate_magnitudes(params, spec)
    masks = MK.wiener_masks(est_h, est_p)
    return MK.apply_masks(spec, masks)


def oracle_masks(kind: str, harmonic, percussive, fft_size: int = dsp.FFT_SIZE, hop: int = dsp.HOP,
                 sample_rate: int = dsp.SAMPLE_RATE):
    """Mixture spectrogram and the IBM or IRM computed from the true stems."""
    mixture = np.asarray(harmonic) + np.asarray(percussive)
    spec = dsp.stft(mixture, fft_size, hop, sample_rate)
    hm = np.abs(dsp.stft(harmonic, fft_size, hop, sample_rate).values)
    pm = np.abs(dsp.stft(percussive, fft_size, hop, sample_rate).values)
    if kind == "ibm":
        masks = MK.ibm(hm, pm)
    elif kind == "irm":
        masks = MK.irm(hm, pm)
    else:
        raise ValueError(f"unknown mask oracle {kind!r}; expected 'ibm' or 'irm'")
    return spec, masks


def oracle_separate(kind: str, harmonic, percussive, fft_size: int = dsp.FFT_SIZE, hop: int = dsp.HOP,
                    sample_rate: int = dsp.SAMPLE_RATE):
    """IBM / IRM from the true stems, or the mixture itself as both estimates."""
    if kind not in ORACLES:
        raise ValueError(f"unknown oracle {kind!r}; expected one of {ORACLES}")
    if kind == "mixture":
        mixture = np.asarray(harmonic) + np.asarray(percussive)
        return mixture.copy(), mixture.copy()
    return MK.apply_masks(*oracle_masks(kind, harmonic, percussive, fft_size, hop, sample_rate))


def evaluate(tracks, params: M.ParamSet | None = None, oracle: str | None = None, filter_len: int = 1,
             fft_size: int = dsp.FFT_SIZE, hop: int = dsp.HOP, label: str = "") -> ME.MetricsTable:
    """Per-track BSS metrics and their medians for a model or an oracle."""
    if (params is None) == (oracle is None):
        raise ValueError("pass exactly one of params or oracle")
    results = []
    for t in tracks:
        if not t.labelled:
            raise ValueError(f"track {t.id} has no ground truth; evaluation needs labelled tracks")
        if params is not None:
            h, p = separate_signal(params, t.mixture, t.sample_rate)
        else:
            h, p = oracle_separate(oracle, t.harmonic, t.percussive, fft_size, hop, t.sample_rate)
        results.append(ME.bss_eval([t.harmonic, t.percussive], [h, p], filter_len, t.id))
    return ME.aggregate(results, label or (oracle or "model"))
