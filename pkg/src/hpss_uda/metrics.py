"""BSS_eval-style SDR / SIR / SAR and median aggregation over tracks.

Each estimate is decomposed as ``s_target + e_interf + e_artif`` by least
squares projections onto time-shifted copies of the references (``filter_len``
shifts; ``filter_len=1`` reduces to plain scalar projections).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

SOURCES = ("harmonic", "percussive")
METRICS = ("SDR", "SIR", "SAR")
CAP_DB = 100.0


@dataclass
class TrackMetrics:
    track_id: str
    values: dict  # {source: {metric: dB}}

    def get(self, source: str, metric: str) -> float:
        return self.values[source][metric]


@dataclass
class MetricsTable:
    tracks: list
    median: dict = field(default_factory=dict)
    label: str = ""


def _ratio_db(num: float, den: float) -> float:
    if den <= 0.0:
        return CAP_DB
    if num <= 0.0:
        return -CAP_DB
    return float(np.clip(10.0 * np.log10(num / den), -CAP_DB, CAP_DB))


def _shifted(ref: np.ndarray, filter_len: int) -> np.ndarray:
    """(n + L - 1, L) matrix whose column k is ``ref`` delayed by k samples."""
    n = ref.size
    out = np.zeros((n + filter_len - 1, filter_len))
    for k in range(filter_len):
        out[k:k + n, k] = ref
    return out


def _gram_and_rhs(refs: np.ndarray, est: np.ndarray, filter_len: int):
    """Gram matrix of all shifted references and their correlation with ``est``.

    Computed with FFT correlations so ``filter_len=512`` stays cheap.
    """
    n_src, n = refs.shape
    if filter_len == 1:
        return refs @ refs.T, refs @ est
    nfft = 1 << int(np.ceil(np.log2(n + filter_len - 1)))
    R = np.fft.rfft(refs, nfft)
    E = np.fft.rfft(est, nfft)
    size = n_src * filter_len
    gram = np.zeros((size, size))
    # block (i, j)[k, l] = sum_u ref_i[u] * ref_j[u + k - l]
    lag = (np.arange(filter_len)[:, None] - np.arange(filter_len)[None, :]) % nfft
    for i in range(n_src):
        for j in range(n_src):
            xc = np.fft.irfft(np.conj(R[i]) * R[j], nfft)
            gram[i * filter_len:(i + 1) * filter_len, j * filter_len:(j + 1) * filter_len] = xc[lag]
    rhs = np.zeros(size)
    for i in range(n_src):
        xc = np.fft.irfft(np.conj(R[i]) * E, nfft)
        rhs[i * filter_len:(i + 1) * filter_len] = xc[:filter_len]
    return gram, rhs


def decompose(references, estimate, index: int, filter_len: int = 1):
    """Return ``(s_target, e_interf, e_artif)`` for ``estimate`` of source ``index``.

    With ``filter_len > 1`` all three live on the zero-padded support of
    length ``n + filter_len - 1``.
    """
    refs = np.asarray(references, dtype=np.float64)
    est = np.asarray(estimate, dtype=np.float64)
    n_src, n = refs.shape
    L = int(filter_len)
    est_pad = np.concatenate([est, np.zeros(L - 1)])
    gram, rhs = _gram_and_rhs(refs, est, L)
    own = slice(index * L, (index + 1) * L)
    coef_own = np.linalg.solve(gram[own, own], rhs[own])
    coef_all = np.linalg.lstsq(gram, rhs, rcond=None)[0]
    if L == 1:
        s_target = coef_own[0] * refs[index]
        p_all = coef_all @ refs
    else:
        s_target = _shifted(refs[index], L) @ coef_own
        p_all = sum(_shifted(refs[i], L) @ coef_all[i * L:(i + 1) * L] for i in range(n_src))
    e_interf = p_all - s_target
    e_artif = est_pad - p_all
    return s_target, e_interf, e_artif


def bss_eval(references, estimates, filter_len: int = 1, track_id: str = "", sources=SOURCES) -> TrackMetrics:
    """SDR, SIR and SAR in dB for each (reference, estimate) pair.

    ``references`` and ``estimates`` are (n_sources, n_samples); estimate k is
    scored against reference k. Values are capped to +/-100 dB.
    """
    refs = np.atleast_2d(np.asarray(references, dtype=np.float64))
    ests = np.atleast_2d(np.asarray(estimates, dtype=np.float64))
    if refs.shape != ests.shape:
        raise ValueError(f"bss_eval: references {refs.shape} vs estimates {ests.shape}")
    if filter_len < 1:
        raise ValueError(f"filter_len must be >= 1, got {filter_len}")
    if refs.shape[1] < 2 * filter_len:
        raise ValueError(f"signals of {refs.shape[1]} samples are too short for filter_len={filter_len}")
    names = list(sources)[:refs.shape[0]]
    for k, name in enumerate(names):
        if not np.any(refs[k]):
            raise ValueError(f"bss_eval: reference for source {name!r} is silent")
    values = {}
    for k, name in enumerate(names):
        s, ei, ea = decompose(refs, ests[k], k, filter_len)
        st = float(s @ s)
        values[name] = {
            "SDR": _ratio_db(st, float((ei + ea) @ (ei + ea))),
            "SIR": _ratio_db(st, float(ei @ ei)),
            "SAR": _ratio_db(float((s + ei) @ (s + ei)), float(ea @ ea)),
        }
    return TrackMetrics(track_id, values)


def lower_median(values) -> float:
    vals = sorted(values)
    if not vals:
        raise ValueError("median of an empty sequence")
    return float(vals[(len(vals) - 1) // 2])


def aggregate(tracks, label: str = "") -> MetricsTable:
    """Per-source, per-metric lower median over tracks (sorted by id)."""
    tracks = sorted(tracks, key=lambda t: t.track_id)
    if not tracks:
        raise ValueError("aggregate needs at least one track")
    sources = list(tracks[0].values)
    median = {
        src: {m: lower_median(t.values[src][m] for t in tracks) for m in METRICS}
        for src in sources
    }
    return MetricsTable(tracks, median, label)


def tracks_csv(table: MetricsTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "track"] + [f"{s}_{m}" for s in SOURCES for m in METRICS])
    for t in table.tracks:
        writer.writerow([table.label, t.track_id] + [f"{t.values[s][m]:.4f}" for s in SOURCES for m in METRICS])
    return buf.getvalue()


def summary_csv(rows, domains, header_note: str = "") -> str:
    """Median summary: one row per method, columns domain x source x metric.

    ``rows`` maps method name to ``{domain: MetricsTable}``.
    """
    buf = io.StringIO()
    if header_note:
        buf.write(f"# {header_note}\n")
    writer = csv.writer(buf, lineterminator="\n")
    cols = [f"{d}_{s}_{m}" for d in domains for s in ("percussive", "harmonic") for m in METRICS]
    writer.writerow(["method"] + cols)
    for method, per_domain in rows.items():
        vals = []
        for d in domains:
            for s in ("percussive", "harmonic"):
                for m in METRICS:
                    tab = per_domain.get(d)
                    vals.append(f"{tab.median[s][m]:.2f}" if tab is not None else "")
        writer.writerow([method] + vals)
    return buf.getvalue()


def pretty_table(rows, domains) -> str:
    """Console rendering of the median summary, grouped by domain and source."""
    sub = [(d, s, m) for d in domains for s in ("percussive", "harmonic") for m in METRICS]
    width = max([len("Method")] + [len(k) for k in rows]) + 2
    lines = []
    top = " " * width + "".join(f"{d:^{6 * 6}}" for d in domains)
    mid = " " * width + "".join(f"{s.capitalize():^{18}}" for d in domains for s in ("percussive", "harmonic"))
    hdr = f"{'Method':<{width}}" + "".join(f"{m:>6}" for _, _, m in sub)
    lines += [top, mid, hdr, "-" * len(hdr)]
    for method, per_domain in rows.items():
        cells = []
        for d, s, m in sub:
            tab = per_domain.get(d)
            cells.append(f"{tab.median[s][m]:6.1f}" if tab is not None else f"{'--':>6}")
        lines.append(f"{method:<{width}}" + "".join(cells))
    return "\n".join(lines)
