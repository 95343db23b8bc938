"""Desk-scale domain-shift experiment shared by the acceptance suite.

For each master seed the desk corpus is synthesised in memory, then three
models are trained: source_only on A, UDA with all 12 unlabelled B tracks and
UDA with the first 5 of them. Every run writes ``history.csv`` and per-domain
metric CSVs under ``out_root/seed<k>/<run>/`` so two executions can be
compared byte for byte.

Run directly for a standalone report::

    python3 tests/desk_experiment.py /tmp/desk
"""
from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import numpy as np

from hpss_uda import cli, data as D, metrics as ME, model as M, pipeline as P, training as TR

SEEDS = (0, 1, 2)
RUNS = ("source_only", "uda12", "uda5")
CONTROL_STEPS = 600


def desk_config(seed: int) -> cli.RunConfig:
    return cli.resolve_config({"profile": "desk", "seed": seed, "synth_seed": seed})


def corpus(cfg: cli.RunConfig) -> dict:
    out = {name: [] for name in cli.COUNT_KEYS}
    for split_name, seed in cli.track_seeds(cfg):
        out[split_name].append(D.synth_track(split_name[0].upper(), seed, cfg.duration))
    return out


def held_out_patches(tracks: dict, tc: TR.TrainConfig):
    """Mixture patches never seen by any training run: A-test vs B-labelled + B-test."""
    pf, fft, hop = tc.patch_frames, tc.fft_size, tc.hop
    xa = D.build_patchset(tracks["a_test"], pf, fft, hop, labelled=False).mixtures
    xb = D.build_patchset(tracks["b_labelled"] + tracks["b_test"], pf, fft, hop, labelled=False).mixtures
    return xa, xb


def balanced_accuracy(params: M.ParamSet, xa, xb, batch: int = 32) -> float:
    """Mean of the per-domain hit rates of ``params``' discriminator."""
    cfg = params.config
    enc, disc = params.frozen("encoder"), params.frozen("discriminator")

    def probs(x):
        return np.concatenate([M.discriminate(M.encode(x[i:i + batch], enc, cfg), disc, cfg).data
                               for i in range(0, len(x), batch)])

    return 0.5 * (float(np.mean(probs(xa) < 0.5)) + float(np.mean(probs(xb) >= 0.5)))


def control_discriminator(source_params: M.ParamSet, tracks: dict, tc: TR.TrainConfig, seed: int) -> M.ParamSet:
    """Fresh discriminator trained against the frozen source_only encoder."""
    pf, fft, hop = tc.patch_frames, tc.fft_size, tc.hop
    params = source_params.copy()
    params.discriminator = M.init_params(tc.model, seed + 7919).discriminator
    sa = D.BatchStream(D.build_patchset(tracks["a_labelled"], pf, fft, hop, labelled=False), [seed, 11])
    sb = D.BatchStream(D.build_patchset(tracks["b_unlabelled"], pf, fft, hop, labelled=False), [seed, 12])
    opt = TR.AdamState()
    half = tc.batch_size // 2
    for _ in range(CONTROL_STEPS):
        TR.discriminator_step(params, sa.take(half).x, sb.take(half).x, opt, tc.lr)
    return params


def _evaluate(params, tracks, label, out: Path):
    tabs = {}
    for dom, split_name in (("A", "a_test"), ("B", "b_test")):
        tab = P.evaluate(tracks[split_name], params=params, label=label)
        (out / f"metrics_{dom}.csv").write_text(ME.tracks_csv(tab))
        tabs[dom] = tab
    return tabs


def run_seed(seed: int, out_root: Path, log=print) -> dict:
    cfg = desk_config(seed)
    tc = cfg.train_config()
    tracks = corpus(cfg)
    xa, xb = held_out_patches(tracks, tc)
    runs = {
        "source_only": ("source_only", TR.TrainingData(a_labelled=tracks["a_labelled"])),
        "uda12": ("uda", TR.TrainingData(a_labelled=tracks["a_labelled"], b_unlabelled=tracks["b_unlabelled"])),
        "uda5": ("uda", TR.TrainingData(a_labelled=tracks["a_labelled"], b_unlabelled=tracks["b_unlabelled"][:5])),
    }
    res = {}
    for name, (mode, data) in runs.items():
        out = out_root / f"seed{seed}" / name
        t0 = time.perf_counter()
        best, hist = TR.fit(mode, data, tc, out_dir=out)
        tabs = _evaluate(best, tracks, name, out)
        entry = {
            "A": tabs["A"].median["percussive"]["SDR"],
            "B": tabs["B"].median["percussive"]["SDR"],
            "epochs": len(hist.records),
            "seconds": time.perf_counter() - t0,
        }
        if mode == "uda":
            final, _ = M.load_checkpoint(out / "final.ckpt")
            entry["disc_acc"] = balanced_accuracy(final, xa, xb)
        else:
            ctrl = control_discriminator(best, tracks, tc, seed)
            entry["control_acc"] = balanced_accuracy(ctrl, xa, xb)
        res[name] = entry
        log(f"seed {seed} {name}: " + ", ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}"
                                                 for k, v in entry.items()))
    return res


def run(out_root, seeds=SEEDS, log=print) -> dict:
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    results = {str(s): run_seed(s, out_root, log) for s in seeds}
    (out_root / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    return results


def median(results: dict, run_name: str, key: str) -> float:
    return float(np.median([results[s][run_name][key] for s in sorted(results)]))


def artefacts(out_root) -> dict:
    """Relative path -> bytes for every history and metric file of a run."""
    root = Path(out_root)
    files = sorted(list(root.rglob("history.csv")) + list(root.rglob("metrics_*.csv")))
    return {str(p.relative_to(root)): p.read_bytes() for p in files}


if __name__ == "__main__":
    res = run(sys.argv[1] if len(sys.argv) > 1 else "desk_results")
    for name in RUNS:
        print(name, {k: round(median(res, name, k), 3) for k in res[str(SEEDS[0])][name]})
