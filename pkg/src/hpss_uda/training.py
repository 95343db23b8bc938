"""Losses, optimisation and the training modes.

Three parameter collections are trained: encoder (E), decoder (D) and
domain discriminator (C). Supervised modes minimise the weighted squared
error of the separator. The adversarial mode alternates ``n_disc`` C updates
on the domain cross-entropy (E frozen) with one joint E/D update where D
minimises the supervised loss and E minimises
``gamma_s * L_S - gamma_u * L_U`` with C frozen.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as D
from . import dsp
from . import model as M
from . import tensorops as T

log = logging.getLogger(__name__)

MODES = ("source_only", "target_only", "joint", "fine_tune", "uda")
HISTORY_COLUMNS = ("epoch", "L_S_train", "L_S_val", "L_U", "disc_accuracy", "lr")


class NumericalError(RuntimeError):
    """Raised when a non-finite gradient or loss shows up."""


@dataclass
class LossWeights:
    lambda_h: float = 0.5
    lambda_p: float = 0.5
    gamma_s: float = 1.0
    gamma_u: float = 0.001

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_supervised(estimate: T.Tensor, target, w: LossWeights = LossWeights()) -> T.Tensor:
    """Batch mean of ``lambda_h ||h_hat - h||^2 + lambda_p ||p_hat - p||^2``.

    ``estimate`` and ``target`` are (N, 2, F, T) with channel 0 harmonic and
    channel 1 percussive; squared norms run over each item's F*T bins.
    """
    if not isinstance(estimate, T.Tensor):
        estimate = T.Tensor(np.asarray(estimate, dtype=np.float64))
    return T.weighted_sse(estimate, target, (w.lambda_h, w.lambda_p))


def loss_domain(probs_a: T.Tensor, probs_b: T.Tensor) -> T.Tensor:
    """Domain cross-entropy: ``-mean log C(z_B) - mean log(1 - C(z_A))``."""
    if not isinstance(probs_a, T.Tensor):
        probs_a = T.Tensor(np.asarray(probs_a, dtype=np.float64))
    if not isinstance(probs_b, T.Tensor):
        probs_b = T.Tensor(np.asarray(probs_b, dtype=np.float64))
    return T.binary_cross_entropy(probs_a, probs_b)


def encoder_objective(l_s, l_u, w: LossWeights = LossWeights()):
    """``gamma_s * L_S - gamma_u * L_U``; works on floats or tensors."""
    if isinstance(l_s, T.Tensor) or isinstance(l_u, T.Tensor):
        return T.scale(l_s, w.gamma_s) - T.scale(l_u, w.gamma_u)
    return w.gamma_s * l_s - w.gamma_u * l_u


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params: dict, grads: dict, state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam step applied in place to ``params``."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {k!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} vs parameter {k!r} shape {p.shape}")
        g = g.astype(np.float64)
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - state.beta1) * g if m is None else state.beta1 * m + (1 - state.beta1) * g
        v = (1 - state.beta2) * g * g if v is None else state.beta2 * v + (1 - state.beta2) * g * g
        state.m[k], state.v[k] = m, v
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data.astype(np.float64) - step).astype(p.dtype)
    return state


@dataclass
class PlateauState:
    lr: float = 1e-3
    factor: float = 0.25
    patience: int = 50
    stop_patience: int = 200
    threshold: float = 1e-6
    best: float = float("inf")
    wait: int = 0
    stale: int = 0
    reductions: int = 0


def lr_on_plateau(state: PlateauState, val_loss: float):
    """Update the schedule with one epoch's validation loss; returns ``(state, stop)``.

    ``wait`` counts non-improving epochs since the last improvement or LR
    cut; ``stale`` counts them since the last improvement only.
    """
    if val_loss < state.best - state.threshold:
        state.best = float(val_loss)
        state.wait = 0
        state.stale = 0
        return state, False
    state.wait += 1
    state.stale += 1
    if state.wait >= state.patience:
        state.lr *= state.factor
        state.reductions += 1
        state.wait = 0
    return state, state.stale >= state.stop_patience


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------

def _grads(loss: T.Tensor, params: dict) -> dict:
    keys = list(params)
    out = T.backward(loss, [params[k] for k in keys])
    return {k: g.copy() for k, g in zip(keys, out)}


def _check_loss(value, what):
    if not np.isfinite(value):
        raise NumericalError(f"{what} became non-finite")


def new_optimisers():
    return {name: AdamState() for name in M.COLLECTIONS}


def supervised_step(params: M.ParamSet, x, y, opts: dict, lr: float, w: LossWeights) -> float:
    """One Adam update of E and D on the supervised loss."""
    cfg = params.config
    l_s = loss_supervised(M.separate(x, params), y, w)
    _check_loss(l_s.item(), "supervised loss")
    both = {**{("E", k): v for k, v in params.encoder.items()}, **{("D", k): v for k, v in params.decoder.items()}}
    g = _grads(l_s, both)
    adam_update(params.encoder, {k: g[("E", k)] for k in params.encoder}, opts["encoder"], lr)
    adam_update(params.decoder, {k: g[("D", k)] for k in params.decoder}, opts["decoder"], lr)
    return l_s.item()


def _accuracy(pa, pb) -> float:
    return float((np.sum(pa < 0.5) + np.sum(pb >= 0.5)) / (pa.size + pb.size))


def discriminator_step(params: M.ParamSet, xa, xb, opt: AdamState, lr: float):
    """One Adam update of C on the domain loss with the encoder frozen."""
    cfg = params.config
    enc = params.frozen("encoder")
    za = M.encode(xa, enc, cfg)
    zb = M.encode(xb, enc, cfg)
    pa = M.discriminate(za, params.discriminator, cfg)
    pb = M.discriminate(zb, params.discriminator, cfg)
    l_u = loss_domain(pa, pb)
    _check_loss(l_u.item(), "domain loss")
    adam_update(params.discriminator, _grads(l_u, params.discriminator), opt, lr)
    return l_u.item(), _accuracy(pa.data, pb.data)


@dataclass
class StepRecord:
    l_s: float
    l_u: float
    disc_accuracy: float
    disc_updates: int


def train_step_uda(params: M.ParamSet, x, y, stream_a: D.BatchStream, stream_b: D.BatchStream,
                   opts: dict, lr: float, w: LossWeights, n_disc: int = 5, half_batch: int = 4) -> StepRecord:
    """``n_disc`` discriminator updates, then one joint encoder/decoder update.

    ``x, y`` is the labelled domain-A batch; ``stream_a`` and ``stream_b``
    supply fresh unlabelled mixture half-batches for the domain loss.
    """
    if stream_a is None or stream_b is None:
        raise ValueError("adversarial training needs unlabelled mixture streams for both domains")
    cfg = params.config
    for _ in range(n_disc):
        discriminator_step(params, stream_a.take(half_batch).x, stream_b.take(half_batch).x,
                           opts["discriminator"], lr)

    l_s = loss_supervised(M.separate(x, params), y, w)
    disc = params.frozen("discriminator")
    pa = M.discriminate(M.encode(stream_a.take(half_batch).x, params.encoder, cfg), disc, cfg)
    pb = M.discriminate(M.encode(stream_b.take(half_batch).x, params.encoder, cfg), disc, cfg)
    l_u = loss_domain(pa, pb)
    _check_loss(l_s.item(), "supervised loss")
    _check_loss(l_u.item(), "domain loss")

    both = {**{("E", k): v for k, v in params.encoder.items()}, **{("D", k): v for k, v in params.decoder.items()}}
    g_s = _grads(l_s, both)
    g_u = _grads(l_u, params.encoder)
    g_enc = {k: w.gamma_s * g_s[("E", k)] - w.gamma_u * g_u[k] for k in params.encoder}
    g_dec = {k: g_s[("D", k)] for k in params.decoder}
    adam_update(params.encoder, g_enc, opts["encoder"], lr)
    adam_update(params.decoder, g_dec, opts["decoder"], lr)
    return StepRecord(l_s.item(), l_u.item(), _accuracy(pa.data, pb.data), n_disc)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    model: M.SeparatorConfig = field(default_factory=M.SeparatorConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    fft_size: int = dsp.FFT_SIZE
    hop: int = dsp.HOP
    lr: float = 1e-3
    lr_factor: float = 0.25
    patience: int = 50
    stop_patience: int = 200
    max_epochs: int = 1000
    batch_size: int = 8
    n_disc: int = 5
    val_fraction: float = 0.2
    seed: int = 0

    @property
    def patch_frames(self) -> int:
        return self.model.patch_width

    def validate(self):
        self.model.validate()
        if self.fft_size // 2 != self.model.patch_height:
            raise ValueError(f"patch height {self.model.patch_height} must equal fft_size/2 = {self.fft_size // 2}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        return self


@dataclass
class EpochRecord:
    epoch: int
    l_s_train: float
    l_s_val: float
    l_u: float
    disc_accuracy: float
    lr: float
    wall_time: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def append(self, rec: EpochRecord):
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epoch indices must increase")
        self.records.append(rec)

    def column(self, name: str):
        attr = {"L_S_train": "l_s_train", "L_S_val": "l_s_val", "L_U": "l_u"}.get(name, name)
        return [getattr(r, attr) for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(HISTORY_COLUMNS)
        for r in self.records:
            wr.writerow([r.epoch, repr(r.l_s_train), repr(r.l_s_val), repr(r.l_u), repr(r.disc_accuracy), repr(r.lr)])
        return buf.getvalue()


@dataclass
class TrainingData:
    """Tracks available to a run; which ones are required depends on the mode."""

    a_labelled: list = field(default_factory=list)
    b_labelled: list = field(default_factory=list)
    b_unlabelled: list = field(default_factory=list)


def _rng_seed(seed, *tags):
    return [int(seed)] + [int(t) for t in tags]


def validation_loss(params: M.ParamSet, patches: D.PatchSet, w: LossWeights, batch_size: int = 16) -> float:
    enc, dec = params.frozen("encoder"), params.frozen("decoder")
    total = 0.0
    for start in range(0, len(patches), batch_size):
        x = patches.mixtures[start:start + batch_size]
        y = patches.targets[start:start + batch_size]
        yh = M.separate(x, params, enc, dec)
        total += loss_supervised(yh, y, w).item() * len(x)
    return total / len(patches)


def _required(mode, data: TrainingData, init):
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    need = {
        "source_only": ["a_labelled"],
        "target_only": ["b_labelled"],
        "joint": ["a_labelled", "b_labelled"],
        "fine_tune": ["b_labelled"],
        "uda": ["a_labelled", "b_unlabelled"],
    }[mode]
    for name in need:
        if len(getattr(data, name)) == 0:
            raise ValueError(f"mode {mode!r} needs a non-empty {name.replace('_', ' ')} set")
        if name.endswith("labelled") and not name.endswith("unlabelled"):
            if len(getattr(data, name)) < 2:
                raise ValueError(f"mode {mode!r} needs at least 2 tracks in {name} for the validation split")
    if mode == "fine_tune" and init is None:
        raise ValueError("fine_tune needs an initial checkpoint from a source_only run")


def fit(mode: str, data: TrainingData, config: TrainConfig, init: M.ParamSet | None = None,
        out_dir=None, progress=None):
    """Train one of the five modes; returns ``(best ParamSet, TrainHistory)``.

    Checkpoints (``best.ckpt``, ``final.ckpt``) and ``history.csv`` are
    written to ``out_dir`` when given.
    """
    _required(mode, data, init)
    config.validate()
    cfg, w, seed = config.model, config.weights, config.seed
    pf, fft, hop = config.patch_frames, config.fft_size, config.hop

    def patchify(tracks, labelled=True):
        return D.build_patchset(tracks, pf, fft, hop, labelled)

    if mode in ("source_only", "uda", "joint"):
        split_a = D.split(data.a_labelled, config.val_fraction, seed)
    if mode in ("target_only", "fine_tune", "joint"):
        split_b = D.split(data.b_labelled, config.val_fraction, seed)

    stream_a = stream_b = side = None
    if mode in ("source_only", "uda"):
        train, val = patchify(split_a.train), patchify(split_a.validation)
    elif mode in ("target_only", "fine_tune"):
        train, val = patchify(split_b.train), patchify(split_b.validation)
    else:
        train = patchify(split_a.train)
        side = D.BatchStream(patchify(split_b.train), _rng_seed(seed, 3))
        va, vb = patchify(split_a.validation), patchify(split_b.validation)
        val = D.PatchSet(np.concatenate([va.mixtures, vb.mixtures]), np.concatenate([va.targets, vb.targets]),
                         va.track_ids + vb.track_ids)
    if mode == "uda":
        stream_a = D.BatchStream(D.PatchSet(train.mixtures, None, train.track_ids), _rng_seed(seed, 1))
        stream_b = D.BatchStream(patchify(data.b_unlabelled, labelled=False), _rng_seed(seed, 2))

    if init is not None:
        if init.config != cfg:
            raise ValueError("initial checkpoint config does not match the training config")
        params = init.copy()
    else:
        params = M.init_params(cfg, seed)
    opts = new_optimisers()
    sched = PlateauState(config.lr, config.lr_factor, config.patience, config.stop_patience)
    history = TrainHistory()
    best_params, best_val = params.copy(), float("inf")
    half = config.batch_size // 2
    lab_size = half if mode == "joint" else config.batch_size

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        lr = sched.lr
        sums = {"ls": 0.0, "n": 0, "lu": 0.0, "acc": 0.0, "steps": 0}
        for batch in D.make_batches(train, lab_size, _rng_seed(seed, 0, epoch)):
            x, y = batch.x, batch.y
            if mode == "joint":
                extra = side.take(config.batch_size - len(x))
                x, y = np.concatenate([x, extra.x]), np.concatenate([y, extra.y])
            if mode == "uda":
                rec = train_step_uda(params, x, y, stream_a, stream_b, opts, lr, w, config.n_disc, half)
                ls = rec.l_s
                sums["lu"] += rec.l_u
                sums["acc"] += rec.disc_accuracy
            else:
                ls = supervised_step(params, x, y, opts, lr, w)
            sums["ls"] += ls * len(x)
            sums["n"] += len(x)
            sums["steps"] += 1
        val_loss = validation_loss(params, val, w)
        _check_loss(val_loss, "validation loss")
        steps = max(sums["steps"], 1)
        nan = float("nan")
        rec = EpochRecord(epoch, sums["ls"] / sums["n"], val_loss,
                          sums["lu"] / steps if mode == "uda" else nan,
                          sums["acc"] / steps if mode == "uda" else nan,
                          lr, time.perf_counter() - t0)
        history.append(rec)
        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
        if progress is not None:
            progress(rec)
        log.debug("epoch %d L_S %.4f val %.4f lr %.2e", epoch, rec.l_s_train, val_loss, lr)
        sched, stop = lr_on_plateau(sched, val_loss)
        if stop:
            break

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {"mode": mode, "best_val": best_val, "epochs": len(history.records)}
        M.save_checkpoint(best_params, out / "best.ckpt", meta)
        M.save_checkpoint(params, out / "final.ckpt", meta)
        (out / "history.csv").write_text(history.to_csv())
    return best_params, history


def with_weights(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, weights=replace(config.weights, **kw))
