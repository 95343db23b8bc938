"""``hpss-uda`` command line: synth, train, separate, evaluate.

Configuration is a flat ``key = value`` text file. Every key is also a
``--flag`` (underscores become dashes) and flags win over the file. A
``profile`` key picks the preset the other keys start from (``full`` or
``desk``). The output root can be moved with ``HPSS_UDA_OUTPUT_ROOT``; it
prefixes relative output directories.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics as ME
from . import model as M
from . import pipeline as P
from . import training as TR

log = logging.getLogger("hpss_uda")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COUNT_KEYS = {
    "a_labelled": "n_a_labelled",
    "a_test": "n_a_test",
    "b_labelled": "n_b_labelled",
    "b_test": "n_b_test",
    "b_unlabelled": "n_b_unlabelled",
}
# offsets keep every split's track seeds disjoint for a given synth_seed
SPLIT_SEED_OFFSET = {"a_labelled": 0, "a_test": 2000, "b_labelled": 4000, "b_test": 6000, "b_unlabelled": 8000}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    mode: str = "source_only"
    profile: str = "full"
    # corpus
    corpus: str = "corpus"
    a_labelled: str = ""
    a_test: str = ""
    b_labelled: str = ""
    b_test: str = ""
    b_unlabelled: str = ""
    synth_seed: int = 0
    duration: float = 8.0
    encoding: str = "float32"
    n_a_labelled: int = 100
    n_a_test: int = 50
    n_b_labelled: int = 23
    n_b_test: int = 5
    n_b_unlabelled: int = 50
    # signal and model
    fft_size: int = 512
    hop: int = 128
    patch_height: int = 256
    patch_width: int = 256
    depth: int = 2
    branch_widths: tuple = (8, 8, 8)
    decoder_width: int = 16
    disc_widths: tuple = (16, 32, 64)
    output: str = "mask"
    # loss and optimisation
    lambda_h: float = 0.5
    lambda_p: float = 0.5
    gamma_s: float = 1.0
    gamma_u: float = 0.001
    lr: float = 0.001
    lr_factor: float = 0.25
    patience: int = 50
    stop_patience: int = 200
    max_epochs: int = 1000
    batch_size: int = 8
    n_disc: int = 5
    val_fraction: float = 0.2
    seed: int = 0
    # run plumbing
    output_dir: str = "runs"
    init_checkpoint: str = ""
    checkpoint: str = ""
    oracle: str = ""
    input: str = ""
    filter_len: int = 1
    dump_masks: bool = False

    def split_dir(self, split_name: str) -> Path:
        explicit = getattr(self, split_name)
        return Path(explicit) if explicit else D.corpus_layout(self.corpus, split_name)

    def model_config(self) -> M.SeparatorConfig:
        return M.SeparatorConfig(self.patch_height, self.patch_width, self.depth, tuple(self.branch_widths),
                                 decoder_width=self.decoder_width, disc_widths=tuple(self.disc_widths),
                                 output=self.output)

    def train_config(self) -> TR.TrainConfig:
        w = TR.LossWeights(self.lambda_h, self.lambda_p, self.gamma_s, self.gamma_u)
        return TR.TrainConfig(self.model_config(), w, self.fft_size, self.hop, self.lr, self.lr_factor,
                              self.patience, self.stop_patience, self.max_epochs, self.batch_size,
                              self.n_disc, self.val_fraction, self.seed)


PROFILES = {
    "full": {},
    # desk scale: 64x64 patches and a micro model; counts follow the desk
    # experiment (24 A, 6 + 4 + 12 B) with an A test set of 12. gamma_u is
    # raised because 0.001 barely moves the encoder at this scale.
    "desk": {
        "fft_size": 128, "hop": 32, "patch_height": 64, "patch_width": 64,
        "branch_widths": (8, 8, 8), "decoder_width": 8, "disc_widths": (16, 32, 64),
        "duration": 3.0, "max_epochs": 30, "gamma_u": 1.0,
        "n_a_labelled": 24, "n_a_test": 12, "n_b_labelled": 6, "n_b_test": 4, "n_b_unlabelled": 12,
    },
}

_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def _parse_value(key: str, text: str):
    kind = type(getattr(_DEFAULTS, key))
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is tuple:
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
        return kind(text)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {text!r} as {kind.__name__}") from None


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_config_text(text: str) -> dict:
    """Key/value overrides from config text; stops at the first ``[section]``."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            break
        if "=" not in line:
            raise UsageError(f"config line {n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise UsageError(f"config line {n}: unknown key {key!r}")
        out[key] = _parse_value(key, value)
    return out


def resolve_config(overrides: dict) -> RunConfig:
    """Defaults, then the chosen profile preset, then ``overrides``."""
    unknown = set(overrides) - set(_FIELDS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    profile = overrides.get("profile", "full")
    if profile not in PROFILES:
        raise UsageError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    values = {**PROFILES[profile], **overrides}
    cfg = dataclasses.replace(RunConfig(), **values)
    if cfg.mode not in TR.MODES:
        raise UsageError(f"unknown mode {cfg.mode!r}; expected one of {TR.MODES}")
    try:
        cfg.train_config().validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    return cfg


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(RunConfig))


def write_manifest(path, cfg: RunConfig, tracks=(), extra: dict | None = None):
    """Config keys, then a ``[tracks]`` section of ``split/id = seed`` lines."""
    lines = [format_config(cfg)]
    if extra:
        lines.append("[info]\n" + "".join(f"{k} = {v}\n" for k, v in extra.items()))
    if tracks:
        lines.append("[tracks]\n" + "".join(f"{s}/{tid} = {seed}\n" for s, tid, seed in tracks))
    Path(path).write_text("\n".join(lines))


def read_manifest(path):
    """``(RunConfig, [(split, track_id, seed), ...])``."""
    text = Path(path).read_text()
    cfg = resolve_config(parse_config_text(text))
    tracks, section = [], None
    for line in text.splitlines():
        line = line.strip()
        if line.startswith("["):
            section = line.strip("[]")
        elif section == "tracks" and "=" in line:
            name, seed = (s.strip() for s in line.split("=", 1))
            split_name, tid = name.split("/", 1)
            tracks.append((split_name, tid, int(seed)))
    return cfg, tracks


def output_path(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    return out if out.is_absolute() else D.env_output_root() / out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def track_seeds(cfg: RunConfig):
    """``(split, seed)`` for every track the corpus should contain."""
    out = []
    for split_name, count_key in COUNT_KEYS.items():
        base = cfg.synth_seed * 10000 + SPLIT_SEED_OFFSET[split_name]
        out += [(split_name, base + i) for i in range(getattr(cfg, count_key))]
    return out


def cmd_synth(cfg: RunConfig) -> int:
    root = Path(cfg.corpus)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create corpus directory {root}: {e}") from None
    if cfg.encoding not in ("float32", "pcm16"):
        raise UsageError(f"encoding must be float32 or pcm16, got {cfg.encoding!r}")
    listed = []
    for split_name, seed in track_seeds(cfg):
        domain = split_name[0].upper()
        try:
            t = D.synth_track(domain, seed, cfg.duration)
        except ValueError as e:
            raise UsageError(str(e)) from None
        if split_name == "b_unlabelled":
            t = D.Track(t.id, t.domain, t.mixture, None, None, t.sample_rate, t.seed)
        try:
            D.save_track(t, cfg.split_dir(split_name) / t.id, cfg.encoding)
        except OSError as e:
            raise DataError(f"cannot write track {t.id}: {e}") from None
        listed.append((split_name, t.id, seed))
    write_manifest(root / "manifest.txt", cfg, listed)
    print(f"wrote {len(listed)} tracks to {root}")
    return EXIT_OK


def _load_split(cfg: RunConfig, split_name: str, required: bool, labelled: bool):
    path = cfg.split_dir(split_name)
    if not path.is_dir():
        if required:
            raise DataError(f"{split_name} corpus not found at {path}")
        return []
    tracks = D.load_corpus_dir(path, split_name[0].upper())
    if required and not tracks:
        raise DataError(f"{split_name} corpus at {path} has no tracks")
    if labelled:
        for t in tracks:
            if not t.labelled:
                raise DataError(f"track {t.id} in {path} lacks harmonic/percussive stems")
    return tracks


def cmd_train(cfg: RunConfig) -> int:
    mode = cfg.mode
    need_a = mode in ("source_only", "joint", "uda")
    need_b = mode in ("target_only", "joint", "fine_tune")
    if mode == "fine_tune" and not cfg.init_checkpoint:
        raise UsageError("mode fine_tune needs --init-checkpoint from a source_only run")
    data = TR.TrainingData(
        a_labelled=_load_split(cfg, "a_labelled", True, True) if need_a else [],
        b_labelled=_load_split(cfg, "b_labelled", True, True) if need_b else [],
        b_unlabelled=_load_split(cfg, "b_unlabelled", True, False) if mode == "uda" else [],
    )
    init = None
    if cfg.init_checkpoint:
        init, _ = _load_checkpoint(cfg.init_checkpoint)
    out = output_path(cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.txt", cfg)

    def progress(rec):
        log.info("epoch %d  L_S %.4f  val %.4f  L_U %.4f  acc %.3f  lr %.2e", rec.epoch, rec.l_s_train,
                 rec.l_s_val, rec.l_u, rec.disc_accuracy, rec.lr)

    try:
        TR.fit(mode, data, cfg.train_config(), init=init, out_dir=out, progress=progress)
    except ValueError as e:
        raise UsageError(str(e)) from None
    print(f"checkpoints and history written to {out}")
    return EXIT_OK


def _load_checkpoint(path):
    try:
        return M.load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint {path} not found") from None
    except ValueError as e:
        raise DataError(f"checkpoint {path}: {e}") from None


def cmd_separate(cfg: RunConfig) -> int:
    if not cfg.checkpoint or not cfg.input:
        raise UsageError("separate needs --checkpoint and --input")
    params, _ = _load_checkpoint(cfg.checkpoint)
    if params.config.output != cfg.output or params.config.patch_height * 2 != cfg.fft_size:
        raise UsageError(f"checkpoint model {params.config.to_dict()} does not match the run config "
                         f"(fft_size {cfg.fft_size}, output {cfg.output})")
    try:
        mixture, sr = D.load_wav(cfg.input)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read {cfg.input}: {e}") from None
    try:
        h, p = P.separate_signal(params, mixture, sr)
    except ValueError as e:
        raise DataError(str(e)) from None
    out = output_path(cfg)
    out.mkdir(parents=True, exist_ok=True)
    D.write_wav(out / "harmonic.wav", h, sr, cfg.encoding)
    D.write_wav(out / "percussive.wav", p, sr, cfg.encoding)
    print(f"stems written to {out}")
    return EXIT_OK


def _dump_masks(cfg, out, kind, domain, tracks):
    for t in tracks:
        _, masks = P.oracle_masks(kind, t.harmonic, t.percussive, cfg.fft_size, cfg.hop, t.sample_rate)
        np.savez(out / f"masks_{kind}_{domain}_{t.id}.npz", harmonic=masks.harmonic, percussive=masks.percussive)


def cmd_evaluate(cfg: RunConfig) -> int:
    oracles = [o for o in cfg.oracle.replace(" ", "").split(",") if o]
    for o in oracles:
        if o not in P.ORACLES:
            raise UsageError(f"unknown oracle {o!r}; expected any of {P.ORACLES}")
    if not oracles and not cfg.checkpoint:
        raise UsageError("evaluate needs --checkpoint and/or --oracle")
    params = None
    if cfg.checkpoint:
        params, _ = _load_checkpoint(cfg.checkpoint)
        if params.config.patch_height * 2 != cfg.fft_size:
            raise UsageError("checkpoint patch height does not match fft_size")
    domains = {}
    for split_name, domain in (("a_test", "A"), ("b_test", "B")):
        tracks = _load_split(cfg, split_name, False, False)
        if tracks:
            bad = [t.id for t in tracks if not t.labelled]
            if bad:
                raise DataError(f"{split_name} tracks {bad} have no ground-truth stems")
            domains[domain] = tracks
    if not domains:
        raise DataError(f"no labelled test tracks under {cfg.split_dir('a_test')} or {cfg.split_dir('b_test')}")

    out = output_path(cfg)
    out.mkdir(parents=True, exist_ok=True)
    methods = ([("model", None)] if params is not None else []) + [(o.upper() if o != "mixture" else "Mixture", o)
                                                                    for o in oracles]
    rows = {}
    for label, oracle in methods:
        rows[label] = {}
        for domain, tracks in domains.items():
            table = P.evaluate(tracks, params=params if oracle is None else None, oracle=oracle,
                               filter_len=cfg.filter_len, fft_size=cfg.fft_size, hop=cfg.hop, label=label)
            rows[label][domain] = table
            (out / f"tracks_{label.lower()}_{domain}.csv").write_text(ME.tracks_csv(table))
            if cfg.dump_masks and oracle in ("ibm", "irm"):
                _dump_masks(cfg, out, oracle, domain, tracks)
    names = sorted(domains)
    (out / "summary.csv").write_text(ME.summary_csv(rows, names, f"median over tracks, dB, filter_len={cfg.filter_len}"))
    print(ME.pretty_table(rows, names))
    return EXIT_OK


FLAG_ALIASES = {"b_unlabelled": ["--unlabelled-b"], "a_labelled": ["--labelled-a"], "b_labelled": ["--labelled-b"]}
COMMANDS = {"synth": cmd_synth, "train": cmd_train, "separate": cmd_separate, "evaluate": cmd_evaluate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hpss-uda", description="Harmonic/percussive separation with "
                                     "adversarial domain adaptation.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    for f in fields(RunConfig):
        flags = ["--" + f.name.replace("_", "-")] + FLAG_ALIASES.get(f.name, [])
        parser.add_argument(*flags, dest=f.name, default=None, metavar=f.name.upper(),
                            help=f"default: {_format_value(getattr(_DEFAULTS, f.name))}")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = {}
        if args.config:
            try:
                overrides.update(parse_config_text(Path(args.config).read_text()))
            except OSError as e:
                raise UsageError(f"cannot read config {args.config}: {e}") from None
        for f in fields(RunConfig):
            value = getattr(args, f.name)
            if value is not None:
                overrides[f.name] = _parse_value(f.name, value)
        cfg = resolve_config(overrides)
        return COMMANDS[args.command](cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TR.NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
