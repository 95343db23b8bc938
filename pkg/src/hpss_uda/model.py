"""Separator (encoder + decoder) and domain discriminator networks.

The encoder runs three parallel branches with differently shaped kernels
(square, time-elongated, frequency-elongated). Each branch is a stack of
conv + relu + 2x2 max-pool stages, and the branch outputs are concatenated
along channels to form the embedding ``z``. The decoder upsamples ``z``
back to patch size and emits two sigmoid maps; with ``output="mask"`` (the
default) they gate the input mixture patch, so the estimates are
``sigmoid(.) * x``, and with ``output="direct"`` they are the estimates
themselves. Either way the estimates lie in [0, 1]. The discriminator maps
``z`` to P(domain = B).

Tensors are laid out (batch, channels, freq, time).
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorops as T

COLLECTIONS = ("encoder", "decoder", "discriminator")
CHECKPOINT_MAGIC = b"HPSSUDA\x00"
CHECKPOINT_VERSION = 1


@dataclass
class SeparatorConfig:
    patch_height: int = 256
    patch_width: int = 256
    depth: int = 2
    branch_widths: tuple = (8, 8, 8)
    branch_kernels: tuple = ((3, 3), (1, 5), (5, 1))
    decoder_width: int = 16
    disc_widths: tuple = (16, 32, 64)
    output: str = "mask"

    def __post_init__(self):
        self.branch_widths = tuple(int(w) for w in self.branch_widths)
        self.branch_kernels = tuple(tuple(int(v) for v in k) for k in self.branch_kernels)
        self.disc_widths = tuple(int(w) for w in self.disc_widths)

    @property
    def embedding_channels(self) -> int:
        return sum(self.branch_widths)

    @property
    def embedding_shape(self):
        f = 2 ** self.depth
        return (self.embedding_channels, self.patch_height // f, self.patch_width // f)

    def validate(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        f = 2 ** self.depth
        if self.patch_height % f or self.patch_width % f:
            raise ValueError(f"patch {self.patch_height}x{self.patch_width} not divisible by 2^depth={f}")
        if len(self.branch_widths) != 3 or len(self.branch_kernels) != 3:
            raise ValueError("the encoder needs exactly 3 branches")
        for k in self.branch_kernels:
            if len(k) != 2 or k[0] % 2 == 0 or k[1] % 2 == 0:
                raise ValueError(f"branch kernel {k} must have two odd dims")
        if self.output not in ("mask", "direct"):
            raise ValueError(f"output must be 'mask' or 'direct', got {self.output!r}")
        if min(self.branch_widths) < 1 or self.decoder_width < 1 or not self.disc_widths:
            raise ValueError("all layer widths must be positive and the discriminator needs >= 1 stage")
        g = 2 ** len(self.disc_widths)
        _, h, w = self.embedding_shape
        if h % g or w % g:
            raise ValueError(f"embedding {h}x{w} not divisible by 2^{len(self.disc_widths)} discriminator stages")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ParamSet:
    """Three disjoint named parameter collections."""

    config: SeparatorConfig
    seed: int
    encoder: dict = field(default_factory=dict)
    decoder: dict = field(default_factory=dict)
    discriminator: dict = field(default_factory=dict)

    def collection(self, name: str) -> dict:
        return getattr(self, name)

    def named(self):
        for coll in COLLECTIONS:
            for k, v in getattr(self, coll).items():
                yield f"{coll}/{k}", v

    def copy(self) -> "ParamSet":
        out = ParamSet(self.config, self.seed)
        for coll in COLLECTIONS:
            setattr(out, coll, {k: T.parameter(v.data, name=v.name) for k, v in getattr(self, coll).items()})
        return out

    def frozen(self, name: str) -> dict:
        """Gradient-free views of one collection."""
        return {k: v.detach() for k, v in getattr(self, name).items()}

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet(self.config, self.seed)
        for coll in COLLECTIONS:
            setattr(out, coll, {k: T.parameter(v.data.astype(dtype), name=v.name)
                                for k, v in getattr(self, coll).items()})
        return out


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(T.DTYPE)


def init_params(config: SeparatorConfig, seed: int = 0) -> ParamSet:
    """Fan-in scaled uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    config.validate()
    rng = np.random.default_rng(seed)
    ps = ParamSet(config, int(seed))

    def conv(coll, name, c_out, c_in, kh, kw):
        coll[f"{name}.w"] = T.parameter(_uniform(rng, (c_out, c_in, kh, kw), c_in * kh * kw), name=f"{name}.w")
        coll[f"{name}.b"] = T.parameter(np.zeros(c_out, dtype=T.DTYPE), name=f"{name}.b")

    for b, (width, (kh, kw)) in enumerate(zip(config.branch_widths, config.branch_kernels)):
        c_in = 1
        for s in range(config.depth):
            conv(ps.encoder, f"branch{b}.stage{s}", width, c_in, kh, kw)
            c_in = width
    c_in = config.embedding_channels
    for s in range(config.depth):
        conv(ps.decoder, f"up{s}", config.decoder_width, c_in, 3, 3)
        c_in = config.decoder_width
    conv(ps.decoder, "head", 2, c_in, 1, 1)
    c_in = config.embedding_channels
    for s, width in enumerate(config.disc_widths):
        conv(ps.discriminator, f"stage{s}", width, c_in, 3, 3)
        c_in = width
    _, h, w = config.embedding_shape
    g = 2 ** len(config.disc_widths)
    n_flat = c_in * (h // g) * (w // g)
    ps.discriminator["fc.w"] = T.parameter(_uniform(rng, (n_flat, 1), n_flat), name="fc.w")
    ps.discriminator["fc.b"] = T.parameter(np.zeros(1, dtype=T.DTYPE), name="fc.b")
    return ps


def _as_input(x, dtype=None):
    if isinstance(x, T.Tensor):
        return x
    arr = np.asarray(x, dtype=dtype or T.DTYPE)
    if arr.ndim == 3:
        arr = arr[:, None]
    return T.Tensor(arr)


def encode(x, encoder: dict, config: SeparatorConfig) -> T.Tensor:
    """Mixture patches (N, 1, H, W) -> embedding (N, sum(widths), H/2^d, W/2^d)."""
    x = _as_input(x, next(iter(encoder.values())).dtype)
    if x.shape[1:] != (1, config.patch_height, config.patch_width):
        raise ValueError(f"encode: input {x.shape} does not match patch "
                         f"(1, {config.patch_height}, {config.patch_width})")
    outs = []
    for b in range(3):
        h = x
        for s in range(config.depth):
            h = T.conv2d(h, encoder[f"branch{b}.stage{s}.w"], encoder[f"branch{b}.stage{s}.b"])
            h = T.maxpool2d(T.relu(h))
        outs.append(h)
    return T.concat_channels(outs)


def decode(z: T.Tensor, decoder: dict, config: SeparatorConfig, mixture=None) -> T.Tensor:
    """Embedding -> (N, 2, H, W) estimates [harmonic, percussive] in [0, 1].

    Mask-output configs need the normalised ``mixture`` patches (N, 1, H, W)
    that produced ``z``.
    """
    if z.shape[1:] != config.embedding_shape:
        raise ValueError(f"decode: embedding {z.shape} does not match {config.embedding_shape}")
    h = z
    for s in range(config.depth):
        h = T.upsample2x(h)
        h = T.relu(T.conv2d(h, decoder[f"up{s}.w"], decoder[f"up{s}.b"]))
    out = T.sigmoid(T.conv2d(h, decoder["head.w"], decoder["head.b"]))
    if config.output == "direct":
        return out
    if mixture is None:
        raise ValueError("decode: mask-output separator needs the mixture patches")
    x = _as_input(mixture, out.dtype)
    if x.shape != (out.shape[0], 1) + out.shape[2:]:
        raise ValueError(f"decode: mixture {x.shape} does not match output {out.shape}")
    return T.mul(out, x.detach())


def separate(x, params: "ParamSet", encoder=None, decoder=None) -> T.Tensor:
    """Encoder then decoder on mixture patches; returns the (N, 2, H, W) estimate tensor."""
    cfg = params.config
    encoder = params.encoder if encoder is None else encoder
    decoder = params.decoder if decoder is None else decoder
    x = _as_input(x, next(iter(encoder.values())).dtype)
    return decode(encode(x, encoder, cfg), decoder, cfg, x)


def discriminate(z: T.Tensor, disc: dict, config: SeparatorConfig) -> T.Tensor:
    """Embedding -> (N,) probabilities that each item comes from domain B."""
    if z.shape[1:] != config.embedding_shape:
        raise ValueError(f"discriminate: embedding {z.shape} does not match {config.embedding_shape}")
    h = z
    for s in range(len(config.disc_widths)):
        h = T.conv2d(h, disc[f"stage{s}.w"], disc[f"stage{s}.b"])
        h = T.maxpool2d(T.relu(h))
    logits = T.dense(T.flatten(h), disc["fc.w"], disc["fc.b"])
    return T.reshape(T.sigmoid(logits), (-1,))


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def save_checkpoint(params: ParamSet, path, extra: dict | None = None):
    """Write ``params`` in the versioned little-endian binary format."""
    record = {"config": params.config.to_dict(), "seed": params.seed, "extra": extra or {}}
    blob = json.dumps(record, sort_keys=True).encode("utf-8")
    named = list(params.named())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(named)))
        for name, t in named:
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(t.data, dtype="<f4")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns ``(ParamSet, extra)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return _parse_checkpoint(data, path)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise ValueError(f"{path}: corrupt checkpoint ({e})") from None


def _parse_checkpoint(data: bytes, path):
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    version, n_blob = struct.unpack_from("<II", data, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += 8
    record = json.loads(data[pos:pos + n_blob].decode("utf-8"))
    pos += n_blob
    cfg = record["config"]
    cfg["branch_kernels"] = tuple(tuple(k) for k in cfg["branch_kernels"])
    ps = ParamSet(SeparatorConfig.from_dict(cfg), int(record["seed"]))
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    for _ in range(count):
        (n_name,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n_name].decode("utf-8")
        pos += n_name
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        n_vals = int(np.prod(dims)) if rank else 1
        if pos + 4 * n_vals > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(data, dtype="<f4", count=n_vals, offset=pos).reshape(dims).astype(T.DTYPE)
        pos += 4 * n_vals
        coll, key = name.split("/", 1)
        if coll not in COLLECTIONS:
            raise ValueError(f"{path}: unknown parameter collection {coll!r}")
        getattr(ps, coll)[key] = T.parameter(arr, name=key)
    reference = init_params(ps.config, 0)
    for coll in COLLECTIONS:
        want = {k: v.shape for k, v in getattr(reference, coll).items()}
        have = {k: v.shape for k, v in getattr(ps, coll).items()}
        if want != have:
            raise ValueError(f"{path}: {coll} parameters do not match the stored config")
    return ps, record.get("extra", {})
