"""The complete generative model: a convolutional encoder to a latent code,
a latent-space discriminator against a standard normal prior, and a decoder
that rebuilds a coarse prototype with transposed convolutions before the
fusion stack refines it. Includes binary weight persistence and sampling.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from . import fusion as F
from . import layers as L
from . import tensor as T
from .layers import Tensor, iter_tensors
from .tensor import ShapeError


class PersistenceError(ValueError):
    """Weight or dataset container violates its file format."""


VARIANTS = ("full", "deconv_only", "tcn_only", "trans_only", "sequential")

_MAGIC = b"TTAE"
_VERSION = 1


@dataclass
class ModelConfig:
    time_steps: int = 24
    channels: int = 1
    latent_dim: int = 8
    num_blocks: int = 2
    num_heads: int = 3
    head_size: int = 64
    scale_mode: str = "head"
    variant: str = "full"
    seed: int = 0
    trained: bool = False

    def __post_init__(self):
        if self.time_steps % 4 != 0:
            raise ValueError("time_steps must be divisible by 4 (two 2x upsamplings)")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.scale_mode not in ("head", "channels"):
            raise ValueError("scale_mode must be 'head' or 'channels'")


def default_latent_dim(time_steps):
    """8 for short windows, 16 once sequences are long enough to carry
    separate local and global structure."""
    return 16 if time_steps >= 64 else 8


@dataclass
class EncoderParams:
    conv1: L.Conv1dParams
    conv2: L.Conv1dParams
    conv3: L.Conv1dParams
    to_latent: L.DenseParams


@dataclass
class DecoderParams:
    seed_len: int
    seed_channels: int
    from_latent: L.DenseParams
    up1: L.TransposedConv1dParams
    up2: L.TransposedConv1dParams
    to_series: L.DenseParams
    stack: F.FusionStackParams
    variant: str


@dataclass
class DiscriminatorParams:
    hidden1: L.DenseParams
    hidden2: L.DenseParams
    out: L.DenseParams


@dataclass
class ModelBundle:
    config: ModelConfig
    encoder: EncoderParams
    decoder: DecoderParams
    discriminator: DiscriminatorParams

    def encoder_tensors(self):
        return L.trainable(self.encoder)

    def decoder_tensors(self):
        return L.trainable(self.decoder)

    def discriminator_tensors(self):
        return L.trainable(self.discriminator)

    def named_tensors(self):
        yield from iter_tensors(self.encoder, "encoder")
        yield from iter_tensors(self.decoder, "decoder")
        yield from iter_tensors(self.discriminator, "discriminator")


def _conv_out_len(t, layers=3, stride=2):
    for _ in range(layers):
        t = -(-t // stride)
    return t


def build_model(config):
    rng = np.random.default_rng(config.seed)
    t, c, z = config.time_steps, config.channels, config.latent_dim

    encoder = EncoderParams(
        conv1=L.init_conv1d(rng, c, 64, kernel_size=4, stride=2),
        conv2=L.init_conv1d(rng, 64, 128, kernel_size=4, stride=2),
        conv3=L.init_conv1d(rng, 128, 256, kernel_size=4, stride=2),
        to_latent=L.init_dense(rng, _conv_out_len(t) * 256, z),
    )

    seed_len, seed_ch = t // 4, 64
    decoder = DecoderParams(
        seed_len=seed_len,
        seed_channels=seed_ch,
        from_latent=L.init_dense(rng, z, seed_len * seed_ch, activation="relu"),
        up1=L.init_tconv1d(rng, seed_ch, 128, kernel_size=4, stride=2),
        up2=L.init_tconv1d(rng, 128, 64, kernel_size=4, stride=2),
        to_series=L.init_dense(rng, 64, c),
        stack=F.init_fusion_stack(rng, c, config.num_blocks, config.num_heads,
                                  config.head_size, config.scale_mode),
        variant=config.variant,
    )

    discriminator = DiscriminatorParams(
        hidden1=L.init_dense(rng, z, 32, activation="relu"),
        hidden2=L.init_dense(rng, 32, 32, activation="relu"),
        out=L.init_dense(rng, 32, 1),
    )
    return ModelBundle(config, encoder, decoder, discriminator)


def parameter_count(bundle):
    return sum(t.size for _, t in bundle.named_tensors())


def encode(bundle, x):
    """Deterministic latent codes (n, latent_dim) for a batch (n, t, c)."""
    x = T.as_tensor(x)
    cfg = bundle.config
    if x.ndim != 3 or x.shape[1] != cfg.time_steps or x.shape[2] != cfg.channels:
        raise ShapeError(
            f"encode: expected (n, {cfg.time_steps}, {cfg.channels}), got {x.shape}"
        )
    enc = bundle.encoder
    h = T.relu(L.conv1d_forward(x, enc.conv1))
    h = T.relu(L.conv1d_forward(h, enc.conv2))
    h = T.relu(L.conv1d_forward(h, enc.conv3))
    return L.dense_forward(h.reshape(h.shape[0], -1), enc.to_latent)


def decode_prototype(bundle, z):
    """The coarse series rebuilt by the transposed-conv path, before any
    branch refinement and before the output sigmoid."""
    z = T.as_tensor(z)
    cfg = bundle.config
    if z.ndim != 2 or z.shape[1] != cfg.latent_dim:
        raise ShapeError(f"decode: expected (n, {cfg.latent_dim}), got {z.shape}")
    dec = bundle.decoder
    h = L.dense_forward(z, dec.from_latent)
    h = h.reshape(h.shape[0], dec.seed_len, dec.seed_channels)
    h = T.relu(L.tconv1d_forward(h, dec.up1))
    h = T.relu(L.tconv1d_forward(h, dec.up2))
    return L.dense_forward(h, dec.to_series)


def decode(bundle, z):
    """Latent codes to a series batch in (0, 1), routed per decoder variant."""
    proto = decode_prototype(bundle, z)
    dec = bundle.decoder
    if dec.variant == "full":
        refined = F.stack_forward(proto, dec.stack)
    elif dec.variant == "deconv_only":
        refined = proto
    elif dec.variant == "tcn_only":
        refined = F.conv_only_forward(proto, dec.stack.blocks)
    elif dec.variant == "trans_only":
        refined = F.transformer_only_forward(proto, dec.stack.blocks)
    elif dec.variant == "sequential":
        refined = F.sequential_forward(proto, dec.stack.blocks)
    else:
        raise ValueError(f"unknown decoder variant '{dec.variant}'")
    return T.sigmoid(refined)


def discriminate(bundle, z):
    """Probability that each code is a prior sample (prior=1, encoded=0)."""
    z = T.as_tensor(z)
    cfg = bundle.config
    if z.ndim != 2 or z.shape[1] != cfg.latent_dim:
        raise ShapeError(
            f"discriminate: expected (n, {cfg.latent_dim}), got {z.shape}"
        )
    d = bundle.discriminator
    h = L.dense_forward(L.dense_forward(z, d.hidden1), d.hidden2)
    return T.sigmoid(L.dense_forward(h, d.out))


def generate(bundle, n, seed):
    """Decode n seeded standard-normal latent draws. Pure in (weights, seed, n)."""
    if n <= 0:
        raise ValueError("generate requires n > 0")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, bundle.config.latent_dim), dtype=np.float32)
    return decode(bundle, Tensor(z)).numpy()


# --- persistence -----------------------------------------------------------------

_CONFIG_TYPES = {f.name: f.type for f in dc_fields(ModelConfig)}


def _config_to_lines(config):
    lines = []
    for f in dc_fields(ModelConfig):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def _config_from_lines(text):
    kwargs = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise PersistenceError(f"malformed config line: {line!r}")
        key, value = line.split("=", 1)
        if key not in _CONFIG_TYPES:
            raise PersistenceError(f"unknown config key: {key!r}")
        kind = _CONFIG_TYPES[key]
        if kind in ("int", int):
            kwargs[key] = int(value)
        elif kind in ("bool", bool):
            kwargs[key] = value == "true"
        else:
            kwargs[key] = value
    return ModelConfig(**kwargs)


def save_weights(bundle, path):
    """Write the named-tensor container.

    Layout: magic 'TTAE', version u16, u32-length-prefixed UTF-8 config block
    of key=value lines, then per tensor: u16 name length, name, u8 rank,
    u32 dims, raw little-endian float32 data. All integers little-endian.
    """
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<H", _VERSION))
    cfg = _config_to_lines(bundle.config).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    for name, tensor in bundle.named_tensors():
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", tensor.ndim))
        for dim in tensor.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise PersistenceError(f"truncated weight file while reading {what}")
    return data


def load_weights(path):
    """Rebuild a ModelBundle from a weight container, bit-exactly."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != _MAGIC:
            raise PersistenceError(
                f"bad magic {magic!r}, expected {_MAGIC!r}: not a weight file"
            )
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != _VERSION:
            raise PersistenceError(f"unsupported weight format version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config = _config_from_lines(_read_exact(fh, cfg_len, "config").decode("utf-8"))

        bundle = build_model(config)
        expected = dict(bundle.named_tensors())
        seen = set()
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise PersistenceError("truncated weight file while reading name length")
            (name_len,) = struct.unpack("<H", head)
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            if name not in expected:
                raise PersistenceError(f"unknown tensor name {name!r}")
            if name in seen:
                raise PersistenceError(f"duplicate tensor name {name!r}")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            dims = struct.unpack(
                f"<{rank}I", _read_exact(fh, 4 * rank, "dims")
            )
            tensor = expected[name]
            if tuple(dims) != tensor.shape:
                raise PersistenceError(
                    f"tensor {name!r}: stored shape {dims} != expected {tensor.shape}"
                )
            count = int(np.prod(dims)) if dims else 1
            raw = _read_exact(fh, 4 * count, f"data of {name!r}")
            tensor.data = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
            seen.add(name)
        missing = set(expected) - seen
        if missing:
            raise PersistenceError(f"weight file missing tensors: {sorted(missing)[:3]}...")
    return bundle
