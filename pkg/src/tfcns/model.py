"""Full network assembly: dense-block encoder with transition-downs, the
token-sequence transformer at the bottleneck, a mirrored decoder with gated
skip connections, a 1x1 segmentation head, class-activation maps, and a
binary checkpoint format.

The transformer's effective "patch size" P is realized by CNN downsampling:
log2(P) transition-downs shrink the input to an (H/P) x (W/P) bottleneck and
each bottleneck position becomes one token, so P in {8, 16, 32} is a depth
toggle rather than a re-tiling.

Checkpoint container layout (little-endian):

    magic   4 bytes  b"TFCN"
    version u32      currently 1
    payload:
        u32 + UTF-8 flat "key = value" config text (model config, iteration)
        u32 record count
        records: u16 + name UTF-8, u8 dtype tag (TNSR tags), u8 rank,
                 u32 * rank dims, raw element bytes
    crc     u32      CRC32 of the payload bytes
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DTYPE_TAGS, _tag_for
from .errors import ClassOutOfRange, ConfigInvalid, FormatError, ShapeMismatch, VersionError
from .layers import (
    CLAB,
    CUABLike,
    DenseBlock,
    PatchEmbedding,
    RLTransformerEncoder,
    TransitionDown,
    TransitionUp,
    tokens_to_map,
)
from .nn import Conv2d, Module

CHECKPOINT_MAGIC = b"TFCN"
CHECKPOINT_VERSION = 1

SKIP_ATTENTION_CHOICES = ("none", "clab", "cuab_like")
MLP_VARIANT_CHOICES = ("resmlp", "plain_mlp")

_DEPTH_DEFAULTS = (4, 4, 6, 8, 10)


@dataclass
class ModelConfig:
    """Architectural hyperparameters. ``layers_per_block``, ``resmlp_hidden``
    and ``clab_kernels`` accept None for depth-/width-derived defaults."""

    in_channels: int = 1
    num_classes: int = 4
    input_size: int = 224
    first_conv_channels: int = 24
    growth_rate: int = 12
    layers_per_block: Optional[tuple] = None
    patch_size: int = 16
    embed_dim: int = 64
    transformer_layers: int = 4
    n_heads: int = 4
    resmlp_hidden: Optional[int] = None
    dropout_p: float = 0.1
    skip_attention: str = "clab"
    mlp_variant: str = "resmlp"
    clab_branches: int = 4
    clab_kernels: Optional[int] = None
    seed: int = 0

    @property
    def n_stages(self) -> int:
        return int(round(np.log2(self.patch_size)))

    def stage_layers(self) -> tuple:
        if self.layers_per_block is not None:
            return tuple(self.layers_per_block)
        base = list(_DEPTH_DEFAULTS)
        while len(base) < self.n_stages:
            base.append(base[-1] + 2)
        return tuple(base[: self.n_stages])

    def hidden_dim(self) -> int:
        return self.resmlp_hidden if self.resmlp_hidden is not None else 4 * self.embed_dim

    def validate(self) -> None:
        p = self.patch_size
        if p < 4 or (p & (p - 1)) != 0:
            raise ConfigInvalid(f"patch_size {p} must be a power of two >= 4")
        if self.input_size % p:
            raise ConfigInvalid(f"input_size {self.input_size} not divisible by patch_size {p}")
        if self.embed_dim % self.n_heads:
            raise ConfigInvalid(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if len(self.stage_layers()) != self.n_stages:
            raise ConfigInvalid(
                f"layers_per_block has {len(self.stage_layers())} entries, "
                f"patch_size {p} needs {self.n_stages}"
            )
        if self.skip_attention not in SKIP_ATTENTION_CHOICES:
            raise ConfigInvalid(f"skip_attention {self.skip_attention!r} not in {SKIP_ATTENTION_CHOICES}")
        if self.mlp_variant not in MLP_VARIANT_CHOICES:
            raise ConfigInvalid(f"mlp_variant {self.mlp_variant!r} not in {MLP_VARIANT_CHOICES}")
        for name in ("in_channels", "num_classes", "first_conv_channels", "growth_rate",
                     "embed_dim", "n_heads", "clab_branches"):
            if getattr(self, name) < 1:
                raise ConfigInvalid(f"{name} must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigInvalid(f"dropout_p {self.dropout_p} outside [0, 1)")


def _cfg_value_to_str(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def _cfg_value_from_str(name: str, text: str):
    text = text.strip()
    if name in ("layers_per_block",):
        return None if text == "auto" else tuple(int(v) for v in text.split(","))
    if name in ("resmlp_hidden", "clab_kernels"):
        return None if text == "auto" else int(text)
    if name in ("skip_attention", "mlp_variant"):
        return text
    if name == "dropout_p":
        return float(text)
    return int(text)


def model_config_to_text(cfg: ModelConfig, extra: Optional[dict] = None) -> str:
    lines = [f"{f.name} = {_cfg_value_to_str(getattr(cfg, f.name))}" for f in fields(ModelConfig)]
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def model_config_from_text(text: str) -> tuple[ModelConfig, dict]:
    known = {f.name for f in fields(ModelConfig)}
    values, extra = {}, {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"malformed config line: {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key in known:
            values[key] = _cfg_value_from_str(key, val)
        else:
            extra[key] = val
    return ModelConfig(**values), extra


class TFCNsModel(Module):
    """Encoder (stem + dense blocks + transition-downs), token transformer at
    the bottleneck, decoder (transition-ups + gated skip concat + dense
    blocks), and a 1x1 conv head producing B x num_classes x H x W logits."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        stages = cfg.n_stages
        layers = cfg.stage_layers()

        self.stem = Conv2d(cfg.in_channels, cfg.first_conv_channels, 3, rng, padding=1, dtype=dtype)
        self.enc_blocks = []
        self.trans_down = []
        self.skip_channels = []
        channels = cfg.first_conv_channels
        for s in range(stages):
            block = DenseBlock(channels, cfg.growth_rate, layers[s], rng, cfg.dropout_p, dtype=dtype)
            channels = block.out_channels
            self.enc_blocks.append(block)
            self.skip_channels.append(channels)
            self.trans_down.append(TransitionDown(channels, channels, rng, dtype=dtype))

        self.bottleneck_size = cfg.input_size // cfg.patch_size
        n_tokens = self.bottleneck_size ** 2
        self.patch_embed = PatchEmbedding(channels, cfg.embed_dim, n_tokens, rng, dtype=dtype)
        self.encoder = RLTransformerEncoder(
            cfg.embed_dim, cfg.transformer_layers, cfg.n_heads, cfg.hidden_dim(),
            rng, cfg.dropout_p, cfg.mlp_variant, dtype=dtype,
        )

        self.trans_up = []
        self.skip_gates = []
        self.dec_blocks = []
        channels = cfg.embed_dim
        for s in reversed(range(stages)):
            skip_ch = self.skip_channels[s]
            self.trans_up.append(TransitionUp(channels, skip_ch, rng, dtype=dtype))
            kernels = cfg.clab_kernels if cfg.clab_kernels is not None else max(1, skip_ch // 2)
            if cfg.skip_attention == "clab":
                self.skip_gates.append(CLAB(skip_ch, cfg.clab_branches, kernels, rng, dtype=dtype))
            elif cfg.skip_attention == "cuab_like":
                self.skip_gates.append(CUABLike(skip_ch, cfg.clab_branches, kernels, rng, dtype=dtype))
            else:
                self.skip_gates.append(None)
            block = DenseBlock(2 * skip_ch, cfg.growth_rate, layers[s], rng, cfg.dropout_p, dtype=dtype)
            channels = block.out_channels
            self.dec_blocks.append(block)

        self.head = Conv2d(channels, cfg.num_classes, 1, rng, dtype=dtype)

        names = [name for name, _ in self.named_parameters()]
        if len(names) != len(set(names)):
            raise ConfigInvalid("parameter registry names are not unique")
        for name, p in self.named_parameters():
            p.name = name

    @property
    def token_count(self) -> int:
        return self.patch_embed.n_tokens + 1

    def _to_tensor(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x), dtype=self.dtype)

    def forward(self, x, training: bool = False,
                rng: Optional[np.random.Generator] = None,
                return_features: bool = False):
        x = self._to_tensor(x)
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeMismatch(f"input must be B x {cfg.in_channels} x H x W, got {x.shape}")
        if x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
            raise ShapeMismatch(
                f"input spatial dims {x.shape[2]}x{x.shape[3]} differ from "
                f"configured {cfg.input_size}x{cfg.input_size}"
            )

        y = self.stem(x)
        skips = []
        for block, down in zip(self.enc_blocks, self.trans_down):
            y = block(y, training, rng)
            skips.append(y)
            y = down(y)

        hf = self.bottleneck_size
        tokens = self.patch_embed(y)
        tokens = self.encoder(tokens, training, rng)
        y = tokens_to_map(tokens, hf, hf)

        for i, (up, gate, block) in enumerate(zip(self.trans_up, self.skip_gates, self.dec_blocks)):
            skip = skips[len(skips) - 1 - i]
            y = up(y)
            if gate is not None:
                skip = gate(skip, training, rng)
            y = ad.concat([y, skip], axis=1)
            y = block(y, training, rng)

        features = y
        logits = self.head(y)
        if return_features:
            return logits, features
        return logits

    __call__ = forward


def build(cfg: ModelConfig, rng: Optional[np.random.Generator] = None, dtype=np.float32) -> TFCNsModel:
    """Deterministically initialized model; given the same seed (or generator
    state) the parameter bytes are identical."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    return TFCNsModel(cfg, rng, dtype=dtype)


def predict(model: TFCNsModel, x) -> np.ndarray:
    """Per-pixel argmax over softmax class probabilities -> B x H x W class
    indices. Ties resolve to the lowest class index."""
    logits = model.forward(x, training=False)
    probs = ad.softmax(logits, axis=1)
    return np.argmax(probs.data, axis=1).astype(np.int32)


def class_activation_map(model: TFCNsModel, x, target_class: int) -> np.ndarray:
    """Head-weighted sum of the pre-head feature maps for one class, ReLU'd
    and min-max normalized per sample into [0,1]. A constant (typically
    all-zero) map normalizes to zeros."""
    if not 0 <= target_class < model.cfg.num_classes:
        raise ClassOutOfRange(f"class {target_class} outside [0, {model.cfg.num_classes})")
    _, features = model.forward(x, training=False, return_features=True)
    weights = model.head.weight.data[target_class, :, 0, 0]
    cam = np.tensordot(features.data, weights, axes=([1], [0]))
    cam = np.maximum(cam, 0.0)
    lo = cam.min(axis=(1, 2), keepdims=True)
    hi = cam.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    with np.errstate(invalid="ignore", divide="ignore"):
        normed = np.where(span > 0, (cam - lo) / np.where(span > 0, span, 1.0), 0.0)
    return normed.astype(np.float64)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    version: int
    config: ModelConfig
    params: dict
    momentum: dict = field(default_factory=dict)
    iteration: int = 0


_MOMENTUM_PREFIX = "optimizer.momentum/"


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    tag = _tag_for(arr)
    name_b = name.encode("utf-8")
    head = struct.pack("<H", len(name_b)) + name_b + struct.pack("<BB", tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + arr.astype(DTYPE_TAGS[tag], copy=False).tobytes()


def save_checkpoint(model: TFCNsModel, optimizer_state, path) -> None:
    """Write model parameters (and, when given, optimizer momentum buffers and
    the iteration counter) to the TFCN container. Byte-identical for identical
    state."""
    iteration = 0 if optimizer_state is None else optimizer_state.iteration
    text = model_config_to_text(model.cfg, extra={"iteration": iteration}).encode("utf-8")
    chunks = [struct.pack("<I", len(text)), text]
    records = [(name, p.tensor.data) for name, p in model.named_parameters()]
    if optimizer_state is not None:
        records += [
            (_MOMENTUM_PREFIX + name, buf) for name, buf in optimizer_state.momentum.items()
        ]
    chunks.append(struct.pack("<I", len(records)))
    for name, arr in records:
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        chunks.append(_pack_record(name, arr))
    payload = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION))
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionError(version, CHECKPOINT_VERSION)
    payload = blob[8:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if crc != zlib.crc32(payload):
        raise FormatError(f"{path}: CRC mismatch")

    offset = 0

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(payload):
            raise FormatError(f"{path}: truncated payload")
        vals = struct.unpack_from(fmt, payload, offset)
        offset += size
        return vals

    (text_len,) = take("<I")
    if offset + text_len > len(payload):
        raise FormatError(f"{path}: truncated config text")
    text = payload[offset:offset + text_len].decode("utf-8")
    offset += text_len
    cfg, extra = model_config_from_text(text)
    (n_records,) = take("<I")
    params, momentum = {}, {}
    for _ in range(n_records):
        (name_len,) = take("<H")
        name = payload[offset:offset + name_len].decode("utf-8")
        offset += name_len
        tag, rank = take("<BB")
        if tag not in DTYPE_TAGS:
            raise FormatError(f"{path}: unknown dtype tag {tag}")
        dims = take(f"<{rank}I") if rank else ()
        dtype = DTYPE_TAGS[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        if offset + nbytes > len(payload):
            raise FormatError(f"{path}: truncated record {name!r}")
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype=dtype).reshape(dims).copy()
        offset += nbytes
        if name.startswith(_MOMENTUM_PREFIX):
            momentum[name[len(_MOMENTUM_PREFIX):]] = arr
        else:
            params[name] = arr
    if offset != len(payload):
        raise FormatError(f"{path}: trailing bytes in payload")
    return Checkpoint(
        version=version,
        config=cfg,
        params=params,
        momentum=momentum,
        iteration=int(extra.get("iteration", 0)),
    )


def restore_parameters(model: TFCNsModel, params: dict) -> None:
    """Copy checkpointed arrays into the model's registry; names must match
    exactly in both directions."""
    names = {name for name, _ in model.named_parameters()}
    missing = names - params.keys()
    extra = params.keys() - names
    if missing or extra:
        raise FormatError(
            f"parameter registry mismatch (missing: {sorted(missing)[:3]}, "
            f"unexpected: {sorted(extra)[:3]})"
        )
    for name, p in model.named_parameters():
        arr = params[name]
        if tuple(arr.shape) != p.tensor.shape:
            raise FormatError(f"{name}: checkpoint shape {arr.shape} != model {p.tensor.shape}")
        arr = arr.astype(p.tensor.dtype, copy=False)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        p.tensor.data = arr.copy()


def model_from_checkpoint(source) -> tuple[TFCNsModel, Checkpoint]:
    """Rebuild a model from a checkpoint path (or loaded Checkpoint); the
    restored model's forward pass is bit-identical to the saved one's."""
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    dtype = next(iter(ckpt.params.values())).dtype if ckpt.params else np.float32
    model = build(ckpt.config, dtype=np.dtype(dtype))
    restore_parameters(model, ckpt.params)
    return model, ckpt

