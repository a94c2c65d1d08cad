"""MViTime: MobileViT adapted to one-dimensional signals.

Layout of a forward pass::

    [B, 1, L] -> stem conv -> MV2 / MobileViT blocks -> 1x1 expansion
              -> global average pool -> features [B, F]

``project`` maps features to unit-norm embeddings for contrastive
pre-training, ``classify`` maps them to five stage logits.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointVersionError, IndivisibleLength, ShapeMismatch

N_CLASSES = 5


# ---- functional pieces ------------------------------------------------------------

def silu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


class SiLU(nn.Module):
    def forward(self, x):
        return silu(x)


def conv_out_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv1d_forward(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1):
    """Cross-correlation over the last axis of a [B, C, N] tensor."""
    if x.dim() != 3 or weight.dim() != 3:
        raise ShapeMismatch(f"expected 3-D input and weight, got {tuple(x.shape)}, {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1] * groups:
        raise ShapeMismatch(
            f"input has {x.shape[1]} channels, weight expects {weight.shape[1] * groups}"
        )
    if x.shape[2] + 2 * padding < weight.shape[2]:
        raise ShapeMismatch("kernel longer than padded input")
    return F.conv1d(x, weight, bias, stride=stride, padding=padding, groups=groups)


def unfold_1d(x: torch.Tensor, patch_size: int, pad: bool = True) -> torch.Tensor:
    """[B, C, N] -> [B*p, N/p, C].

    Position i of patch j becomes token j of stream i, so each stream holds
    every p-th sample. A length not divisible by p is right-padded with
    zeros unless ``pad`` is False.
    """
    b, c, n = x.shape
    p = patch_size
    if n % p:
        if not pad:
            raise IndivisibleLength(f"length {n} is not divisible by patch size {p}")
        x = F.pad(x, (0, p - n % p))
        n = x.shape[2]
    # [B, C, N/p, p] -> [B, p, N/p, C]
    return x.reshape(b, c, n // p, p).permute(0, 3, 2, 1).reshape(b * p, n // p, c)


def fold_1d(tokens: torch.Tensor, patch_size: int, length: int | None = None) -> torch.Tensor:
    """Inverse of :func:`unfold_1d`; ``length`` truncates any padding."""
    bp, t, c = tokens.shape
    p = patch_size
    if bp % p:
        raise ShapeMismatch(f"{bp} token streams is not a multiple of patch size {p}")
    b = bp // p
    x = tokens.reshape(b, p, t, c).permute(0, 3, 2, 1).reshape(b, c, t * p)
    if length is not None:
        if length > t * p:
            raise ShapeMismatch(f"cannot fold {t * p} positions to length {length}")
        x = x[:, :, :length]
    return x


# ---- configuration ------------------------------------------------------------------

@dataclass(frozen=True)
class BlockSpec:
    kind: str  # "mv2" or "mvit"
    channels: int
    stride: int = 1
    expansion: int = 4
    patch_size: int = 2
    transformer_dim: int = 0
    n_heads: int = 4
    depth: int = 1

    def __post_init__(self):
        if self.kind not in ("mv2", "mvit"):
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.kind == "mvit":
            if self.transformer_dim % self.n_heads:
                raise ValueError("transformer_dim must be divisible by n_heads")
            if self.stride != 1:
                raise ValueError("MobileViT blocks keep resolution; put the stride on an MV2 block")


@dataclass(frozen=True)
class ModelConfig:
    input_length: int = 3000
    in_channels: int = 1
    stem_channels: int = 16
    stem_stride: int = 2
    kernel_size: int = 3
    blocks: tuple = ()
    head_channels: int = 384
    projection_dim: int = 128
    n_classes: int = N_CLASSES
    activation: str = "silu"
    ffn_ratio: int = 2

    def __post_init__(self):
        if self.n_classes != N_CLASSES:
            raise ValueError("the classifier always has five outputs")
        if self.activation not in ("silu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        blocks = tuple(b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def with_length(self, length: int) -> "ModelConfig":
        return replace(self, input_length=length)


def xs_config(input_length: int = 3000) -> ModelConfig:
    """Default MViTime-XS: MobileViT-XS proportions translated to 1D."""
    return ModelConfig(
        input_length=input_length,
        stem_channels=16,
        blocks=(
            BlockSpec("mv2", 24, stride=1),
            BlockSpec("mv2", 48, stride=2),
            BlockSpec("mv2", 64, stride=2),
            BlockSpec("mvit", 64, transformer_dim=96, depth=2, n_heads=4),
            BlockSpec("mv2", 80, stride=2),
            BlockSpec("mvit", 80, transformer_dim=120, depth=4, n_heads=4),
            BlockSpec("mv2", 96, stride=2),
            BlockSpec("mvit", 96, transformer_dim=144, depth=3, n_heads=4),
        ),
        head_channels=384,
        projection_dim=128,
    )


def tiny_config(input_length: int = 256) -> ModelConfig:
    """Small configuration for smoke tests and quick experiments."""
    return ModelConfig(
        input_length=input_length,
        stem_channels=8,
        blocks=(
            BlockSpec("mv2", 8, stride=1, expansion=2),
            BlockSpec("mv2", 16, stride=2, expansion=2),
            BlockSpec("mvit", 16, transformer_dim=16, depth=1, n_heads=2),
            BlockSpec("mv2", 24, stride=2, expansion=2),
            BlockSpec("mvit", 24, transformer_dim=24, depth=1, n_heads=2),
        ),
        head_channels=32,
        projection_dim=16,
    )


PRESETS = {"xs": xs_config, "tiny": tiny_config}


def block_shapes(config: ModelConfig, length: int | None = None) -> list[tuple[str, int, int]]:
    """Predicted (name, channels, length) after the stem, every block and the head."""
    n = config.input_length if length is None else length
    k = config.kernel_size
    n = conv_out_length(n, k, config.stem_stride, k // 2)
    out = [("stem", config.stem_channels, n)]
    for i, spec in enumerate(config.blocks):
        n = conv_out_length(n, k, spec.stride, k // 2)
        out.append((f"blocks.{i}", spec.channels, n))
    out.append(("head", config.head_channels, n))
    return out


def _token_count(length: int, patch: int) -> int:
    return -(-length // patch)


def parameter_count(config: ModelConfig) -> int:
    """Trainable parameters of an :class:`MViTime` built from ``config``."""
    k = config.kernel_size

    def conv_bn(cin, cout, kernel, groups=1):
        return cout * (cin // groups) * kernel + 2 * cout

    def linear(i, o):
        return i * o + o

    total = conv_bn(config.in_channels, config.stem_channels, k)
    c = config.stem_channels
    for spec, (_, _, n) in zip(config.blocks, block_shapes(config)[1:]):
        if spec.kind == "mv2":
            hidden = c * spec.expansion
            total += conv_bn(c, hidden, 1) + conv_bn(hidden, hidden, k, hidden) + conv_bn(hidden, spec.channels, 1)
            c = spec.channels
        else:
            d = spec.transformer_dim
            total += conv_bn(c, c, k) + c * d  # local conv, bias-free 1x1 projection
            total += _token_count(n, spec.patch_size) * d  # positional encoding
            per_layer = 2 * d + linear(d, 3 * d) + linear(d, d) + 2 * d + linear(d, config.ffn_ratio * d) + linear(config.ffn_ratio * d, d)
            total += spec.depth * per_layer + 2 * d  # final norm
            total += conv_bn(d, c, 1) + conv_bn(2 * c, c, k)
    total += conv_bn(c, config.head_channels, 1)
    f = config.head_channels
    total += linear(f, f) + linear(f, config.projection_dim) + linear(f, config.n_classes)
    return total


# ---- layers ---------------------------------------------------------------------------

def _activation(name: str) -> nn.Module:
    return SiLU() if name == "silu" else nn.Identity()


class ConvLayer(nn.Sequential):
    def __init__(self, cin, cout, kernel, stride=1, groups=1, act="silu", norm=True):
        layers = [nn.Conv1d(cin, cout, kernel, stride, kernel // 2, groups=groups, bias=not norm)]
        if norm:
            layers.append(nn.BatchNorm1d(cout))
        if act is not None:
            layers.append(_activation(act))
        super().__init__(*layers)


class MV2Block(nn.Module):
    """Inverted residual: 1x1 expand, depthwise conv, 1x1 linear projection."""

    def __init__(self, cin, cout, stride=1, expansion=4, kernel=3, act="silu"):
        super().__init__()
        hidden = cin * expansion
        self.expand = ConvLayer(cin, hidden, 1, act=act)
        self.depthwise = ConvLayer(hidden, hidden, kernel, stride, groups=hidden, act=act)
        self.project = ConvLayer(hidden, cout, 1, act=None)
        self.use_residual = stride == 1 and cin == cout

    def forward(self, x):
        y = self.project(self.depthwise(self.expand(x)))
        return x + y if self.use_residual else y


class PositionalEncoding(nn.Module):
    def __init__(self, n_tokens: int, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(n_tokens, dim))

    def forward(self, tokens):
        if tokens.shape[1] > self.weight.shape[0] or tokens.shape[2] != self.weight.shape[1]:
            raise ShapeMismatch(
                f"tokens {tuple(tokens.shape)} do not fit encoding {tuple(self.weight.shape)}"
            )
        return tokens + self.weight[: tokens.shape[1]]


class SelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads:
            raise ShapeMismatch(f"dim {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def attention(self, x):
        b, t, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).reshape(b, t, 3, h, d // h).permute(2, 0, 3, 1, 4)
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // h), dim=-1)
        return weights, v

    def forward(self, x):
        b, t, d = x.shape
        weights, v = self.attention(x)
        return self.out((weights @ v).transpose(1, 2).reshape(b, t, d))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention and SiLU feed-forward, each with a residual."""

    def __init__(self, dim: int, n_heads: int, ffn_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_ratio * dim), SiLU(), nn.Linear(ffn_ratio * dim, dim)
        )

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class MobileViTBlock(nn.Module):
    """Local conv, unfold into p strided token streams, attend, fold, fuse."""

    def __init__(self, channels, dim, depth, n_heads, patch_size, length,
                 kernel=3, act="silu", ffn_ratio=2):
        super().__init__()
        self.patch_size = patch_size
        self.length = length
        self.local = ConvLayer(channels, channels, kernel, act=act)
        self.to_tokens = nn.Conv1d(channels, dim, 1, bias=False)
        self.pos = PositionalEncoding(_token_count(length, patch_size), dim)
        self.transformer = nn.Sequential(
            *[TransformerBlock(dim, n_heads, ffn_ratio) for _ in range(depth)]
        )
        self.norm = nn.LayerNorm(dim)
        self.from_tokens = ConvLayer(dim, channels, 1, act=act)
        self.fuse = ConvLayer(2 * channels, channels, kernel, act=act)

    def forward(self, x):
        if x.shape[2] != self.length:
            raise ShapeMismatch(f"block built for length {self.length}, got {x.shape[2]}")
        y = self.to_tokens(self.local(x))
        tokens = self.pos(unfold_1d(y, self.patch_size))
        tokens = self.norm(self.transformer(tokens))
        y = self.from_tokens(fold_1d(tokens, self.patch_size, x.shape[2]))
        return self.fuse(torch.cat([x, y], dim=1))


class MViTime(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        act = config.activation
        k = config.kernel_size
        self.stem = ConvLayer(config.in_channels, config.stem_channels, k, config.stem_stride, act=act)
        blocks = []
        c = config.stem_channels
        for spec, (_, _, n) in zip(config.blocks, block_shapes(config)[1:]):
            if spec.kind == "mv2":
                blocks.append(MV2Block(c, spec.channels, spec.stride, spec.expansion, k, act))
            else:
                if spec.channels != c:
                    raise ShapeMismatch(
                        f"MobileViT block keeps channels; got {c} in, {spec.channels} declared"
                    )
                blocks.append(MobileViTBlock(
                    c, spec.transformer_dim, spec.depth, spec.n_heads, spec.patch_size,
                    n, k, act, config.ffn_ratio,
                ))
            c = spec.channels
        self.blocks = nn.Sequential(*blocks)
        self.head = ConvLayer(c, config.head_channels, 1, act=act)
        f = config.head_channels
        self.projector = nn.Sequential(nn.Linear(f, f), SiLU(), nn.Linear(f, config.projection_dim))
        self.classifier = nn.Linear(f, config.n_classes)

    @property
    def feature_dim(self) -> int:
        return self.config.head_channels

    def forward(self, x):
        if x.dim() != 3 or x.shape[1] != self.config.in_channels or x.shape[2] != self.config.input_length:
            raise ShapeMismatch(
                f"expected [B, {self.config.in_channels}, {self.config.input_length}], got {tuple(x.shape)}"
            )
        return self.head(self.blocks(self.stem(x))).mean(dim=2)

    def project(self, features):
        return F.normalize(self.projector(features), dim=1)

    def classify(self, features):
        return self.classifier(features)

    def logits(self, x):
        return self.classify(self(x))

    def spec(self) -> dict:
        return {"type": "mvitime", "config": self.config.to_dict()}


class CombinedModel(nn.Module):
    """Weighted combination of a self-contrast and a cross-subject network.

    ``mode="features"``: alpha * f_self + (1 - alpha) * f_cross feeds one
    fresh classifier. ``mode="full"``: each branch keeps its own classifier
    and the logits are mixed with the same weights.
    """

    def __init__(self, self_branch: MViTime, cross_branch: MViTime, alpha: float, mode: str):
        super().__init__()
        if mode not in ("features", "full"):
            raise ValueError(f"unknown combination mode {mode!r}")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        self.self_branch = self_branch
        self.cross_branch = cross_branch
        self.alpha = float(alpha)
        self.mode = mode
        self.config = self_branch.config
        if mode == "features":
            self.classifier = nn.Linear(self_branch.feature_dim, N_CLASSES)

    @property
    def feature_dim(self) -> int:
        return self.self_branch.feature_dim

    def forward(self, x):
        a = self.alpha
        return a * self.self_branch(x) + (1 - a) * self.cross_branch(x)

    def logits(self, x):
        if self.mode == "features":
            return self.classifier(self(x))
        a = self.alpha
        return a * self.self_branch.logits(x) + (1 - a) * self.cross_branch.logits(x)

    def spec(self) -> dict:
        return {
            "type": "combined",
            "mode": self.mode,
            "alpha": self.alpha,
            "self": self.self_branch.spec(),
            "cross": self.cross_branch.spec(),
        }


# ---- initialisation -------------------------------------------------------------------

def init_weights(model: nn.Module, seed: int = 0) -> nn.Module:
    """Fan-in scaled uniform weights, zero biases and positional encodings."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, module in sorted(model.named_modules(), key=lambda kv: kv[0]):
            if isinstance(module, (nn.Conv1d, nn.Linear)):
                w = module.weight
                fan_in = w[0].numel()
                bound = math.sqrt(3.0 / fan_in)
                w.copy_(torch.rand(w.shape, generator=gen, dtype=torch.float64).mul_(2 * bound).sub_(bound))
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, PositionalEncoding):
                module.weight.zero_()
            elif isinstance(module, (nn.BatchNorm1d, nn.LayerNorm)):
                module.weight.fill_(1.0)
                module.bias.zero_()
    return model


def build_model(spec, seed: int = 0) -> nn.Module:
    """Construct (and initialise) a model from a config or spec dict."""
    if isinstance(spec, ModelConfig):
        return init_weights(MViTime(spec), seed)
    if spec["type"] == "mvitime":
        return init_weights(MViTime(ModelConfig.from_dict(spec["config"])), seed)
    if spec["type"] == "combined":
        model = CombinedModel(
            build_model(spec["self"], seed), build_model(spec["cross"], seed + 1),
            spec["alpha"], spec["mode"],
        )
        if spec["mode"] == "features":
            init_weights(model.classifier, seed + 2)
        return model
    raise ValueError(f"unknown model type {spec['type']!r}")


def spec_config(spec: dict) -> ModelConfig:
    while spec["type"] == "combined":
        spec = spec["self"]
    return ModelConfig.from_dict(spec["config"])


# ---- checkpoints ----------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MVTCKPT\x00"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    spec: dict
    parameters: dict = field(repr=False)
    metadata: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return spec_config(self.spec)

    @classmethod
    def from_model(cls, model: nn.Module, metadata: dict | None = None) -> "Checkpoint":
        params = {
            name: t.detach().cpu().numpy().astype("<f4")
            for name, t in model.state_dict().items()
            if not name.endswith("num_batches_tracked")
        }
        return cls(model.spec(), params, dict(metadata or {}))

    def build(self, dtype=torch.float32) -> nn.Module:
        model = build_model(self.spec)
        expected = {k for k in model.state_dict() if not k.endswith("num_batches_tracked")}
        if expected != set(self.parameters):
            missing = sorted(expected - set(self.parameters))
            extra = sorted(set(self.parameters) - expected)
            raise ShapeMismatch(f"checkpoint does not match its config: missing {missing[:3]}, extra {extra[:3]}")
        state = {k: torch.from_numpy(np.array(v)) for k, v in self.parameters.items()}
        model.load_state_dict(state, strict=False)
        return model.to(dtype)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write ``ckpt``: magic, version, JSON header, then little-endian float32 arrays."""
    index, offset, blobs = [], 0, []
    for name in sorted(ckpt.parameters):
        arr = np.ascontiguousarray(ckpt.parameters[name], dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {"version": CHECKPOINT_VERSION, "spec": ckpt.spec, "metadata": ckpt.metadata, "tensors": index},
        sort_keys=True,
    ).encode()
    payload = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(header)) + header + b"".join(blobs)
    _atomic_write(path, payload)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, this build reads {CHECKPOINT_VERSION}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(data[start:start + hlen])
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: header version mismatch")
    base = start + hlen
    params = {}
    for entry in header["tensors"]:
        lo = base + entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=entry["nbytes"] // 4, offset=lo)
        params[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(header["spec"], params, header["metadata"])


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)
