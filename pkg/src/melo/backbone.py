"""Frozen ViT backbone: architecture config, weight container and file format.

Backbone file layout (all little-endian)::

    b"MELB"  u16 version  u16 flags
    u32 image_size, patch_size, channels, dim, depth, heads, mlp_dim
    u32 tensor_count
    per tensor: u16 name_len, name (utf-8), u32 rank, u32 dims[rank], f32 payload
    u32 CRC32 of every preceding byte

A fine-tuned model file uses the same layout with two extra tensors,
``head.weight`` and ``head.bias``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

import numpy as np

from . import _binio
from .errors import FormatError, ShapeError
from .tensor import DTYPE

BACKBONE_MAGIC = b"MELB"
BACKBONE_VERSION = 1
LN_EPS = 1e-6
PROJECTIONS = ("q", "v")

HEAD_WEIGHT = "head.weight"
HEAD_BIAS = "head.bias"


@dataclass(frozen=True)
class ViTConfig:
    image_size: int
    patch_size: int
    channels: int
    dim: int
    depth: int
    heads: int
    mlp_dim: int

    def __post_init__(self):
        for name in ("image_size", "patch_size", "channels", "dim", "depth", "heads", "mlp_dim"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def mlp_ratio(self) -> float:
        return self.mlp_dim / self.dim

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    def replace(self, **changes) -> "ViTConfig":
        return replace(self, **changes)


# Public ViT family dimensions; "toy" is the desk-scale config used in tests.
PRESETS: dict[str, ViTConfig] = {
    "vit-toy": ViTConfig(image_size=16, patch_size=4, channels=3, dim=16, depth=2, heads=2, mlp_dim=32),
    "vit-tiny": ViTConfig(image_size=224, patch_size=16, channels=3, dim=192, depth=12, heads=3, mlp_dim=768),
    "vit-small": ViTConfig(image_size=224, patch_size=16, channels=3, dim=384, depth=12, heads=6, mlp_dim=1536),
    "vit-base": ViTConfig(image_size=224, patch_size=16, channels=3, dim=768, depth=12, heads=12, mlp_dim=3072),
    "vit-huge": ViTConfig(image_size=224, patch_size=14, channels=3, dim=1280, depth=32, heads=16, mlp_dim=5120),
    "vit-giga": ViTConfig(image_size=224, patch_size=14, channels=3, dim=1664, depth=48, heads=16, mlp_dim=8192),
}


def preset(name: str, **overrides) -> ViTConfig:
    """Look up a named config, optionally overriding fields (e.g. ``image_size``)."""
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return cfg.replace(**overrides) if overrides else cfg


def param_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every backbone tensor (head excluded)."""
    d, m = cfg.dim, cfg.mlp_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (d, cfg.patch_dim),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (cfg.seq_len, d),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes[p + "norm1.weight"] = (d,)
        shapes[p + "norm1.bias"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"attn.{proj}.weight"] = (d, d)
            shapes[p + f"attn.{proj}.bias"] = (d,)
        shapes[p + "norm2.weight"] = (d,)
        shapes[p + "norm2.bias"] = (d,)
        shapes[p + "mlp.fc1.weight"] = (m, d)
        shapes[p + "mlp.fc1.bias"] = (m,)
        shapes[p + "mlp.fc2.weight"] = (d, m)
        shapes[p + "mlp.fc2.bias"] = (d,)
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    return shapes


def count_backbone_params(cfg: ViTConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def proj_name(layer: int, kind: str) -> str:
    """Name of the frozen projection matrix an adapter attaches to."""
    if kind not in ("q", "k", "v", "o"):
        raise ValueError(f"unknown projection kind {kind!r}")
    return f"blocks.{layer}.attn.{kind}.weight"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=DTYPE)
    if arr.flags.writeable:
        arr = arr.copy() if arr.base is not None else arr
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ViTWeights:
    """Immutable set of backbone tensors keyed by name.

    Arrays are marked read-only; ``merged_tasks`` records adapters folded in
    by :func:`melo.lora.merge_adapter` so they can be taken out again.
    """

    tensors: Mapping[str, np.ndarray]
    merged_tasks: tuple[str, ...] = field(default=())

    def __post_init__(self):
        frozen = {k: _freeze(v) for k, v in self.tensors.items()}
        object.__setattr__(self, "tensors", MappingProxyType(frozen))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def proj(self, layer: int, kind: str) -> np.ndarray:
        return self.tensors[proj_name(layer, kind)]

    @property
    def num_params(self) -> int:
        return sum(int(v.size) for v in self.tensors.values())

    @property
    def nbytes(self) -> int:
        return sum(int(v.nbytes) for v in self.tensors.values())

    def checksum(self) -> str:
        """SHA-256 over names and raw bytes, in name order."""
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(self.tensors[name].tobytes())
        return h.hexdigest()

    def with_updates(self, updates: Mapping[str, np.ndarray], merged_tasks=None) -> "ViTWeights":
        """Return a new weight set; untouched tensors are shared, not copied."""
        tensors = dict(self.tensors)
        for name, arr in updates.items():
            if name not in tensors:
                raise KeyError(f"unknown backbone tensor {name!r}")
            if arr.shape != tensors[name].shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {tensors[name].shape}")
            tensors[name] = arr
        merged = self.merged_tasks if merged_tasks is None else tuple(merged_tasks)
        return ViTWeights(tensors, merged)

    def validate(self, cfg: ViTConfig) -> None:
        expected = param_shapes(cfg)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise FormatError(f"backbone tensors do not match config (missing={missing[:3]}, extra={extra[:3]})")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.tensors[name].shape} != {shape}")


def init_backbone(cfg: ViTConfig, seed: int = 0, std: float = 0.02) -> ViTWeights:
    """Seeded random backbone: Gaussian(0, std) matrices/tokens, zero biases, unit norms."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if "norm" in name and name.endswith(".weight"):
            arr = np.ones(shape, dtype=DTYPE)
        elif name.endswith(".bias"):
            arr = np.zeros(shape, dtype=DTYPE)
        else:
            arr = (rng.standard_normal(shape) * std).astype(DTYPE)
        tensors[name] = arr
    return ViTWeights(tensors)


# -- serialization ---------------------------------------------------------

_CONFIG_FIELDS = ("image_size", "patch_size", "channels", "dim", "depth", "heads", "mlp_dim")


def _tensor_record_size(name: str, shape) -> int:
    return 2 + len(name.encode()) + 4 + 4 * len(shape) + 4 * int(np.prod(shape))


def backbone_file_size(cfg: ViTConfig, num_classes: int | None = None) -> int:
    """Exact serialized size in bytes, computed without allocating weights."""
    size = 4 + 2 + 2 + 4 * len(_CONFIG_FIELDS) + 4
    for name, shape in param_shapes(cfg).items():
        size += _tensor_record_size(name, shape)
    if num_classes is not None:
        size += _tensor_record_size(HEAD_WEIGHT, (num_classes, cfg.dim))
        size += _tensor_record_size(HEAD_BIAS, (num_classes,))
    return size + 4


def encode_backbone(cfg: ViTConfig, weights: ViTWeights, head=None) -> bytes:
    weights.validate(cfg)
    w = _binio.Writer()
    w.raw(BACKBONE_MAGIC)
    w.pack("HH", BACKBONE_VERSION, 0)
    w.pack("7I", *(getattr(cfg, f) for f in _CONFIG_FIELDS))
    items = [(name, weights[name]) for name in param_shapes(cfg)]
    if head is not None:
        hw, hb = head
        if hw.ndim != 2 or hw.shape[1] != cfg.dim or hb.shape != (hw.shape[0],):
            raise ShapeError(f"head shapes {hw.shape}/{hb.shape} do not fit dim {cfg.dim}")
        items += [(HEAD_WEIGHT, hw), (HEAD_BIAS, hb)]
    w.pack("I", len(items))
    for name, arr in items:
        w.string(name)
        w.pack("I", arr.ndim)
        w.pack(f"{arr.ndim}I", *arr.shape)
        w.f32(arr)
    return w.finish()


def decode_backbone(buf: bytes):
    """Parse a backbone/model file. Returns ``(cfg, weights, head_or_None)``."""
    _binio.check_magic(buf, BACKBONE_MAGIC, {BACKBONE_VERSION})
    _binio.verify_crc(buf)
    r = _binio.Reader(buf, 8)
    cfg = ViTConfig(**dict(zip(_CONFIG_FIELDS, r.unpack("7I"))))
    (count,) = r.unpack("I")
    tensors = {}
    for _ in range(count):
        name = r.string()
        (rank,) = r.unpack("I")
        dims = r.unpack(f"{rank}I")
        tensors[name] = r.f32(dims)
    if r.pos != len(buf) - 4:
        raise FormatError(f"{len(buf) - 4 - r.pos} trailing bytes before CRC")
    head = None
    if HEAD_WEIGHT in tensors or HEAD_BIAS in tensors:
        head = (tensors.pop(HEAD_WEIGHT), tensors.pop(HEAD_BIAS))
    weights = ViTWeights(tensors)
    weights.validate(cfg)
    return cfg, weights, head


def save_backbone(cfg: ViTConfig, weights: ViTWeights, path, head=None) -> int:
    """Write a backbone (or, with ``head``, a full fine-tuned model). Returns bytes written."""
    data = encode_backbone(cfg, weights, head)
    _binio.write_atomic(path, data)
    return len(data)


def load_backbone(path) -> tuple[ViTConfig, ViTWeights]:
    cfg, weights, _ = decode_backbone(Path(path).read_bytes())
    return cfg, weights


def load_model(path):
    """Load a model file written with a head. Returns ``(cfg, weights, head)``."""
    cfg, weights, head = decode_backbone(Path(path).read_bytes())
    if head is None:
        raise FormatError(f"{path} has no classifier head")
    return cfg, weights, head
