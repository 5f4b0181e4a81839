"""Low-rank adapters on the query/value projections of every attention block.

An adapter adds ``s * B @ A`` to each frozen ``W_Q`` and ``W_V`` (``B`` is
d x r, ``A`` is r x d) and carries the task's classifier head. At inference
the update is applied factored, ``W0 x + s * B (A x)``, so switching tasks
never touches backbone memory.

Adapter file layout (all little-endian)::

    b"MELO"  u16 version  u16 flags
    u16 task_name_len, task_name (utf-8)
    u32 dim, depth, rank, num_classes   f32 scale
    for layer in 0..depth-1: A_q, B_q, A_v, B_v   (f32, row-major)
    head_weight (num_classes x dim), head_bias (num_classes)
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

import numpy as np

from . import _binio
from .backbone import PROJECTIONS, ViTConfig, ViTWeights, count_backbone_params, proj_name
from .errors import CompatibilityError, FormatError, MergeStateError, ShapeError
from .tensor import DTYPE, matmul

ADAPTER_MAGIC = b"MELO"
ADAPTER_VERSION = 1
DEFAULT_RANK = 4


def factor_name(layer: int, kind: str, factor: str) -> str:
    return f"blocks.{layer}.{kind}.{factor}"


def _readonly(arr) -> np.ndarray:
    arr = np.array(arr, dtype=DTYPE, copy=True, order="C")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class LoraAdapter:
    """Per-task plug-in: (A, B) for every layer's Q and V, plus a classifier head."""

    task_name: str
    base_d: int
    depth: int
    rank: int
    scale: float
    factors: Mapping[str, np.ndarray]
    head_weight: np.ndarray
    head_bias: np.ndarray

    def __post_init__(self):
        if not 1 <= self.rank < self.base_d:
            raise ValueError(f"rank must satisfy 1 <= r < d={self.base_d}, got {self.rank}")
        expected = {}
        for layer in range(self.depth):
            for kind in PROJECTIONS:
                expected[factor_name(layer, kind, "A")] = (self.rank, self.base_d)
                expected[factor_name(layer, kind, "B")] = (self.base_d, self.rank)
        if set(self.factors) != set(expected):
            raise ShapeError("adapter factor names do not match depth/projections")
        frozen = {}
        for name, shape in expected.items():
            arr = self.factors[name]
            if tuple(arr.shape) != shape:
                raise ShapeError(f"{name}: shape {tuple(arr.shape)} != {shape}")
            frozen[name] = arr if not arr.flags.writeable and arr.dtype == DTYPE else _readonly(arr)
        object.__setattr__(self, "factors", MappingProxyType(frozen))
        hw, hb = self.head_weight, self.head_bias
        if hw.ndim != 2 or hw.shape[1] != self.base_d or tuple(hb.shape) != (hw.shape[0],):
            raise ShapeError(f"head shapes {hw.shape}/{hb.shape} do not fit d={self.base_d}")
        object.__setattr__(self, "head_weight", _readonly(hw))
        object.__setattr__(self, "head_bias", _readonly(hb))
        object.__setattr__(self, "scale", float(np.float32(self.scale)))

    @property
    def num_classes(self) -> int:
        return int(self.head_weight.shape[0])

    @property
    def head(self) -> tuple[np.ndarray, np.ndarray]:
        return self.head_weight, self.head_bias

    def A(self, layer: int, kind: str) -> np.ndarray:
        return self.factors[factor_name(layer, kind, "A")]

    def B(self, layer: int, kind: str) -> np.ndarray:
        return self.factors[factor_name(layer, kind, "B")]

    def delta(self, layer: int, kind: str) -> np.ndarray:
        """Materialized ``s * B @ A`` (d x d). Not used on the inference path."""
        return DTYPE(self.scale) * matmul(self.B(layer, kind), self.A(layer, kind))

    @property
    def num_params(self) -> int:
        return sum(int(a.size) for a in self.factors.values()) + int(self.head_weight.size + self.head_bias.size)

    @property
    def nbytes(self) -> int:
        return 4 * self.num_params

    def check_compatible(self, cfg: ViTConfig) -> None:
        if (self.base_d, self.depth) != (cfg.dim, cfg.depth):
            raise CompatibilityError(
                f"adapter {self.task_name!r} built for (d={self.base_d}, L={self.depth}) "
                f"but backbone is (d={cfg.dim}, L={cfg.depth})"
            )

    def replace(self, **changes) -> "LoraAdapter":
        fields = dict(
            task_name=self.task_name, base_d=self.base_d, depth=self.depth, rank=self.rank,
            scale=self.scale, factors=self.factors, head_weight=self.head_weight, head_bias=self.head_bias,
        )
        fields.update(changes)
        return LoraAdapter(**fields)


def init_adapter(
    cfg: ViTConfig,
    num_classes: int,
    r: int = DEFAULT_RANK,
    seed: int = 0,
    *,
    task_name: str = "task",
    scale: float = 1.0,
    std: float = 0.02,
) -> LoraAdapter:
    """Fresh adapter: A ~ N(0, std), B = 0, head weight ~ N(0, std), head bias 0.

    With B = 0 the adapter leaves the backbone function unchanged.
    """
    if not 1 <= r < cfg.dim:
        raise ValueError(f"rank must satisfy 1 <= r < d={cfg.dim}, got {r}")
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    rng = np.random.default_rng(seed)
    factors = {}
    for layer in range(cfg.depth):
        for kind in PROJECTIONS:
            factors[factor_name(layer, kind, "A")] = (rng.standard_normal((r, cfg.dim)) * std).astype(DTYPE)
            factors[factor_name(layer, kind, "B")] = np.zeros((cfg.dim, r), dtype=DTYPE)
    head_weight = (rng.standard_normal((num_classes, cfg.dim)) * std).astype(DTYPE)
    head_bias = np.zeros(num_classes, dtype=DTYPE)
    return LoraAdapter(task_name, cfg.dim, cfg.depth, r, scale, factors, head_weight, head_bias)


def apply_lora(x: np.ndarray, W0: np.ndarray, A: np.ndarray, B: np.ndarray, s: float = 1.0) -> np.ndarray:
    """``W0 x + s * B (A x)`` for row vectors ``x`` (shape ``(..., d)``).

    The product ``B @ A`` is never formed; the update costs two rank-r matmuls.
    """
    d_out, d_in = W0.shape
    if A.shape[1] != d_in or B.shape != (d_out, A.shape[0]) or x.shape[-1] != d_in:
        raise ShapeError(
            f"apply_lora shapes: x {tuple(x.shape)}, W0 {tuple(W0.shape)}, "
            f"A {tuple(A.shape)}, B {tuple(B.shape)}"
        )
    base = x @ W0.T
    update = (x @ A.T) @ B.T
    if s != 1.0:
        update = update * x.dtype.type(s)
    return base + update


def merge_adapter(weights: ViTWeights, adapter: LoraAdapter, cfg: ViTConfig | None = None) -> ViTWeights:
    """Fold ``s * B @ A`` into every W_Q/W_V; returns a new weight set."""
    _check_weights(weights, adapter, cfg)
    if adapter.task_name in weights.merged_tasks:
        raise MergeStateError(f"adapter {adapter.task_name!r} is already merged")
    updates = {}
    for layer in range(adapter.depth):
        for kind in PROJECTIONS:
            W = weights.proj(layer, kind)
            updates[proj_name(layer, kind)] = W + adapter.delta(layer, kind)
    return weights.with_updates(updates, weights.merged_tasks + (adapter.task_name,))


def unmerge_adapter(weights: ViTWeights, adapter: LoraAdapter, cfg: ViTConfig | None = None) -> ViTWeights:
    """Inverse of :func:`merge_adapter` (exact up to float32 rounding)."""
    _check_weights(weights, adapter, cfg)
    if adapter.task_name not in weights.merged_tasks:
        raise MergeStateError(f"adapter {adapter.task_name!r} is not merged into these weights")
    updates = {}
    for layer in range(adapter.depth):
        for kind in PROJECTIONS:
            W = weights.proj(layer, kind)
            updates[proj_name(layer, kind)] = W - adapter.delta(layer, kind)
    remaining = list(weights.merged_tasks)
    remaining.remove(adapter.task_name)
    return weights.with_updates(updates, remaining)


def _check_weights(weights: ViTWeights, adapter: LoraAdapter, cfg: ViTConfig | None) -> None:
    if cfg is not None:
        adapter.check_compatible(cfg)
    try:
        W = weights.proj(adapter.depth - 1, "q")
    except KeyError:
        raise CompatibilityError(f"backbone has fewer than {adapter.depth} blocks") from None
    if W.shape != (adapter.base_d, adapter.base_d) or proj_name(adapter.depth, "q") in weights.tensors:
        raise CompatibilityError(
            f"adapter {adapter.task_name!r} (d={adapter.base_d}, L={adapter.depth}) "
            f"does not fit backbone with W_Q shape {W.shape}"
        )


@dataclass(frozen=True)
class TrainableCount:
    lora: int
    head: int

    @property
    def total(self) -> int:
        return self.lora + self.head

    def as_dict(self) -> dict[str, int]:
        return {"lora": self.lora, "head": self.head, "total": self.total}


def count_trainable(cfg: ViTConfig, r: int = DEFAULT_RANK, num_classes: int = 2) -> TrainableCount:
    """Trainable parameters: ``4 * L * r * d`` LoRA entries plus the head."""
    lora = cfg.depth * len(PROJECTIONS) * (cfg.dim * r + r * cfg.dim)
    head = num_classes * cfg.dim + num_classes
    return TrainableCount(lora, head)


def trainable_fraction(cfg: ViTConfig, r: int = DEFAULT_RANK, num_classes: int = 2) -> float:
    """Trainable / (frozen backbone + trainable)."""
    t = count_trainable(cfg, r, num_classes).total
    return t / (count_backbone_params(cfg) + t)


# -- serialization ---------------------------------------------------------


@dataclass(frozen=True)
class AdapterFileHeader:
    version: int
    flags: int
    task_name: str
    base_d: int
    depth: int
    rank: int
    num_classes: int
    scale: float
    header_size: int
    crc32: int

    @property
    def payload_nbytes(self) -> int:
        n = self.depth * len(PROJECTIONS) * 2 * self.rank * self.base_d
        n += self.num_classes * self.base_d + self.num_classes
        return 4 * n

    @property
    def file_size(self) -> int:
        return self.header_size + self.payload_nbytes + 4


def _header_size(task_name: str) -> int:
    return 4 + 2 + 2 + 2 + len(task_name.encode("utf-8")) + 4 * 4 + 4


def adapter_file_size(cfg: ViTConfig, r: int = DEFAULT_RANK, num_classes: int = 2, task_name: str = "task") -> int:
    """Exact serialized size of an adapter without building one."""
    c = count_trainable(cfg, r, num_classes)
    return _header_size(task_name) + 4 * c.total + 4


def encode_adapter(adapter: LoraAdapter) -> bytes:
    w = _binio.Writer()
    w.raw(ADAPTER_MAGIC)
    w.pack("HH", ADAPTER_VERSION, 0)
    w.string(adapter.task_name)
    w.pack("4I", adapter.base_d, adapter.depth, adapter.rank, adapter.num_classes)
    w.pack("f", adapter.scale)
    for layer in range(adapter.depth):
        for kind in PROJECTIONS:
            w.f32(adapter.A(layer, kind))
            w.f32(adapter.B(layer, kind))
    w.f32(adapter.head_weight)
    w.f32(adapter.head_bias)
    return w.finish()


def read_adapter_header(buf: bytes) -> AdapterFileHeader:
    version = _binio.check_magic(buf, ADAPTER_MAGIC, {ADAPTER_VERSION})
    r = _binio.Reader(buf, 6)
    (flags,) = r.unpack("H")
    name = r.string()
    d, depth, rank, num_classes = r.unpack("4I")
    (scale,) = r.unpack("f")
    crc = int.from_bytes(buf[-4:], "little") if len(buf) >= 4 else 0
    return AdapterFileHeader(version, flags, name, d, depth, rank, num_classes, scale, r.pos, crc)


def decode_adapter(buf: bytes) -> LoraAdapter:
    _binio.check_magic(buf, ADAPTER_MAGIC, {ADAPTER_VERSION})
    _binio.verify_crc(buf)
    hdr = read_adapter_header(buf)
    if len(buf) != hdr.file_size:
        raise FormatError(f"adapter file is {len(buf)} bytes, header implies {hdr.file_size}")
    r = _binio.Reader(buf, hdr.header_size)
    factors = {}
    for layer in range(hdr.depth):
        for kind in PROJECTIONS:
            factors[factor_name(layer, kind, "A")] = r.f32((hdr.rank, hdr.base_d))
            factors[factor_name(layer, kind, "B")] = r.f32((hdr.base_d, hdr.rank))
    hw = r.f32((hdr.num_classes, hdr.base_d))
    hb = r.f32((hdr.num_classes,))
    return LoraAdapter(hdr.task_name, hdr.base_d, hdr.depth, hdr.rank, hdr.scale, factors, hw, hb)


def save_adapter(adapter: LoraAdapter, path) -> int:
    """Write the adapter file; returns its size in bytes."""
    data = encode_adapter(adapter)
    _binio.write_atomic(path, data)
    return len(data)


def load_adapter(path) -> LoraAdapter:
    """Read and verify an adapter file. Dimension checks against a backbone happen at attach time."""
    return decode_adapter(Path(path).read_bytes())
