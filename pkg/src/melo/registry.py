"""Multi-task runtime: one frozen backbone, many adapters, O(1) switching."""

from __future__ import annotations

import statistics
import threading
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Optional

import numpy as np

from .backbone import ViTConfig, ViTWeights, backbone_file_size, load_backbone
from .errors import DuplicateTaskError, NoActiveTaskError, UnknownTaskError
from .lora import LoraAdapter, decode_adapter, encode_adapter
from .vit import forward


@dataclass(frozen=True)
class SwitchReceipt:
    task: str
    previous: Optional[str]
    latency_ns: int

    @property
    def changed(self) -> bool:
        return self.task != self.previous


@dataclass(frozen=True)
class LatencyStats:
    count: int
    min_ns: int
    median_ns: float
    mean_ns: float
    total_ns: int

    @classmethod
    def from_samples(cls, samples) -> "LatencyStats":
        samples = list(samples)
        if not samples:
            return cls(0, 0, 0.0, 0.0, 0)
        return cls(len(samples), min(samples), statistics.median(samples),
                   statistics.fmean(samples), sum(samples))


@dataclass(frozen=True)
class MemoryReport:
    backbone_bytes: int
    adapter_bytes_total: int
    per_adapter: Mapping[str, int]

    @property
    def total_bytes(self) -> int:
        return self.backbone_bytes + self.adapter_bytes_total


class AdapterRegistry:
    """Shared backbone plus a catalog of task adapters.

    The catalog is replaced wholesale on every registration (copy-on-write),
    so readers never see a half-registered adapter. ``switch`` only moves the
    active-task handle; backbone arrays are never copied or written.
    """

    def __init__(self, config: ViTConfig, weights: ViTWeights):
        weights.validate(config)
        self.config = config
        self.weights = weights
        self._catalog: Mapping[str, LoraAdapter] = MappingProxyType({})
        self._sizes: Mapping[str, int] = MappingProxyType({})
        self._active: Optional[str] = None
        self._write_lock = threading.Lock()
        self._count_lock = threading.Lock()
        self.inference_counts: Counter = Counter()
        self.switches = 0
        self.receipts: list[SwitchReceipt] = []

    @classmethod
    def from_file(cls, path) -> "AdapterRegistry":
        cfg, weights = load_backbone(path)
        return cls(cfg, weights)

    # -- catalog ------------------------------------------------------------

    @property
    def catalog(self) -> Mapping[str, LoraAdapter]:
        return self._catalog

    @property
    def tasks(self) -> list[str]:
        return list(self._catalog)

    def register(self, path) -> str:
        """Load an adapter file and add it under its task name."""
        data = Path(path).read_bytes()
        adapter = decode_adapter(data)
        return self.add(adapter, nbytes=len(data))

    def add(self, adapter: LoraAdapter, nbytes: Optional[int] = None) -> str:
        """Catalog an in-memory adapter; ``nbytes`` defaults to its serialized size."""
        adapter.check_compatible(self.config)
        if nbytes is None:
            nbytes = len(encode_adapter(adapter))
        with self._write_lock:
            if adapter.task_name in self._catalog:
                raise DuplicateTaskError(f"task {adapter.task_name!r} is already registered")
            catalog = dict(self._catalog)
            catalog[adapter.task_name] = adapter
            sizes = dict(self._sizes)
            sizes[adapter.task_name] = nbytes
            self._sizes = MappingProxyType(sizes)
            self._catalog = MappingProxyType(catalog)
        return adapter.task_name

    # -- switching and inference ---------------------------------------------

    @property
    def active(self) -> Optional[str]:
        return self._active

    def switch(self, task_name: str) -> SwitchReceipt:
        t0 = time.perf_counter_ns()
        if task_name not in self._catalog:
            raise UnknownTaskError(f"task {task_name!r} is not registered")
        previous = self._active
        self._active = task_name
        latency = time.perf_counter_ns() - t0
        receipt = SwitchReceipt(task_name, previous, latency)
        with self._count_lock:
            if previous != task_name:
                self.switches += 1
            self.receipts.append(receipt)
        return receipt

    def switch_stats(self) -> LatencyStats:
        return LatencyStats.from_samples(r.latency_ns for r in self.receipts)

    def infer(self, image: np.ndarray) -> np.ndarray:
        task = self._active
        if task is None:
            raise NoActiveTaskError("no active task; call switch() first")
        return self.infer_as(task, image)

    def infer_as(self, task_name: str, image: np.ndarray) -> np.ndarray:
        """Run one image through the backbone with ``task_name``'s adapter, without switching."""
        try:
            adapter = self._catalog[task_name]
        except KeyError:
            raise UnknownTaskError(f"task {task_name!r} is not registered") from None
        logits = forward(image, self.config, self.weights, adapter)
        with self._count_lock:
            self.inference_counts[task_name] += 1
        return logits

    # -- accounting -----------------------------------------------------------

    def memory_report(self) -> MemoryReport:
        """Serialized byte sizes of the single backbone and every cataloged adapter."""
        sizes = dict(self._sizes)
        return MemoryReport(backbone_file_size(self.config), sum(sizes.values()), sizes)
