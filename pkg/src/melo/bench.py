"""Deployment simulator comparing three ways of serving several tasks.

Strategies:
    reload-per-task  keep one fine-tuned model resident; load the next task's
                     full model from disk whenever the task changes.
    preload-all      load every task's fine-tuned model up front; no switching.
    melo-shared      load one backbone plus every adapter up front; switching
                     moves the registry's active-task handle.

Timing semantics (all from ``time.perf_counter_ns``):
    IT   time to reach the first inference (loading whatever the strategy
         keeps resident at start).
    ST   sum of switch latencies; a switch happens when the task of an image
         differs from the previous image's task (the first image is not a switch).
    A-ST ST / number of switches.
    TT   wall time of the whole workload loop, switches included.

Every strategy's logits are compared bit-for-bit against a freshly loaded
standalone model for the same task before its report is returned.
"""

from __future__ import annotations

import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .backbone import ViTConfig, init_backbone, load_backbone, load_model, save_backbone
from .errors import BenchValidityError, UnknownTaskError
from .lora import init_adapter, load_adapter, merge_adapter, save_adapter
from .registry import AdapterRegistry
from .vit import forward

STRATEGIES = ("reload-per-task", "preload-all", "melo-shared")
ORDERINGS = ("in-order", "random")

# Default workload: four diagnosis tasks with their class counts.
DEFAULT_TASKS = {"tuberculosis": 2, "bloodcell": 4, "breast": 2, "thoracic": 14}


@dataclass
class BenchArtifacts:
    config: ViTConfig
    backbone_path: Path
    adapter_paths: dict[str, Path]
    model_paths: dict[str, Path]
    seed: int = 0

    @property
    def tasks(self) -> list[str]:
        return list(self.adapter_paths)


def prepare_artifacts(
    workdir,
    cfg: ViTConfig,
    tasks: Optional[dict[str, int]] = None,
    seed: int = 0,
    rank: int = 4,
) -> BenchArtifacts:
    """Write a backbone, one adapter per task and the matching fine-tuned models.

    Adapters get non-zero random ``B`` so they behave like trained ones; each
    fine-tuned model is the backbone with that adapter merged in plus its head.
    """
    tasks = dict(DEFAULT_TASKS if tasks is None else tasks)
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed + 1)
    weights = init_backbone(cfg, seed)
    backbone_path = workdir / "backbone.melb"
    save_backbone(cfg, weights, backbone_path)
    adapter_paths, model_paths = {}, {}
    for i, (name, num_classes) in enumerate(tasks.items()):
        adapter = init_adapter(cfg, num_classes, rank, seed=seed + 100 + i, task_name=name)
        factors = dict(adapter.factors)
        for key, arr in factors.items():
            if key.endswith(".B"):
                factors[key] = (rng.standard_normal(arr.shape) * 0.02).astype(np.float32)
        adapter = adapter.replace(factors=factors)
        adapter_paths[name] = workdir / f"{name}.melo"
        save_adapter(adapter, adapter_paths[name])
        model_paths[name] = workdir / f"{name}.finetuned.melb"
        save_backbone(cfg, merge_adapter(weights, adapter, cfg), model_paths[name], head=adapter.head)
    return BenchArtifacts(cfg, backbone_path, adapter_paths, model_paths, seed)


def make_workload(
    tasks: Sequence[str], per_task: int, ordering: str, cfg: ViTConfig, seed: int = 0
) -> list[tuple[str, np.ndarray]]:
    """``per_task`` images for each task, grouped by task or shuffled."""
    if ordering not in ORDERINGS:
        raise ValueError(f"ordering must be one of {ORDERINGS}, got {ordering!r}")
    rng = np.random.default_rng(seed)
    shape = (cfg.channels, cfg.image_size, cfg.image_size)
    items = [(t, rng.standard_normal(shape).astype(np.float32)) for t in tasks for _ in range(per_task)]
    if ordering == "random":
        order = np.random.default_rng(seed + 1).permutation(len(items))
        items = [items[i] for i in order]
    return items


def count_switches(workload) -> int:
    return sum(1 for prev, cur in zip(workload, workload[1:]) if prev[0] != cur[0])


@dataclass
class BenchScenario:
    strategy: str
    workload: list
    artifacts: BenchArtifacts
    ordering: str = "in-order"
    load_cost_ns_per_byte: Optional[float] = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not self.workload:
            raise ValueError("workload is empty")
        unknown = {t for t, _ in self.workload} - set(self.artifacts.adapter_paths)
        if unknown:
            raise UnknownTaskError(f"workload references unknown tasks {sorted(unknown)}")


@dataclass
class BenchReport:
    strategy: str
    ordering: str
    images: int
    init_ns: int
    switch_ns: int
    switches: int
    total_ns: int
    infer_ns: int
    peak_model_bytes: int
    verified: bool
    switch_latencies_ns: list[int] = field(default_factory=list, repr=False)

    @property
    def avg_switch_ns(self) -> Optional[float]:
        return self.switch_ns / self.switches if self.switches else None

    def to_kv(self, prefix: str = "") -> str:
        p = prefix or f"{self.strategy}.{self.ordering}."
        rows = {
            "images": self.images,
            "IT_ns": self.init_ns,
            "ST_ns": self.switch_ns,
            "switches": self.switches,
            "A-ST_ns": "nan" if self.avg_switch_ns is None else repr(self.avg_switch_ns),
            "TT_ns": self.total_ns,
            "infer_ns": self.infer_ns,
            "peak_model_bytes": self.peak_model_bytes,
            "verified": str(self.verified).lower(),
        }
        return "".join(f"{p}{k}={v}\n" for k, v in rows.items())


def _simulated_load(nbytes: int, ns_per_byte: Optional[float]) -> None:
    if not ns_per_byte:
        return
    deadline = time.perf_counter_ns() + int(nbytes * ns_per_byte)
    remaining = deadline - time.perf_counter_ns()
    if remaining > 2_000_000:
        time.sleep((remaining - 1_000_000) / 1e9)
    while time.perf_counter_ns() < deadline:
        pass


def _model_nbytes(weights, head) -> int:
    return weights.nbytes + int(head[0].nbytes + head[1].nbytes)


def _load_finetuned(path, cost):
    cfg, weights, head = load_model(path)
    _simulated_load(Path(path).stat().st_size, cost)
    return weights, head


def _run_reload(scenario, cfg):
    arts, cost, workload = scenario.artifacts, scenario.load_cost_ns_per_byte, scenario.workload
    outputs, latencies = [], []
    t0 = time.perf_counter_ns()
    current = workload[0][0]
    weights, head = _load_finetuned(arts.model_paths[current], cost)
    resident = peak = _model_nbytes(weights, head)
    init_ns = time.perf_counter_ns() - t0
    infer_ns = 0
    t_loop = time.perf_counter_ns()
    for task, image in workload:
        if task != current:
            ts = time.perf_counter_ns()
            resident -= _model_nbytes(weights, head)
            weights = head = None
            weights, head = _load_finetuned(arts.model_paths[task], cost)
            current = task
            latencies.append(time.perf_counter_ns() - ts)
            resident += _model_nbytes(weights, head)
            peak = max(peak, resident)
        ti = time.perf_counter_ns()
        outputs.append(forward(image, cfg, weights, head=head))
        infer_ns += time.perf_counter_ns() - ti
    total_ns = time.perf_counter_ns() - t_loop
    return outputs, init_ns, latencies, total_ns, infer_ns, peak


def _run_preload(scenario, cfg):
    arts, cost, workload = scenario.artifacts, scenario.load_cost_ns_per_byte, scenario.workload
    outputs = []
    t0 = time.perf_counter_ns()
    models = {t: _load_finetuned(arts.model_paths[t], cost) for t in arts.tasks}
    init_ns = time.perf_counter_ns() - t0
    peak = sum(_model_nbytes(w, h) for w, h in models.values())
    infer_ns = 0
    t_loop = time.perf_counter_ns()
    for task, image in workload:
        weights, head = models[task]
        ti = time.perf_counter_ns()
        outputs.append(forward(image, cfg, weights, head=head))
        infer_ns += time.perf_counter_ns() - ti
    total_ns = time.perf_counter_ns() - t_loop
    return outputs, init_ns, [], total_ns, infer_ns, peak


def _run_shared(scenario, cfg):
    arts, cost, workload = scenario.artifacts, scenario.load_cost_ns_per_byte, scenario.workload
    outputs, latencies = [], []
    t0 = time.perf_counter_ns()
    registry = AdapterRegistry.from_file(arts.backbone_path)
    _simulated_load(Path(arts.backbone_path).stat().st_size, cost)
    for task in arts.tasks:
        registry.register(arts.adapter_paths[task])
        _simulated_load(Path(arts.adapter_paths[task]).stat().st_size, cost)
    registry.switch(workload[0][0])
    init_ns = time.perf_counter_ns() - t0
    peak = registry.weights.nbytes + sum(a.nbytes for a in registry.catalog.values())
    infer_ns = 0
    t_loop = time.perf_counter_ns()
    for task, image in workload:
        if task != registry.active:
            latencies.append(registry.switch(task).latency_ns)
        ti = time.perf_counter_ns()
        outputs.append(registry.infer(image))
        infer_ns += time.perf_counter_ns() - ti
    total_ns = time.perf_counter_ns() - t_loop
    return outputs, init_ns, latencies, total_ns, infer_ns, peak


_RUNNERS = {"reload-per-task": _run_reload, "preload-all": _run_preload, "melo-shared": _run_shared}


def reference_outputs(strategy: str, workload, artifacts: BenchArtifacts) -> list[np.ndarray]:
    """Logits from standalone single-task models loaded fresh for each task."""
    refs = {}
    outputs = []
    for task, image in workload:
        if task not in refs:
            if strategy == "melo-shared":
                cfg, weights = load_backbone(artifacts.backbone_path)
                adapter = load_adapter(artifacts.adapter_paths[task])
                refs[task] = (cfg, weights, adapter, None)
            else:
                cfg, weights, head = load_model(artifacts.model_paths[task])
                refs[task] = (cfg, weights, None, head)
        cfg, weights, adapter, head = refs[task]
        outputs.append(forward(image, cfg, weights, adapter, head))
    return outputs


def run_bench(scenario: BenchScenario) -> BenchReport:
    """Run one strategy over one workload and verify its outputs.

    Raises:
        BenchValidityError: any logit differs from the standalone reference.
    """
    arts = scenario.artifacts
    for path in [arts.backbone_path, *arts.adapter_paths.values(), *arts.model_paths.values()]:
        if not Path(path).exists():
            raise FileNotFoundError(f"missing bench artifact {path}")
    cfg = arts.config
    outputs, init_ns, latencies, total_ns, infer_ns, peak = _RUNNERS[scenario.strategy](scenario, cfg)
    refs = reference_outputs(scenario.strategy, scenario.workload, arts)
    for i, (got, want) in enumerate(zip(outputs, refs)):
        if got.shape != want.shape or not np.array_equal(got, want):
            raise BenchValidityError(
                f"{scenario.strategy}/{scenario.ordering}: output {i} "
                f"(task {scenario.workload[i][0]!r}) differs from the standalone model"
            )
    return BenchReport(
        strategy=scenario.strategy,
        ordering=scenario.ordering,
        images=len(scenario.workload),
        init_ns=init_ns,
        switch_ns=sum(latencies),
        switches=len(latencies),
        total_ns=total_ns,
        infer_ns=infer_ns,
        peak_model_bytes=peak,
        verified=True,
        switch_latencies_ns=latencies,
    )


def run_suite(
    artifacts: BenchArtifacts,
    strategies: Sequence[str] = STRATEGIES,
    orderings: Sequence[str] = ORDERINGS,
    per_task: int = 25,
    seed: int = 0,
    load_cost_ns_per_byte: Optional[float] = None,
) -> list[BenchReport]:
    """Every (strategy, ordering) pair, run serially."""
    reports = []
    for ordering in orderings:
        workload = make_workload(artifacts.tasks, per_task, ordering, artifacts.config, seed)
        for strategy in strategies:
            scenario = BenchScenario(strategy, workload, artifacts, ordering, load_cost_ns_per_byte)
            reports.append(run_bench(scenario))
    return reports


def environment_stamp(seed: int) -> dict[str, str]:
    return {
        "seed": str(seed),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "platform": platform.platform(),
        "machine": platform.machine(),
    }


def _fmt_seconds(ns) -> str:
    return "-" if ns is None else f"{ns / 1e9:.6f}s"


def _fmt_bytes(n: int) -> str:
    for unit, div in (("GB", 1 << 30), ("MB", 1 << 20), ("KB", 1 << 10)):
        if n >= div:
            return f"{n / div:.3f}{unit}"
    return f"{n}B"


def format_table(reports: Sequence[BenchReport]) -> str:
    """Aligned text table: one row per strategy, IT/ST/A-ST/TT per ordering, then memory."""
    orderings = [o for o in ORDERINGS if any(r.ordering == o for r in reports)]
    strategies = [s for s in STRATEGIES if any(r.strategy == s for r in reports)]
    by_key = {(r.strategy, r.ordering): r for r in reports}
    header = ["Method"]
    for o in orderings:
        header += [f"{o} IT", f"{o} ST", f"{o} A-ST", f"{o} TT"]
    header.append("Peak model bytes")
    rows = [header]
    for s in strategies:
        row = [s]
        peak = 0
        for o in orderings:
            r = by_key.get((s, o))
            if r is None:
                row += ["", "", "", ""]
                continue
            no_switch = s == "preload-all"
            row += [
                _fmt_seconds(r.init_ns),
                "-" if no_switch else _fmt_seconds(r.switch_ns),
                "-" if no_switch else _fmt_seconds(r.avg_switch_ns),
                _fmt_seconds(r.total_ns),
            ]
            peak = max(peak, r.peak_model_bytes)
        row.append(_fmt_bytes(peak))
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.rjust(w) if j else cell.ljust(w) for j, (cell, w) in enumerate(zip(r, widths))) for r in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def reports_to_kv(reports: Sequence[BenchReport], stamp: Optional[dict] = None) -> str:
    out = "".join(f"env.{k}={v}\n" for k, v in (stamp or {}).items())
    return out + "".join(r.to_kv() for r in reports)
