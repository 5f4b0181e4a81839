"""Command-line entry point (``melo``)."""

from __future__ import annotations

import argparse
import logging
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .backbone import (
    PRESETS, count_backbone_params, decode_backbone, init_backbone, load_backbone, preset, save_backbone,
)
from .errors import MeloError
from .images import load_image
from .lora import count_trainable, load_adapter, save_adapter, trainable_fraction
from .metrics import evaluate
from .registry import AdapterRegistry
from .trainer import TrainConfig, evaluate as eval_task, make_synthetic_task, train
from .vit import forward

log = logging.getLogger("melo")


def _config_from_args(args):
    overrides = {}
    for name in ("image_size", "patch_size", "depth"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return preset(args.preset, **overrides)


def _parse_spec(spec: str) -> dict:
    out = {}
    for part in filter(None, (p.strip() for p in spec.split(","))):
        if "=" not in part:
            raise ValueError(f"task spec entry {part!r} is not key=value")
        key, value = part.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def cmd_init_backbone(args) -> int:
    cfg = _config_from_args(args)
    weights = init_backbone(cfg, args.seed)
    n = save_backbone(cfg, weights, args.out)
    print(f"wrote {args.out}: {weights.num_params} parameters, {n} bytes")
    return 0


def cmd_count_params(args) -> int:
    cfg = preset(args.preset)
    c = count_trainable(cfg, args.rank, args.classes)
    print(f"lora={c.lora}")
    print(f"head={c.head}")
    print(f"total={c.total}")
    print(f"backbone={count_backbone_params(cfg)}")
    print(f"trainable_fraction={trainable_fraction(cfg, args.rank, args.classes):.6%}")
    return 0


def cmd_train(args) -> int:
    cfg, weights = load_backbone(args.backbone)
    spec = _parse_spec(args.task_spec)
    known = {"classes", "samples", "seed", "noise", "margin", "multilabel", "amplitude"}
    unknown = set(spec) - known
    if unknown:
        raise ValueError(f"unknown task spec keys {sorted(unknown)}; known: {sorted(known)}")
    task = make_synthetic_task(
        cfg,
        num_classes=int(spec.get("classes", 2)),
        num_samples=int(spec.get("samples", 200)),
        seed=int(spec.get("seed", 0)),
        noise=float(spec.get("noise", 1.0)),
        amplitude=float(spec.get("amplitude", 1.0)),
        margin=float(spec.get("margin", 0.0)),
        multi_label=spec.get("multilabel", "0") in ("1", "true", "yes"),
    )
    tcfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                       seed=args.seed, rank=args.rank, task_name=args.task_name)
    adapter, history = train(task, tcfg, cfg, weights)
    for key, value in history.trainable.items():
        print(f"trainable.{key}={value}")
    print(f"trainable_fraction={trainable_fraction(cfg, args.rank, task.num_classes):.6%}")
    print(f"best_epoch={history.best_epoch}")
    print(f"{history.metric}={history.best_metric}")
    test = eval_task(task.x_test, task.y_test, cfg, weights, adapter, multi_label=task.multi_label)
    print(f"test_{'mean_auc' if task.multi_label else 'accuracy'}={test}")
    size = save_adapter(adapter, args.out)
    print(f"wrote {args.out}: {size} bytes")
    if args.history:
        history.write_jsonl(args.history)
    return 0


def cmd_infer(args) -> int:
    cfg, weights, own_head = decode_backbone(Path(args.backbone).read_bytes())
    image = load_image(args.input, cfg.channels)
    adapter = load_adapter(args.adapter) if args.adapter else None
    head = load_adapter(args.head).head if args.head else None
    if adapter is None and head is None:
        head = own_head
    out = forward(image, cfg, weights, adapter, head)
    kind = "logits" if (adapter is not None or head is not None) else "features"
    print(f"{kind}=" + ",".join(repr(float(v)) for v in out))
    if kind == "logits":
        print(f"predicted={int(np.argmax(out))}")
    return 0


def _read_workload(path):
    items = []
    base = Path(path).parent
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected '<task> <image-path>'")
        task, img = parts
        img_path = Path(img) if Path(img).is_absolute() else base / img
        items.append((task, img_path))
    return items


def cmd_registry(args) -> int:
    registry = AdapterRegistry.from_file(args.backbone)
    for p in filter(None, args.adapters.split(",")):
        registry.register(p)
    workload = [(t, load_image(p, registry.config.channels)) for t, p in _read_workload(args.workload)]
    if args.concurrent > 1:
        with ThreadPoolExecutor(args.concurrent) as pool:
            outputs = list(pool.map(lambda item: registry.infer_as(*item), workload))
    else:
        outputs = []
        for task, image in workload:
            if task != registry.active:
                registry.switch(task)
            outputs.append(registry.infer(image))
    stats = registry.switch_stats()
    mem = registry.memory_report()
    lines = []
    for i, ((task, _), out) in enumerate(zip(workload, outputs)):
        lines.append(f"item.{i}.task={task}")
        lines.append(f"item.{i}.predicted={int(np.argmax(out))}")
        lines.append(f"item.{i}.logits=" + ",".join(repr(float(v)) for v in out))
    lines += [
        f"switches={registry.switches}",
        f"switch.min_ns={stats.min_ns}",
        f"switch.median_ns={stats.median_ns}",
        f"switch.mean_ns={stats.mean_ns}",
        f"memory.backbone_bytes={mem.backbone_bytes}",
        f"memory.adapter_bytes_total={mem.adapter_bytes_total}",
    ]
    lines += [f"memory.adapter.{k}={v}" for k, v in mem.per_adapter.items()]
    lines += [f"inferences.{k}={v}" for k, v in sorted(registry.inference_counts.items())]
    text = "\n".join(lines) + "\n"
    if args.report:
        Path(args.report).write_text(text)
    print(text, end="")
    return 0


def cmd_bench(args) -> int:
    strategies = bench_mod.STRATEGIES if args.strategies == "all" else tuple(args.strategies.split(","))
    orderings = tuple(args.orderings.split(","))
    for s in strategies:
        if s not in bench_mod.STRATEGIES:
            raise ValueError(f"unknown strategy {s!r}; choose from {bench_mod.STRATEGIES}")
    cfg = _config_from_args(args)
    with tempfile.TemporaryDirectory() as tmp:
        workdir = Path(args.workdir) if args.workdir else Path(tmp)
        arts = bench_mod.prepare_artifacts(workdir, cfg, seed=args.seed, rank=args.rank)
        reports = bench_mod.run_suite(arts, strategies, orderings, args.per_task, args.seed,
                                      args.load_cost_ns_per_byte)
    table = bench_mod.format_table(reports)
    print(table, end="")
    if args.report:
        stamp = bench_mod.environment_stamp(args.seed)
        Path(args.report).write_text(bench_mod.reports_to_kv(reports, stamp))
        Path(str(args.report) + ".txt").write_text(table)
    return 0


def _read_matrix(path, dtype=float):
    rows = [line.replace(",", " ").split() for line in Path(path).read_text().splitlines() if line.strip()]
    return np.array(rows, dtype=dtype)


def cmd_eval(args) -> int:
    scores = _read_matrix(args.pred)
    labels = _read_matrix(args.labels, dtype=np.int64)
    if labels.ndim == 2 and labels.shape[1] == 1:
        labels = labels[:, 0]
    if scores.ndim == 2 and scores.shape[1] == 1:
        scores = scores[:, 0]
    report = evaluate(labels, scores, args.mode)
    print(report.to_kv(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="melo", description="Low-rank adapter runtime for ViT backbones")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_arch(p, default="vit-base"):
        p.add_argument("--preset", default=default, choices=sorted(PRESETS))
        p.add_argument("--image-size", type=int)
        p.add_argument("--patch-size", type=int)
        p.add_argument("--depth", type=int)

    p = sub.add_parser("init-backbone", help="write a seeded random backbone file")
    add_arch(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_backbone)

    p = sub.add_parser("train", help="train an adapter on a synthetic task")
    p.add_argument("--backbone", required=True)
    p.add_argument("--task-spec", default="classes=2", help="e.g. classes=2,samples=200,seed=0,noise=1.0,margin=2")
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--task-name", default="task")
    p.add_argument("--history", help="write per-epoch JSON lines here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="classify one image")
    p.add_argument("--backbone", required=True)
    p.add_argument("--adapter")
    p.add_argument("--head", help="take only the classifier head from this adapter file")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("registry", help="replay a workload through the multi-task registry")
    p.add_argument("--backbone", required=True)
    p.add_argument("--adapters", required=True, help="comma-separated adapter files")
    p.add_argument("--workload", required=True, help="text file of '<task> <image>' lines")
    p.add_argument("--report")
    p.add_argument("--concurrent", type=int, default=1, help="threads for stateless per-call routing")
    p.set_defaults(func=cmd_registry)

    p = sub.add_parser("bench", help="deployment simulation: reload vs preload vs shared backbone")
    add_arch(p, default="vit-tiny")
    p.set_defaults(image_size=32)
    p.add_argument("--strategies", default="all")
    p.add_argument("--orderings", default="in-order,random")
    p.add_argument("--per-task", type=int, default=25)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--load-cost-ns-per-byte", type=float)
    p.add_argument("--workdir")
    p.add_argument("--report")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("count-params", help="trainable parameter ledger for a preset")
    p.add_argument("--preset", default="vit-base", choices=sorted(PRESETS))
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--classes", type=int, default=2)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("eval", help="metrics from score and label files")
    p.add_argument("--pred", required=True, help="one score vector per line")
    p.add_argument("--labels", required=True, help="one class index (or 0/1 vector) per line")
    p.add_argument("--mode", default="auto", choices=["auto", "binary", "macro", "multilabel"])
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (MeloError, ValueError, KeyError, OSError) as exc:
        print(f"melo {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
