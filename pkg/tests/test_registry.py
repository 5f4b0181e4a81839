import threading

import numpy as np
import pytest

from melo.backbone import backbone_file_size, count_backbone_params, init_backbone, preset, save_backbone
from melo.errors import CompatibilityError, DuplicateTaskError, NoActiveTaskError, UnknownTaskError
from melo.lora import adapter_file_size, init_adapter, save_adapter
from melo.registry import AdapterRegistry, LatencyStats
from melo.vit import forward

from conftest import random_adapter

TASKS = {"tuberculosis": 2, "bloodcell": 4, "breast": 3, "thoracic": 14}


@pytest.fixture
def registry(toy_cfg, toy_weights):
    reg = AdapterRegistry(toy_cfg, toy_weights)
    for i, (name, c) in enumerate(TASKS.items()):
        reg.add(random_adapter(toy_cfg, c, 4, seed=i, name=name))
    return reg


class TestRegistration:
    def test_register_files(self, toy_cfg, toy_weights, tmp_path):
        reg = AdapterRegistry(toy_cfg, toy_weights)
        for i, (name, c) in enumerate(TASKS.items()):
            p = tmp_path / f"{name}.melo"
            save_adapter(init_adapter(toy_cfg, c, task_name=name, seed=i), p)
            assert reg.register(p) == name
        assert reg.tasks == list(TASKS)
        assert reg.memory_report().per_adapter["thoracic"] == adapter_file_size(toy_cfg, 4, 14, "thoracic")

    def test_from_file(self, toy_cfg, toy_weights, tmp_path):
        p = tmp_path / "b.melb"
        save_backbone(toy_cfg, toy_weights, p)
        reg = AdapterRegistry.from_file(p)
        assert reg.config == toy_cfg
        assert reg.weights.checksum() == toy_weights.checksum()

    def test_wrong_dim_rejected_and_catalog_unchanged(self, registry, toy_cfg):
        before = dict(registry.catalog)
        bad = init_adapter(toy_cfg.replace(dim=32, mlp_dim=64), 2, task_name="bad")
        with pytest.raises(CompatibilityError):
            registry.add(bad)
        assert dict(registry.catalog) == before

    def test_wrong_depth_rejected(self, registry, toy_cfg):
        with pytest.raises(CompatibilityError):
            registry.add(init_adapter(toy_cfg.replace(depth=3), 2, task_name="deep"))

    def test_duplicate_name(self, registry, toy_cfg):
        with pytest.raises(DuplicateTaskError):
            registry.add(init_adapter(toy_cfg, 2, task_name="breast"))
        assert registry.catalog["breast"].num_classes == 3

    def test_catalog_is_read_only(self, registry):
        with pytest.raises(TypeError):
            registry.catalog["x"] = None


class TestSwitching:
    def test_no_active_task(self, toy_cfg, toy_weights):
        reg = AdapterRegistry(toy_cfg, toy_weights)
        with pytest.raises(NoActiveTaskError):
            reg.infer(np.zeros((3, 16, 16), np.float32))

    def test_unknown_task(self, registry):
        with pytest.raises(UnknownTaskError):
            registry.switch("dermatology")
        assert registry.active is None
        with pytest.raises(KeyError):
            registry.infer_as("dermatology", np.zeros((3, 16, 16), np.float32))

    def test_switch_to_active_is_noop(self, registry):
        registry.switch("breast")
        receipt = registry.switch("breast")
        assert not receipt.changed
        assert registry.switches == 1

    def test_backbone_never_copied(self, registry):
        backbone = registry.weights
        arrays = {k: id(v) for k, v in backbone.tensors.items()}
        for name in TASKS:
            registry.switch(name)
            registry.infer(np.zeros((3, 16, 16), np.float32))
        assert registry.weights is backbone
        assert {k: id(v) for k, v in registry.weights.tensors.items()} == arrays

    def test_round_robin_routes_correctly(self, registry, rng):
        names = list(TASKS)
        for step in range(25 * len(names)):
            name = names[step % len(names)]
            registry.switch(name)
            out = registry.infer(rng.standard_normal((3, 16, 16)).astype(np.float32))
            assert out.shape == (TASKS[name],)
        assert registry.switches == 100
        assert registry.inference_counts == {n: 25 for n in names}

    def test_infer_matches_standalone(self, registry, toy_cfg, toy_weights, rng):
        for name in TASKS:
            registry.switch(name)
            img = rng.standard_normal((3, 16, 16)).astype(np.float32)
            want = forward(img, toy_cfg, toy_weights, registry.catalog[name])
            assert registry.infer(img).tobytes() == want.tobytes()

    def test_output_independent_of_history(self, registry, rng):
        img = rng.standard_normal((3, 16, 16)).astype(np.float32)
        registry.switch("breast")
        first = registry.infer(img)
        for name in TASKS:
            registry.switch(name)
            registry.infer(img)
        registry.switch("breast")
        assert registry.infer(img).tobytes() == first.tobytes()

    def test_permuting_workload_permutes_outputs(self, registry, rng):
        items = [(n, rng.standard_normal((3, 16, 16)).astype(np.float32)) for n in TASKS for _ in range(3)]
        perm = rng.permutation(len(items))
        base = [registry.infer_as(t, x) for t, x in items]
        permuted = [registry.infer_as(*items[i]) for i in perm]
        for j, i in enumerate(perm):
            assert permuted[j].tobytes() == base[i].tobytes()

    def test_switch_latency_independent_of_model_size(self, toy_cfg, toy_weights):
        big_cfg = preset("vit-toy", dim=64, mlp_dim=128, depth=6)
        medians = []
        for cfg, w in ((toy_cfg, toy_weights), (big_cfg, init_backbone(big_cfg, 0))):
            reg = AdapterRegistry(cfg, w)
            reg.add(init_adapter(cfg, 2, task_name="a"))
            reg.add(init_adapter(cfg, 2, task_name="b"))
            for i in range(2000):
                reg.switch("ab"[i % 2])
            medians.append(reg.switch_stats().median_ns)
        # 4.5x the parameters must not show up in switch time
        assert medians[1] < 10 * medians[0] + 5_000

    def test_concurrent_infer_as(self, registry, toy_cfg, toy_weights, rng):
        imgs = rng.standard_normal((8, 3, 16, 16)).astype(np.float32)
        names = list(TASKS)
        want = {(n, i): forward(imgs[i], toy_cfg, toy_weights, registry.catalog[n]) for n in names for i in range(8)}
        errors = []

        def worker(k):
            for i in range(8):
                n = names[(k + i) % 4]
                if registry.infer_as(n, imgs[i]).tobytes() != want[(n, i)].tobytes():
                    errors.append((n, i))

        threads = [threading.Thread(target=worker, args=(k,)) for k in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        assert sum(registry.inference_counts.values()) == 32


class TestMemory:
    def test_empty(self, toy_cfg, toy_weights):
        mem = AdapterRegistry(toy_cfg, toy_weights).memory_report()
        assert mem.adapter_bytes_total == 0
        assert mem.backbone_bytes == backbone_file_size(toy_cfg)

    def test_sums(self, registry, toy_cfg):
        mem = registry.memory_report()
        assert mem.adapter_bytes_total == sum(mem.per_adapter.values())
        assert mem.per_adapter == {n: adapter_file_size(toy_cfg, 4, c, n) for n, c in TASKS.items()}
        assert mem.total_bytes == mem.backbone_bytes + mem.adapter_bytes_total

    def test_vit_base_shared_footprint(self):
        cfg = preset("vit-base")
        shared = backbone_file_size(cfg) + sum(adapter_file_size(cfg, 4, c, n) for n, c in TASKS.items())
        separate = sum(backbone_file_size(cfg, num_classes=c) for c in TASKS.values())
        assert shared / separate < 0.3
        assert backbone_file_size(cfg) >= 4 * count_backbone_params(cfg)


class TestLatencyStats:
    def test_empty(self):
        assert LatencyStats.from_samples([]).count == 0

    def test_values(self):
        s = LatencyStats.from_samples([3, 1, 2, 10])
        assert (s.min_ns, s.median_ns, s.mean_ns, s.total_ns) == (1, 2.5, 4.0, 16)
