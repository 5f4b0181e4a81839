import numpy as np
import pytest

from melo.backbone import ViTConfig, init_backbone, preset
from melo.lora import init_adapter
from melo.trainer import loss_and_grad
from melo.vit import encode

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def random_adapter(cfg, num_classes, rank, seed, *, name="task", std=0.3, scale=1.0):
    """Adapter with non-zero B, as if trained."""
    rng = np.random.default_rng(seed)
    a = init_adapter(cfg, num_classes, rank, seed, task_name=name, scale=scale)
    factors = {k: (rng.standard_normal(v.shape) * std).astype(np.float32) for k, v in a.factors.items()}
    hb = rng.standard_normal(num_classes).astype(np.float32)
    return a.replace(factors=factors, head_bias=hb)


def numeric_grads(images, labels, cfg, weights, adapter, loss="softmax-ce", h=1e-5, keys=None):
    """Central differences of the float64 loss w.r.t. factors and head entries."""
    params = {k: np.asarray(v, np.float64) for k, v in weights.tensors.items()}
    trainable = {k: np.array(v, np.float64) for k, v in adapter.factors.items()}
    trainable["head.weight"] = adapter.head_weight.astype(np.float64)
    trainable["head.bias"] = adapter.head_bias.astype(np.float64)
    x = np.asarray(images, np.float64)

    def value():
        lora = {k: trainable[k] for k in adapter.factors}
        feats = encode(x, cfg, params, lora, adapter.scale)
        logits = feats @ trainable["head.weight"].T + trainable["head.bias"]
        return loss_and_grad(logits, labels, loss)[0]

    out = {}
    for key in keys or trainable:
        arr = trainable[key]
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            plus = value()
            arr[idx] = orig - h
            minus = value()
            arr[idx] = orig
            g[idx] = (plus - minus) / (2 * h)
        out[key] = g
    return out


@pytest.fixture(scope="session")
def toy_cfg():
    return preset("vit-toy")


@pytest.fixture(scope="session")
def toy_weights(toy_cfg):
    return init_backbone(toy_cfg, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def grad_cfg():
    return ViTConfig(image_size=8, patch_size=4, channels=2, dim=8, depth=2, heads=2, mlp_dim=16)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
