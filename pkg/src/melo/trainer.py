"""Adapter training with hand-written backprop and Adam.

Forward and backward run in float64 on copies of the frozen weights; the
float32 backbone passed in is never written. Only the LoRA factors and the
classifier head receive gradients unless ``full_finetune_baseline`` is used.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from .backbone import PROJECTIONS, ViTConfig, ViTWeights, param_shapes
from .errors import TrainingDivergedError
from .lora import LoraAdapter, count_trainable, factor_name, init_adapter
from .metrics import auc as auc_score
from .tensor import gelu_backward, layernorm_backward, softmax, softmax_backward
from .vit import encode, forward_batch

logger = logging.getLogger(__name__)

LOSSES = ("softmax-ce", "sigmoid-bce")


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    rank: int = 4
    scale: float = 1.0
    loss: str = "softmax-ce"
    task_name: str = "task"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")


# -- synthetic tasks --------------------------------------------------------


@dataclass
class SyntheticTask:
    """Class-conditional images: a fixed random pattern per class plus Gaussian noise.

    ``labels`` are class indices, or (N, classes) 0/1 arrays when ``multi_label``.
    """

    seed: int
    num_classes: int
    multi_label: bool
    patterns: np.ndarray
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def image_shape(self):
        return self.patterns.shape[1:]


def make_synthetic_task(
    cfg: ViTConfig,
    num_classes: int = 2,
    num_samples: int = 200,
    seed: int = 0,
    *,
    noise: float = 1.0,
    amplitude: float = 1.0,
    margin: float = 0.0,
    multi_label: bool = False,
    test_fraction: float = 0.2,
    val_fraction: float = 0.125,
) -> SyntheticTask:
    """Build a reproducible task sized for ``cfg``.

    ``test_fraction`` of the samples form the test split; ``val_fraction`` of
    the remainder is held out for model selection (defaults give 70/10/20).
    For two classes, ``margin > 0`` resamples any image whose signed distance
    to the mid-plane between the class patterns is below ``margin``, which makes
    the task linearly separable with that margin.
    """
    rng = np.random.default_rng(seed)
    shape = (cfg.channels, cfg.image_size, cfg.image_size)
    patterns = rng.standard_normal((num_classes,) + shape) * amplitude
    if multi_label:
        labels = (rng.random((num_samples, num_classes)) < 0.4).astype(np.int64)
        images = np.einsum("nc,c...->n...", labels.astype(np.float64), patterns)
        images = images + noise * rng.standard_normal((num_samples,) + shape)
    else:
        labels = np.arange(num_samples) % num_classes
        rng.shuffle(labels)
        images = patterns[labels] + noise * rng.standard_normal((num_samples,) + shape)
        if margin > 0:
            if num_classes != 2:
                raise ValueError("margin is only supported for two classes")
            direction = (patterns[1] - patterns[0]).ravel()
            direction /= np.linalg.norm(direction)
            mid = 0.5 * (patterns[0] + patterns[1]).ravel()
            sign = np.where(labels == 1, 1.0, -1.0)
            for i in range(num_samples):
                while sign[i] * (images[i].ravel() - mid) @ direction < margin:
                    images[i] = patterns[labels[i]] + noise * rng.standard_normal(shape)
    images = images.astype(np.float32)

    order = rng.permutation(num_samples)
    n_test = int(round(test_fraction * num_samples))
    n_val = int(round(val_fraction * (num_samples - n_test)))
    test, val, train = order[:n_test], order[n_test : n_test + n_val], order[n_test + n_val :]
    return SyntheticTask(
        seed, num_classes, multi_label, patterns.astype(np.float32),
        images[train], labels[train], images[val], labels[val], images[test], labels[test],
    )


# -- loss and backprop --------------------------------------------------------


def loss_and_grad(logits: np.ndarray, labels: np.ndarray, loss: str = "softmax-ce"):
    """Mean loss over the batch and its gradient w.r.t. ``logits``."""
    n = logits.shape[0]
    if loss == "softmax-ce":
        probs = softmax(logits, axis=-1)
        picked = probs[np.arange(n), labels]
        value = -np.mean(np.log(np.maximum(picked, np.finfo(probs.dtype).tiny)))
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
        return float(value), grad / n
    if loss == "sigmoid-bce":
        y = labels.astype(logits.dtype)
        # log(1 + exp(-|z|)) form stays finite for large |z|
        value = np.mean(np.maximum(logits, 0) - logits * y + np.log1p(np.exp(-np.abs(logits))))
        grad = (expit(logits) - y) / logits.size
        return float(value), grad
    raise ValueError(f"unknown loss {loss!r}")


def _linear_grads(grads, prefix, dy, x):
    """Accumulate weight/bias grads of ``y = x W^T + b`` over all leading axes."""
    d_out, d_in = dy.shape[-1], x.shape[-1]
    dy2 = dy.reshape(-1, d_out)
    grads[prefix + ".weight"] = dy2.T @ x.reshape(-1, d_in)
    grads[prefix + ".bias"] = dy2.sum(axis=0)


def backward(
    cache: dict,
    dfeatures: np.ndarray,
    cfg: ViTConfig,
    params,
    lora=None,
    scale: float = 1.0,
    backbone_grads: bool = False,
) -> dict[str, np.ndarray]:
    """Backprop from d(loss)/d(CLS features) through the cached forward.

    Returns gradients for every LoRA factor (when ``lora`` is given) and, if
    ``backbone_grads``, for every backbone tensor as well.
    """
    grads: dict[str, np.ndarray] = {}
    blocks = cache["blocks"]
    n, t = blocks[0]["h"].shape[:2]
    d = cfg.dim

    dcls, dgn, dbn = layernorm_backward(dfeatures, cache["xhat_final"], cache["rstd_final"], params["norm.weight"])
    if backbone_grads:
        grads["norm.weight"], grads["norm.bias"] = dgn, dbn
    dx = np.zeros((n, t, d), dtype=dfeatures.dtype)
    dx[:, 0, :] = dcls

    inv = 1.0 / math.sqrt(cfg.head_dim)
    for layer in reversed(range(cfg.depth)):
        c = blocks[layer]
        p = f"blocks.{layer}."
        # MLP branch
        W2 = params[p + "mlp.fc2.weight"]
        dg = dx @ W2
        da = gelu_backward(c["a"], dg)
        dh2 = da @ params[p + "mlp.fc1.weight"]
        if backbone_grads:
            _linear_grads(grads, p + "mlp.fc2", dx, c["g"])
            _linear_grads(grads, p + "mlp.fc1", da, c["h2"])
        dln2, dgw2, dgb2 = layernorm_backward(dh2, c["xhat2"], c["rstd2"], params[p + "norm2.weight"])
        dx1 = dx + dln2
        # attention branch
        dctx = dx1 @ params[p + "attn.o.weight"]
        if backbone_grads:
            grads[p + "norm2.weight"], grads[p + "norm2.bias"] = dgw2, dgb2
            _linear_grads(grads, p + "attn.o", dx1, c["ctx"])
        dctx_h = dctx.reshape(n, t, cfg.heads, cfg.head_dim).transpose(0, 2, 1, 3)
        att = c["att"]
        datt = dctx_h @ c["vh"].transpose(0, 1, 3, 2)
        dvh = att.transpose(0, 1, 3, 2) @ dctx_h
        dscores = softmax_backward(att, datt) * inv
        dqh = dscores @ c["kh"]
        dkh = dscores.transpose(0, 1, 3, 2) @ c["qh"]
        dq, dk, dv = (x.transpose(0, 2, 1, 3).reshape(n, t, d) for x in (dqh, dkh, dvh))

        h = c["h"]
        dh = np.zeros_like(h)
        for kind, dproj in (("q", dq), ("k", dk), ("v", dv)):
            dh += dproj @ params[p + f"attn.{kind}.weight"]
            if backbone_grads:
                _linear_grads(grads, p + f"attn.{kind}", dproj, h)
            if lora is not None and kind in PROJECTIONS:
                A = lora[factor_name(layer, kind, "A")]
                B = lora[factor_name(layer, kind, "B")]
                u = c[f"u_{kind}"]
                dproj2 = dproj.reshape(-1, d)
                grads[factor_name(layer, kind, "B")] = scale * (dproj2.T @ u.reshape(-1, u.shape[-1]))
                du = scale * (dproj @ B)
                grads[factor_name(layer, kind, "A")] = du.reshape(-1, du.shape[-1]).T @ h.reshape(-1, d)
                dh += du @ A
        dln1, dgw1, dgb1 = layernorm_backward(dh, c["xhat1"], c["rstd1"], params[p + "norm1.weight"])
        if backbone_grads:
            grads[p + "norm1.weight"], grads[p + "norm1.bias"] = dgw1, dgb1
        dx = dx1 + dln1

    if backbone_grads:
        grads["pos_embed"] = dx.sum(axis=0)
        grads["cls_token"] = dx[:, 0, :].sum(axis=0)
        _linear_grads(grads, "patch_embed", dx[:, 1:, :], cache["embed"]["patches"])
    return grads


def model_grads(images, labels, cfg, params, lora=None, scale=1.0, head=None, loss="softmax-ce", backbone_grads=False):
    """Loss and gradients for one batch. ``head`` is a ``(weight, bias)`` pair."""
    cache: dict = {}
    feats = encode(images, cfg, params, lora, scale, cache)
    hw, hb = head
    logits = feats @ hw.T + hb
    value, dlogits = loss_and_grad(logits, labels, loss)
    grads = backward(cache, dlogits @ hw, cfg, params, lora, scale, backbone_grads)
    grads["head.weight"] = dlogits.T @ feats
    grads["head.bias"] = dlogits.sum(axis=0)
    return value, grads


def lora_backward(images, labels, cfg: ViTConfig, weights: ViTWeights, adapter: LoraAdapter, loss="softmax-ce"):
    """Loss and gradients for every LoRA factor and the head, computed in float64.

    Returns ``(loss, grads)`` with grads keyed like ``adapter.factors`` plus
    ``head.weight`` / ``head.bias``.
    """
    adapter.check_compatible(cfg)
    if len(images) == 0:
        raise ValueError("empty batch")
    params = _as64(weights.tensors)
    lora = _as64(adapter.factors)
    head = (adapter.head_weight.astype(np.float64), adapter.head_bias.astype(np.float64))
    return model_grads(np.asarray(images, np.float64), np.asarray(labels), cfg, params, lora,
                       adapter.scale, head, loss)


def _as64(mapping) -> dict[str, np.ndarray]:
    return {k: np.array(v, dtype=np.float64) for k, v in mapping.items()}


# -- optimizer ------------------------------------------------------------------


class Adam:
    """Adam with bias correction over a dict of float64 arrays, updated in place."""

    def __init__(self, params: dict[str, np.ndarray], lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- training loops -------------------------------------------------------------


@dataclass
class TrainHistory:
    """Per-epoch records plus the trainable-parameter ledger of the run."""

    metric: str
    trainable: dict[str, int]
    records: list[dict] = field(default_factory=list)
    best_epoch: Optional[int] = None

    @property
    def best_metric(self) -> float:
        return max(r["val_metric_value"] for r in self.records)

    def train_losses(self) -> list[float]:
        return [r["train_loss"] for r in self.records]

    def write_jsonl(self, path) -> None:
        with open(Path(path), "w") as f:
            for rec in self.records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def _score(images, labels, cfg, weights, adapter, head, multi_label, batch=256):
    logits = np.concatenate([
        forward_batch(images[i : i + batch], cfg, weights, adapter, head)
        for i in range(0, len(images), batch)
    ]).astype(np.float64)
    if multi_label:
        value = auc_score(labels, expit(logits), mode="multilabel")
        loss, _ = loss_and_grad(logits, labels, "sigmoid-bce")
    else:
        value = float(np.mean(np.argmax(logits, axis=-1) == labels))
        loss, _ = loss_and_grad(logits, labels, "softmax-ce")
    return value, loss


def evaluate(images, labels, cfg, weights, adapter=None, head=None, multi_label=False, batch=256):
    """Validation metric: accuracy, or mean per-label AUC when ``multi_label``."""
    return _score(images, labels, cfg, weights, adapter, head, multi_label, batch)[0]


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _run(task: SyntheticTask, cfg: TrainConfig, vit_cfg: ViTConfig, weights: ViTWeights, full: bool):
    adapter0 = init_adapter(vit_cfg, task.num_classes, cfg.rank, cfg.seed, task_name=cfg.task_name, scale=cfg.scale)
    frozen = _as64(weights.tensors)
    trainable = {"head.weight": adapter0.head_weight.astype(np.float64),
                 "head.bias": adapter0.head_bias.astype(np.float64)}
    if full:
        backbone = frozen
        trainable.update(backbone)
        lora = None
        ledger = {"backbone": sum(v.size for v in frozen.values()),
                  "head": adapter0.head_weight.size + adapter0.head_bias.size}
        ledger["total"] = ledger["backbone"] + ledger["head"]
    else:
        backbone = frozen
        lora = _as64(adapter0.factors)
        trainable.update(lora)
        ledger = count_trainable(vit_cfg, cfg.rank, task.num_classes).as_dict()
    loss_name = "sigmoid-bce" if task.multi_label else cfg.loss
    metric = "val_mean_auc" if task.multi_label else "val_accuracy"
    history = TrainHistory(metric=metric, trainable={k: int(v) for k, v in ledger.items()})
    opt = Adam(trainable, cfg.learning_rate, cfg.betas, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    x_train = task.x_train.astype(np.float64)

    def snapshot():
        if full:
            new_w = ViTWeights({k: trainable[k].astype(np.float32) for k in param_shapes(vit_cfg)})
            head = (trainable["head.weight"].astype(np.float32), trainable["head.bias"].astype(np.float32))
            return new_w, head
        factors = {k: trainable[k].astype(np.float32) for k in adapter0.factors}
        return adapter0.replace(factors=factors, head_weight=trainable["head.weight"],
                                head_bias=trainable["head.bias"])

    best = None
    best_key = (-math.inf, -math.inf)
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in _batches(len(x_train), cfg.batch_size, rng):
            head = (trainable["head.weight"], trainable["head.bias"])
            value, grads = model_grads(x_train[idx], task.y_train[idx], vit_cfg, backbone, lora,
                                       cfg.scale, head, loss_name, backbone_grads=full)
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}", history)
            losses.append(value)
            opt.step(grads)
        snap = snapshot()
        if full:
            val, val_loss = _score(task.x_val, task.y_val, vit_cfg, snap[0], None, snap[1], task.multi_label)
        else:
            val, val_loss = _score(task.x_val, task.y_val, vit_cfg, weights, snap, None, task.multi_label)
        history.records.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                                "val_metric": metric, "val_metric_value": float(val),
                                "val_loss": float(val_loss)})
        # a small validation split saturates accuracy early; lower loss breaks ties
        if (val, -val_loss) > best_key:
            best_key, best, history.best_epoch = (val, -val_loss), snap, epoch
        logger.debug("epoch %d loss %.5f %s %.4f", epoch, np.mean(losses), metric, val)
    return best, history


def train(task: SyntheticTask, cfg: TrainConfig, vit_cfg: ViTConfig, weights: ViTWeights):
    """Train a LoRA adapter + head over a frozen backbone.

    Returns ``(adapter, history)`` where ``adapter`` is the snapshot with the
    best validation metric, ties broken by lower validation loss.
    """
    return _run(task, cfg, vit_cfg, weights, full=False)


def full_finetune_baseline(task: SyntheticTask, cfg: TrainConfig, vit_cfg: ViTConfig, weights: ViTWeights):
    """Same loop with every backbone tensor trainable and no adapter.

    The head starts from the same seeded init as :func:`train`. Returns
    ``(new_weights, head, history)``.
    """
    (new_weights, head), history = _run(task, cfg, vit_cfg, weights, full=True)
    return new_weights, head, history

