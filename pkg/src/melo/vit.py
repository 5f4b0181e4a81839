"""ViT forward pass with optional low-rank adapters on Q and V.

``encode`` works on a batch and on any float dtype; it takes plain name ->
array mappings so the trainer can run it on float64 copies and ask for a
cache of intermediates. ``forward`` is the single-image inference entry point.
"""

from __future__ import annotations

import math
from typing import Mapping, Optional

import numpy as np

from .backbone import LN_EPS, ViTConfig, ViTWeights
from .errors import CompatibilityError, ShapeError
from .lora import LoraAdapter, apply_lora, factor_name
from .tensor import gelu, layernorm_with_stats, matmul, softmax


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(N, C, H, W) -> (N, num_patches, C * p * p), patches in row-major grid order."""
    n, c, h, w = images.shape
    p = patch_size
    x = images.reshape(n, c, h // p, p, w // p, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(n, (h // p) * (w // p), c * p * p)


def _check_images(images: np.ndarray, cfg: ViTConfig) -> None:
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ShapeError(f"expected images of shape (N, {expected[0]}, {expected[1]}, {expected[2]}), got {images.shape}")


def embed(images: np.ndarray, cfg: ViTConfig, params: Mapping[str, np.ndarray], cache=None) -> np.ndarray:
    """Patch embedding, CLS prepend and positional embedding for a batch."""
    _check_images(images, cfg)
    patches = patchify(images, cfg.patch_size)
    tok = matmul(patches, params["patch_embed.weight"].T) + params["patch_embed.bias"]
    n = images.shape[0]
    cls = np.broadcast_to(params["cls_token"], (n, 1, cfg.dim))
    x = np.concatenate([cls, tok], axis=1) + params["pos_embed"]
    if cache is not None:
        cache["patches"] = patches
    return x


def patchify_embed(image: np.ndarray, cfg: ViTConfig, weights: ViTWeights) -> np.ndarray:
    """Single image (C, H, W) -> token sequence (1 + N, d)."""
    if image.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) image, got shape {image.shape}")
    return embed(image[None], cfg, weights.tensors)[0]


def _split_heads(x, heads):
    n, t, d = x.shape
    return x.reshape(n, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    n, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(n, t, h * dh)


def _project(h, params, lora, scale, layer, kind, cache):
    W = params[f"blocks.{layer}.attn.{kind}.weight"]
    b = params[f"blocks.{layer}.attn.{kind}.bias"]
    if lora is None or kind not in ("q", "v"):
        return h @ W.T + b
    A = lora[factor_name(layer, kind, "A")]
    B = lora[factor_name(layer, kind, "B")]
    if cache is not None:
        cache[f"u_{kind}"] = h @ A.T
    return apply_lora(h, W, A, B, scale) + b


def block(x, layer, cfg: ViTConfig, params, lora=None, scale=1.0, cache=None):
    """One pre-norm transformer block. ``cache``, if a dict, is filled for backprop."""
    p = f"blocks.{layer}."
    h, xhat1, rstd1 = layernorm_with_stats(x, params[p + "norm1.weight"], params[p + "norm1.bias"], LN_EPS)
    q = _project(h, params, lora, scale, layer, "q", cache)
    k = _project(h, params, lora, scale, layer, "k", cache)
    v = _project(h, params, lora, scale, layer, "v", cache)
    qh, kh, vh = (_split_heads(t, cfg.heads) for t in (q, k, v))
    inv = x.dtype.type(1.0 / math.sqrt(cfg.head_dim))
    att = softmax((qh @ kh.transpose(0, 1, 3, 2)) * inv, axis=-1)
    ctx = _merge_heads(att @ vh)
    x1 = x + (ctx @ params[p + "attn.o.weight"].T + params[p + "attn.o.bias"])
    h2, xhat2, rstd2 = layernorm_with_stats(x1, params[p + "norm2.weight"], params[p + "norm2.bias"], LN_EPS)
    a = h2 @ params[p + "mlp.fc1.weight"].T + params[p + "mlp.fc1.bias"]
    g = gelu(a)
    x2 = x1 + (g @ params[p + "mlp.fc2.weight"].T + params[p + "mlp.fc2.bias"])
    if cache is not None:
        cache.update(h=h, xhat1=xhat1, rstd1=rstd1, qh=qh, kh=kh, vh=vh, att=att, ctx=ctx,
                     h2=h2, xhat2=xhat2, rstd2=rstd2, a=a, g=g)
    return x2


def encode(
    images: np.ndarray,
    cfg: ViTConfig,
    params: Mapping[str, np.ndarray],
    lora: Optional[Mapping[str, np.ndarray]] = None,
    scale: float = 1.0,
    cache: Optional[dict] = None,
) -> np.ndarray:
    """Batch (N, C, H, W) -> final layer-normed CLS embeddings (N, d).

    ``cache`` (a dict) receives ``embed``, ``blocks`` (one dict per layer) and
    the final norm statistics.
    """
    emb_cache = {} if cache is not None else None
    x = embed(images, cfg, params, emb_cache)
    block_caches = []
    for layer in range(cfg.depth):
        bc = {} if cache is not None else None
        x = block(x, layer, cfg, params, lora, scale, bc)
        block_caches.append(bc)
    cls = x[:, 0, :]
    out, xhat, rstd = layernorm_with_stats(cls, params["norm.weight"], params["norm.bias"], LN_EPS)
    if cache is not None:
        cache.update(embed=emb_cache, blocks=block_caches, xhat_final=xhat, rstd_final=rstd, features=out)
    return out


def head_logits(features: np.ndarray, head) -> np.ndarray:
    weight, bias = head
    return matmul(features, weight.T) + bias


def _resolve(cfg: ViTConfig, adapter: Optional[LoraAdapter], head):
    if adapter is not None:
        adapter.check_compatible(cfg)
        if head is None:
            head = adapter.head
    lora = adapter.factors if adapter is not None else None
    scale = adapter.scale if adapter is not None else 1.0
    return lora, scale, head


def forward(
    image: np.ndarray,
    cfg: ViTConfig,
    weights: ViTWeights,
    adapter: Optional[LoraAdapter] = None,
    head=None,
) -> np.ndarray:
    """Classify one (C, H, W) image.

    The adapter's factors are applied at runtime to W_Q and W_V of every block
    and its head produces the logits. ``head`` (a ``(weight, bias)`` pair)
    overrides the adapter's head or supplies one when no adapter is given.
    Without any head the final CLS embedding is returned.

    Raises:
        CompatibilityError: adapter (d, L) differs from the config.
        ShapeError: image has the wrong shape.
    """
    if image.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) image, got shape {image.shape}")
    lora, scale, head = _resolve(cfg, adapter, head)
    image = np.asarray(image, dtype=np.float32)
    feats = encode(image[None], cfg, weights.tensors, lora, scale)[0]
    if head is None:
        return feats
    return head_logits(feats, head)


def forward_batch(
    images: np.ndarray,
    cfg: ViTConfig,
    weights: ViTWeights,
    adapter: Optional[LoraAdapter] = None,
    head=None,
) -> np.ndarray:
    """Batched variant of :func:`forward` used for evaluation; (N, C, H, W) -> (N, classes)."""
    lora, scale, head = _resolve(cfg, adapter, head)
    feats = encode(np.asarray(images, dtype=np.float32), cfg, weights.tensors, lora, scale)
    if head is None:
        return feats
    return head_logits(feats, head)


def check_weights_match(cfg: ViTConfig, weights: ViTWeights) -> None:
    try:
        weights.validate(cfg)
    except (ShapeError, ValueError) as exc:
        raise CompatibilityError(str(exc)) from exc
