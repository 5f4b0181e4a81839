"""Low-rank adapters on the Q/V projections of a frozen Vision Transformer.

One backbone serves many tasks: each task is a small adapter file holding
rank-r factors for every attention block plus a classifier head.
"""

from .backbone import PRESETS, ViTConfig, ViTWeights, init_backbone, load_backbone, preset, save_backbone
from .lora import (
    LoraAdapter,
    apply_lora,
    count_trainable,
    init_adapter,
    load_adapter,
    merge_adapter,
    save_adapter,
    unmerge_adapter,
)
from .registry import AdapterRegistry
from .vit import forward, patchify_embed

__all__ = [
    "PRESETS", "ViTConfig", "ViTWeights", "init_backbone", "load_backbone", "preset", "save_backbone",
    "LoraAdapter", "apply_lora", "count_trainable", "init_adapter", "load_adapter", "merge_adapter",
    "save_adapter", "unmerge_adapter", "AdapterRegistry", "forward", "patchify_embed",
]
__version__ = "0.1.0"
