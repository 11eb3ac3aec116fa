"""Selective LoRA: low-rank residual applied only at slot rows.

    A(H) = F_theta(H) + M (.) (F_theta,phi(H) - F_theta(H))

where F_theta,phi is the same block with LoRA branches on the q/v projections
and both feed-forward maps. Rows with mask 0 come out bitwise equal to the
frozen block.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .config import ModelConfig
from .transformer import LORA_SITES, Params, block_forward, lora_linear

__all__ = ["init_lora", "layer_lora", "lora_linear", "adapted_layer_forward", "adapted_rows", "broadcast_mask"]


def _site_shape(cfg: ModelConfig, site: str) -> tuple[int, int]:
    f = cfg.ffn_mult * cfg.d
    return {"q": (cfg.d, cfg.d), "v": (cfg.d, cfg.d), "up": (f, cfg.d), "down": (cfg.d, f)}[site]


def init_lora(cfg: ModelConfig, rng: np.random.Generator, std: float = 0.02) -> Params:
    """A ~ N(0, std), B = 0 for every layer and site, named ``lora.layer{l}.{site}.{A|B}``."""
    p: Params = {}
    for layer in range(cfg.n_layers):
        for site in LORA_SITES:
            out_dim, in_dim = _site_shape(cfg, site)
            p[f"lora.layer{layer}.{site}.A"] = Tensor(rng.normal(0.0, std, size=(cfg.lora_rank, in_dim)))
            p[f"lora.layer{layer}.{site}.B"] = Tensor(np.zeros((out_dim, cfg.lora_rank)))
    return p


def layer_lora(params: Params, cfg: ModelConfig, layer: int) -> dict[str, tuple[Tensor, Tensor, float]]:
    s = cfg.lora_scaling
    return {site: (params[f"lora.layer{layer}.{site}.A"], params[f"lora.layer{layer}.{site}.B"], s) for site in LORA_SITES}


def broadcast_mask(n: int, positions) -> np.ndarray:
    m = np.zeros((n, 1), dtype=np.float32)
    m[list(positions), 0] = 1.0
    return m


def adapted_layer_forward(
    params: Params,
    cfg: ModelConfig,
    layer: int,
    H: Tensor,
    mask: np.ndarray,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Frozen block plus the masked LoRA residual at ``layer``.

    ``mask`` is an [n, 1] array of zeros and ones. Dropout on the low-rank
    branches is active only when ``rng`` is supplied (training).

    The adapted block is evaluated only at mask-1 rows (its keys and values
    still cover every row), since the residual is discarded elsewhere.
    """
    mask = np.asarray(mask, dtype=np.float32)
    n = H.shape[-2]
    if mask.shape != (n, 1):
        raise DimensionError(f"mask of shape {mask.shape} does not fit a sequence of length {n}")
    frozen = block_forward(params, cfg, layer, H)
    rows = tuple(int(i) for i in np.flatnonzero(mask[:, 0] == 1.0))
    if not rows:
        return frozen
    frozen_r = ad.take_rows(frozen, rows)
    adapted_r = block_forward(params, cfg, layer, H, lora=layer_lora(params, cfg, layer), rng=rng, rows=rows)
    return ad.scatter_rows(frozen, rows, ad.add(frozen_r, ad.sub(adapted_r, frozen_r)))


def adapted_rows(
    params: Params,
    cfg: ModelConfig,
    layer: int,
    H: Tensor,
    rows,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Rows ``rows`` of the selective-LoRA layer with those rows as the mask."""
    rows = tuple(rows)
    frozen_r = block_forward(params, cfg, layer, H, rows=rows)
    adapted_r = block_forward(params, cfg, layer, H, lora=layer_lora(params, cfg, layer), rng=rng, rows=rows)
    return ad.add(frozen_r, ad.sub(adapted_r, frozen_r))
