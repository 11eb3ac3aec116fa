"""Minimal pre-norm decoder-only transformer (the frozen backbone).

Parameters live in a flat ``dict[str, Tensor]`` under the ``base.`` prefix.
Weight matrices are stored [out, in]. One block computes

    X = H + Attn(LN1(H));  out = X + FFN(LN2(X))

with strictly causal multi-head attention and a SiLU feed-forward layer.
``block_forward`` also serves the adapted path: pass per-site LoRA factors and
the low-rank branches are added to the q/v projections and both FFN maps.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .config import ModelConfig
from .vocab import VocabularyError

Params = dict[str, Tensor]

LORA_SITES = ("q", "v", "up", "down")
_NEG = -1e9


class CapacityError(ValueError):
    """Sequence longer than the model's positional table."""


def init_base_params(cfg: ModelConfig, vocab_size: int, rng: np.random.Generator, std: float = 0.02) -> Params:
    """Token embeddings ~ N(0, 1), positions ~ N(0, std), matrices ~ N(0, 1/(3 fan_in)).

    With everything at a flat 0.02 the backbone sits for thousands of steps
    on a copy plateau and never learns key lookup. Unit token embeddings keep
    token identity dominant over position, which is what content matching
    needs; the fan-in scale keeps attention logits away from zero.
    """
    d, f = cfg.d, cfg.ffn_mult * cfg.d

    def fan_in(out_dim, in_dim):
        return Tensor(rng.normal(0.0, 1.0 / np.sqrt(3.0 * in_dim), size=(out_dim, in_dim)))

    p: Params = {
        "base.tok_emb": Tensor(rng.normal(0.0, 1.0, size=(vocab_size, d))),
        "base.pos_emb": Tensor(rng.normal(0.0, std, size=(cfg.max_seq_len, d))),
        "base.ln_f.g": Tensor(np.ones(d)),
        "base.ln_f.b": Tensor(np.zeros(d)),
        "base.head.W": fan_in(vocab_size, d),
    }
    for layer in range(cfg.n_layers):
        pre = f"base.layer{layer}."
        p[pre + "ln1.g"] = Tensor(np.ones(d))
        p[pre + "ln1.b"] = Tensor(np.zeros(d))
        p[pre + "ln2.g"] = Tensor(np.ones(d))
        p[pre + "ln2.b"] = Tensor(np.zeros(d))
        for name in ("q", "k", "v", "o"):
            p[pre + f"attn.{name}.W"] = fan_in(d, d)
            p[pre + f"attn.{name}.b"] = Tensor(np.zeros(d))
        p[pre + "ffn.up.W"] = fan_in(f, d)
        p[pre + "ffn.up.b"] = Tensor(np.zeros(f))
        p[pre + "ffn.down.W"] = fan_in(d, f)
        p[pre + "ffn.down.b"] = Tensor(np.zeros(d))
    return p


def embed_tokens(params: Params, cfg: ModelConfig, ids) -> Tensor:
    """Token embedding plus learned absolute position embedding.

    ``ids`` is a length-n sequence or a [B, n] array; returns [n, d] or [B, n, d].
    """
    ids = np.asarray(ids, dtype=np.int64)
    table = params["base.tok_emb"]
    n = ids.shape[-1]
    if n == 0:
        return Tensor(np.zeros(ids.shape + (cfg.d,)))
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise VocabularyError(f"token id outside 0..{table.shape[0] - 1}")
    if n > cfg.max_seq_len:
        raise CapacityError(f"sequence of length {n} exceeds max_seq_len={cfg.max_seq_len}")
    tok = ad.gather_embedding(table, ids)
    pos = ad.slice_rows(params["base.pos_emb"], 0, n)
    return ad.add(tok, pos)


_MASKS: dict[int, np.ndarray] = {}


def causal_mask(n: int) -> np.ndarray:
    """Additive [n, n] mask: 0 where j <= i, a large negative value above the diagonal."""
    m = _MASKS.get(n)
    if m is None:
        m = np.triu(np.full((n, n), _NEG, dtype=np.float32), k=1)
        _MASKS[n] = m
    return m


def _proj(x: Tensor, params: Params, pre: str, site: str, lora, rng, rate: float) -> Tensor:
    key = {"q": "attn.q", "k": "attn.k", "v": "attn.v", "o": "attn.o", "up": "ffn.up", "down": "ffn.down"}[site]
    W, b = params[pre + key + ".W"], params[pre + key + ".b"]
    if lora is None or site not in lora:
        return ad.linear(x, W, b)
    A, B, scaling = lora[site]
    return lora_linear(x, W, b, A, B, scaling, rate, rng)


def lora_linear(
    x: Tensor,
    W: Tensor,
    b: Tensor | None,
    A: Tensor,
    B: Tensor,
    scaling: float,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """``x W^T + b + scaling * (drop(x) A^T) B^T``; dropout only when ``rng`` is given."""
    base = ad.linear(x, W, b)
    low = ad.linear(ad.linear(ad.dropout(x, dropout, rng), A), B)
    return ad.add(base, ad.mul(low, scaling))


def attention(
    params: Params,
    cfg: ModelConfig,
    pre: str,
    x: Tensor,
    lora=None,
    rng=None,
    rate: float = 0.0,
    rows: tuple[int, ...] | None = None,
) -> Tensor:
    """Causal multi-head attention; with ``rows`` only those query rows are computed."""
    bsz, n, d = x.shape
    h = cfg.n_heads
    dh = d // h
    nq = n if rows is None else len(rows)

    def heads(t, length):
        return ad.transpose(ad.reshape(t, (bsz, length, h, dh)), (0, 2, 1, 3))

    xq = x if rows is None else ad.take_rows(x, rows)
    q = heads(_proj(xq, params, pre, "q", lora, rng, rate), nq)
    k = heads(_proj(x, params, pre, "k", lora, rng, rate), n)
    v = heads(_proj(x, params, pre, "v", lora, rng, rate), n)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / float(np.sqrt(dh)))
    mask = causal_mask(n) if rows is None else causal_mask(n)[list(rows)]
    probs = ad.softmax_rows(ad.add(scores, mask))
    ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (bsz, nq, d))
    return _proj(ctx, params, pre, "o", lora, rng, rate)


def block_forward(
    params: Params,
    cfg: ModelConfig,
    layer: int,
    H: Tensor,
    lora: Mapping[str, tuple[Tensor, Tensor, float]] | None = None,
    rng: np.random.Generator | None = None,
    rows: tuple[int, ...] | None = None,
) -> Tensor:
    """One transformer block; ``lora`` maps site -> (A, B, scaling) for the adapted path.

    With ``rows`` the block returns only those output rows. Keys and values
    still span the whole sequence, so each returned row equals the matching
    row of the full computation.
    """
    if not 0 <= layer < cfg.n_layers:
        raise ContractError(f"layer {layer} outside 0..{cfg.n_layers - 1}")
    squeeze = H.ndim == 2
    if squeeze:
        H = ad.reshape(H, (1,) + H.shape)
    if H.shape[1] > cfg.max_seq_len:
        raise CapacityError(f"sequence of length {H.shape[1]} exceeds max_seq_len={cfg.max_seq_len}")
    pre = f"base.layer{layer}."
    rate = cfg.lora_dropout
    x = ad.layer_norm(H, params[pre + "ln1.g"], params[pre + "ln1.b"])
    a = attention(params, cfg, pre, x, lora, rng, rate, rows)
    X = ad.add(H if rows is None else ad.take_rows(H, rows), a)
    hidden = ad.silu(_proj(ad.layer_norm(X, params[pre + "ln2.g"], params[pre + "ln2.b"]), params, pre, "up", lora, rng, rate))
    out = ad.add(X, _proj(hidden, params, pre, "down", lora, rng, rate))
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
    return out


def base_layer_forward(params: Params, cfg: ModelConfig, layer: int, H: Tensor) -> Tensor:
    """Frozen block F_theta at ``layer``."""
    return block_forward(params, cfg, layer, H)


def logits(params: Params, cfg: ModelConfig, H: Tensor) -> Tensor:
    """Final layer norm then the (unbiased) output projection."""
    hn = ad.layer_norm(H, params["base.ln_f.g"], params["base.ln_f.b"])
    return ad.linear(hn, params["base.head.W"])


def base_forward(params: Params, cfg: ModelConfig, ids) -> Tensor:
    """Plain backbone language model over token ids (no slots, no adapters)."""
    H = embed_tokens(params, cfg, ids)
    for layer in range(cfg.n_layers):
        H = base_layer_forward(params, cfg, layer, H)
    return logits(params, cfg, H)
