"""Attention primitives: masked multi-head attention, the cross-attention
pooling/unpooling block, pre-norm transformer blocks and the count+id embedding.

Every layer acts row-wise except attention itself, so the permutation
properties follow directly: self-attention blocks are equivariant, pooling with
learned queries is invariant, and unpooling with id-selected queries is
equivariant in the ids.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def attention(q, k, v, key_mask=None):
    """Scaled dot-product attention over the last two dims.

    ``q`` is [..., a, D], ``k`` and ``v`` are [..., b, D]; ``key_mask`` is a
    boolean [..., b] tensor with True for keys that may be attended. Masked keys
    receive exactly zero weight.
    """
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        if not bool(key_mask.any(-1).all()):
            raise ValueError("attention: every key is masked for some query row")
        scores = scores.masked_fill(~key_mask.unsqueeze(-2), float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    if key_mask is not None:
        # keeps masked rows of v (even non-finite ones) out of the product
        v = v.masked_fill(~key_mask.unsqueeze(-1), 0.0)
    return weights @ v


def multihead(q, k, v, heads: int, key_mask=None):
    """Split the feature dim into ``heads`` chunks, attend per head, concatenate."""
    *batch, a, dim = q.shape
    b = k.shape[-2]
    if dim % heads:
        raise ValueError(f"width {dim} not divisible by {heads} heads")
    dh = dim // heads

    def split(x, n):
        return x.reshape(*x.shape[:-2], n, heads, dh).transpose(-2, -3)

    mask = None if key_mask is None else key_mask.unsqueeze(-2)
    out = attention(split(q, a), split(k, b), split(v, b), mask)
    return out.transpose(-2, -3).reshape(*batch, a, dim)


def _init_linear(layer: nn.Linear):
    bound = 1.0 / math.sqrt(layer.in_features)
    nn.init.uniform_(layer.weight, -bound, bound)
    if layer.bias is not None:
        nn.init.uniform_(layer.bias, -bound, bound)


def linear(n_in, n_out, bias=True) -> nn.Linear:
    layer = nn.Linear(n_in, n_out, bias=bias)
    _init_linear(layer)
    return layer


class GatedMLP(nn.Module):
    """out(a(x) * silu(b(x)))"""

    def __init__(self, dim: int, hidden: int | None = None, out_dim: int | None = None):
        super().__init__()
        hidden = hidden or 4 * dim
        self.a = linear(dim, hidden)
        self.b = linear(dim, hidden)
        self.out = linear(hidden, out_dim or dim)

    def forward(self, x):
        return self.out(self.a(x) * F.silu(self.b(x)))


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = linear(dim, dim)
        self.k = linear(dim, dim)
        self.v = linear(dim, dim)
        self.o = linear(dim, dim)

    def forward(self, x, context=None, key_mask=None):
        context = x if context is None else context
        out = multihead(self.q(x), self.k(context), self.v(context), self.heads, key_mask)
        return self.o(out)


class TransformerBlock(nn.Module):
    """Pre-norm block: x + Att(LN1 x), then + MLP(LN2 x)."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = GatedMLP(dim, mlp_ratio * dim)

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.ln1(x), key_mask=key_mask)
        return x + self.mlp(self.ln2(x))


class CrossAttentionBlock(nn.Module):
    """Multi-head cross-attention block.

    With ``queries`` set to the learned pseudoinput matrix the block pools any
    number of input rows into a fixed number of rows and does not depend on
    their order. Called with id-selected embedding rows as ``queries`` it
    unpools: one output row per query.

    F = Q + Att(LN_Q(Q), K, V), Q = Lin_S(S), K = Lin_K(LN_K(X)), V = Lin_V(LN_V(X))
    out = F + MLP(LN_F(F))
    """

    def __init__(self, dim: int, heads: int, n_pseudo: int | None = None, mlp_ratio: int = 4):
        super().__init__()
        self.heads = heads
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        if n_pseudo is not None:
            if n_pseudo < 1:
                raise ValueError("need at least one pseudoinput")
            self.pseudo = nn.Parameter(torch.randn(n_pseudo, dim))
        else:
            self.pseudo = None
        self.lin_s = linear(dim, dim)
        self.lin_k = linear(dim, dim)
        self.lin_v = linear(dim, dim)
        self.ln_q = nn.LayerNorm(dim)
        self.ln_k = nn.LayerNorm(dim)
        self.ln_v = nn.LayerNorm(dim)
        self.ln_f = nn.LayerNorm(dim)
        self.o = linear(dim, dim)
        self.mlp = GatedMLP(dim, mlp_ratio * dim)

    def forward(self, x, key_mask=None, queries=None):
        if queries is None:
            if self.pseudo is None:
                raise ValueError("unpooling block needs explicit queries")
            queries = self.pseudo.expand(*x.shape[:-2], *self.pseudo.shape)
        q = self.lin_s(queries)
        k = self.lin_k(self.ln_k(x))
        v = self.lin_v(self.ln_v(x))
        f = q + self.o(multihead(self.ln_q(q), k, v, self.heads, key_mask))
        return f + self.mlp(self.ln_f(f))


class CountEmbedding(nn.Module):
    """Linear(concat(count repeated D times, E[id])) -> D.

    The table has ``n_genes + 1`` rows, the last one being the PAD token.
    """

    def __init__(self, n_genes: int, dim: int, log1p: bool = False):
        super().__init__()
        self.n_genes = n_genes
        self.log1p = log1p
        self.table = nn.Parameter(torch.randn(n_genes + 1, dim) / math.sqrt(dim))
        self.mix = linear(2 * dim, dim)

    @property
    def pad_id(self) -> int:
        return self.n_genes

    def rows(self, ids):
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) > self.n_genes):
            raise IndexError("gene id out of range")
        return self.table[ids]

    def forward(self, ids, counts):
        e = self.rows(ids)
        c = counts.to(e.dtype)
        if self.log1p:
            c = torch.log1p(c)
        c = c.unsqueeze(-1).expand_as(e)
        return self.mix(torch.cat([c, e], dim=-1))


# functional entry points -----------------------------------------------------


def mcab_pool(x, mask, block: CrossAttentionBlock):
    """Pool [.., n, D] rows into [.., m, D] using the block's pseudoinputs."""
    return block(x, key_mask=mask)


def mcab_unpool(z, queries, block: CrossAttentionBlock):
    """Unpool latents [.., m, D] into one row per query in ``queries`` [.., n, D]."""
    return block(z, queries=queries)


def transformer_block(x, block: TransformerBlock, mask=None):
    return block(x, key_mask=mask)


def embed(token_ids, token_counts, emb: CountEmbedding):
    return emb(token_ids, token_counts)
