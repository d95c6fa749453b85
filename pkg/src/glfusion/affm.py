"""Attention-based fusion of the global and patch embeddings.

Tokens are the 128-d global embedding followed by the patch embeddings in
selection order. A stack of multi-head self-attention layers (queries, keys
and values are all the token matrix) mixes them; the final token matrix is
flattened and a single linear layer produces the fake logit.

No positional encoding is used, so the stack is permutation-equivariant in
its tokens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from .core import EMBEDDING_DIM, Embedding

POOLINGS = ("flatten", "mean", "global")


@dataclass(frozen=True)
class FusionConfig:
    d_model: int = EMBEDDING_DIM
    num_heads: int = 4
    num_layers: int = 3
    n_tokens: int = 7
    pooling: str = "flatten"
    residual_norm: bool = False
    # "head": scale logits by sqrt(d_model / num_heads); "model": by sqrt(d_model)
    scale_dim: str = "head"

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ValueError("num_heads must divide d_model")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}")
        if self.scale_dim not in ("head", "model"):
            raise ValueError("scale_dim must be 'head' or 'model'")
        if self.num_layers < 1 or self.n_tokens < 1:
            raise ValueError("num_layers and n_tokens must be >= 1")


def stable_softmax(logits: torch.Tensor) -> torch.Tensor:
    z = logits - logits.amax(dim=-1, keepdim=True)
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def attention_head(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    b_q: Optional[torch.Tensor] = None,
    b_k: Optional[torch.Tensor] = None,
    b_v: Optional[torch.Tensor] = None,
    scale_dim: Optional[int] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """One scaled dot-product head.

    ``q, k, v`` are (..., T, d_model); the projections ``w_*`` are
    (d_head, d_model) in ``nn.Linear`` layout. Returns the head output
    (..., T, d_head) and the row-stochastic attention weights (..., T, T).
    ``scale_dim`` defaults to d_head.
    """
    for name, t in (("q", q), ("k", k), ("v", v)):
        if not torch.isfinite(t).all():
            raise FloatingPointError(f"non-finite values in {name}")
    pq = q @ w_q.T
    pk = k @ w_k.T
    pv = v @ w_v.T
    if b_q is not None:
        pq = pq + b_q
    if b_k is not None:
        pk = pk + b_k
    if b_v is not None:
        pv = pv + b_v
    d = scale_dim if scale_dim is not None else w_k.shape[0]
    weights = stable_softmax(pq @ pk.transpose(-1, -2) / math.sqrt(d))
    return weights @ pv, weights


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d_model: int = EMBEDDING_DIM, num_heads: int = 4, scale_dim: str = "head"):
        super().__init__()
        self.d_model = d_model
        self.num_heads = num_heads
        self.d_head = d_model // num_heads
        self.scale = math.sqrt(self.d_head if scale_dim == "head" else d_model)
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def head_params(self, i: int) -> dict:
        """Slices of the fused projections that form head ``i``."""
        sl = slice(i * self.d_head, (i + 1) * self.d_head)
        return {
            "w_q": self.q_proj.weight[sl], "b_q": self.q_proj.bias[sl],
            "w_k": self.k_proj.weight[sl], "b_k": self.k_proj.bias[sl],
            "w_v": self.v_proj.weight[sl], "b_v": self.v_proj.bias[sl],
        }

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        if x.shape[-1] != self.d_model:
            raise ValueError(f"token width {x.shape[-1]} != d_model {self.d_model}")
        *lead, T, D = x.shape

        def split(t):
            return t.reshape(*lead, T, self.num_heads, self.d_head).transpose(-3, -2)

        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        weights = stable_softmax(q @ k.transpose(-1, -2) / self.scale)
        heads = (weights @ v).transpose(-3, -2).reshape(*lead, T, D)
        out = self.out_proj(heads)
        return (out, weights) if return_weights else out


class FusionStack(nn.Module):
    """Self-attention layers followed by a linear classifier producing one logit."""

    def __init__(self, cfg: FusionConfig = FusionConfig()):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(
            MultiHeadSelfAttention(cfg.d_model, cfg.num_heads, cfg.scale_dim) for _ in range(cfg.num_layers)
        )
        self.norms = nn.ModuleList(nn.LayerNorm(cfg.d_model) for _ in range(cfg.num_layers)) if cfg.residual_norm else None
        width = cfg.n_tokens * cfg.d_model if cfg.pooling == "flatten" else cfg.d_model
        self.classifier = nn.Linear(width, 1)

    def encode(self, tokens: torch.Tensor) -> torch.Tensor:
        """Token matrix after all attention layers, (B, T, d_model)."""
        if tokens.ndim != 3 or tokens.shape[1:] != (self.cfg.n_tokens, self.cfg.d_model):
            raise ValueError(
                f"expected tokens of shape (B, {self.cfg.n_tokens}, {self.cfg.d_model}), got {tuple(tokens.shape)}"
            )
        x = tokens
        for i, layer in enumerate(self.layers):
            if self.norms is not None:
                x = self.norms[i](x + layer(x))
            else:
                x = layer(x)
        return x

    def pool(self, x: torch.Tensor) -> torch.Tensor:
        if self.cfg.pooling == "flatten":
            return x.flatten(1)
        if self.cfg.pooling == "mean":
            return x.mean(dim=1)
        return x[:, 0]

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Fake logits, shape (B,)."""
        return self.classifier(self.pool(self.encode(tokens))).squeeze(-1)


def _token_matrix(embeddings: Union[Sequence[Embedding], np.ndarray, torch.Tensor]) -> torch.Tensor:
    if isinstance(embeddings, torch.Tensor):
        return embeddings
    if isinstance(embeddings, np.ndarray):
        return torch.from_numpy(embeddings)
    embeddings = list(embeddings)
    if embeddings and embeddings[0].kind != "global":
        raise ValueError("the first embedding must be the global one")
    return torch.from_numpy(np.stack([e.data for e in embeddings]))


@torch.no_grad()
def fuse_and_classify(embeddings, stack: FusionStack) -> float:
    """Fake probability for one ordered embedding set (global first)."""
    tokens = _token_matrix(embeddings)
    if tokens.ndim != 2 or tokens.shape[0] != stack.cfg.n_tokens:
        raise ValueError(f"expected {stack.cfg.n_tokens} embeddings, got shape {tuple(tokens.shape)}")
    param = next(stack.parameters())
    logit = stack(tokens.to(param.dtype)[None])
    return float(torch.sigmoid(logit)[0])
