"""Shared network blocks: causal transformer decoder, MLP, time features.

Everything runs in float64 on CPU. Initialization is driven by an explicit
torch.Generator so models are bit-reproducible from their seed.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def init_normal_(gen: torch.Generator, *tensors: torch.Tensor, std: float = 0.02) -> None:
    for t in tensors:
        with torch.no_grad():
            t.copy_(torch.randn(t.shape, generator=gen, dtype=t.dtype) * std)


def init_linear_(gen: torch.Generator, lin: nn.Linear, std: float = 0.02) -> None:
    init_normal_(gen, lin.weight, std=std)
    if lin.bias is not None:
        with torch.no_grad():
            lin.bias.zero_()


class Mlp(nn.Module):
    """Two-layer perceptron with GELU. Smooth everywhere, which keeps
    finite-difference gradient probes honest.

    in_gain rescales the input before fc1. With a single shared SGD learning
    rate this acts as a per-module rate multiplier of in_gain^2, which lets a
    regression head keep up with the cross-entropy head. out_std overrides
    the fc2 init; near zero makes an untrained head output ~0.
    """

    def __init__(self, d_in: int, d_hidden: int, d_out: int, gen: torch.Generator,
                 in_gain: float = 1.0, out_std: float = 0.02):
        super().__init__()
        self.in_gain = in_gain
        self.fc1 = nn.Linear(d_in, d_hidden, dtype=torch.float64)
        self.fc2 = nn.Linear(d_hidden, d_out, dtype=torch.float64)
        init_linear_(gen, self.fc1)
        init_linear_(gen, self.fc2, std=out_std)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x * self.in_gain)))


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, max_len: int, gen: torch.Generator):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model, dtype=torch.float64)
        self.proj = nn.Linear(d_model, d_model, dtype=torch.float64)
        # fan-in scale for queries and keys so attention logits start with
        # usable structure; values keep the small residual-branch init
        init_normal_(gen, self.qkv.weight[: 2 * d_model],
                     std=1.0 / math.sqrt(d_model))
        init_normal_(gen, self.qkv.weight[2 * d_model :])
        with torch.no_grad():
            self.qkv.bias.zero_()
        init_linear_(gen, self.proj)
        mask = torch.triu(torch.ones(max_len, max_len, dtype=torch.bool), diagonal=1)
        self.register_buffer("causal_mask", mask, persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, l, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=-1)
        q = q.view(b, l, self.n_heads, self.d_head).transpose(1, 2)
        k = k.view(b, l, self.n_heads, self.d_head).transpose(1, 2)
        v = v.view(b, l, self.n_heads, self.d_head).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.d_head)
        att = att.masked_fill(self.causal_mask[:l, :l], float("-inf"))
        att = att.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, l, d)
        return self.proj(out)


class DecoderBlock(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, d_model: int, n_heads: int, max_len: int, gen: torch.Generator):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model, dtype=torch.float64)
        self.attn = CausalSelfAttention(d_model, n_heads, max_len, gen)
        self.ln2 = nn.LayerNorm(d_model, dtype=torch.float64)
        self.mlp = Mlp(d_model, 4 * d_model, d_model, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        x = x + self.mlp(self.ln2(x))
        return x


class Decoder(nn.Module):
    """Stack of causal blocks over caller-provided token rows.

    Adds learned positional embeddings, applies the blocks, and finishes
    with a LayerNorm. Token embedding lives with the caller because the
    two users of this class feed it very different rows (substituted
    instruction sequences vs. a fixed three-token layout).
    """

    def __init__(self, d_model: int, n_heads: int, n_layers: int, max_len: int,
                 gen: torch.Generator):
        super().__init__()
        self.max_len = max_len
        self.pos = nn.Parameter(torch.zeros(max_len, d_model, dtype=torch.float64))
        init_normal_(gen, self.pos)
        self.blocks = nn.ModuleList(
            DecoderBlock(d_model, n_heads, max_len, gen) for _ in range(n_layers)
        )
        self.ln_f = nn.LayerNorm(d_model, dtype=torch.float64)

    def forward(self, rows: torch.Tensor) -> torch.Tensor:
        b, l, d = rows.shape
        if l > self.max_len:
            raise ValueError(f"sequence length {l} exceeds max_len {self.max_len}")
        x = rows + self.pos[:l]
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)


def sinusoidal_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos timestep features, shape (..., dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    )
    args = t.to(torch.float64)[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
