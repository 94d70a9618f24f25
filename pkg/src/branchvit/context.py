"""Transformer context encoder.

The feature map is zero-padded to a multiple of the patch size, split
into non-overlapping patches, linearly embedded with an additive
positional table, and passed through a stack of pre-norm residual
blocks (multi-head self-attention, then a two-layer MLP).

Tensor conventions: feature maps are channels-first (B, z, r, r);
patch and embedding sequences are (B, N_p, width).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class ContextConfig:
    patch_size: int = 4
    embed_dim: int = 512
    depth: int = 12
    num_heads: int = 16
    mlp_ratio: int = 4
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"num_heads {self.num_heads} must divide embed_dim {self.embed_dim}"
            )


def padded_extent(extent: int, patch_size: int) -> int:
    """Smallest multiple of ``patch_size`` that covers ``extent``."""
    return ((extent + patch_size - 1) // patch_size) * patch_size


def num_patches(extent: int, patch_size: int) -> int:
    side = padded_extent(extent, patch_size) // patch_size
    return side * side


def patchify(fmap: torch.Tensor, patch_size: int, pad_mode: str = "zero") -> torch.Tensor:
    """Split a feature map into flattened non-overlapping patches.

    Accepts (z, r, r) or (B, z, r, r); returns (N_p, z*P*P) or
    (B, N_p, z*P*P). The map is zero-padded on the bottom/right edges up
    to the next multiple of P. Patches are ordered row-major over the
    patch grid; within a patch, values are flattened row-major over
    (row, column, channel), channel fastest.
    """
    if patch_size < 1:
        raise ConfigError(f"patch_size must be >= 1, got {patch_size}")
    if pad_mode != "zero":
        raise ConfigError(f"unsupported pad_mode {pad_mode!r}")
    single = fmap.dim() == 3
    if single:
        fmap = fmap.unsqueeze(0)
    if fmap.dim() != 4 or fmap.shape[-1] != fmap.shape[-2]:
        raise DimensionError(f"expected a square (B, z, r, r) map, got {tuple(fmap.shape)}")
    b, z, r, _ = fmap.shape
    target = padded_extent(r, patch_size)
    if target != r:
        fmap = F.pad(fmap, (0, target - r, 0, target - r))  # pad right, bottom
    side = target // patch_size
    x = fmap.permute(0, 2, 3, 1)  # (B, H, W, z)
    x = x.reshape(b, side, patch_size, side, patch_size, z)
    x = x.permute(0, 1, 3, 2, 4, 5)  # (B, side, side, P, P, z)
    patches = x.reshape(b, side * side, patch_size * patch_size * z)
    return patches.squeeze(0) if single else patches


class PatchEmbedding(nn.Module):
    """Linear patch projection plus a learnable positional table."""

    def __init__(
        self,
        patch_dim: int,
        n_patches: int,
        embed_dim: int,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.projection = nn.Linear(patch_dim, embed_dim, bias=False)
        self.position = nn.Parameter(torch.empty(n_patches, embed_dim))
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        bound = 1.0 / math.sqrt(self.projection.in_features)
        with torch.no_grad():
            self.projection.weight.uniform_(-bound, bound, generator=generator)
            self.position.normal_(0.0, 0.02, generator=generator)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        if patches.shape[-1] != self.projection.in_features:
            raise DimensionError(
                f"patch width {patches.shape[-1]} does not match projection "
                f"input {self.projection.in_features}"
            )
        if patches.shape[-2] != self.position.shape[0]:
            raise DimensionError(
                f"got {patches.shape[-2]} patches, positional table has "
                f"{self.position.shape[0]} rows"
            )
        return self.projection(patches) + self.position


def embed_patches(patches: torch.Tensor, embedding: PatchEmbedding) -> torch.Tensor:
    """embeddings[p] = patches[p] @ P_proj + position[p]."""
    return embedding(patches)


def _reinit_linear(linear: nn.Linear, generator: torch.Generator | None) -> None:
    """Fan-in uniform init (the nn.Linear default) from an explicit generator."""
    bound = 1.0 / math.sqrt(linear.in_features)
    with torch.no_grad():
        linear.weight.uniform_(-bound, bound, generator=generator)
        if linear.bias is not None:
            linear.bias.uniform_(-bound, bound, generator=generator)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, embed_dim: int, num_heads: int):
        super().__init__()
        if embed_dim % num_heads != 0:
            raise ConfigError(f"num_heads {num_heads} must divide embed_dim {embed_dim}")
        self.num_heads = num_heads
        self.head_dim = embed_dim // num_heads
        self.q_proj = nn.Linear(embed_dim, embed_dim)
        self.k_proj = nn.Linear(embed_dim, embed_dim)
        self.v_proj = nn.Linear(embed_dim, embed_dim)
        self.out_proj = nn.Linear(embed_dim, embed_dim)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        for linear in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            _reinit_linear(linear, generator)

    def forward(self, x: torch.Tensor, return_attn: bool = False):
        b, n, d = x.shape

        def split(t):
            return t.reshape(b, n, self.num_heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)  # (B, h, N, N)
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        out = self.out_proj(out)
        if return_attn:
            return out, attn
        return out


class TransformerBlock(nn.Module):
    """Pre-norm residual block: x + MHSA(Norm(x)), then x + MLP(Norm(x))."""

    def __init__(self, embed_dim: int, num_heads: int, mlp_ratio: int = 4, ln_eps: float = 1e-6):
        super().__init__()
        self.norm1 = nn.LayerNorm(embed_dim, eps=ln_eps)
        self.attn = MultiHeadSelfAttention(embed_dim, num_heads)
        self.norm2 = nn.LayerNorm(embed_dim, eps=ln_eps)
        hidden = mlp_ratio * embed_dim
        self.mlp = nn.Sequential(nn.Linear(embed_dim, hidden), nn.ReLU(), nn.Linear(hidden, embed_dim))

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        self.attn.reset_parameters(generator)
        _reinit_linear(self.mlp[0], generator)
        _reinit_linear(self.mlp[2], generator)
        for norm in (self.norm1, self.norm2):
            with torch.no_grad():
                norm.weight.fill_(1.0)
                norm.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Attention rows for this block's input, (B, heads, N, N)."""
        _, attn = self.attn(self.norm1(x), return_attn=True)
        return attn


def transformer_block(seq: torch.Tensor, block: TransformerBlock) -> torch.Tensor:
    single = seq.dim() == 2
    if single:
        seq = seq.unsqueeze(0)
    out = block(seq)
    return out.squeeze(0) if single else out


class ContextEncoder(nn.Module):
    """patchify -> embed -> depth x TransformerBlock."""

    def __init__(
        self,
        config: ContextConfig,
        in_extent: int,
        in_channels: int,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.config = config
        self.in_extent = in_extent
        self.n_patches = num_patches(in_extent, config.patch_size)
        patch_dim = in_channels * config.patch_size**2
        self.embedding = PatchEmbedding(patch_dim, self.n_patches, config.embed_dim, generator)
        self.blocks = nn.ModuleList(
            TransformerBlock(config.embed_dim, config.num_heads, config.mlp_ratio, config.ln_eps)
            for _ in range(config.depth)
        )
        for block in self.blocks:
            block.reset_parameters(generator)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        """(B, z, r, r) -> (B, N_p, embed_dim)."""
        x = patchify(fmap, self.config.patch_size)
        x = self.embedding(x)
        for block in self.blocks:
            x = block(x)
        return x


def encode_context(fmap: torch.Tensor, encoder: ContextEncoder) -> torch.Tensor:
    single = fmap.dim() == 3
    if single:
        fmap = fmap.unsqueeze(0)
    out = encoder(fmap)
    return out.squeeze(0) if single else out
