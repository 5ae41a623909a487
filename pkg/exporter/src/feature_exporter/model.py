"""Tiny vision transformer backbone with low-rank adapters.

The backbone is deliberately small (32x32 inputs, 8x8 patches, two
encoder blocks) so sequential fine-tuning runs in seconds on a CPU.
Adapters follow the additive low-rank scheme: every wrapped linear layer
computes W x + B A x with the base weight W frozen, A initialized from the
top-k right singular vectors of W, and B zero — so the adapted model
starts exactly equal to the base model.
"""

from __future__ import annotations

import warnings

import torch
from torch import nn

from .data import CHANNELS, IMG_SIZE

PATCH = 8
EMBED_DIM = 64
DEPTH = 2
HEADS = 4
MLP_RATIO = 2


class LoraLinear(nn.Module):
    """A frozen linear layer plus a trainable rank-k additive update."""

    def __init__(self, base: nn.Linear, rank: int):
        super().__init__()
        if rank < 1:
            raise ValueError("adapter rank must be >= 1")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        out_f, in_f = base.weight.shape
        rank = min(rank, min(out_f, in_f))
        try:
            # A = top-k right singular rows of the base weight, B = 0:
            # the update starts at zero but along the directions the layer
            # already responds to
            _, _, vh = torch.linalg.svd(base.weight.detach(),
                                        full_matrices=False)
            a_init = vh[:rank].clone()
        except Exception as exc:  # pragma: no cover - svd is reliable on cpu
            warnings.warn(f"SVD adapter init failed ({exc}); "
                          "falling back to random A with zero B")
            a_init = torch.randn(rank, in_f) / in_f**0.5
        self.lora_a = nn.Parameter(a_init)
        self.lora_b = nn.Parameter(torch.zeros(out_f, rank))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + (x @ self.lora_a.T) @ self.lora_b.T


class Block(nn.Module):
    def __init__(self):
        super().__init__()
        self.norm1 = nn.LayerNorm(EMBED_DIM)
        self.qkv = nn.Linear(EMBED_DIM, 3 * EMBED_DIM)
        self.proj = nn.Linear(EMBED_DIM, EMBED_DIM)
        self.norm2 = nn.LayerNorm(EMBED_DIM)
        self.fc1 = nn.Linear(EMBED_DIM, MLP_RATIO * EMBED_DIM)
        self.fc2 = nn.Linear(MLP_RATIO * EMBED_DIM, EMBED_DIM)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        qkv = self.qkv(self.norm1(x))
        q, k, v = qkv.reshape(b, t, 3, HEADS, -1).permute(2, 0, 3, 1, 4)
        attn = nn.functional.scaled_dot_product_attention(q, k, v)
        attn = attn.transpose(1, 2).reshape(b, t, EMBED_DIM)
        x = x + self.proj(attn)
        return x + self.fc2(nn.functional.gelu(self.fc1(self.norm2(x))))


class TinyViT(nn.Module):
    """Patch embedding, class token, DEPTH encoder blocks, normalized
    class-token output as the feature vector."""

    def __init__(self, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.patch = nn.Conv2d(CHANNELS, EMBED_DIM, PATCH, stride=PATCH)
        tokens = (IMG_SIZE // PATCH) ** 2
        self.cls = nn.Parameter(torch.zeros(1, 1, EMBED_DIM))
        self.pos = nn.Parameter(0.02 * torch.randn(1, tokens + 1, EMBED_DIM))
        self.blocks = nn.ModuleList(Block() for _ in range(DEPTH))
        self.norm = nn.LayerNorm(EMBED_DIM)

    @property
    def feature_dim(self) -> int:
        return EMBED_DIM

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.patch(images).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls.expand(x.shape[0], -1, -1), x], dim=1)
        x = x + self.pos
        for block in self.blocks:
            x = block(x)
        return self.norm(x[:, 0])


def attach_adapters(model: TinyViT, rank: int) -> TinyViT:
    """Freeze the backbone and wrap every block linear in an adapter."""
    for p in model.parameters():
        p.requires_grad_(False)
    for block in model.blocks:
        block.qkv = LoraLinear(block.qkv, rank)
        block.proj = LoraLinear(block.proj, rank)
        block.fc1 = LoraLinear(block.fc1, rank)
        block.fc2 = LoraLinear(block.fc2, rank)
    return model


def adapter_parameters(model: TinyViT):
    return [p for p in model.parameters() if p.requires_grad]
