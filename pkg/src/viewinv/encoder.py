"""Configurable 3D-convolutional video encoder with a designated split point.

The encoder is a stack of ``conv -> batchnorm -> relu -> maxpool`` blocks
followed by global average pooling and a two-layer projection head emitting
L2-normalized embeddings. ``split_index`` partitions the stack into the two
partial encoders the training pipeline composes: ``forward_first`` runs
blocks ``[0, split)`` and ``forward_second`` the rest plus the head.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

DEFAULT_CHANNELS = (8, 16, 32, 48, 64)
DEFAULT_POOLS = ((2, 2, 2), (2, 2, 2), (1, 1, 1), (2, 2, 2), (1, 1, 1))
DEFAULT_KERNELS = ((1, 3, 3), (3, 3, 3), (3, 3, 3), (3, 3, 3), (3, 3, 3))


@dataclass
class EncoderConfig:
    num_blocks: int = 5
    split_index: int = 3
    channels_per_block: tuple[int, ...] = DEFAULT_CHANNELS
    embedding_dim: int = 128
    input_shape: tuple[int, int, int, int] = (16, 32, 32, 3)  # (T, H, W, C)
    pools: tuple[tuple[int, int, int], ...] = DEFAULT_POOLS
    kernels: tuple[tuple[int, int, int], ...] = DEFAULT_KERNELS

    def __post_init__(self):
        if not (1 <= self.split_index < self.num_blocks):
            raise ValueError(
                f"split_index must satisfy 1 <= s < num_blocks, got {self.split_index}"
            )
        if self.embedding_dim < 8:
            raise ValueError(f"embedding_dim must be >= 8, got {self.embedding_dim}")
        for name, seq in (
            ("channels_per_block", self.channels_per_block),
            ("pools", self.pools),
            ("kernels", self.kernels),
        ):
            if len(seq) != self.num_blocks:
                raise ValueError(f"{name} must list one entry per block")

    def shape_after(self, block_count: int) -> tuple[int, int, int, int]:
        """Feature shape (c, t, m, n) after the first ``block_count`` blocks."""
        t, h, w, _ = self.input_shape
        for p in self.pools[:block_count]:
            t, h, w = t // p[0], h // p[1], w // p[2]
        c = self.channels_per_block[block_count - 1] if block_count else self.input_shape[3]
        return c, t, h, w

    @property
    def split_shape(self) -> tuple[int, int, int, int]:
        return self.shape_after(self.split_index)


def _block(in_c: int, out_c: int, kernel, pool) -> nn.Sequential:
    pad = tuple(k // 2 for k in kernel)
    layers = [nn.Conv3d(in_c, out_c, kernel, padding=pad), nn.BatchNorm3d(out_c), nn.ReLU(inplace=True)]
    if tuple(pool) != (1, 1, 1):
        layers.append(nn.MaxPool3d(tuple(pool)))
    return nn.Sequential(*layers)


class VideoEncoder(nn.Module):
    """f = f2 . f1 over a block stack, with an L2-normalized projection head."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        blocks = []
        in_c = config.input_shape[3]
        for i in range(config.num_blocks):
            blocks.append(_block(in_c, config.channels_per_block[i], config.kernels[i], config.pools[i]))
            in_c = config.channels_per_block[i]
        self.blocks = nn.ModuleList(blocks)
        last = config.channels_per_block[-1]
        self.head = nn.Sequential(
            nn.Linear(last, last), nn.ReLU(inplace=True), nn.Linear(last, config.embedding_dim)
        )

    def forward_first(self, clip: Tensor) -> Tensor:
        """Blocks ``[0, split)``: ``(B, C, T, H, W) -> (B, c, t, m, n)``."""
        expected = (self.config.input_shape[3],) + tuple(self.config.input_shape[:3])
        if tuple(clip.shape[-4:]) != expected:
            raise ValueError(
                f"clip shape {tuple(clip.shape)} does not match configured input "
                f"(C, T, H, W) = {expected}"
            )
        x = clip if clip.dim() == 5 else clip.unsqueeze(0)
        for block in self.blocks[: self.config.split_index]:
            x = block(x)
        return x if clip.dim() == 5 else x.squeeze(0)

    def forward_second(self, feat: Tensor) -> Tensor:
        """Remaining blocks + pool + head: ``(B, c, t, m, n) -> (B, d)`` unit-norm."""
        expected = self.config.split_shape
        if tuple(feat.shape[-4:]) != expected:
            raise ValueError(
                f"feature shape {tuple(feat.shape)} does not match split contract {expected}"
            )
        x = feat if feat.dim() == 5 else feat.unsqueeze(0)
        for block in self.blocks[self.config.split_index :]:
            x = block(x)
        x = x.mean(dim=(2, 3, 4))
        x = self.head(x)
        x = F.normalize(x, dim=-1)
        return x if feat.dim() == 5 else x.squeeze(0)

    def forward(self, clip: Tensor) -> Tensor:
        return self.forward_second(self.forward_first(clip))


def clone_encoder(source: VideoEncoder) -> VideoEncoder:
    """Independent copy with identical parameters (generator-branch init)."""
    branch = VideoEncoder(copy.deepcopy(source.config))
    branch.load_state_dict(source.state_dict())
    return branch


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def clip_to_tensor(frames, dtype=torch.float32) -> Tensor:
    """(T, H, W, C) array -> (C, T, H, W) tensor."""
    t = torch.as_tensor(frames, dtype=dtype)
    return t.permute(3, 0, 1, 2).contiguous()
