"""Viewpoint generator: lift per-slice features to a 3D world grid, apply a
learned rigid transform, and re-project through a learned per-video camera.

Per temporal slice of the input feature map the pipeline is::

    coords   = coord_head(slice)                    # (3, m, n) in grid range
    R, t     = transform_head(slice)                # one rigid move per slice
    p_w      = R^T (coords - pivot) + R^T t + pivot # rotate about grid center
    grid     = splat(concat[slice, coords], p_w)    # (c+3, d_z, m, n)
    world    = grid.sum(depth)                      # stored world slice
    out      = project(slice, (x_w, y_w, z_w / z0), K)

The rigid move pivots about the grid center at the anchor depth ``z0`` so a
zero-initialized transform head starts at the exact identity and learned
rotations swing content around the scene rather than the grid corner. The
re-projection divides by the depth coordinate normalized at ``z0``: at the
identity start every point sits on the anchor plane (third homogeneous
coordinate exactly 1), and as depth estimates move off the plane they produce
real perspective parallax. The per-video camera K is estimated once from the
pooled feature map.

The world autoencoder compresses a video's (temporally pooled, flattened)
world representation to a ``code_dim`` vector for Queue2, with an MSE
reconstruction loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .geometry import (
    camera_matrix,
    project_to_2d,
    range_anchor_logits,
    rigid_world_transform,
    splat_to_world,
    squash_to_range,
)

ANCHOR_LATTICE = "lattice"
ANCHOR_NONE = "none"


@dataclass
class GeneratorConfig:
    feature_channels: int
    spatial: tuple[int, int]  # (m, n)
    world_depth: int = 8
    code_dim: int = 128
    coord_hidden: int = 32
    transform_hidden: int = 64
    camera_hidden: int = 64
    coord_anchor: str = ANCHOR_LATTICE

    def __post_init__(self):
        if self.coord_anchor not in (ANCHOR_LATTICE, ANCHOR_NONE):
            raise ValueError(f"unknown coord_anchor {self.coord_anchor!r}")
        if self.world_depth <= 1:
            raise ValueError("world_depth must be > 1")

    @property
    def coord_extents(self) -> tuple[int, int, int]:
        """Per coordinate channel (x, y, z): (m, n, d_z)."""
        return (self.spatial[0], self.spatial[1], self.world_depth)

    @property
    def grid_extents(self) -> tuple[int, int, int]:
        """splat_to_world layout: (d_z, m_w, n_w)."""
        return (self.world_depth, self.spatial[0], self.spatial[1])

    @property
    def depth_anchor(self) -> float:
        """Mid-grid depth plane where lattice-anchored coordinates start;
        also normalizes the perspective division so the identity start
        projects with a unit homogeneous coordinate."""
        return (self.world_depth - 1) / 2.0

    @property
    def pivot(self) -> tuple[float, float, float]:
        """Rotation pivot: grid center at the anchor depth."""
        return ((self.spatial[0] - 1) / 2.0, (self.spatial[1] - 1) / 2.0, self.depth_anchor)

    @property
    def flat_world_dim(self) -> int:
        return (self.feature_channels + 3) * self.spatial[0] * self.spatial[1]


def _zero_init(layer: nn.Module) -> None:
    nn.init.zeros_(layer.weight)
    nn.init.zeros_(layer.bias)


class CoordHead(nn.Module):
    """Per-slice conv net estimating sigmoid-squashed 3D coordinates.

    With the lattice anchor the zero-initialized head starts each pixel at
    its own (row, col) position at unit depth, so the whole generator begins
    at the identity viewpoint; without it the start is the range midpoint.
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.extents = cfg.coord_extents
        self.conv1 = nn.Conv2d(cfg.feature_channels, cfg.coord_hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(cfg.coord_hidden, 3, 3, padding=1)
        _zero_init(self.conv2)
        m, n = cfg.spatial
        if cfg.coord_anchor == ANCHOR_LATTICE:
            xs = torch.arange(m, dtype=torch.float32)[:, None].expand(m, n)
            ys = torch.arange(n, dtype=torch.float32)[None, :].expand(m, n)
            zs = torch.full((m, n), cfg.depth_anchor)
            anchor = range_anchor_logits(self.extents, torch.stack([xs, ys, zs]))
        else:
            anchor = torch.zeros(3, m, n)
        self.register_buffer("anchor", anchor)

    def forward(self, slice_: Tensor) -> Tensor:
        raw = self.conv2(F.relu(self.conv1(slice_)))
        return squash_to_range(raw + self.anchor, self.extents)


class TransformHead(nn.Module):
    """Per-slice rigid transform (axis-angle, translation) from pooled features.

    The final layer is zero-initialized so every slice starts at the identity
    transform.
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.feature_channels, cfg.transform_hidden)
        self.fc2 = nn.Linear(cfg.transform_hidden, 6)
        _zero_init(self.fc2)

    def forward(self, slice_: Tensor) -> tuple[Tensor, Tensor]:
        pooled = slice_.mean(dim=(-2, -1))
        raw = self.fc2(F.relu(self.fc1(pooled)))
        return raw[..., :3], raw[..., 3:]


class CameraHead(nn.Module):
    """One camera matrix per video from the globally pooled feature map.

    Zero-initialized final layer: rotation 0, scales exp(0) = 1, offsets 0,
    i.e. the canonical camera K = I at the start of stage 2.
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.feature_channels, cfg.camera_hidden)
        self.fc2 = nn.Linear(cfg.camera_hidden, 7)
        _zero_init(self.fc2)

    def forward(self, feat: Tensor) -> Tensor:
        pooled = feat.mean(dim=(-3, -2, -1))
        raw = self.fc2(F.relu(self.fc1(pooled)))
        return camera_matrix(
            raw[..., 0:3],
            torch.exp(raw[..., 3]),
            torch.exp(raw[..., 4]),
            raw[..., 5],
            raw[..., 6],
        )


class WorldAutoencoder(nn.Module):
    """Two fully-connected maps squeezing the pooled world grid to code_dim."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.down = nn.Linear(cfg.flat_world_dim, cfg.code_dim)
        self.up = nn.Linear(cfg.code_dim, cfg.flat_world_dim)

    def forward(self, flat: Tensor) -> tuple[Tensor, Tensor]:
        z = self.down(flat)
        return z, self.up(z)


class ViewpointGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.coord_head = CoordHead(cfg)
        self.transform_head = TransformHead(cfg)
        self.camera_head = CameraHead(cfg)
        self.autoencoder = WorldAutoencoder(cfg)

    def _check_slice(self, slice_: Tensor) -> None:
        c, (m, n) = self.cfg.feature_channels, self.cfg.spatial
        if tuple(slice_.shape[-3:]) != (c, m, n):
            raise ValueError(
                f"slice shape {tuple(slice_.shape)} does not match generator input ({c}, {m}, {n})"
            )

    def estimate_coords(self, slice_: Tensor) -> Tensor:
        """(…, c, m, n) -> (…, 3, m, n) coordinates inside the world grid."""
        self._check_slice(slice_)
        return self.coord_head(slice_)

    def estimate_transforms(self, slice_: Tensor) -> tuple[Tensor, Tensor]:
        """(…, c, m, n) -> per-slice (axis_angle, translation)."""
        self._check_slice(slice_)
        return self.transform_head(slice_)

    def generate(self, feat: Tensor) -> tuple[Tensor, Tensor]:
        """Latent-viewpoint re-rendering of a spatio-temporal feature map.

        ``feat``: ``(B, c, t, m, n)`` (or unbatched ``(c, t, m, n)``).
        Returns ``(projected, world)`` where ``projected`` matches the input
        shape and ``world`` is the depth-reduced grid ``(B, c+3, t, m, n)``.
        """
        squeeze = feat.dim() == 4
        x = feat.unsqueeze(0) if squeeze else feat
        c, (m, n) = self.cfg.feature_channels, self.cfg.spatial
        if tuple(x.shape[-4:])[0] != c or tuple(x.shape[-2:]) != (m, n):
            raise ValueError(
                f"feature shape {tuple(feat.shape)} does not match generator input "
                f"({c}, t, {m}, {n})"
            )
        b, _, t = x.shape[0], x.shape[1], x.shape[2]
        slices = x.movedim(2, 1).reshape(b * t, c, m, n)

        coords = self.coord_head(slices)
        axis_angle, translation = self.transform_head(slices)
        pivot = coords.new_tensor(self.cfg.pivot)[None, :, None, None]
        world_points = rigid_world_transform(coords - pivot, axis_angle, translation) + pivot

        augmented = torch.cat([slices, coords], dim=1)
        grid = splat_to_world(augmented, world_points, self.cfg.grid_extents)
        world = grid.sum(dim=2)  # depth reduction preserves total mass

        k = self.camera_head(x)
        k_per_slice = k.repeat_interleave(t, dim=0)
        homogeneous = torch.cat(
            [world_points[:, :2], world_points[:, 2:] / self.cfg.depth_anchor], dim=1
        )
        projected = project_to_2d(slices, homogeneous, k_per_slice, (m, n))

        projected = projected.reshape(b, t, c, m, n).movedim(1, 2)
        world = world.reshape(b, t, c + 3, m, n).movedim(1, 2)
        if squeeze:
            projected, world = projected.squeeze(0), world.squeeze(0)
        return projected, world

    def compress_world(self, world: Tensor) -> tuple[Tensor, Tensor]:
        """Unit-norm world code and autoencoder reconstruction loss.

        ``world``: ``(B, c+3, t, m, n)`` (or unbatched). The code is the
        L2-normalized bottleneck of the temporally pooled, flattened grid.
        """
        squeeze = world.dim() == 4
        x = world.unsqueeze(0) if squeeze else world
        flat = x.mean(dim=2).flatten(1)
        z, recon = self.autoencoder(flat)
        code = F.normalize(z, dim=-1)
        recon_loss = F.mse_loss(recon, flat)
        if squeeze:
            code = code.squeeze(0)
        return code, recon_loss


def generator_for_encoder(encoder_config, **overrides) -> ViewpointGenerator:
    """Build a generator matching an encoder's split-point feature shape."""
    c, _, m, n = encoder_config.split_shape
    cfg = GeneratorConfig(feature_channels=c, spatial=(m, n), **overrides)
    return ViewpointGenerator(cfg)
