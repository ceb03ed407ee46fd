"""Differentiable projective-geometry kernels.

Conventions used throughout:

* A point is a 3-vector ``(x, y, z)`` in world-grid units. ``x`` indexes the
  first spatial grid axis (extent ``m_w``), ``y`` the second (extent ``n_w``)
  and ``z`` the depth axis (extent ``d_z``).
* A world grid is stored as ``(C, d_z, m_w, n_w)``, i.e. ``grid[c, z, x, y]``.
* Per-pixel point fields are stored as ``(3, m, n)`` with the coordinate
  channel leading.

All functions accept arbitrary leading batch dimensions and preserve the
input dtype, so the same kernels run in float32 for training and float64 for
the numerical test suites. Everything is a pure function of its inputs and
differentiable with respect to every floating-point argument.
"""

from __future__ import annotations

import torch
from torch import Tensor

# Points whose third homogeneous coordinate is closer to zero than this
# contribute nothing to a projection (perspective division guard).
PERSPECTIVE_EPS = 1e-4

_CORNERS_3D = [(dx, dy, dz) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)]
_CORNERS_2D = [(dx, dy) for dx in (0, 1) for dy in (0, 1)]


def rotation_from_axis_angle(axis_angle: Tensor) -> Tensor:
    """Rodrigues rotation matrix from an axis-angle 3-vector.

    The rotation axis is ``v / |v|`` and the angle is ``|v|`` radians; the
    zero vector maps to the identity. Shape ``(..., 3) -> (..., 3, 3)``.
    Smooth everywhere (a Taylor expansion replaces the sinc terms near zero).
    """
    if axis_angle.shape[-1] != 3:
        raise ValueError(f"axis_angle must have trailing dim 3, got {tuple(axis_angle.shape)}")
    v = axis_angle
    theta2 = (v * v).sum(-1)
    small = theta2 < 1e-12
    # Evaluate sin(t)/t and (1-cos(t))/t^2 with the singular branch masked out
    # so the untaken sqrt cannot poison gradients with NaNs.
    theta2_safe = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(theta2_safe)
    a_exact = torch.sin(theta) / theta
    b_exact = (1.0 - torch.cos(theta)) / theta2_safe
    a_taylor = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
    b_taylor = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
    a = torch.where(small, a_taylor, a_exact)
    b = torch.where(small, b_taylor, b_exact)

    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = torch.zeros_like(x)
    k = torch.stack(
        [
            torch.stack([zero, -z, y], dim=-1),
            torch.stack([z, zero, -x], dim=-1),
            torch.stack([-y, x, zero], dim=-1),
        ],
        dim=-2,
    )
    eye = torch.eye(3, dtype=v.dtype, device=v.device).expand(k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def rigid_world_transform(points: Tensor, axis_angle: Tensor, translation: Tensor) -> Tensor:
    """Map camera-space points into world coordinates: ``p_w = R^T p + R^T t``.

    ``points`` is ``(..., 3, m, n)``; ``axis_angle`` and ``translation`` are
    ``(..., 3)`` with matching batch shape. Outputs are not clamped to any
    grid range; downstream splatting drops out-of-grid mass.
    """
    if points.shape[-3] != 3:
        raise ValueError(f"points must be (..., 3, m, n), got {tuple(points.shape)}")
    r = rotation_from_axis_angle(axis_angle)
    # (R^T p)_i = sum_j R[j, i] p_j
    rotated = torch.einsum("...ji,...jmn->...imn", r, points)
    shift = torch.einsum("...ji,...j->...i", r, translation)
    return rotated + shift[..., :, None, None]


def _flatten_lead(t: Tensor, keep: int) -> tuple[Tensor, tuple[int, ...]]:
    lead = t.shape[: t.dim() - keep]
    return t.reshape(-1, *t.shape[t.dim() - keep :]), tuple(lead)


def splat_to_world(values: Tensor, points: Tensor, extents: tuple[int, int, int]) -> Tensor:
    """Trilinearly splat per-pixel features into a 3D grid.

    Grid cell ``(x, y, z)`` accumulates ``max(0, 1-|x-p_x|) * max(0, 1-|y-p_y|)
    * max(0, 1-|z-p_z|) * values[:, i, j]`` over all source pixels, so each
    point spreads its mass over (at most) its 8 surrounding cells. Points in
    the open interval ``(-1, extent)`` on every axis contribute; anything
    farther contributes exactly zero.

    ``values``: ``(..., C, m, n)``; ``points``: ``(..., 3, m, n)``;
    ``extents``: ``(d_z, m_w, n_w)``. Returns ``(..., C, d_z, m_w, n_w)``.
    """
    dz, mw, nw = (int(e) for e in extents)
    if min(dz, mw, nw) <= 0:
        raise ValueError(f"extents must be positive, got {extents}")
    if points.shape[-3] != 3 or points.shape[-2:] != values.shape[-2:]:
        raise ValueError(
            f"shape mismatch: values {tuple(values.shape)} vs points {tuple(points.shape)}"
        )
    vals, lead = _flatten_lead(values, 3)  # (B, C, m, n)
    pts, _ = _flatten_lead(points, 3)  # (B, 3, m, n)
    b, c = vals.shape[0], vals.shape[1]
    p = vals.shape[2] * vals.shape[3]
    vals = vals.reshape(b, c, p)
    pts = pts.reshape(b, 3, p)

    bounds = pts.new_tensor([mw, nw, dz])  # per coordinate channel (x, y, z)
    pts = torch.clamp(pts, min=-1.5, max=None)
    pts = torch.minimum(pts, (bounds + 0.5)[None, :, None].expand_as(pts))

    lo = torch.floor(pts)
    frac = pts - lo
    lo = lo.long()

    ncell = dz * mw * nw
    out = vals.new_zeros(c, b * ncell)
    flat_vals = vals.permute(1, 0, 2).reshape(c, b * p)
    batch_offset = (torch.arange(b, device=vals.device) * ncell)[:, None].expand(b, p)

    for dx, dy, dzc in _CORNERS_3D:
        ix = lo[:, 0] + dx
        iy = lo[:, 1] + dy
        iz = lo[:, 2] + dzc
        w = (
            (frac[:, 0] if dx else 1.0 - frac[:, 0])
            * (frac[:, 1] if dy else 1.0 - frac[:, 1])
            * (frac[:, 2] if dzc else 1.0 - frac[:, 2])
        )
        valid = (
            (ix >= 0) & (ix < mw) & (iy >= 0) & (iy < nw) & (iz >= 0) & (iz < dz)
        ).reshape(-1)
        lin = ((iz * mw + ix) * nw + iy + batch_offset).reshape(-1)
        contrib = flat_vals * w.reshape(1, -1)
        out = out.index_add(1, lin[valid], contrib[:, valid])

    out = out.reshape(c, b, dz, mw, nw).movedim(0, 1)
    return out.reshape(*lead, c, dz, mw, nw)


def camera_matrix(
    rot_axis_angle: Tensor, s_x: Tensor, s_y: Tensor, x_0: Tensor, y_0: Tensor
) -> Tensor:
    """Assemble ``K = R(rot) @ [[s_x, 0, x_0], [0, s_y, y_0], [0, 0, 1]]``.

    All arguments broadcast over leading batch dims; scale/offset arguments
    are scalars per batch element. Returns ``(..., 3, 3)``.
    """
    r = rotation_from_axis_angle(rot_axis_angle)
    s_x, s_y, x_0, y_0 = torch.broadcast_tensors(s_x, s_y, x_0, y_0)
    zero = torch.zeros_like(s_x)
    one = torch.ones_like(s_x)
    s = torch.stack(
        [
            torch.stack([s_x, zero, x_0], dim=-1),
            torch.stack([zero, s_y, y_0], dim=-1),
            torch.stack([zero, zero, one], dim=-1),
        ],
        dim=-2,
    )
    return r @ s


def project_to_2d(
    values: Tensor,
    points: Tensor,
    k_matrix: Tensor,
    out_shape: tuple[int, int],
    eps: float = PERSPECTIVE_EPS,
) -> Tensor:
    """Project points through ``K`` and bilinearly splat features at them.

    Each point is mapped to ``q = K p``; after perspective division by the
    third homogeneous coordinate (points with ``|q_2| < eps`` contribute
    nothing) the channels of ``values`` are splatted at ``(q_0/q_2, q_1/q_2)``
    with ``max(0, 1-|.|)`` weights into an ``out_shape`` image.

    ``values``: ``(..., C, m, n)``; ``points``: ``(..., 3, m, n)``;
    ``k_matrix``: ``(..., 3, 3)``. Returns ``(..., C, M, N)``.
    """
    mo, no = (int(s) for s in out_shape)
    if mo <= 0 or no <= 0:
        raise ValueError(f"out_shape must be positive, got {out_shape}")
    if points.shape[-3] != 3 or points.shape[-2:] != values.shape[-2:]:
        raise ValueError(
            f"shape mismatch: values {tuple(values.shape)} vs points {tuple(points.shape)}"
        )
    vals, lead = _flatten_lead(values, 3)
    pts, _ = _flatten_lead(points, 3)
    km = k_matrix.reshape(-1, 3, 3)
    if km.shape[0] == 1 and vals.shape[0] > 1:
        km = km.expand(vals.shape[0], 3, 3)
    if km.shape[0] != vals.shape[0]:
        raise ValueError("k_matrix batch shape does not match values")

    b, c = vals.shape[0], vals.shape[1]
    p = vals.shape[2] * vals.shape[3]
    vals = vals.reshape(b, c, p)
    pts = pts.reshape(b, 3, p)

    q = torch.einsum("bij,bjp->bip", km, pts)
    wcoord = q[:, 2]
    safe = wcoord.abs() >= eps
    denom = torch.where(safe, wcoord, torch.ones_like(wcoord))
    u = q[:, 0] / denom
    v = q[:, 1] / denom

    span = pts.new_tensor([mo, no], dtype=vals.dtype)
    uv = torch.stack([u, v], dim=1)
    uv = torch.clamp(uv, min=-1.5)
    uv = torch.minimum(uv, (span + 0.5)[None, :, None].expand_as(uv))

    lo = torch.floor(uv)
    frac = uv - lo
    lo = lo.long()

    ncell = mo * no
    out = vals.new_zeros(c, b * ncell)
    flat_vals = vals.permute(1, 0, 2).reshape(c, b * p)
    batch_offset = (torch.arange(b, device=vals.device) * ncell)[:, None].expand(b, p)

    for dx, dy in _CORNERS_2D:
        ix = lo[:, 0] + dx
        iy = lo[:, 1] + dy
        w = (frac[:, 0] if dx else 1.0 - frac[:, 0]) * (
            frac[:, 1] if dy else 1.0 - frac[:, 1]
        )
        valid = ((ix >= 0) & (ix < mo) & (iy >= 0) & (iy < no) & safe).reshape(-1)
        lin = (ix * no + iy + batch_offset).reshape(-1)
        contrib = flat_vals * w.reshape(1, -1)
        out = out.index_add(1, lin[valid], contrib[:, valid])

    out = out.reshape(c, b, mo, no).movedim(0, 1)
    return out.reshape(*lead, c, mo, no)


def squash_to_range(raw: Tensor, extents: tuple[int, ...], dim: int = -3) -> Tensor:
    """Sigmoid-squash raw coordinates so channel ``k`` lies in ``[0, G_k - 1]``.

    ``raw`` carries one channel per extent along ``dim``.
    """
    if raw.shape[dim] != len(extents):
        raise ValueError(f"expected {len(extents)} channels on dim {dim}")
    shape = [1] * raw.dim()
    shape[dim] = len(extents)
    top = raw.new_tensor([float(g - 1) for g in extents]).reshape(shape)
    return torch.sigmoid(raw) * top


def range_anchor_logits(extents: tuple[int, ...], targets: Tensor, margin: float = 1e-3) -> Tensor:
    """Raw-space offsets that make ``squash_to_range`` reproduce ``targets``.

    Inverts the scaled sigmoid, clamping the normalized target into
    ``[margin, 1 - margin]`` so endpoints stay finite. ``targets`` carries one
    channel per extent on its first axis.
    """
    top = targets.new_tensor([float(g - 1) for g in extents]).reshape(
        -1, *([1] * (targets.dim() - 1))
    )
    q = torch.clamp(targets / top, min=margin, max=1.0 - margin)
    return torch.log(q) - torch.log1p(-q)
