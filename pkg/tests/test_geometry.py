import math

import numpy as np
import pytest
import torch

from viewinv import geometry

from gradcheck import check_gradients, jittered_coords, rel_error
import oracles


def t64(a):
    return torch.tensor(np.asarray(a), dtype=torch.float64)


# ---------------------------------------------------------------------------
# rotation_from_axis_angle


def test_rotation_zero_is_identity():
    r = geometry.rotation_from_axis_angle(torch.zeros(3, dtype=torch.float64))
    assert torch.allclose(r, torch.eye(3, dtype=torch.float64), atol=1e-15)


def test_rotation_z_quarter_turn():
    r = geometry.rotation_from_axis_angle(t64([0.0, 0.0, math.pi / 2]))
    expected = t64([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert torch.allclose(r, expected, atol=1e-12)


def test_rotation_matches_series_oracle():
    rng = np.random.default_rng(7)
    for _ in range(25):
        v = rng.normal(scale=1.5, size=3)
        r = geometry.rotation_from_axis_angle(t64(v)).numpy()
        ref = oracles.rotation_series(v)
        assert np.max(np.abs(r - ref)) <= 1e-8


def test_rotation_is_orthonormal():
    rng = np.random.default_rng(11)
    for _ in range(25):
        r = geometry.rotation_from_axis_angle(t64(rng.normal(scale=2.0, size=3)))
        assert torch.allclose(r.T @ r, torch.eye(3, dtype=torch.float64), atol=1e-6)
        assert abs(float(torch.linalg.det(r)) - 1.0) <= 1e-6


def test_rotation_inverse_closure():
    rng = np.random.default_rng(13)
    for _ in range(20):
        r = geometry.rotation_from_axis_angle(t64(rng.normal(size=3)))
        assert torch.allclose(r @ r.T, torch.eye(3, dtype=torch.float64), atol=1e-8)


def test_rotation_batched_matches_single():
    rng = np.random.default_rng(17)
    vs = t64(rng.normal(size=(4, 3)))
    batched = geometry.rotation_from_axis_angle(vs)
    for i in range(4):
        single = geometry.rotation_from_axis_angle(vs[i])
        assert torch.allclose(batched[i], single, atol=1e-14)


# ---------------------------------------------------------------------------
# rigid_world_transform


def test_rigid_identity_leaves_points():
    rng = np.random.default_rng(3)
    pts = t64(rng.uniform(0, 5, size=(3, 4, 5)))
    out = geometry.rigid_world_transform(pts, torch.zeros(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))
    assert torch.allclose(out, pts, atol=1e-14)


def test_rigid_pure_translation():
    rng = np.random.default_rng(4)
    pts = t64(rng.uniform(0, 5, size=(3, 4, 5)))
    out = geometry.rigid_world_transform(pts, torch.zeros(3, dtype=torch.float64), t64([1.0, 0.0, 0.0]))
    assert torch.allclose(out, pts + t64([1.0, 0.0, 0.0])[:, None, None], atol=1e-14)


def test_rigid_inverse_round_trip():
    rng = np.random.default_rng(5)
    for _ in range(10):
        v = t64(rng.normal(size=3))
        t = t64(rng.normal(size=3))
        pts = t64(rng.uniform(-3, 3, size=(3, 5, 6)))
        fwd = geometry.rigid_world_transform(pts, v, t)
        # forward is p -> R^T p + R^T t; its inverse is q -> R q - t, i.e. the
        # transform with rotation R^T (axis-angle -v) and translation -R^T t.
        r = geometry.rotation_from_axis_angle(v)
        back = geometry.rigid_world_transform(fwd, -v, -torch.einsum("ji,j->i", r, t))
        assert torch.allclose(back, pts, atol=1e-10)


# ---------------------------------------------------------------------------
# splat_to_world


def test_splat_on_grid_point_single_cell():
    vals = torch.zeros(2, 1, 1, dtype=torch.float64)
    vals[0, 0, 0] = 3.0
    vals[1, 0, 0] = -1.5
    pts = t64([2.0, 3.0, 1.0]).reshape(3, 1, 1)
    grid = geometry.splat_to_world(vals, pts, (4, 5, 6))
    assert grid[0, 1, 2, 3] == pytest.approx(3.0)
    assert grid[1, 1, 2, 3] == pytest.approx(-1.5)
    mask = torch.ones_like(grid, dtype=torch.bool)
    mask[:, 1, 2, 3] = False
    assert torch.all(grid[mask] == 0.0)


def test_splat_half_offsets_eight_cells():
    vals = torch.ones(1, 1, 1, dtype=torch.float64)
    pts = t64([2.5, 3.5, 1.5]).reshape(3, 1, 1)
    grid = geometry.splat_to_world(vals, pts, (4, 6, 6))
    nz = grid.nonzero()
    assert len(nz) == 8
    assert torch.allclose(grid[grid != 0.0], torch.full((8,), 0.125, dtype=torch.float64))


def test_splat_matches_brute_force_oracle():
    rng = np.random.default_rng(23)
    for _ in range(10):
        m = int(rng.integers(6, 10))
        c = int(rng.integers(2, 5))
        extents = (int(rng.integers(4, 7)), int(rng.integers(6, 10)), int(rng.integers(6, 10)))
        vals = rng.normal(size=(c, m, m))
        # mixture of interior and out-of-range points
        pts = np.stack(
            [
                rng.uniform(-2.0, extents[1] + 1.0, size=(m, m)),
                rng.uniform(-2.0, extents[2] + 1.0, size=(m, m)),
                rng.uniform(-2.0, extents[0] + 1.0, size=(m, m)),
            ]
        )
        got = geometry.splat_to_world(t64(vals), t64(pts), extents).numpy()
        ref = oracles.splat_brute(vals, pts, extents)
        assert np.max(np.abs(got - ref)) <= 1e-9


def test_splat_mass_conservation_interior():
    rng = np.random.default_rng(29)
    extents = (6, 8, 9)
    vals = t64(rng.normal(size=(3, 7, 7)))
    pts = jittered_coords(rng, (7, 7), (extents[1], extents[2], extents[0]))
    grid = geometry.splat_to_world(vals, pts, extents)
    for ch in range(3):
        assert float(grid[ch].sum()) == pytest.approx(float(vals[ch].sum()), abs=1e-6)


def test_splat_locality_of_point_perturbation():
    rng = np.random.default_rng(31)
    extents = (6, 8, 8)
    vals = t64(rng.normal(size=(2, 5, 5)))
    pts = jittered_coords(rng, (5, 5), (extents[1], extents[2], extents[0]))
    moved = pts.clone()
    moved[:, 2, 3] += 0.2
    base = geometry.splat_to_world(vals, pts, extents)
    pert = geometry.splat_to_world(vals, moved, extents)
    diff = (base - pert).abs()
    # footprint: union of the 2x2x2 neighborhoods of the old and new location
    fx = {int(pts[0, 2, 3]), int(moved[0, 2, 3])}
    fy = {int(pts[1, 2, 3]), int(moved[1, 2, 3])}
    fz = {int(pts[2, 2, 3]), int(moved[2, 2, 3])}
    allowed = torch.zeros_like(diff, dtype=torch.bool)
    for x in fx:
        for y in fy:
            for z in fz:
                allowed[:, z : z + 2, x : x + 2, y : y + 2] = True
    assert torch.all(diff[~allowed] == 0.0)


def test_splat_integer_shift_equivariance():
    rng = np.random.default_rng(37)
    extents = (8, 10, 10)
    vals = t64(rng.normal(size=(2, 6, 6)))
    pts = jittered_coords(rng, (6, 6), (4, 4, 4))  # confined so the shift stays in range
    pts = torch.round(pts * 1024) / 1024  # dyadic coords shift exactly in float64
    delta = (2, 3, 1)  # (x, y, z)
    shifted = pts + t64(delta)[:, None, None]
    base = geometry.splat_to_world(vals, pts, extents)
    moved = geometry.splat_to_world(vals, shifted, extents)
    assert torch.equal(moved[:, 1 : 1 + 5, 2 : 2 + 5, 3 : 3 + 5], base[:, 0:5, 0:5, 0:5])


# ---------------------------------------------------------------------------
# camera_matrix


def test_camera_matrix_canonical_identity():
    k = geometry.camera_matrix(
        torch.zeros(3, dtype=torch.float64),
        t64(1.0), t64(1.0), t64(0.0), t64(0.0),
    )
    assert torch.allclose(k, torch.eye(3, dtype=torch.float64), atol=1e-15)


def test_camera_matrix_direct_substitution():
    k = geometry.camera_matrix(
        torch.zeros(3, dtype=torch.float64),
        t64(2.0), t64(3.0), t64(4.0), t64(5.0),
    )
    expected = t64([[2.0, 0.0, 4.0], [0.0, 3.0, 5.0], [0.0, 0.0, 1.0]])
    assert torch.allclose(k, expected, atol=1e-15)


def test_camera_matrix_matches_scalar_product_oracle():
    rng = np.random.default_rng(41)
    for _ in range(10):
        rot = rng.normal(size=3)
        sx, sy = float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.5, 2.0))
        x0, y0 = float(rng.normal()), float(rng.normal())
        k = geometry.camera_matrix(t64(rot), t64(sx), t64(sy), t64(x0), t64(y0)).numpy()
        r = geometry.rotation_from_axis_angle(t64(rot)).numpy()
        s = np.array([[sx, 0.0, x0], [0.0, sy, y0], [0.0, 0.0, 1.0]])
        assert np.max(np.abs(k - oracles.matmul_scalar(r, s))) <= 1e-12


# ---------------------------------------------------------------------------
# project_to_2d


def test_project_identity_unit_depth_copies_features():
    m = n = 4
    vals = t64(np.random.default_rng(43).normal(size=(3, m, n)))
    xs, ys = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
    pts = t64(np.stack([xs, ys, np.ones_like(xs)]).astype(np.float64))
    out = geometry.project_to_2d(vals, pts, torch.eye(3, dtype=torch.float64), (m, n))
    assert torch.allclose(out, vals, atol=1e-12)


def test_project_fractional_point_quarter_weights():
    vals = torch.ones(1, 1, 1, dtype=torch.float64)
    pts = t64([1.5, 2.5, 1.0]).reshape(3, 1, 1)
    out = geometry.project_to_2d(vals, pts, torch.eye(3, dtype=torch.float64), (5, 5))
    nz = out.nonzero()
    assert len(nz) == 4
    assert torch.allclose(out[out != 0.0], torch.full((4,), 0.25, dtype=torch.float64))


def test_project_matches_brute_force_oracle():
    rng = np.random.default_rng(47)
    for _ in range(10):
        m = int(rng.integers(6, 10))
        c = int(rng.integers(1, 4))
        out_shape = (int(rng.integers(6, 10)), int(rng.integers(6, 10)))
        vals = rng.normal(size=(c, m, m))
        pts = rng.uniform(-1.0, 9.0, size=(3, m, m))
        pts[2] = rng.uniform(0.5, 4.0, size=(m, m))
        rot = rng.normal(scale=0.2, size=3)
        k = geometry.camera_matrix(
            t64(rot),
            t64(float(rng.uniform(0.5, 2.0))),
            t64(float(rng.uniform(0.5, 2.0))),
            t64(float(rng.normal())),
            t64(float(rng.normal())),
        )
        got = geometry.project_to_2d(t64(vals), t64(pts), k, out_shape).numpy()
        ref = oracles.project_brute(vals, pts, k.numpy(), out_shape)
        assert np.max(np.abs(got - ref)) <= 1e-9


def test_project_small_denominator_guard_drops_points():
    vals = torch.ones(1, 1, 2, dtype=torch.float64)
    pts = t64([[2.0, 2.0], [2.0, 2.0], [1e-6, 1.0]]).reshape(3, 1, 2)
    out = geometry.project_to_2d(vals, pts, torch.eye(3, dtype=torch.float64), (6, 6))
    # the near-zero-depth point contributes nothing; the unit-depth one lands
    assert float(out.sum()) == pytest.approx(1.0)
    assert out[0, 2, 2] == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# squash helpers


def test_squash_to_range_midpoint_and_bounds():
    extents = (8, 6, 4)
    raw = torch.zeros(3, 2, 2, dtype=torch.float64)
    out = geometry.squash_to_range(raw, extents)
    assert torch.allclose(out[0], torch.full((2, 2), 3.5, dtype=torch.float64))
    assert torch.allclose(out[1], torch.full((2, 2), 2.5, dtype=torch.float64))
    assert torch.allclose(out[2], torch.full((2, 2), 1.5, dtype=torch.float64))
    wide = geometry.squash_to_range(torch.randn(3, 5, 5, dtype=torch.float64) * 50, extents)
    for ch, g in enumerate(extents):
        assert float(wide[ch].min()) >= 0.0
        assert float(wide[ch].max()) <= g - 1


def test_range_anchor_logits_reproduce_targets():
    extents = (8, 8, 8)
    xs, ys = np.meshgrid(np.arange(5), np.arange(5), indexing="ij")
    target = t64(np.stack([xs, ys, np.ones_like(xs)]).astype(np.float64))
    anchors = geometry.range_anchor_logits(extents, target)
    out = geometry.squash_to_range(anchors, extents)
    assert torch.allclose(out, target, atol=0.05)


# ---------------------------------------------------------------------------
# gradient checks (central differences, double precision)


def test_rotation_gradients():
    rng = np.random.default_rng(53)
    for case in range(20):
        v = t64(rng.normal(scale=1.5, size=3))
        check_gradients(geometry.rotation_from_axis_angle, [v], wrt=[0], probe_seed=case)


def test_rigid_transform_gradients():
    rng = np.random.default_rng(59)
    for case in range(20):
        pts = t64(rng.uniform(-2, 2, size=(3, 3, 4)))
        v = t64(rng.normal(scale=0.8, size=3))
        tr = t64(rng.normal(size=3))
        check_gradients(
            geometry.rigid_world_transform, [pts, v, tr], wrt=[0, 1, 2], probe_seed=case
        )


def test_splat_gradients():
    rng = np.random.default_rng(61)
    extents = (4, 5, 5)
    for case in range(20):
        vals = t64(rng.normal(size=(2, 3, 3)))
        pts = jittered_coords(rng, (3, 3), (extents[1], extents[2], extents[0]))
        check_gradients(
            lambda v, p: geometry.splat_to_world(v, p, extents),
            [vals, pts],
            wrt=[0, 1],
            probe_seed=case,
        )


def test_camera_matrix_gradients():
    rng = np.random.default_rng(67)
    for case in range(20):
        args = [
            t64(rng.normal(size=3)),
            t64(float(rng.uniform(0.5, 2.0))),
            t64(float(rng.uniform(0.5, 2.0))),
            t64(float(rng.normal())),
            t64(float(rng.normal())),
        ]
        check_gradients(geometry.camera_matrix, args, wrt=[0, 1, 2, 3, 4], probe_seed=case)


def test_project_gradients():
    rng = np.random.default_rng(71)
    for case in range(20):
        vals = t64(rng.normal(size=(2, 3, 3)))
        pts = jittered_coords(rng, (3, 3), (5, 5, 3))
        pts[2] = t64(rng.uniform(0.8, 2.5, size=(3, 3)))
        k = geometry.camera_matrix(
            t64(rng.normal(scale=0.1, size=3)),
            t64(float(rng.uniform(0.8, 1.3))),
            t64(float(rng.uniform(0.8, 1.3))),
            t64(float(rng.normal(scale=0.3))),
            t64(float(rng.normal(scale=0.3))),
        )
        check_gradients(
            lambda v, p, km: geometry.project_to_2d(v, p, km, (6, 6)),
            [vals, pts, k],
            wrt=[0, 1, 2],
            probe_seed=case,
        )
