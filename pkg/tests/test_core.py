import pytest
import torch

from voxocc.core import (
    GridMeta,
    Pose,
    VoxelGrid,
    avg_pool_height,
    max_pool_3d,
    trilinear_sample,
    voxel_world_coords,
)


def make_grid(shape, seed=0, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    data = torch.randn(*shape, generator=gen, dtype=dtype)
    return VoxelGrid(GridMeta(shape[1:]), data)


def trilinear_oracle(data, point):
    """Naive 8-corner interpolation for a single point, zero padding."""
    import math

    c = data.shape[0]
    out = torch.zeros(c, dtype=data.dtype)
    base = [math.floor(p) for p in point.tolist()]
    frac = [p - b for p, b in zip(point.tolist(), base)]
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                i, j, k = base[0] + dx, base[1] + dy, base[2] + dz
                w = (frac[0] if dx else 1 - frac[0]) * (frac[1] if dy else 1 - frac[1]) * (
                    frac[2] if dz else 1 - frac[2]
                )
                if 0 <= i < data.shape[1] and 0 <= j < data.shape[2] and 0 <= k < data.shape[3]:
                    out += w * data[:, i, j, k]
    return out


class TestTrilinearSample:
    def test_grid_node_is_exact(self):
        grid = make_grid((2, 3, 3, 3), seed=1)
        pts = torch.tensor([[1.0, 2.0, 0.0]], dtype=torch.float64)
        out = trilinear_sample(grid, pts)
        torch.testing.assert_close(out[0], grid.data[:, 1, 2, 0])

    def test_midpoint_between_two_nodes(self):
        data = torch.zeros(1, 2, 2, 2, dtype=torch.float64)
        data[0, 0, 0, 0] = 3.0
        data[0, 1, 0, 0] = 5.0
        grid = VoxelGrid(GridMeta((2, 2, 2)), data)
        # Midpoint between (0,0,0) and (1,0,0); corners with y=-? are in-grid zeros.
        out = trilinear_sample(grid, torch.tensor([[0.5, 0.0, 0.0]], dtype=torch.float64))
        torch.testing.assert_close(out[0, 0], torch.tensor(4.0, dtype=torch.float64))

    def test_matches_loop_oracle(self):
        gen = torch.Generator().manual_seed(7)
        grid = make_grid((3, 5, 5, 5), seed=7)
        pts = torch.rand(100, 3, generator=gen, dtype=torch.float64) * 4.0
        out = trilinear_sample(grid, pts)
        for m in range(pts.shape[0]):
            torch.testing.assert_close(
                out[m], trilinear_oracle(grid.data, pts[m]), atol=1e-6, rtol=0
            )

    def test_out_of_bounds_corners_contribute_zero(self):
        grid = make_grid((1, 2, 2, 2), seed=2)
        # Entirely outside: all corners out of bounds.
        out = trilinear_sample(grid, torch.tensor([[-3.0, 0.0, 0.0]], dtype=torch.float64))
        assert out.abs().max() == 0.0

    def test_shape_mismatch_raises(self):
        grid = make_grid((1, 2, 2, 2))
        with pytest.raises(ValueError):
            trilinear_sample(grid, torch.zeros(4, 2, dtype=torch.float64))

    def test_linearity_in_grid(self):
        gen = torch.Generator().manual_seed(3)
        a = make_grid((2, 4, 4, 4), seed=3)
        b = make_grid((2, 4, 4, 4), seed=4)
        pts = torch.rand(50, 3, generator=gen, dtype=torch.float64) * 3.0
        alpha, beta = 0.7, -1.3
        mixed = VoxelGrid(a.meta, alpha * a.data + beta * b.data)
        lhs = trilinear_sample(mixed, pts)
        rhs = alpha * trilinear_sample(a, pts) + beta * trilinear_sample(b, pts)
        torch.testing.assert_close(lhs, rhs, atol=1e-6, rtol=0)

    def test_gradients_match_finite_differences(self):
        gen = torch.Generator().manual_seed(5)
        data = torch.randn(2, 4, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
        # Keep fractional parts away from 0/1 so finite differences stay one-sided-safe.
        pts = (torch.rand(20, 3, generator=gen, dtype=torch.float64) * 2.4 + 0.3).requires_grad_()
        weights = torch.randn(20, 2, generator=gen, dtype=torch.float64)

        def f(d, p):
            return (trilinear_sample(VoxelGrid(GridMeta((4, 4, 4)), d), p) * weights).sum()

        loss = f(data, pts)
        g_data, g_pts = torch.autograd.grad(loss, (data, pts))
        for tensor, grad, idx in ((data, g_data, (0, 1, 2, 3)), (pts, g_pts, (4, 1))):
            flat = tensor.detach().flatten()
            num = torch.zeros_like(flat)
            h = 1e-5
            for i in range(flat.numel()):
                for sign in (1.0, -1.0):
                    shifted = flat.clone()
                    shifted[i] += sign * h
                    val = f(
                        shifted.reshape(tensor.shape) if tensor is data else data.detach(),
                        shifted.reshape(tensor.shape) if tensor is pts else pts.detach(),
                    )
                    num[i] += sign * val.item() / (2 * h)
            rel = (grad.flatten() - num).norm() / max(num.norm().item(), 1e-12)
            assert rel < 1e-4


class TestMaxPool3d:
    def test_all_zero(self):
        grid = VoxelGrid(GridMeta((4, 4, 4)), torch.zeros(1, 4, 4, 4))
        out = max_pool_3d(grid, (2, 2, 2))
        assert out.meta.resolution == (2, 2, 2)
        assert out.data.abs().max() == 0.0

    def test_lone_positive_survives(self):
        data = torch.zeros(1, 4, 4, 4)
        data[0, 1, 2, 3] = 1.0
        out = max_pool_3d(VoxelGrid(GridMeta((4, 4, 4)), data), (2, 2, 2))
        assert out.data.max() == 1.0
        assert (out.data == 1.0).sum() == 1
        assert out.data[0, 0, 1, 1] == 1.0

    def test_average_pool_dilutes_lone_positive(self):
        # The failure mode preserve-pooling avoids: an 8-corner average drops
        # a lone 1.0 to 0.125, below a 0.5 threshold.
        data = torch.zeros(1, 4, 4, 4)
        data[0, 1, 2, 3] = 1.0
        avg = data.reshape(1, 2, 2, 2, 2, 2, 2).mean(dim=(2, 4, 6))
        assert avg[0, 0, 1, 1] == pytest.approx(0.125)
        assert avg.max() < 0.5

    def test_padding_never_creates_positives(self):
        data = -torch.rand(1, 3, 3, 3)  # strictly negative
        out = max_pool_3d(VoxelGrid(GridMeta((3, 3, 3)), data), (2, 2, 2))
        assert out.meta.resolution == (2, 2, 2)
        assert out.data.max() < 0.0

    def test_identity_factor(self):
        grid = make_grid((2, 3, 4, 5), seed=9, dtype=torch.float32)
        out = max_pool_3d(grid, (1, 1, 1))
        torch.testing.assert_close(out.data, grid.data)

    def test_bounds_property(self):
        grid = make_grid((2, 4, 4, 4), seed=10, dtype=torch.float32)
        out = max_pool_3d(grid, (2, 2, 2))
        assert out.data.max() <= grid.data.max()
        # Every covered input voxel is <= its pooled output.
        for i in range(4):
            for j in range(4):
                for k in range(4):
                    assert (
                        grid.data[:, i, j, k] <= out.data[:, i // 2, j // 2, k // 2]
                    ).all()

    def test_nonpositive_factor_raises(self):
        grid = make_grid((1, 2, 2, 2))
        with pytest.raises(ValueError):
            max_pool_3d(grid, (0, 1, 1))

    def test_gradient_matches_finite_differences(self):
        gen = torch.Generator().manual_seed(11)
        data = torch.randn(1, 4, 4, 2, generator=gen, dtype=torch.float64, requires_grad=True)
        w = torch.randn(1, 2, 2, 1, generator=gen, dtype=torch.float64)

        def f(d):
            return (max_pool_3d(VoxelGrid(GridMeta((4, 4, 2)), d), (2, 2, 2)).data * w).sum()

        (grad,) = torch.autograd.grad(f(data), data)
        flat = data.detach().flatten()
        num = torch.zeros_like(flat)
        h = 1e-5
        for i in range(flat.numel()):
            hi, lo = flat.clone(), flat.clone()
            hi[i] += h
            lo[i] -= h
            num[i] = (f(hi.reshape(data.shape)) - f(lo.reshape(data.shape))) / (2 * h)
        rel = (grad.flatten() - num).norm() / max(num.norm().item(), 1e-12)
        assert rel < 1e-4


class TestAvgPoolHeight:
    def test_constant(self):
        grid = VoxelGrid(GridMeta((2, 3, 4)), torch.full((2, 2, 3, 4), 1.5))
        torch.testing.assert_close(avg_pool_height(grid), torch.full((2, 2, 3), 1.5))

    def test_two_slices(self):
        gen = torch.Generator().manual_seed(12)
        a = torch.randn(2, 3, 3, generator=gen)
        b = torch.randn(2, 3, 3, generator=gen)
        grid = VoxelGrid(GridMeta((3, 3, 2)), torch.stack([a, b], dim=3))
        torch.testing.assert_close(avg_pool_height(grid), (a + b) / 2)

    def test_matches_loop(self):
        grid = make_grid((3, 4, 4, 4), seed=13, dtype=torch.float32)
        out = avg_pool_height(grid)
        for c in range(3):
            for x in range(4):
                for y in range(4):
                    ref = sum(grid.data[c, x, y, z].item() for z in range(4)) / 4
                    assert out[c, x, y].item() == pytest.approx(ref, abs=1e-6)

    def test_commutes_with_channel_affine(self):
        grid = make_grid((3, 4, 4, 4), seed=14, dtype=torch.float64)
        scale = torch.tensor([2.0, -1.0, 0.5], dtype=torch.float64).view(3, 1, 1, 1)
        shift = torch.tensor([1.0, 0.0, -3.0], dtype=torch.float64).view(3, 1, 1, 1)
        mapped = VoxelGrid(grid.meta, grid.data * scale + shift)
        lhs = avg_pool_height(mapped)
        rhs = avg_pool_height(grid) * scale[..., 0] + shift[..., 0]
        torch.testing.assert_close(lhs, rhs)

    def test_gradient_matches_finite_differences(self):
        gen = torch.Generator().manual_seed(15)
        data = torch.randn(2, 3, 3, 2, generator=gen, dtype=torch.float64, requires_grad=True)
        w = torch.randn(2, 3, 3, generator=gen, dtype=torch.float64)

        def f(d):
            return (avg_pool_height(VoxelGrid(GridMeta((3, 3, 2)), d)) * w).sum()

        (grad,) = torch.autograd.grad(f(data), data)
        flat = data.detach().flatten()
        num = torch.zeros_like(flat)
        h = 1e-5
        for i in range(flat.numel()):
            hi, lo = flat.clone(), flat.clone()
            hi[i] += h
            lo[i] -= h
            num[i] = (f(hi.reshape(data.shape)) - f(lo.reshape(data.shape))) / (2 * h)
        rel = (grad.flatten() - num).norm() / max(num.norm().item(), 1e-12)
        assert rel < 1e-4


class TestGridMeta:
    def test_voxel_center_unit_grid(self):
        meta = GridMeta((2, 2, 2))
        coords = voxel_world_coords(meta)
        torch.testing.assert_close(
            coords[0], torch.tensor([0.5, 0.5, 0.5], dtype=torch.float64)
        )

    def test_voxel_center_formula(self):
        meta = GridMeta((4, 4, 4), voxel_size=(0.5, 0.5, 0.5), origin=(-2.0, -2.0, 0.0))
        coords = voxel_world_coords(meta)
        row = (1 * 4 + 0) * 4 + 2  # voxel (1, 0, 2)
        torch.testing.assert_close(
            coords[row], torch.tensor([-1.25, -1.75, 1.25], dtype=torch.float64)
        )

    def test_index_world_round_trip(self):
        meta = GridMeta((4, 4, 2), voxel_size=(0.3, 0.7, 1.1), origin=(-1.0, 2.0, 0.25))
        idx = torch.stack(
            torch.meshgrid(
                torch.arange(4), torch.arange(4), torch.arange(2), indexing="ij"
            ),
            dim=-1,
        ).reshape(-1, 3)
        back = meta.index_of(meta.world_of(idx))
        assert (back == idx).all()

    def test_invalid_meta_raises(self):
        with pytest.raises(ValueError):
            GridMeta((0, 2, 2))
        with pytest.raises(ValueError):
            GridMeta((2, 2, 2), voxel_size=(1.0, -1.0, 1.0))

    def test_grid_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            VoxelGrid(GridMeta((2, 2, 2)), torch.zeros(1, 2, 2, 3))


class TestPose:
    def test_identity_ok(self):
        Pose(torch.eye(3), torch.zeros(3))

    def test_reflection_rejected(self):
        r = torch.diag(torch.tensor([-1.0, 1.0, 1.0]))
        with pytest.raises(ValueError):
            Pose(r, torch.zeros(3))

    def test_non_orthonormal_rejected(self):
        with pytest.raises(ValueError):
            Pose(torch.eye(3) * 2.0, torch.zeros(3))
