import math

import pytest
import torch

from voxocc.core import GridMeta, Pose
from voxocc.view_transform import (
    CameraView,
    ContextDepthHead,
    DepthBins,
    ImageBackbone,
    backbone_forward,
    depth_bce_loss,
    depth_targets,
    lift_and_pool,
    predict_context_and_depth,
)


def random_rotation(gen):
    a = torch.randn(3, 3, generator=gen, dtype=torch.float64)
    q, _ = torch.linalg.qr(a)
    if torch.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def make_view(k, rot, trans, img_hw, gt_depth=None, dtype=torch.float64):
    img = torch.zeros(3, *img_hw, dtype=torch.float32)
    return CameraView(
        intrinsics=torch.as_tensor(k, dtype=dtype),
        pose=Pose(torch.as_tensor(rot, dtype=dtype), torch.as_tensor(trans, dtype=dtype)),
        image=img,
        gt_depth=gt_depth,
    )


def lift_oracle(context, depth_logits, views, bins, meta):
    """Naive per-pixel, per-bin scatter-add."""
    n, c, h, w = context.shape
    d = depth_logits.shape[1]
    vol = torch.zeros(c, *meta.resolution, dtype=context.dtype)
    centers = bins.centers(dtype=torch.float64)
    for vi, view in enumerate(views):
        kinv = torch.inverse(view.intrinsics.to(torch.float64))
        rot = view.pose.rotation.to(torch.float64)
        trans = view.pose.translation.to(torch.float64)
        img_h, img_w = view.image.shape[-2:]
        probs = torch.softmax(depth_logits[vi], dim=0)
        for hh in range(h):
            for ww in range(w):
                u = (ww + 0.5) * (img_w / w)
                v = (hh + 0.5) * (img_h / h)
                dir_cam = kinv @ torch.tensor([u, v, 1.0], dtype=torch.float64)
                dir_world = rot @ dir_cam
                for dd in range(d):
                    p = trans + centers[dd] * dir_world
                    idx = [
                        math.floor((p[a].item() - meta.origin[a]) / meta.voxel_size[a])
                        for a in range(3)
                    ]
                    if all(0 <= idx[a] < meta.resolution[a] for a in range(3)):
                        vol[:, idx[0], idx[1], idx[2]] += (
                            context[vi, :, hh, ww] * probs[dd, hh, ww]
                        )
    return vol


class TestBackbone:
    def test_shape_contract(self):
        torch.manual_seed(0)
        bb = ImageBackbone(width=16, stride=8)
        view = make_view(torch.eye(3), torch.eye(3), torch.zeros(3), (64, 64))
        out = backbone_forward([view], bb)
        assert out.shape == (1, 16, 8, 8)

    def test_zero_image_zero_bias_gives_zero(self):
        torch.manual_seed(0)
        bb = ImageBackbone(width=16, stride=8)
        for m in bb.modules():
            if isinstance(m, (torch.nn.Conv2d, torch.nn.GroupNorm)) and m.bias is not None:
                torch.nn.init.zeros_(m.bias)
        out = bb(torch.zeros(2, 3, 32, 32))
        assert out.abs().max() == 0.0

    def test_deterministic(self):
        torch.manual_seed(1)
        bb = ImageBackbone(width=8, stride=4)
        x = torch.randn(1, 3, 16, 16)
        assert torch.equal(bb(x), bb(x))

    def test_indivisible_dims_raise(self):
        bb = ImageBackbone(width=8, stride=8)
        with pytest.raises(ValueError):
            bb(torch.zeros(1, 3, 20, 24))


class TestContextDepthHead:
    def test_softmax_symmetry(self):
        logits = torch.zeros(1, 2, 1, 1)
        probs = torch.softmax(logits, dim=1)
        torch.testing.assert_close(probs[0, :, 0, 0], torch.tensor([0.5, 0.5]))

    def test_softmax_closed_form(self):
        logits = torch.tensor([[[[math.log(3.0)]], [[0.0]]]])
        probs = torch.softmax(logits, dim=1)
        torch.testing.assert_close(probs[0, :, 0, 0], torch.tensor([0.75, 0.25]))

    def test_output_shapes(self):
        torch.manual_seed(0)
        head = ContextDepthHead(16, 12, 8)
        bins = DepthBins(0.5, 8.5, 8)
        ctx, dep = predict_context_and_depth(torch.randn(2, 16, 4, 6), head, bins)
        assert ctx.shape == (2, 12, 4, 6)
        assert dep.shape == (2, 8, 4, 6)

    def test_bin_mismatch_raises(self):
        head = ContextDepthHead(16, 12, 8)
        with pytest.raises(ValueError):
            predict_context_and_depth(torch.randn(1, 16, 4, 4), head, DepthBins(0.5, 8.5, 16))


class TestLiftAndPool:
    def test_single_pixel_lands_in_voxel(self):
        # cx=cy=half image => central ray along camera z; identity pose.
        s = 8
        k = torch.tensor([[1.0, 0, s / 2], [0, 1.0, s / 2], [0, 0, 1.0]], dtype=torch.float64)
        view = make_view(k, torch.eye(3), torch.tensor([0.5, 0.5, 0.0]), (s, s))
        meta = GridMeta((4, 4, 4))
        bins = DepthBins(1.0, 3.0, 2)  # centers 1.5, 2.5: both in voxel z in {1, 2}
        context = torch.full((1, 3, 1, 1), 2.0, dtype=torch.float64)
        logits = torch.zeros(1, 2, 1, 1, dtype=torch.float64)
        vol = lift_and_pool(context, logits, [view], bins, meta)
        # Half the mass in voxel (0,0,1), half in (0,0,2).
        torch.testing.assert_close(
            vol.data[:, 0, 0, 1], torch.full((3,), 1.0, dtype=torch.float64)
        )
        torch.testing.assert_close(
            vol.data[:, 0, 0, 2], torch.full((3,), 1.0, dtype=torch.float64)
        )
        assert vol.data.sum() == pytest.approx(6.0)

    def test_sum_pooling_of_coincident_pixels(self):
        # Two views with identical geometry: same voxel receives a + b.
        s = 8
        k = torch.tensor([[1.0, 0, s / 2], [0, 1.0, s / 2], [0, 0, 1.0]], dtype=torch.float64)
        views = [
            make_view(k, torch.eye(3), torch.tensor([0.5, 0.5, 0.0]), (s, s)) for _ in range(2)
        ]
        meta = GridMeta((4, 4, 4))
        bins = DepthBins(1.0, 2.0, 2)  # centers 1.25, 1.75 -> both voxel z=1
        context = torch.tensor([3.0, 5.0], dtype=torch.float64).view(2, 1, 1, 1)
        logits = torch.zeros(2, 2, 1, 1, dtype=torch.float64)
        vol = lift_and_pool(context, logits, views, bins, meta)
        assert vol.data[0, 0, 0, 1].item() == pytest.approx(8.0)

    def test_matches_loop_oracle(self):
        gen = torch.Generator().manual_seed(42)
        meta = GridMeta((5, 4, 3), voxel_size=(0.8, 1.0, 1.2), origin=(-2.0, -2.0, -1.5))
        bins = DepthBins(0.5, 4.5, 4)
        views = []
        for _ in range(2):
            fx = 2.0 + torch.rand(1, generator=gen).item() * 2
            fy = 2.0 + torch.rand(1, generator=gen).item() * 2
            k = torch.tensor([[fx, 0, 16.0], [0, fy, 16.0], [0, 0, 1.0]], dtype=torch.float64)
            rot = random_rotation(gen)
            trans = torch.randn(3, generator=gen, dtype=torch.float64)
            views.append(make_view(k, rot, trans, (32, 32)))
        context = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)
        logits = torch.randn(2, 4, 4, 4, generator=gen, dtype=torch.float64)
        vol = lift_and_pool(context, logits, views, bins, meta)
        ref = lift_oracle(context, logits, views, bins, meta)
        torch.testing.assert_close(vol.data, ref, atol=1e-6, rtol=0)

    def test_mass_conservation(self):
        gen = torch.Generator().manual_seed(3)
        meta = GridMeta((10, 10, 10), voxel_size=(0.5, 0.5, 0.5), origin=(-2.5, -2.5, -2.5))
        bins = DepthBins(0.2, 2.0, 4)
        k = torch.tensor([[4.0, 0, 8.0], [0, 4.0, 8.0], [0, 0, 1.0]], dtype=torch.float64)
        view = make_view(k, random_rotation(gen), torch.zeros(3, dtype=torch.float64), (16, 16))
        context = torch.rand(1, 2, 2, 2, generator=gen, dtype=torch.float64) + 0.5
        logits = torch.randn(1, 4, 2, 2, generator=gen, dtype=torch.float64)
        vol = lift_and_pool(context, logits, [view], bins, meta)
        # Pooled mass must equal the summed feature-times-probability mass of
        # the points that actually fall inside the volume.
        probs = torch.softmax(logits, dim=1)
        kinv = torch.inverse(view.intrinsics.to(torch.float64))
        rot = view.pose.rotation.to(torch.float64)
        expected = torch.zeros(2, dtype=torch.float64)
        for hh in range(2):
            for ww in range(2):
                dir_world = rot @ (
                    kinv @ torch.tensor([(ww + 0.5) * 8.0, (hh + 0.5) * 8.0, 1.0]).double()
                )
                for dd in range(4):
                    p = bins.centers(torch.float64)[dd] * dir_world
                    idx = [
                        math.floor((p[a].item() - meta.origin[a]) / meta.voxel_size[a])
                        for a in range(3)
                    ]
                    if all(0 <= idx[a] < meta.resolution[a] for a in range(3)):
                        expected += context[0, :, hh, ww] * probs[0, dd, hh, ww]
        torch.testing.assert_close(vol.data.sum(dim=(1, 2, 3)), expected, atol=1e-5, rtol=0)

    def test_view_permutation_equivariance(self):
        gen = torch.Generator().manual_seed(4)
        meta = GridMeta((4, 4, 4))
        bins = DepthBins(0.5, 3.5, 3)
        views = []
        for _ in range(3):
            k = torch.tensor([[3.0, 0, 8.0], [0, 3.0, 8.0], [0, 0, 1.0]], dtype=torch.float64)
            views.append(
                make_view(
                    k,
                    random_rotation(gen),
                    torch.rand(3, generator=gen, dtype=torch.float64) * 2,
                    (16, 16),
                )
            )
        context = torch.randn(3, 2, 2, 2, generator=gen, dtype=torch.float64)
        logits = torch.randn(3, 3, 2, 2, generator=gen, dtype=torch.float64)
        a = lift_and_pool(context, logits, views, bins, meta)
        perm = [2, 0, 1]
        b = lift_and_pool(context[perm], logits[perm], [views[i] for i in perm], bins, meta)
        torch.testing.assert_close(a.data, b.data)

    def test_degenerate_intrinsics_raise(self):
        k = torch.zeros(3, 3, dtype=torch.float64)
        k[2, 2] = 1.0
        k[0, 0] = 1.0  # singular: fy column zero
        view = CameraView.__new__(CameraView)
        view.intrinsics = k
        view.pose = Pose(torch.eye(3), torch.zeros(3))
        view.image = torch.zeros(3, 8, 8)
        view.gt_depth = None
        with pytest.raises(ValueError):
            lift_and_pool(
                torch.zeros(1, 1, 1, 1),
                torch.zeros(1, 2, 1, 1),
                [view],
                DepthBins(1.0, 2.0, 2),
                GridMeta((2, 2, 2)),
            )

    def test_gradients_match_finite_differences(self):
        gen = torch.Generator().manual_seed(5)
        meta = GridMeta((3, 3, 3))
        bins = DepthBins(0.5, 2.5, 2)
        k = torch.tensor([[2.0, 0, 4.0], [0, 2.0, 4.0], [0, 0, 1.0]], dtype=torch.float64)
        view = make_view(k, torch.eye(3), torch.tensor([1.5, 1.5, 0.0]), (8, 8))
        context = torch.randn(1, 2, 1, 1, generator=gen, dtype=torch.float64, requires_grad=True)
        logits = torch.randn(1, 2, 1, 1, generator=gen, dtype=torch.float64, requires_grad=True)
        w = torch.randn(2, 3, 3, 3, generator=gen, dtype=torch.float64)

        def f(c, l):
            return (lift_and_pool(c, l, [view], bins, meta).data * w).sum()

        g_c, g_l = torch.autograd.grad(f(context, logits), (context, logits))
        h = 1e-5
        for tensor, grad in ((context, g_c), (logits, g_l)):
            flat = tensor.detach().flatten()
            num = torch.zeros_like(flat)
            for i in range(flat.numel()):
                hi, lo = flat.clone(), flat.clone()
                hi[i] += h
                lo[i] -= h
                args_hi = [
                    hi.reshape(tensor.shape) if t is tensor else t.detach()
                    for t in (context, logits)
                ]
                args_lo = [
                    lo.reshape(tensor.shape) if t is tensor else t.detach()
                    for t in (context, logits)
                ]
                num[i] = (f(*args_hi) - f(*args_lo)) / (2 * h)
            rel = (grad.flatten() - num).norm() / max(num.norm().item(), 1e-12)
            assert rel < 1e-4


class TestDepthTargets:
    def bins(self):
        return DepthBins(0.5, 8.5, 16)

    def test_exact_bin_center(self):
        bins = self.bins()
        gt = torch.zeros(8, 8)
        gt[3, 4] = bins.centers()[3].item()
        view = make_view(torch.eye(3), torch.eye(3), torch.zeros(3), (8, 8), gt_depth=gt)
        one_hot, valid = depth_targets(view, bins, stride=8)
        assert valid[0, 0]
        assert one_hot[3, 0, 0] == 1.0
        assert one_hot[:, 0, 0].sum() == 1.0

    def test_minimum_wins(self):
        bins = self.bins()
        gt = torch.zeros(8, 8)
        gt[0, 0] = 5.0
        gt[7, 7] = 2.0
        view = make_view(torch.eye(3), torch.eye(3), torch.zeros(3), (8, 8), gt_depth=gt)
        one_hot, valid = depth_targets(view, bins, stride=8)
        expected_bin = int((2.0 - bins.d_min) / bins.step)
        assert one_hot[expected_bin, 0, 0] == 1.0

    def test_out_of_range_invalid(self):
        bins = self.bins()
        gt = torch.full((8, 8), 100.0)
        view = make_view(torch.eye(3), torch.eye(3), torch.zeros(3), (8, 8), gt_depth=gt)
        one_hot, valid = depth_targets(view, bins, stride=8)
        assert not valid.any()
        assert one_hot.sum() == 0.0

    def test_all_empty_depth(self):
        view = make_view(
            torch.eye(3), torch.eye(3), torch.zeros(3), (16, 16), gt_depth=torch.zeros(16, 16)
        )
        one_hot, valid = depth_targets(view, self.bins(), stride=8)
        assert not valid.any()


class TestDepthBceLoss:
    def test_perfect_prediction(self):
        one_hot = torch.zeros(4, 1, 1)
        one_hot[2] = 1.0
        logits = torch.full((4, 1, 1), -40.0)
        logits[2] = 40.0
        loss = depth_bce_loss(logits, one_hot, torch.ones(1, 1, dtype=torch.bool))
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_uniform_prediction_closed_form(self):
        one_hot = torch.zeros(4, 1, 1)
        one_hot[0] = 1.0
        logits = torch.zeros(4, 1, 1)
        loss = depth_bce_loss(logits, one_hot, torch.ones(1, 1, dtype=torch.bool))
        expected = -math.log(0.25) - 3 * math.log(0.75)
        assert loss.item() == pytest.approx(expected, rel=1e-6)

    def test_empty_mask_gives_zero(self):
        loss = depth_bce_loss(
            torch.randn(4, 2, 2), torch.zeros(4, 2, 2), torch.zeros(2, 2, dtype=torch.bool)
        )
        assert loss.item() == 0.0

    def test_gradient_matches_finite_differences(self):
        gen = torch.Generator().manual_seed(6)
        logits = torch.randn(3, 2, 2, generator=gen, dtype=torch.float64, requires_grad=True)
        one_hot = torch.zeros(3, 2, 2, dtype=torch.float64)
        one_hot[0, 0, 0] = 1.0
        one_hot[2, 1, 1] = 1.0
        valid = torch.zeros(2, 2, dtype=torch.bool)
        valid[0, 0] = True
        valid[1, 1] = True

        def f(lg):
            return depth_bce_loss(lg, one_hot, valid)

        (grad,) = torch.autograd.grad(f(logits), logits)
        flat = logits.detach().flatten()
        num = torch.zeros_like(flat)
        h = 1e-6
        for i in range(flat.numel()):
            hi, lo = flat.clone(), flat.clone()
            hi[i] += h
            lo[i] -= h
            num[i] = (f(hi.reshape(logits.shape)) - f(lo.reshape(logits.shape))) / (2 * h)
        rel = (grad.flatten() - num).norm() / max(num.norm().item(), 1e-12)
        assert rel < 1e-4
