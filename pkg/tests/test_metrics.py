import numpy as np
import pytest
import torch

from voxocc.core import GridMeta, IGNORE_LABEL, VoxelGrid
from voxocc.metrics import (
    ConfusionMatrix,
    accumulate,
    load_report,
    per_class_iou,
    point_query_segmentation,
    render_report_text,
    sc_iou,
    ssc_miou,
    write_report,
)


class TestAccumulate:
    def test_perfect_is_diagonal(self):
        cm = ConfusionMatrix(3)
        labels = np.array([0, 1, 2, 1, 0])
        accumulate(cm, labels, labels)
        assert (cm.counts == np.diag([2, 2, 1])).all()

    def test_all_ignore_unchanged(self):
        cm = ConfusionMatrix(3)
        gt = np.full(10, IGNORE_LABEL)
        accumulate(cm, np.zeros(10, dtype=np.int64), gt)
        assert cm.counts.sum() == 0

    def test_matches_loop_count(self):
        rng = np.random.default_rng(0)
        gt = rng.integers(0, 4, size=100)
        gt[rng.random(100) < 0.2] = IGNORE_LABEL
        pred = rng.integers(0, 4, size=100)
        cm = ConfusionMatrix(4)
        accumulate(cm, pred, gt)
        ref = np.zeros((4, 4), dtype=np.int64)
        for g, p in zip(gt, pred):
            if g != IGNORE_LABEL:
                ref[g, p] += 1
        assert (cm.counts == ref).all()

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            accumulate(ConfusionMatrix(2), np.zeros(3), np.zeros(4))

    def test_additive_over_shards(self):
        rng = np.random.default_rng(1)
        gt_a, pred_a = rng.integers(0, 3, 50), rng.integers(0, 3, 50)
        gt_b, pred_b = rng.integers(0, 3, 70), rng.integers(0, 3, 70)
        a = accumulate(ConfusionMatrix(3), pred_a, gt_a)
        b = accumulate(ConfusionMatrix(3), pred_b, gt_b)
        both = accumulate(
            accumulate(ConfusionMatrix(3), pred_a, gt_a), pred_b, gt_b
        )
        assert (a.merge(b).counts == both.counts).all()


class TestSscMiou:
    def test_perfect(self):
        cm = ConfusionMatrix(3)
        labels = np.array([0, 1, 2, 2, 1])
        accumulate(cm, labels, labels)
        miou, iou = ssc_miou(cm, [1, 2])
        assert miou == 1.0

    def test_hand_case(self):
        # gt (A,A,B,B), pred (A,B,B,B): IoU_A = 1/2, IoU_B = 2/3
        cm = ConfusionMatrix(3)  # class 0 = free, A = 1, B = 2
        accumulate(cm, np.array([1, 2, 2, 2]), np.array([1, 1, 2, 2]))
        miou, iou = ssc_miou(cm, [1, 2])
        assert iou[1] == pytest.approx(0.5)
        assert iou[2] == pytest.approx(2 / 3)
        assert miou == pytest.approx(7 / 12)

    def test_absent_class_rules(self):
        cm = ConfusionMatrix(4)
        labels = np.array([1, 1, 2, 2])
        accumulate(cm, labels, labels)
        miou_zero, _ = ssc_miou(cm, [1, 2, 3])
        assert miou_zero == pytest.approx(2 / 3)
        miou_excl, _ = ssc_miou(cm, [1, 2, 3], exclude_absent=True)
        assert miou_excl == pytest.approx(1.0)

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(2)
        gt = rng.integers(0, 4, 200)
        pred = rng.integers(0, 4, 200)
        cm = accumulate(ConfusionMatrix(4), pred, gt)
        miou, _ = ssc_miou(cm, [1, 2, 3])
        perm = np.array([2, 3, 1, 0])  # relabeling
        cm_p = accumulate(ConfusionMatrix(4), perm[pred], perm[gt])
        miou_p, _ = ssc_miou(cm_p, [int(perm[c]) for c in [1, 2, 3]])
        assert miou == pytest.approx(miou_p)


class TestScIou:
    def test_identical(self):
        g = np.array([0, 1, 2, 0, 1])
        assert sc_iou((g, g), free_class_id=0) == 1.0

    def test_all_free_prediction(self):
        gt = np.array([0, 1, 2, 2])
        pred = np.zeros(4, dtype=np.int64)
        assert sc_iou((pred, gt), free_class_id=0) == 0.0

    def test_set_arithmetic(self):
        gt = np.array([1, 1, 1, 0, 0])
        pred = np.array([1, 1, 0, 2, 0])
        # occupied: gt {0,1,2}, pred {0,1,3}: TP=2, FP=1, FN=1 -> 2/4
        assert sc_iou((pred, gt), free_class_id=0) == pytest.approx(0.5)

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        gt = rng.integers(0, 3, 100)
        pred = rng.integers(0, 3, 100)
        assert sc_iou((pred, gt), 0) == pytest.approx(sc_iou((gt, pred), 0))

    def test_from_confusion_matrix(self):
        gt = np.array([1, 1, 1, 0, 0])
        pred = np.array([1, 1, 0, 2, 0])
        cm = accumulate(ConfusionMatrix(3), pred, gt)
        assert sc_iou(cm, 0) == pytest.approx(0.5)


class TestPointQuery:
    def scores(self):
        data = torch.zeros(3, 2, 2, 2)
        data[0] = 0.1
        data[1, 0] = 1.0  # class 1 wins in x=0 half
        data[2, 1] = 1.0  # class 2 wins in x=1 half
        return VoxelGrid(GridMeta((2, 2, 2)), data)

    def test_voxel_center_lookup(self):
        labels = point_query_segmentation(
            self.scores(), torch.tensor([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5]], dtype=torch.float64)
        )
        assert labels.tolist() == [1, 2]

    def test_out_of_bounds_ignore(self):
        labels = point_query_segmentation(
            self.scores(), torch.tensor([[-1.0, 0.5, 0.5], [0.5, 0.5, 99.0]], dtype=torch.float64)
        )
        assert labels.tolist() == [IGNORE_LABEL, IGNORE_LABEL]

    def test_matches_loop_lookup(self):
        gen = torch.Generator().manual_seed(4)
        meta = GridMeta((4, 3, 2), voxel_size=(0.5, 1.0, 0.25), origin=(-1.0, 0.0, 2.0))
        data = torch.randn(5, 4, 3, 2, generator=gen)
        grid = VoxelGrid(meta, data)
        pts = torch.rand(100, 3, generator=gen, dtype=torch.float64)
        pts = pts * torch.tensor([3.0, 4.0, 1.0]) + torch.tensor([-1.5, -0.5, 1.9])
        labels = point_query_segmentation(grid, pts)
        arg = data.argmax(dim=0)
        for m in range(100):
            idx = [
                int(np.floor((pts[m, a].item() - meta.origin[a]) / meta.voxel_size[a]))
                for a in range(3)
            ]
            if all(0 <= idx[a] < meta.resolution[a] for a in range(3)):
                assert labels[m].item() == arg[idx[0], idx[1], idx[2]].item()
            else:
                assert labels[m].item() == IGNORE_LABEL


class TestReportIo:
    def test_round_trip(self, tmp_path):
        report = {
            "sc_iou": 0.5,
            "ssc_miou": 0.25,
            "per_class_iou": {"road": 0.5, "car": 0.0},
        }
        jp = tmp_path / "report.json"
        tp = tmp_path / "report.txt"
        write_report(report, jp, tp)
        assert load_report(jp) == report
        text = tp.read_text()
        assert "sc_iou = 0.5" in text
        assert "per_class_iou.road = 0.5" in text
