import pytest
import torch
from hypothesis import given, settings, strategies as st

from ckdtrack.data import BBox, CropTransform
from ckdtrack.errors import ContractError, NumericError
from ckdtrack.head import (HeadOutput, TrackingHead, decode_box, decode_boxes,
                           fuse_student_features, gaussian_target, giou, head_forward,
                           task_loss, task_loss_parts)

D64 = torch.float64
IDENTITY = CropTransform(1.0, 0.0, 0.0)


def synthetic_output(g, cell, offset, size, dtype=D64):
    logits = torch.full((1, g, g), -5.0, dtype=dtype)
    logits[0, cell[0], cell[1]] = 5.0
    off = torch.full((1, 2, g, g), offset, dtype=dtype)
    sz = torch.full((1, 2, g, g), size, dtype=dtype)
    return HeadOutput(logits, off, sz)


class TestFuse:
    def test_channels_and_order(self):
        rgb, tir = torch.randn(2, 16, 4), torch.zeros(2, 16, 4)
        fused = fuse_student_features(rgb, tir, 4)
        assert fused.shape == (2, 8, 4, 4)
        assert torch.equal(fused[:, 4:], torch.zeros(2, 4, 4, 4))
        swapped = fuse_student_features(tir, rgb, 4)
        assert torch.equal(swapped[:, :4], fused[:, 4:]) and torch.equal(swapped[:, 4:], fused[:, :4])

    def test_row_major(self):
        tokens = torch.arange(6.0).reshape(1, 6, 1).repeat(1, 1, 1)
        with pytest.raises(ContractError):
            fuse_student_features(tokens, tokens, 2)
        tokens = torch.arange(4.0).reshape(1, 4, 1)
        fused = fuse_student_features(tokens, tokens, 2)
        assert fused[0, 0].tolist() == [[0.0, 1.0], [2.0, 3.0]]

    def test_grid_mismatch(self):
        with pytest.raises(ContractError):
            fuse_student_features(torch.randn(1, 16, 4), torch.randn(1, 9, 4), 4)


class TestHeadForward:
    def test_ranges_shapes_determinism(self):
        torch.manual_seed(0)
        head = TrackingHead(8, 16)
        x = torch.randn(2, 8, 8, 8)
        out = head_forward(x, head)
        assert out.score_map.shape == (2, 8, 8)
        assert out.offset_map.shape == out.size_map.shape == (2, 2, 8, 8)
        for t in (out.score_map, out.offset_map, out.size_map):
            assert ((t > 0) & (t < 1)).all()
        again = head_forward(x, head)
        assert torch.equal(out.score_logits, again.score_logits)

    def test_fused_input_channels(self):
        from ckdtrack.train import build_model
        model = build_model(seed=0)
        assert model.heads["fused"].in_channels == 2 * model.cfg.dim
        assert model.heads["teacher_rgb"].in_channels == model.cfg.dim

    def test_non_finite(self):
        with pytest.raises(NumericError):
            head_forward(torch.full((1, 8, 4, 4), float("nan")), TrackingHead(8, 8))


class TestDecode:
    def test_formula_cell_plus_offset(self):
        # centre = (cell + offset) * patch, size = size_map * S
        box = decode_box(synthetic_output(8, (4, 4), 0.0, 0.25), IDENTITY, 8, 64)
        assert box.as_tuple() == pytest.approx((24, 24, 16, 16))
        box = decode_box(synthetic_output(8, (3, 3), 0.5, 0.25), IDENTITY, 8, 64)
        assert box.as_tuple() == pytest.approx((20, 20, 16, 16))

    def test_centre_cell_half_offset_on_odd_grid(self):
        box = decode_box(synthetic_output(7, (3, 3), 0.5, 16 / 56), IDENTITY, 8, 56)
        assert box.center == pytest.approx((28, 28)) and box.w == pytest.approx(16)

    def test_uniform_scores_pick_cell_zero(self):
        out = HeadOutput(torch.zeros(1, 8, 8), torch.full((1, 2, 8, 8), 0.5), torch.full((1, 2, 8, 8), 0.25))
        assert decode_box(out, IDENTITY, 8, 64).center == pytest.approx((4, 4))

    def test_through_crop_transform(self):
        tf = CropTransform(2.0, 10.0, -4.0)
        crop_box = decode_boxes(synthetic_output(8, (2, 5), 0.25, 0.5), 8, 64)[0]
        assert decode_box(synthetic_output(8, (2, 5), 0.25, 0.5), tf, 8, 64) == tf.to_frame(BBox(*crop_box.tolist()))

    @given(st.integers(0, 10_000), st.floats(-3, 3))
    @settings(max_examples=50, deadline=None)
    def test_argmax_invariance(self, seed, shift):
        g = torch.Generator().manual_seed(seed)
        out = HeadOutput(torch.randn(1, 8, 8, generator=g, dtype=D64),
                         torch.rand(1, 2, 8, 8, generator=g, dtype=D64),
                         torch.rand(1, 2, 8, 8, generator=g, dtype=D64))
        moved = HeadOutput(out.score_logits + shift, out.offset_map, out.size_map)
        assert torch.equal(decode_boxes(out, 8, 64), decode_boxes(moved, 8, 64))


class TestGiou:
    def test_identical(self):
        b = torch.tensor([3.0, 4.0, 5.0, 6.0], dtype=D64)
        assert giou(b, b).item() == 1.0

    def test_disjoint_example(self):
        a = torch.tensor([0.0, 0.0, 1.0, 1.0], dtype=D64)
        b = torch.tensor([1.0, 1.0, 1.0, 1.0], dtype=D64)
        assert giou(a, b).item() == pytest.approx(-0.5, abs=1e-12)

    @given(st.lists(st.floats(0.1, 20), min_size=8, max_size=8))
    @settings(max_examples=200, deadline=None)
    def test_range_and_symmetry(self, v):
        a = torch.tensor([v[0] - 10, v[1] - 10, v[2], v[3]], dtype=D64)
        b = torch.tensor([v[4] - 10, v[5] - 10, v[6], v[7]], dtype=D64)
        g = giou(a, b).item()
        assert -1 < g <= 1 + 1e-12
        assert g == giou(b, a).item()


class TestTaskLoss:
    def test_gaussian_target_peak(self):
        heat, rows, cols = gaussian_target(torch.tensor([[20.0, 28.0, 16.0, 8.0]]), 8, 8)
        assert (rows.item(), cols.item()) == (4, 3)
        assert heat[0, 4, 3] == 1.0 and (heat <= 1).all()
        # std clipped to one cell on both axes for a 2x1-cell box
        assert heat[0, 4, 4].item() == pytest.approx(torch.exp(torch.tensor(-0.5)).item())

    def test_perfect_regression(self):
        gt = torch.tensor([[24.0, 24.0, 16.0, 16.0]], dtype=D64)
        out = synthetic_output(8, (4, 4), 0.0, 0.25)
        out.score_logits[0, 4, 4] = 30.0
        parts = task_loss_parts(out, gt, 8, 64)
        assert parts.l1.item() == 0.0 and parts.giou.item() == 0.0
        assert task_loss(out, gt, 8, 64).item() == pytest.approx(parts.focal.item())
        worse = synthetic_output(8, (4, 4), 0.3, 0.25)
        assert task_loss(worse, gt, 8, 64).item() > task_loss(out, gt, 8, 64).item()

    def test_non_negative(self):
        torch.manual_seed(1)
        head = TrackingHead(4, 8).double()
        out = head(torch.randn(3, 4, 8, 8, dtype=D64))
        gt = torch.tensor([[10.0, 12.0, 14.0, 9.0], [30, 30, 20, 20], [1, 1, 5, 5]], dtype=D64)
        assert task_loss(out, gt, 8, 64).item() >= 0

    def test_degenerate_gt(self):
        out = synthetic_output(8, (0, 0), 0.5, 0.5)
        with pytest.raises(ContractError):
            task_loss(out, torch.tensor([[1.0, 1.0, 0.0, 3.0]]), 8, 64)
