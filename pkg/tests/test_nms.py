"""
Tests for traditional, stochastic and batched non-maximum suppression.
"""

import pytest
import torch

from app.kernels.tensor import make_generator
from app.models.anchors import iou
from app.schemas.config import NmsConfig, NmsMode, RetentionRule
from app.services.nms import batched_nms, nms_indices, nms_traditional, retention_probability, stochastic_nms
from tests.helpers import detection, random_detections

OVERLAPPING = [
    detection(0, 0, 10, 10, 0.9),
    detection(4, 0, 14, 10, 0.8),
]


def greedy_oracle(dets, threshold):
    """Textbook greedy NMS on plain lists."""
    pending = sorted(dets, key=lambda d: -d.score)
    kept = []
    while pending:
        best = pending.pop(0)
        kept.append(best)
        pending = [d for d in pending if iou(best.box, d.box) < threshold]
    return kept


class TestTraditionalNms:
    def test_suppresses_overlap(self):
        kept = nms_traditional(OVERLAPPING, NmsConfig(threshold=0.3))
        assert kept == [OVERLAPPING[0]]

    def test_keeps_overlap_below_threshold(self):
        kept = nms_traditional(OVERLAPPING, NmsConfig(threshold=0.5))
        assert kept == OVERLAPPING

    def test_empty_input(self):
        assert nms_traditional([], NmsConfig()) == []

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_greedy_oracle(self, seed):
        dets = random_detections(make_generator(seed), 40)
        config = NmsConfig(threshold=0.4)
        assert nms_traditional(dets, config) == greedy_oracle(dets, 0.4)

    @pytest.mark.parametrize("seed", range(5))
    def test_survivors_do_not_overlap(self, seed):
        kept = nms_traditional(random_detections(make_generator(seed), 40), NmsConfig(threshold=0.3))
        for i, a in enumerate(kept):
            for b in kept[i + 1:]:
                assert iou(a.box, b.box) < 0.3

    def test_is_idempotent(self, generator):
        config = NmsConfig(threshold=0.4)
        once = nms_traditional(random_detections(generator, 40), config)
        assert nms_traditional(once, config) == once

    def test_output_sorted_by_score(self, generator):
        kept = nms_traditional(random_detections(generator, 30), NmsConfig(threshold=0.5))
        scores = [d.score for d in kept]
        assert scores == sorted(scores, reverse=True)


class TestStochasticNms:
    def test_coverage_probability(self):
        p = retention_probability(
            torch.tensor([0.0, 0.0, 10.0, 10.0], dtype=torch.float64),
            torch.tensor([[4.0, 0.0, 14.0, 10.0]], dtype=torch.float64),
        )
        assert float(p[0]) == pytest.approx(0.6)

    def test_iou_over_area_probability(self):
        p = retention_probability(
            torch.tensor([0.0, 0.0, 10.0, 10.0], dtype=torch.float64),
            torch.tensor([[4.0, 0.0, 14.0, 10.0]], dtype=torch.float64),
            RetentionRule.IOU_OVER_AREA,
        )
        assert float(p[0]) == pytest.approx((60 / 140) / 100)

    def test_contained_box_always_survives(self, generator):
        dets = [detection(0, 0, 10, 10, 0.9), detection(2, 2, 6, 6, 0.5)]
        config = NmsConfig(threshold=0.1, mode=NmsMode.STOCHASTIC)
        for _ in range(50):
            assert stochastic_nms(dets, config, generator) == dets

    def test_never_retain_equals_traditional(self, generator):
        dets = random_detections(generator, 40)
        config = NmsConfig(threshold=0.3, mode=NmsMode.STOCHASTIC)
        kept = stochastic_nms(dets, config, generator, retention=lambda index, p: False)
        assert kept == nms_traditional(dets, config)

    def test_always_retain_keeps_everything(self, generator):
        dets = random_detections(generator, 40)
        config = NmsConfig(threshold=0.3, mode=NmsMode.STOCHASTIC)
        kept = stochastic_nms(dets, config, generator, retention=lambda index, p: True)
        assert sorted(kept, key=lambda d: d.score) == sorted(dets, key=lambda d: d.score)

    def test_retained_scores_are_unchanged(self):
        config = NmsConfig(threshold=0.3, mode=NmsMode.STOCHASTIC)
        kept = stochastic_nms(OVERLAPPING, config, make_generator(0), retention=lambda index, p: True)
        assert [d.score for d in kept] == [0.9, 0.8]

    def test_retention_callback_sees_probability(self):
        seen = []
        config = NmsConfig(threshold=0.3, mode=NmsMode.STOCHASTIC)
        stochastic_nms(OVERLAPPING, config, make_generator(0), retention=lambda i, p: seen.append((i, p)) or False)
        assert seen == [(1, pytest.approx(0.6))]

    def test_survival_frequency(self):
        boxes = torch.tensor([[0.0, 0.0, 10.0, 10.0], [4.0, 0.0, 14.0, 10.0]], dtype=torch.float64)
        scores = torch.tensor([0.9, 0.8], dtype=torch.float64)
        generator = make_generator(11)
        trials = 2000
        survived = sum(
            nms_indices(boxes, scores, 0.3, NmsMode.STOCHASTIC, generator).numel() == 2 for _ in range(trials)
        )
        assert survived / trials == pytest.approx(0.6, abs=0.05)

    @pytest.mark.slow
    def test_survival_frequency_many_trials(self):
        boxes = torch.tensor([[0.0, 0.0, 10.0, 10.0], [4.0, 0.0, 14.0, 10.0]], dtype=torch.float64)
        scores = torch.tensor([0.9, 0.8], dtype=torch.float64)
        generator = make_generator(12)
        trials = 100_000
        survived = sum(
            nms_indices(boxes, scores, 0.3, NmsMode.STOCHASTIC, generator).numel() == 2 for _ in range(trials)
        )
        assert survived / trials == pytest.approx(0.6, abs=0.01)

    def test_seeded_runs_agree(self):
        dets = random_detections(make_generator(4), 40)
        config = NmsConfig(threshold=0.3, mode=NmsMode.STOCHASTIC)
        first = stochastic_nms(dets, config, make_generator(8))
        second = stochastic_nms(dets, config, make_generator(8))
        assert first == second


class TestBatchedNms:
    def test_groups_by_image_and_class(self):
        dets = [
            detection(0, 0, 10, 10, 0.9, class_id=0, image_id=1),
            detection(0, 0, 10, 10, 0.8, class_id=1, image_id=1),
            detection(0, 0, 10, 10, 0.7, class_id=0, image_id=0),
            detection(1, 0, 11, 10, 0.6, class_id=0, image_id=0),
        ]
        kept = batched_nms(dets, NmsConfig(threshold=0.5))
        assert [(d.image_id, d.class_id, d.score) for d in kept] == [(0, 0, 0.7), (1, 0, 0.9), (1, 1, 0.8)]

    def test_stochastic_mode_uses_the_configured_seed(self, generator):
        dets = random_detections(generator, 40)
        config = NmsConfig(threshold=0.3, mode=NmsMode.STOCHASTIC, seed=5)
        assert batched_nms(dets, config) == batched_nms(dets, config)
