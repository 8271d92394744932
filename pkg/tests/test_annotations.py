"""
Tests for the ground-truth and prediction text formats.
"""

import pytest

from app.core.errors import DataError, ParseError
from app.services.annotations import (
    GT_HEADER,
    PREDICTION_HEADER,
    format_predictions,
    parse_ground_truths,
    parse_predictions,
    read_ground_truths,
    read_predictions,
    write_ground_truths,
    write_predictions,
)
from tests.helpers import detection, ground_truth


class TestParsing:
    def test_ground_truths(self):
        gts = parse_ground_truths("# header\n\n0 2 1 2 11 12\n3 0 5.5 5 9 9\n")
        assert [(g.image_id, g.class_id, g.box.as_list()) for g in gts] == [
            (0, 2, [1.0, 2.0, 11.0, 12.0]),
            (3, 0, [5.5, 5.0, 9.0, 9.0]),
        ]

    def test_predictions(self):
        dets = parse_predictions("1 1 0.75 0 0 4 4\n")
        assert (dets[0].image_id, dets[0].class_id, dets[0].score) == (1, 1, 0.75)
        assert dets[0].box.as_list() == [0.0, 0.0, 4.0, 4.0]

    def test_wrong_field_count_names_the_line(self):
        with pytest.raises(ParseError) as info:
            parse_ground_truths("0 0 1 1 5 5\n# note\n0 0 1 1 5\n")
        assert info.value.line_number == 3
        assert info.value.message.startswith("line 3:")

    def test_non_numeric_field(self):
        with pytest.raises(ParseError):
            parse_predictions("0 0 high 0 0 4 4\n")

    def test_degenerate_box(self):
        with pytest.raises(ParseError) as info:
            parse_ground_truths("0 0 5 5 5 9\n")
        assert info.value.line_number == 1

    def test_negative_score(self):
        with pytest.raises(ParseError):
            parse_predictions("0 0 -0.1 0 0 4 4\n")

    def test_parse_error_is_a_data_error(self):
        with pytest.raises(DataError):
            parse_ground_truths("garbage\n")


class TestFiles:
    def test_ground_truth_file(self, tmp_path):
        gts = [ground_truth(1, 2, 11, 12, class_id=3, image_id=4), ground_truth(0, 0, 5, 5)]
        path = write_ground_truths(gts, tmp_path / "gt.txt")
        assert path.read_text().splitlines()[0] == GT_HEADER
        assert read_ground_truths(path) == gts

    def test_prediction_file(self, tmp_path):
        dets = [detection(1, 2, 11, 12, 0.5, class_id=1, image_id=2)]
        path = write_predictions(dets, tmp_path / "pred.txt")
        assert read_predictions(path) == dets

    def test_thin_box_survives_the_round_trip(self):
        thin = detection(10.00001, 0.0, 10.00004, 5.0, 0.123456789, class_id=1)
        (restored,) = parse_predictions(format_predictions([thin]))
        assert restored == thin
        assert restored.box.x2 > restored.box.x1

    def test_ground_truth_coordinates_are_exact(self, tmp_path):
        gts = [ground_truth(1 / 3, 2 / 7, 10.1 + 1e-9, 12.5, class_id=2)]
        assert read_ground_truths(write_ground_truths(gts, tmp_path / "gt.txt")) == gts

    def test_empty_prediction_file_has_only_the_header(self):
        assert format_predictions([]) == PREDICTION_HEADER + "\n"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError):
            read_predictions(tmp_path / "absent.txt")
