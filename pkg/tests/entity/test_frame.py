__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import numpy as np

from buildmonitor.entity.frame import ProfileFrame
from tests.unittestcase import UnitTestCase


class TestProfileFrame(UnitTestCase):
    def test_parse(self):
        # GIVEN
        parsed = {"t_us": 120000, "scanner_id": 2, "points": [[-1.0, 49.5], [0.0, 0.0], [1.0, 50.5]],
                  "valid_mask": [1, 0, 1]}

        # WHEN
        frame = ProfileFrame(parsed, 4)

        # THEN
        self.assertTrue(frame.usable)
        self.assertEqual(120000, frame.t_us)
        self.assertEqual(0.12, frame.t)
        self.assertEqual(2, frame.scanner_id)
        self.assertEqual(2, frame.valid_count)
        self.assertEqual(4, frame.line_number)
        self.assert_points_close([[-1.0, 0.0, 49.5], [1.0, 0.0, 50.5]], frame.local_points())
        self.assertEqual((3, 3), frame.local_points(valid_only=False).shape)

    def test_missing_mask_means_all_valid(self):
        # WHEN
        frame = ProfileFrame({"t_us": 0, "scanner_id": 0, "points": [[0.0, 50.0], [1.0, 50.0]]})

        # THEN
        self.assertTrue(frame.usable)
        self.assertEqual(2, frame.valid_count)

    def test_unusable_records(self):
        # WHEN
        missing_time = ProfileFrame({"scanner_id": 0, "points": [[0.0, 50.0]]})
        bad_points = ProfileFrame({"t_us": 0, "scanner_id": 0, "points": [1.0, 2.0, 3.0]})
        short_mask = ProfileFrame({"t_us": 0, "scanner_id": 0, "points": [[0.0, 50.0], [1.0, 50.0]],
                                   "valid_mask": [1]})

        # THEN
        self.assertFalse(missing_time.usable)
        self.assertEqual(["t_us"], missing_time.failed_fields)
        self.assertFalse(bad_points.usable)
        self.assertIn("points", bad_points.failed_fields)
        self.assertFalse(short_mask.usable)
        self.assertEqual(["valid_mask"], short_mask.failed_fields)

    def test_build_and_to_dict(self):
        # GIVEN
        frame = ProfileFrame.build(20000, 1, np.array([[0.1234567, 50.0], [np.nan, np.nan]]),
                                   np.array([True, False]))

        # WHEN
        record = frame.to_dict()

        # THEN
        self.assertEqual({"t_us": 20000, "scanner_id": 1, "valid_mask": [1, 0],
                          "points": [[0.123457, 50.0], [0.0, 0.0]]}, record)
        restored = ProfileFrame(record)
        self.assertTrue(restored.usable)
        self.assertEqual(1, restored.valid_count)
