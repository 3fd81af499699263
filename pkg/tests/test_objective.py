#!/usr/bin/env python3
"""
Unit Tests for the combined objective and the gradient-descent demo

Usage:
    python -m unittest tests.test_objective
"""

import unittest
from dataclasses import replace

import numpy as np
from pydantic import ValidationError

from sgkit.distillation import DistillConfig, total_loss
from sgkit.gradcheck import central_difference, relative_error
from sgkit.objective import (DescentConfig, clip_boxes, descend, image_objective, make_image, match_queries,
                             query_pairs)


class TestImageObjective(unittest.TestCase):
    """Test suite for image_objective()"""

    def setUp(self):
        self.cfg = DescentConfig(num_queries=4, num_gt=3, num_objects=5, num_relations=3, dim=4)
        self.image, self.params = make_image(self.cfg, np.random.default_rng(5))
        self.matching = match_queries(self.params, self.image)

    def test_shapes(self):
        """Test parameter and gradient shapes"""
        P = len(query_pairs(4))
        self.assertEqual(P, 12)
        self.assertEqual(self.params.relation.shape, (P, 3))
        self.assertEqual(self.params.edges.shape, (P, 4))
        result = image_objective(self.params, self.image, self.matching)
        self.assertEqual(result.grads.boxes.shape, (4, 4))
        self.assertEqual(result.grads.entity.shape, (4, 5))

    def test_every_gt_matched(self):
        """Test that each GT node gets its own query"""
        self.assertEqual(sorted(self.matching.pred_to_gt().values()), [0, 1, 2])

    def test_total_is_weighted_sum(self):
        """Test that the total equals the weighted sum of the parts"""
        distill = DistillConfig(beta1=0.5, beta2=2.0)
        result = image_objective(self.params, self.image, self.matching, distill_cfg=distill)
        self.assertAlmostEqual(result.total, total_loss(result.parts, distill))

    def test_gradients_match_finite_differences(self):
        """Test every parameter group's gradient at a fixed matching"""
        result = image_objective(self.params, self.image, self.matching)
        for name in ('boxes', 'entity', 'relation', 'edges'):
            def f(x, name=name):
                return image_objective(replace(self.params, **{name: x}), self.image, self.matching).total

            numeric = central_difference(f, getattr(self.params, name).copy())
            self.assertLess(relative_error(getattr(result.grads, name), numeric), 1e-4, name)

    def test_unmatched_boxes_get_no_gradient(self):
        """Test that only matched query boxes receive box gradients"""
        result = image_objective(self.params, self.image, self.matching)
        matched = set(self.matching.pred_to_gt())
        for q in range(4):
            if q not in matched:
                np.testing.assert_array_equal(result.grads.boxes[q], np.zeros(4))


class TestDescend(unittest.TestCase):
    """Test suite for descend()"""

    def test_loss_halves(self):
        """Test that the default demo removes at least half of the initial loss"""
        result = descend(DescentConfig())
        self.assertGreaterEqual(result.reduction, 0.5)
        self.assertEqual(len(result.curve), 201)
        self.assertLess(result.final_loss, result.initial_loss)

    def test_deterministic(self):
        """Test that the same seed gives the same curve"""
        cfg = DescentConfig(seed=3, steps=5)
        self.assertEqual(descend(cfg).curve, descend(cfg).curve)

    def test_report_parts(self):
        """Test the reported part names"""
        out = descend(DescentConfig(steps=2)).to_dict()
        self.assertEqual(sorted(out['initial_parts']), ['giou', 'obj', 'reg', 'rel', 'rrd', 'vrd'])

    def test_gt_count_bounded_by_queries(self):
        """Test that num_gt may not exceed num_queries"""
        with self.assertRaises(ValidationError):
            DescentConfig(num_queries=2, num_gt=3)

    def test_clip_boxes(self):
        """Test that clipping keeps centers in the image and sizes positive"""
        out = clip_boxes(np.array([[-0.1, 1.2, 0.0, 1.5]]))
        np.testing.assert_array_equal(out, [[0.0, 1.0, 0.01, 1.0]])


if __name__ == '__main__':
    unittest.main()
