#!/usr/bin/env python3
"""
Unit Tests for relation-aware distillation losses

Usage:
    python -m unittest tests.test_distillation
"""

import unittest

import numpy as np

from sgkit.core import EmbeddingMatrix
from sgkit.distillation import (DistillConfig, EdgeFeatureSet, LossParts, rrd_loss, structure_matrix, total_loss,
                                vrd_loss)
from sgkit.errors import DimensionError, InvariantError
from sgkit.gradcheck import central_difference, relative_error


def feature_set(data, mask=None):
    data = np.asarray(data, dtype=np.float64)
    mask = [True] * data.shape[0] if mask is None else mask
    return EdgeFeatureSet.of(data, mask)


class TestVRDLoss(unittest.TestCase):
    """Test suite for vrd_loss()"""

    def test_equal_sets(self):
        """Test that identical student and teacher give zero loss and gradient"""
        t = feature_set(np.random.default_rng(0).normal(size=(4, 3)))
        loss, grad = vrd_loss(t, t)
        self.assertEqual(loss, 0.0)
        np.testing.assert_array_equal(grad, np.zeros((4, 3)))

    def test_single_coordinate(self):
        """Test one negative row differing by +0.5 in one coordinate"""
        teacher = np.zeros((1, 3))
        student = teacher.copy()
        student[0, 1] = 0.5
        loss, grad = vrd_loss(feature_set(student), feature_set(teacher))
        self.assertAlmostEqual(loss, 0.5)
        np.testing.assert_array_equal(grad, [[0.0, 1.0, 0.0]])

    def test_positives_ignored(self):
        """Test that rows outside the negative set carry no loss or gradient"""
        teacher = np.zeros((2, 2))
        student = np.array([[1.0, 1.0], [0.5, 0.0]])
        mask = [False, True]
        loss, grad = vrd_loss(feature_set(student, mask), feature_set(teacher, mask))
        self.assertAlmostEqual(loss, 0.5)
        np.testing.assert_array_equal(grad[0], [0.0, 0.0])

    def test_gradient_matches_finite_differences(self):
        """Test the sign gradient on random sets away from ties"""
        rng = np.random.default_rng(1)
        teacher = rng.normal(size=(5, 4))
        student = teacher + rng.choice([-1.0, 1.0], size=(5, 4)) * rng.uniform(0.1, 1.0, size=(5, 4))
        mask = [True, False, True, True, False]
        t_set = feature_set(teacher, mask)
        _, grad = vrd_loss(feature_set(student, mask), t_set)
        numeric = central_difference(lambda s: vrd_loss(feature_set(s, mask), t_set)[0], student.copy())
        self.assertLess(relative_error(grad, numeric), 1e-5)

    def test_no_negatives(self):
        """Test that an empty negative set is an invariant error"""
        t = feature_set(np.ones((2, 2)), [False, False])
        with self.assertRaises(InvariantError):
            vrd_loss(t, t)

    def test_misaligned_sets(self):
        """Test that student and teacher must have the same shape"""
        with self.assertRaises(DimensionError):
            vrd_loss(feature_set(np.ones((2, 2))), feature_set(np.ones((3, 2))))

    def test_mask_length_checked(self):
        """Test that the mask must have one entry per row"""
        with self.assertRaises(DimensionError):
            EdgeFeatureSet.of(np.ones((2, 2)), [True])


class TestStructureMatrix(unittest.TestCase):
    """Test suite for structure_matrix()"""

    def test_orthonormal_rows(self):
        """Test that orthonormal rows give the identity"""
        np.testing.assert_allclose(structure_matrix(EmbeddingMatrix(np.eye(3))), np.eye(3))

    def test_scale_invariance(self):
        """Test that parallel rows have cosine 1"""
        m = structure_matrix(EmbeddingMatrix(np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]])))
        self.assertAlmostEqual(m[0, 1], 1.0)

    def test_random_matches_cosines(self):
        """Test each cell against a direct cosine computation"""
        data = np.random.default_rng(2).normal(size=(4, 8))
        m = structure_matrix(EmbeddingMatrix(data))
        for i in range(4):
            for j in range(4):
                cos = data[i] @ data[j] / (np.linalg.norm(data[i]) * np.linalg.norm(data[j]))
                self.assertAlmostEqual(m[i, j], cos)
        np.testing.assert_allclose(m, m.T)

    def test_zero_row(self):
        """Test that a zero-norm row is rejected"""
        with self.assertRaises(InvariantError):
            structure_matrix(EmbeddingMatrix(np.array([[1.0, 0.0], [0.0, 0.0]])))


class TestRRDLoss(unittest.TestCase):
    """Test suite for rrd_loss()"""

    def test_equal_sets(self):
        """Test that identical sets give zero loss"""
        t = feature_set(np.random.default_rng(3).normal(size=(4, 5)))
        self.assertAlmostEqual(rrd_loss(t, t)[0], 0.0)

    def test_uniform_scaling(self):
        """Test that scaling every row by 3 leaves the structure unchanged"""
        teacher = np.random.default_rng(4).normal(size=(5, 3))
        loss, _ = rrd_loss(feature_set(3.0 * teacher), feature_set(teacher))
        self.assertLess(loss, 1e-12)

    def test_structure_versus_pointwise_witness(self):
        """Test that per-row positive scaling keeps RRD at zero while VRD is large"""
        rng = np.random.default_rng(5)
        teacher = rng.normal(size=(6, 8))
        student = teacher * rng.uniform(1.5, 3.0, size=(6, 1))
        vrd, _ = vrd_loss(feature_set(student), feature_set(teacher))
        rrd, _ = rrd_loss(feature_set(student), feature_set(teacher))
        self.assertGreater(vrd, 0.1)
        self.assertLess(rrd, 1e-12)

    def test_gradient_matches_finite_differences(self):
        """Test the gradient through the row normalisation"""
        rng = np.random.default_rng(6)
        for _ in range(10):
            teacher = rng.normal(size=(5, 4))
            student = rng.normal(size=(5, 4))
            mask = [True, True, False, True, True]
            t_set = feature_set(teacher, mask)
            _, grad = rrd_loss(feature_set(student, mask), t_set)
            numeric = central_difference(lambda s: rrd_loss(feature_set(s, mask), t_set)[0], student.copy())
            self.assertLess(relative_error(grad, numeric), 1e-4)

    def test_row_permutation(self):
        """Test that permuting rows of both sets leaves both losses unchanged"""
        rng = np.random.default_rng(7)
        teacher, student = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        perm = rng.permutation(5)
        self.assertAlmostEqual(rrd_loss(feature_set(student), feature_set(teacher))[0],
                               rrd_loss(feature_set(student[perm]), feature_set(teacher[perm]))[0])
        self.assertAlmostEqual(vrd_loss(feature_set(student), feature_set(teacher))[0],
                               vrd_loss(feature_set(student[perm]), feature_set(teacher[perm]))[0])

    def test_non_negative(self):
        """Test that both losses are never negative"""
        rng = np.random.default_rng(8)
        for _ in range(20):
            s, t = feature_set(rng.normal(size=(3, 2))), feature_set(rng.normal(size=(3, 2)))
            self.assertGreaterEqual(rrd_loss(s, t)[0], 0.0)
            self.assertGreaterEqual(vrd_loss(s, t)[0], 0.0)


class TestTotalLoss(unittest.TestCase):
    """Test suite for total_loss()"""

    def test_zero_betas(self):
        """Test that zero betas leave the four base losses"""
        parts = LossParts(reg=0.1, giou=0.2, obj=0.3, rel=0.4, vrd=5.0, rrd=6.0)
        self.assertAlmostEqual(total_loss(parts, DistillConfig(beta1=0.0, beta2=0.0)), 1.0)

    def test_all_zero(self):
        """Test that zero parts give zero"""
        self.assertEqual(total_loss(LossParts()), 0.0)

    def test_random_parts(self):
        """Test the weighted sum on random parts and betas"""
        rng = np.random.default_rng(9)
        for _ in range(20):
            values = dict(zip(('reg', 'giou', 'obj', 'rel', 'vrd', 'rrd'), rng.uniform(0.0, 2.0, size=6)))
            b1, b2 = rng.uniform(0.0, 3.0, size=2)
            expected = (values['reg'] + values['giou'] + values['obj'] + values['rel']
                        + b1 * values['vrd'] + b2 * values['rrd'])
            self.assertAlmostEqual(total_loss(values, DistillConfig(beta1=b1, beta2=b2)), expected)

    def test_invalid_parts(self):
        """Test that negative or non-finite parts are rejected"""
        with self.assertRaises(InvariantError):
            total_loss({'reg': -1.0})
        with self.assertRaises(InvariantError):
            total_loss({'obj': float('nan')})


if __name__ == '__main__':
    unittest.main()
