#!/usr/bin/env python3
"""
Unit Tests for the stub vision-language model

The edge_feature golden vectors in tests/golden/ pin a small, fully specified
combiner; the file must be present.

Usage:
    python -m unittest tests.test_scene_model
"""

import json
import unittest
from pathlib import Path

import numpy as np
from scipy.special import expit

from sgkit.core import BoundingBox, Edge, EmbeddingMatrix, Node, SceneGraph, Vocabulary
from sgkit.errors import DimensionError, InvariantError
from sgkit.gradcheck import central_difference, relative_error
from sgkit.scene_model import (FULL_FRAME, EdgeCombiner, GlobalRelationEmbedding, StubEncoder, class_prompt,
                               classify, edge_feature, edge_feature_backward, edge_features,
                               encode_class_prompt, encode_tokens, predict_triplets, split_class_prompt,
                               synth_visual_tokens)

GOLDEN_EDGE_FEATURE = Path(__file__).parent / 'golden' / 'edge_feature.json'


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


class TestStubEncoder(unittest.TestCase):
    """Test suite for StubEncoder and encode_tokens()"""

    def test_deterministic(self):
        """Test that the same input twice gives bitwise-identical matrices"""
        a = encode_tokens(StubEncoder(seed=3, dim=16), ['man', 'horse', 'man riding'])
        b = encode_tokens(StubEncoder(seed=3, dim=16), ['man', 'horse', 'man riding'])
        np.testing.assert_array_equal(a.data, b.data)

    def test_unit_norm(self):
        """Test that a single string gives one unit-norm row"""
        m = encode_tokens(StubEncoder(dim=64), ['surfboard'])
        self.assertEqual(m.data.shape, (1, 64))
        self.assertAlmostEqual(float(np.linalg.norm(m.data[0])), 1.0, delta=1e-12)

    def test_seed_changes_vectors(self):
        """Test that different seeds give different embeddings"""
        self.assertFalse(np.allclose(StubEncoder(seed=0).embed('man'), StubEncoder(seed=1).embed('man')))

    def test_distinct_words(self):
        """Test that 100 random words at d=64 have max pairwise |cosine| below 0.5"""
        for seed in range(5):
            m = encode_tokens(StubEncoder(seed=seed, dim=64), [f"word{k}" for k in range(100)]).data
            cos = m @ m.T
            np.fill_diagonal(cos, 0.0)
            self.assertLess(float(np.abs(cos).max()), 0.5, seed)

    def test_phrases_are_compositional(self):
        """Test that a phrase is close to its word sum but depends on word order"""
        enc = StubEncoder(dim=64)
        phrase = enc.embed('man riding')
        words = unit(enc.embed('man') + enc.embed('riding'))
        self.assertGreater(float(phrase @ words), 0.8)
        self.assertFalse(np.allclose(phrase, enc.embed('riding man')))

    def test_whitespace_is_normalised(self):
        """Test that extra spaces do not change the embedding"""
        enc = StubEncoder(dim=8)
        np.testing.assert_array_equal(enc.embed('man  riding'), enc.embed(' man riding '))

    def test_empty_string(self):
        """Test that an empty entry is rejected"""
        with self.assertRaises(InvariantError):
            encode_tokens(StubEncoder(), ['man', ' '])

    def test_empty_list(self):
        """Test that no strings give an empty matrix of the encoder dim"""
        m = encode_tokens(StubEncoder(dim=12), [])
        self.assertEqual(m.rows, 0)
        self.assertEqual(m.dim, 12)

    def test_invalid_dim(self):
        """Test that the dim must be positive"""
        with self.assertRaises(DimensionError):
            StubEncoder(dim=0)


class TestEdgeFeature(unittest.TestCase):
    """Test suite for edge_feature() and its backward pass"""

    def setUp(self):
        self.dim = 8
        self.combiner = EdgeCombiner.from_seed(self.dim, seed=7)
        self.e_rln = GlobalRelationEmbedding.from_seed(self.dim, seed=3)
        enc = StubEncoder(seed=0, dim=self.dim)
        self.e_i, self.e_j = enc.embed('man'), enc.embed('horse')

    def test_zero_weights(self):
        """Test that zero weights and biases give the zero vector"""
        out = edge_feature(EdgeCombiner.zeros(self.dim), self.e_rln, self.e_i, self.e_j)
        np.testing.assert_array_equal(out, np.zeros(self.dim))

    def test_asymmetric(self):
        """Test that swapping the two nodes changes the feature"""
        forward = edge_feature(self.combiner, self.e_rln, self.e_i, self.e_j)
        swapped = edge_feature(self.combiner, self.e_rln, self.e_j, self.e_i)
        self.assertGreater(float(np.abs(forward - swapped).max()), 1e-6)

    def test_matches_formula(self):
        """Test against a direct evaluation of the two-layer map"""
        c = self.combiner
        x = np.concatenate([self.e_rln.vector, self.e_i, self.e_j])
        expected = c.w2 @ np.tanh(c.w1 @ x + c.b1) + c.b2
        np.testing.assert_allclose(edge_feature(c, self.e_rln, self.e_i, self.e_j), expected)

    def test_default_hidden_width(self):
        """Test that the hidden width defaults to twice the dim"""
        self.assertEqual(self.combiner.hidden, 2 * self.dim)
        self.assertEqual(EdgeCombiner.from_seed(4, seed=0, hidden=5).hidden, 5)

    def test_unit_relation_embedding(self):
        """Test that a seeded relation embedding starts at unit norm"""
        self.assertAlmostEqual(float(np.linalg.norm(self.e_rln.vector)), 1.0)

    def test_dim_mismatch(self):
        """Test that node embeddings must have the combiner dim"""
        with self.assertRaises(DimensionError):
            edge_feature(self.combiner, self.e_rln, self.e_i[:4], self.e_j)

    def test_backward_matches_finite_differences(self):
        """Test the gradients wrt e_rln, e_i and e_j"""
        rng = np.random.default_rng(11)
        upstream = rng.normal(size=self.dim)
        grads = edge_feature_backward(self.combiner, self.e_rln, self.e_i, self.e_j, upstream)
        d = self.dim

        def f(v):
            return float(upstream @ edge_feature(self.combiner, GlobalRelationEmbedding(v[:d]), v[d:2 * d], v[2 * d:]))

        x = np.concatenate([self.e_rln.vector, self.e_i, self.e_j])
        analytic = np.concatenate([grads.d_rln, grads.d_i, grads.d_j])
        self.assertLess(relative_error(analytic, central_difference(f, x)), 1e-5)

    def test_batched_rows(self):
        """Test that edge_features stacks one row per ordered pair"""
        nodes = EmbeddingMatrix(np.stack([self.e_i, self.e_j]))
        out = edge_features(self.combiner, self.e_rln, nodes, [(0, 1), (1, 0)])
        np.testing.assert_allclose(out.data[0], edge_feature(self.combiner, self.e_rln, self.e_i, self.e_j))
        np.testing.assert_allclose(out.data[1], edge_feature(self.combiner, self.e_rln, self.e_j, self.e_i))
        self.assertEqual(edge_features(self.combiner, self.e_rln, nodes, []).rows, 0)

    def test_golden_vector(self):
        """Test a fully specified combiner against the recorded golden vectors"""
        self.assertTrue(GOLDEN_EDGE_FEATURE.is_file(), f"missing golden file {GOLDEN_EDGE_FEATURE}")
        golden = json.loads(GOLDEN_EDGE_FEATURE.read_text(encoding='utf-8'))
        combiner = EdgeCombiner(**{name: np.array(value) for name, value in golden['combiner'].items()})
        e_rln = GlobalRelationEmbedding(np.array(golden['e_rln']))
        e_i, e_j = np.array(golden['e_i']), np.array(golden['e_j'])
        np.testing.assert_allclose(edge_feature(combiner, e_rln, e_i, e_j), golden['edge_feature'],
                                   rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(edge_feature(combiner, e_rln, e_j, e_i), golden['edge_feature_swapped'],
                                   rtol=1e-12, atol=1e-12)


class TestClassify(unittest.TestCase):
    """Test suite for classify()"""

    def setUp(self):
        self.classes = encode_tokens(StubEncoder(dim=32), ['man', 'horse', 'surfboard', 'wave'])

    def test_exact_class_embedding(self):
        """Test that a feature equal to a class scores sigmoid(10) and is the maximum"""
        scores = classify(self.classes.take([2]), self.classes, temperature=10.0)
        self.assertAlmostEqual(float(scores[0, 2]), float(expit(10.0)))
        self.assertEqual(int(np.argmax(scores[0])), 2)
        self.assertTrue(np.all(np.delete(scores[0], 2) < scores[0, 2]))

    def test_orthogonal_feature(self):
        """Test that an orthogonal feature scores 0.5"""
        classes = EmbeddingMatrix(np.eye(3))
        scores = classify(EmbeddingMatrix(np.array([[0.0, 1.0, 0.0]])), classes)
        self.assertAlmostEqual(float(scores[0, 0]), 0.5)
        self.assertAlmostEqual(float(scores[0, 2]), 0.5)

    def test_random_matches_scalar(self):
        """Test every cell against a scalar recomputation"""
        rng = np.random.default_rng(2)
        feats = EmbeddingMatrix(rng.normal(size=(5, 32)))
        scores = classify(feats, self.classes, temperature=4.0)
        for i in range(5):
            for k in range(4):
                f, c = feats.data[i], self.classes.data[k]
                cos = f @ c / (np.linalg.norm(f) * np.linalg.norm(c))
                self.assertAlmostEqual(float(scores[i, k]), 1.0 / (1.0 + np.exp(-4.0 * cos)))

    def test_positive_rescaling(self):
        """Test that scaling a feature leaves its scores unchanged"""
        feats = EmbeddingMatrix(np.random.default_rng(3).normal(size=(3, 32)))
        np.testing.assert_allclose(classify(feats, self.classes),
                                   classify(EmbeddingMatrix(7.5 * feats.data), self.classes))

    def test_dim_mismatch(self):
        """Test that features and classes must share a dim"""
        with self.assertRaises(DimensionError):
            classify(EmbeddingMatrix(np.ones((1, 8))), self.classes)


class TestClassPrompt(unittest.TestCase):
    """Test suite for the category prompt"""

    def setUp(self):
        self.vocab = Vocabulary.model_validate({
            'objects': ['man', 'horse'], 'relations': ['riding', 'above'],
            'base_objects': [0, 1], 'base_relations': [0, 1]})

    def test_prompt_text(self):
        """Test the exact prompt layout"""
        self.assertEqual(class_prompt(self.vocab), '[CLS] man. horse. [SEP] riding. above.')

    def test_split_back(self):
        """Test that splitting the prompt returns the class names"""
        self.assertEqual(split_class_prompt(class_prompt(self.vocab)), (['man', 'horse'], ['riding', 'above']))

    def test_encoded_rows(self):
        """Test that each segment is encoded on its own"""
        enc = StubEncoder(dim=16)
        T_o, T_r = encode_class_prompt(enc, class_prompt(self.vocab))
        self.assertEqual((T_o.rows, T_r.rows), (2, 2))
        np.testing.assert_array_equal(T_o.data[1], enc.embed('horse'))
        np.testing.assert_array_equal(T_r.data[0], enc.embed('riding'))

    def test_malformed_prompt(self):
        """Test that a prompt without the separator is rejected"""
        with self.assertRaises(InvariantError):
            split_class_prompt('[CLS] man. horse.')


class TestPredictTriplets(unittest.TestCase):
    """Test suite for predict_triplets()"""

    def setUp(self):
        self.vocab = Vocabulary.model_validate({
            'objects': ['man', 'horse', 'dog'], 'relations': ['riding', 'near'],
            'base_objects': [0, 1, 2], 'base_relations': [0, 1]})
        eye = np.eye(6)
        self.T_o = EmbeddingMatrix(eye[:3])
        self.T_r = EmbeddingMatrix(eye[3:5])
        self.V = EmbeddingMatrix(np.stack([
            unit(eye[0] + eye[3]),   # man, riding
            unit(eye[1] + eye[3]),   # horse, riding
            unit(eye[2] + eye[4]),   # dog, near
        ]))

    def test_shared_relation_forms_both_orders(self):
        """Test that two tokens sharing a relation give both ordered triplets"""
        out = predict_triplets(self.V, [0, 1, 2], self.T_o, self.T_r, self.vocab)
        self.assertEqual([c.labels for c in out], [('man', 'riding', 'horse'), ('horse', 'riding', 'man')])
        self.assertAlmostEqual(out[0].confidence, float(expit(10.0 / np.sqrt(2.0))) ** 4)
        self.assertEqual(out[0].subject_box, FULL_FRAME)

    def test_temperature_sets_confidence(self):
        """Test that the classify temperature drives the triplet confidence"""
        cool = predict_triplets(self.V, [0, 1, 2], self.T_o, self.T_r, self.vocab, temperature=1.0)
        warm = predict_triplets(self.V, [0, 1, 2], self.T_o, self.T_r, self.vocab, temperature=10.0)
        self.assertEqual([c.labels for c in cool], [c.labels for c in warm])
        self.assertAlmostEqual(cool[0].confidence, float(expit(1.0 / np.sqrt(2.0))) ** 4)
        self.assertGreater(warm[0].confidence, cool[0].confidence)

    def test_max_triplets(self):
        """Test that only the best max_triplets are kept"""
        out = predict_triplets(self.V, [0, 1, 2], self.T_o, self.T_r, self.vocab, max_triplets=1)
        self.assertEqual(len(out), 1)

    def test_relation_threshold(self):
        """Test that weak relation evidence forms no triplet"""
        out = predict_triplets(self.V, [0, 1], self.T_o, self.T_r, self.vocab, min_relation_similarity=0.8)
        self.assertEqual(out, [])

    def test_token_boxes(self):
        """Test that candidate boxes come from the selected tokens"""
        boxes = [BoundingBox(cx=0.2 + 0.2 * k, cy=0.5, w=0.1, h=0.1) for k in range(3)]
        out = predict_triplets(self.V, [0, 1], self.T_o, self.T_r, self.vocab, token_boxes=boxes)
        self.assertEqual(out[0].subject_box, boxes[0])
        self.assertEqual(out[0].object_box, boxes[1])

    def test_no_selection(self):
        """Test that no selected tokens give no triplets"""
        self.assertEqual(predict_triplets(self.V, [], self.T_o, self.T_r, self.vocab), [])

    def test_vocabulary_size_checked(self):
        """Test that class embeddings must match the vocabulary"""
        with self.assertRaises(DimensionError):
            predict_triplets(self.V, [0], self.T_o.take([0, 1]), self.T_r, self.vocab)


class TestSynthVisualTokens(unittest.TestCase):
    """Test suite for synth_visual_tokens()"""

    def test_layout_and_noise_free_tokens(self):
        """Test token ownership and the noise-free token directions"""
        eye = np.eye(6)
        T_o, T_r = EmbeddingMatrix(eye[:3]), EmbeddingMatrix(eye[3:5])
        b = BoundingBox(cx=0.5, cy=0.5, w=0.2, h=0.2)
        graph = SceneGraph(nodes=(Node(box=b, class_id=0), Node(box=b, class_id=1), Node(box=b, class_id=2)),
                           edges=(Edge(sub=0, obj=1, rel=1),))
        out = synth_visual_tokens(graph, T_o, T_r, tokens_per_node=2, background_tokens=3, noise=0.0,
                                  rng=np.random.default_rng(0))
        self.assertEqual(out.token_owner, [0, 0, 1, 1, 2, 2, -1, -1, -1])
        np.testing.assert_allclose(out.tokens.data[0], unit(eye[0] + eye[4]))
        np.testing.assert_allclose(out.tokens.data[3], unit(eye[1] + eye[4]))
        np.testing.assert_allclose(out.tokens.data[4], eye[2])
        np.testing.assert_allclose(np.linalg.norm(out.tokens.data, axis=1), np.ones(9))

    def test_seeded(self):
        """Test that the same rng seed gives the same tokens"""
        T = encode_tokens(StubEncoder(dim=8), ['a', 'b'])
        b = BoundingBox(cx=0.5, cy=0.5, w=0.2, h=0.2)
        graph = SceneGraph(nodes=(Node(box=b, class_id=0), Node(box=b, class_id=1)),
                           edges=(Edge(sub=0, obj=1, rel=0),))
        first = synth_visual_tokens(graph, T, T, 3, 2, 0.3, np.random.default_rng(5))
        second = synth_visual_tokens(graph, T, T, 3, 2, 0.3, np.random.default_rng(5))
        np.testing.assert_array_equal(first.tokens.data, second.tokens.data)


if __name__ == '__main__':
    unittest.main()
