#!/usr/bin/env python3
"""
Unit Tests for the synthetic scenario generator

The manifest is the oracle: its expected hit counts are recomputed by the
evaluator on the written prediction files.

Usage:
    python -m unittest tests.test_fixtures
"""

import tempfile
import unittest
from pathlib import Path

from pydantic import ValidationError

from sgkit.core import load_fixture, read_json, split_report, write_json_atomic
from sgkit.errors import FixtureError
from sgkit.fixtures import (CAPTIONS_FILE, MANIFEST_FILE, RANKED_FILE, ScenarioSpec, generate_scenario,
                            load_manifest)
from sgkit.geometry import iou
from sgkit.metrics import EvalConfig, evaluate
from sgkit.query_selection import SelectionConfig, decompose_triplets, interaction_select, query_allocation
from sgkit.scene_model import StubEncoder, encode_tokens
from sgkit.target_gen import parse_caption


class TestScenarioSpec(unittest.TestCase):
    """Test suite for ScenarioSpec validation"""

    def test_too_many_triplets(self):
        """Test that planted triplets need enough distinct classes"""
        with self.assertRaises(ValidationError):
            ScenarioSpec(num_objects=4, triplets_per_image=3)

    def test_filler_relation_needed(self):
        """Test that at least one relation must stay free for filler predictions"""
        with self.assertRaises(ValidationError):
            ScenarioSpec(num_relations=3, triplets_per_image=3)

    def test_lexicon_size(self):
        """Test that the vocabulary must fit in the lexicon"""
        with self.assertRaises(ValidationError):
            ScenarioSpec(num_objects=500)


class TestGenerateScenario(unittest.TestCase):
    """Test suite for generate_scenario()"""

    @classmethod
    def setUpClass(cls):
        cls.spec = ScenarioSpec(seed=4, n_images=10)
        cls.scenario = generate_scenario(cls.spec)

    def test_deterministic_files(self):
        """Test that the same spec writes byte-identical files"""
        with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
            first = self.scenario.write(a)
            second = generate_scenario(self.spec).write(b)
            self.assertEqual(sorted(first), sorted(second))
            for name in first:
                self.assertEqual(first[name].read_bytes(), second[name].read_bytes(), name)

    def test_other_seed_differs(self):
        """Test that a different seed gives a different scenario"""
        other = generate_scenario(ScenarioSpec(seed=5, n_images=10))
        self.assertNotEqual(other.graphs, self.scenario.graphs)

    def test_graph_layout(self):
        """Test planted edges, distractor count and distinct interacting classes"""
        for gt in self.scenario.graphs:
            self.assertEqual(len(gt.edges), 3)
            self.assertEqual(len(gt.nodes), 3 * 2 + 2)
            classes = [gt.nodes[n].class_id for e in gt.edges for n in (e.sub, e.obj)]
            self.assertEqual(len(set(classes)), 6)

    def test_distractor_overlaps_object(self):
        """Test that the first distractor overlaps the interacting object with IoU >= 0.5"""
        for gt in self.scenario.graphs:
            distractor = gt.nodes[6]
            self.assertGreaterEqual(iou(distractor.box, gt.nodes[1].box), 0.5)
            self.assertLess(iou(distractor.box, gt.nodes[0].box), 0.5)
            self.assertEqual(distractor.class_id, gt.nodes[0].class_id)

    def test_manifest_hits_match_evaluator(self):
        """Test that evaluating the ranked predictions reproduces the manifest hit counts"""
        with tempfile.TemporaryDirectory() as tmp:
            paths = self.scenario.write(tmp)
            fixture = load_fixture(paths['fixture'])
            ranked = load_fixture(Path(tmp) / RANKED_FILE)
            manifest = read_json(Path(tmp) / MANIFEST_FILE)
        report = evaluate(ranked.graphs, fixture.graphs, fixture.vocabulary, EvalConfig(ks=self.spec.ks))
        total = sum(len(entry['planted']) for entry in manifest.values())
        for K in self.spec.ks:
            expected = sum(entry['expected_hits'][str(K)] for entry in manifest.values())
            self.assertEqual(report.splits['all'].hits[K], expected, K)
            self.assertAlmostEqual(report.recall('all', K), expected / total)

    def test_manifest_ranks(self):
        """Test that each planted rank points at the right predicted edge"""
        for i, pred in enumerate(self.scenario.ranked):
            for planted in self.scenario.manifest[str(i)]['planted']:
                if planted['rank'] is None:
                    continue
                edge = pred.edges[planted['rank'] - 1]
                self.assertEqual((edge.sub, edge.rel, edge.obj),
                                 (planted['subject_node'], planted['relation'], planted['object_node']))
                self.assertLessEqual(planted['rank'], self.spec.max_rank)

    def test_perfect_predictions(self):
        """Test that the perfect predictor scores 1.0 and matches its manifest counts"""
        report = evaluate(self.scenario.perfect, self.scenario.graphs, self.scenario.vocabulary,
                          EvalConfig(ks=self.spec.ks))
        for K in self.spec.ks:
            self.assertEqual(report.recall('all', K), 1.0)
            expected = sum(e['expected_hits_perfect'][str(K)] for e in self.scenario.manifest.values())
            self.assertEqual(report.splits['all'].hits[K], expected)

    def test_captions_parse_back(self):
        """Test that every caption parses to exactly its planted triplet"""
        with tempfile.TemporaryDirectory() as tmp:
            self.scenario.write(tmp)
            captions = read_json(Path(tmp) / CAPTIONS_FILE)
        for i in range(self.spec.n_images):
            entry = self.scenario.manifest[str(i)]
            parsed = [t.labels for c in captions[entry['scene_id']] for t in parse_caption(c)]
            self.assertEqual(parsed, [(p['subject'], p['predicate'], p['object']) for p in entry['planted']])

    def test_token_owner(self):
        """Test token ownership against the token matrices"""
        for i in range(self.spec.n_images):
            entry = self.scenario.manifest[str(i)]
            owner = entry['token_owner']
            self.assertEqual(len(owner), self.scenario.embeddings[f"V_{i}"].rows)
            self.assertEqual(owner.count(-1), self.spec.background_tokens)
            self.assertEqual(entry['interacting_nodes'], [0, 1, 2, 3, 4, 5])

    def test_interaction_queries_land_on_interacting_instances(self):
        """Test that interaction-guided queries mostly hit interacting instances"""
        encoder = StubEncoder(seed=self.spec.encoder_seed, dim=self.spec.dim)
        landed = chosen = 0
        for i in range(self.spec.n_images):
            entry = self.scenario.manifest[str(i)]
            pairs = decompose_triplets(self.scenario.scenes[i].planted).pairs
            T_in = encode_tokens(encoder, pairs)
            result = interaction_select(self.scenario.embeddings[f"V_{i}"], T_in, self.scenario.embeddings['T_o'],
                                        SelectionConfig(K=12, L=6))
            alloc = query_allocation(result.indices_interaction, entry['token_owner'], entry['interacting_nodes'])
            landed += alloc.interacting
            chosen += len(result.indices_interaction)
        self.assertGreaterEqual(landed / chosen, 0.9)


class TestNovelSplits(unittest.TestCase):
    """Test suite for open-vocabulary scenarios"""

    def test_novel_fraction_counts(self):
        """Test that novel fractions round to class counts"""
        scenario = generate_scenario(ScenarioSpec(seed=2, novel_object_fraction=0.3, novel_relation_fraction=0.3))
        self.assertEqual(len(scenario.vocabulary.novel_object_ids), 4)
        self.assertEqual(len(scenario.vocabulary.novel_relation_ids), 2)

    def test_manifest_split_tags(self):
        """Test that manifest tags agree with split_report and partition the GT"""
        spec = ScenarioSpec(seed=6, n_images=10, novel_object_fraction=0.3, novel_relation_fraction=0.3)
        scenario = generate_scenario(spec)
        for i, gt in enumerate(scenario.graphs):
            tags = [t.value for t in split_report(gt, scenario.vocabulary)]
            self.assertEqual([p['split'] for p in scenario.manifest[str(i)]['planted']], tags)
        report = evaluate(scenario.perfect, scenario.graphs, scenario.vocabulary)
        counts = {name: rep.count for name, rep in report.splits.items()}
        self.assertEqual(counts['all'], counts['base'] + counts['novel-object'] + counts['novel-relation']
                         + counts['novel-both'])


class TestLoadManifest(unittest.TestCase):
    """Test suite for load_manifest()"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.scenario = generate_scenario(ScenarioSpec(seed=1, n_images=2))

    def tearDown(self):
        self.tmp.cleanup()

    def test_written_manifest_loads(self):
        """Test that a generated manifest validates with its owners and interacting nodes"""
        paths = self.scenario.write(self.dir)
        manifest = load_manifest(paths['manifest'])
        self.assertEqual(sorted(manifest), ['0', '1'])
        for key, entry in manifest.items():
            self.assertEqual(list(entry.token_owner), self.scenario.manifest[key]['token_owner'])
            self.assertEqual(list(entry.interacting_nodes), self.scenario.manifest[key]['interacting_nodes'])

    def test_missing_token_owner(self):
        """Test that an entry without token_owner raises FixtureError naming the field"""
        raw = {'0': {'scene_id': 'scene_000', 'interacting_nodes': [0, 1]}}
        path = write_json_atomic(self.dir / MANIFEST_FILE, raw)
        with self.assertRaises(FixtureError) as ctx:
            load_manifest(path)
        self.assertIn('0.token_owner', str(ctx.exception))

    def test_owner_below_background(self):
        """Test that token owners below -1 are rejected"""
        raw = {'0': {'token_owner': [0, -2], 'interacting_nodes': [0]}}
        with self.assertRaises(FixtureError):
            load_manifest(write_json_atomic(self.dir / MANIFEST_FILE, raw))


if __name__ == '__main__':
    unittest.main()
