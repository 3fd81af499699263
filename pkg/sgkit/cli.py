#!/usr/bin/env python3
"""
sgkit command line.

Every command reads one JSON run config (plus flag overrides), writes
<out>/<command>.json with the seed and config hash embedded, and exits with

    0  success
    1  verification failure (gradient check, descent floor)
    2  input error (missing file, schema violation, bad config)

Usage:
    python -m sgkit generate-fixtures --out runs/demo --seed 7
    python -m sgkit generate-targets --config runs/demo.json
    python -m sgkit generate-targets --config runs/demo.json --mode object_only
    python -m sgkit select-queries --config runs/demo.json
    python -m sgkit match --config runs/demo.json
    python -m sgkit distill-check --config runs/demo.json
    python -m sgkit gradcheck --seed 3
    python -m sgkit evaluate --config runs/demo.json
    python -m sgkit descend
"""

import argparse
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from sgkit.assignment import match_image
from sgkit.config import RunConfig, config_hash, load_run_config
from sgkit.core import EmbeddingMatrix, Fixture, PathLike, load_fixture, read_json, write_json_atomic
from sgkit.distillation import EdgeFeatureSet, rrd_loss, vrd_loss
from sgkit.errors import ConfigError, DimensionError, FixtureError, InvariantError, SgkitError, VerificationError
from sgkit.fixtures import generate_scenario, load_manifest
from sgkit.gradcheck import KINK_MARGIN, central_difference, relative_error, run_suite
from sgkit.logger import get_logger, parse_level, set_global_level
from sgkit.metrics import evaluate
from sgkit.objective import descend
from sgkit.query_selection import (decompose_triplets, initial_select, interaction_select, object_only_select,
                                   query_allocation)
from sgkit.scene_model import (EdgeCombiner, GlobalRelationEmbedding, StubEncoder, class_prompt, classify,
                               edge_features, encode_class_prompt, encode_tokens, predict_triplets)
from sgkit.target_gen import TableCounterActionProvider, TargetScore, generate_targets, load_scenes, \
    score_against_planted

logger = get_logger(__name__)

Report = Dict[str, Any]


def _banner(title: str) -> None:
    print("=" * 70)
    print(title)
    print("=" * 70)
    print()


def _require(value: Optional[Path], name: str) -> Path:
    if value is None:
        raise ConfigError(f"{name} is required for this command")
    return value


def _write_report(cfg: RunConfig, command: str, body: Report) -> Path:
    payload = dict(body)
    payload.update({'command': command, 'seed': cfg.seed, 'config_hash': config_hash(cfg)})
    path = write_json_atomic(Path(cfg.out_dir) / f"{command}.json", payload)
    print(f"✓ Report written to {path}")
    return path


def _class_embeddings(fixture: Fixture, encoder: StubEncoder) -> Tuple[EmbeddingMatrix, EmbeddingMatrix]:
    """T_o / T_r from the fixture, else encoded from the vocabulary."""
    if 'T_o' in fixture.embeddings and 'T_r' in fixture.embeddings:
        return fixture.embeddings['T_o'], fixture.embeddings['T_r']
    return encode_class_prompt(encoder, class_prompt(fixture.vocabulary))


def _embedding_dim(fixture: Fixture, default: int = 64) -> int:
    for matrix in fixture.embeddings.values():
        return matrix.dim
    return default


def _check_aligned(gt: Fixture, pred: Fixture, path: PathLike) -> None:
    if len(gt.graphs) != len(pred.graphs):
        raise InvariantError(f"{path}: {len(pred.graphs)} prediction graph(s) for {len(gt.graphs)} GT graph(s)")
    if pred.vocabulary != gt.vocabulary:
        raise InvariantError(f"{path}: prediction vocabulary differs from the GT vocabulary")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _read_captions(path: Path) -> Dict[str, List[str]]:
    if not path.read_text(encoding='utf-8').strip():
        return {}
    raw = read_json(path)
    if not isinstance(raw, dict) or not all(
            isinstance(v, list) and all(isinstance(c, str) for c in v) for v in raw.values()):
        raise FixtureError("captions must map scene ids to lists of strings", path=str(path))
    return raw


def cmd_generate_targets(cfg: RunConfig) -> Report:
    section = cfg.generate_targets
    scenes = load_scenes(_require(section.scenes, 'generate_targets.scenes'))
    captions = _read_captions(_require(section.captions, 'generate_targets.captions'))
    provider = TableCounterActionProvider.from_file(section.table) if section.table \
        else TableCounterActionProvider.default()

    known = {s.scene_id for s in scenes}
    for scene_id in sorted(set(captions) - known):
        logger.warning(f"Captions for unknown scene {scene_id!r} ignored")

    candidates: Dict[str, list] = {}
    per_scene: Dict[str, Any] = {}
    scores: List[TargetScore] = []
    for scene in scenes:
        found = generate_targets(captions.get(scene.scene_id, []), scene, provider, cfg.target_gen, section.mode)
        score = score_against_planted(found, scene.planted, cfg.target_gen.iou_threshold)
        candidates[scene.scene_id] = [c.to_dict() for c in found]
        per_scene[scene.scene_id] = score.to_dict()
        scores.append(score)
        print(f"  {scene.scene_id}: {score.candidates} candidate(s), {score.true_positives} planted match(es)")

    write_json_atomic(Path(cfg.out_dir) / 'candidates.json', candidates)
    total = TargetScore.merge(scores)
    print()
    print(f"Precision: {total.precision}  Recall: {total.recall}")
    return {'mode': section.mode, 'scenes': per_scene, 'total': total.to_dict()}


def cmd_select_queries(cfg: RunConfig) -> Report:
    section = cfg.select_queries
    path = _require(section.fixture, 'select_queries.fixture')
    fixture = load_fixture(path)
    manifest = load_manifest(section.manifest) if section.manifest else None
    encoder = StubEncoder(seed=cfg.scene_model.encoder_seed, dim=_embedding_dim(fixture))
    T_o, T_r = _class_embeddings(fixture, encoder)

    images = []
    totals = {'interaction': np.zeros(3, dtype=int), 'object_only': np.zeros(3, dtype=int)}
    for i in range(len(fixture.graphs)):
        key = f"V_{i}"
        if key not in fixture.embeddings:
            raise FixtureError(f"missing visual tokens {key}", path=str(path), field=f"embeddings.{key}")
        V = fixture.embeddings[key]

        first = initial_select(V, T_o, T_r, cfg.selection)
        triplets = predict_triplets(V, first.indices_all, T_o, T_r, fixture.vocabulary,
                                    cfg.scene_model.max_triplets, cfg.scene_model.min_relation_similarity,
                                    temperature=cfg.scene_model.temperature)
        prompts = decompose_triplets(triplets)
        second = interaction_select(V, encode_tokens(encoder, prompts.pairs), T_o, cfg.selection)
        baseline = object_only_select(V, T_o, cfg.selection.K)

        entry: Dict[str, Any] = {
            'pass1': first.to_dict(),
            'triplets': [t.to_dict() for t in triplets],
            'interaction_prompts': list(prompts.pairs),
            'pass2': second.to_dict(),
            'object_only': baseline.to_dict(),
        }
        if manifest is not None:
            truth = manifest.get(str(i))
            if truth is None:
                raise FixtureError(f"no manifest entry for image {i}", path=str(section.manifest))
            allocation = {
                'interaction': query_allocation(second.indices_all, truth.token_owner, truth.interacting_nodes),
                'object_only': query_allocation(baseline.indices_all, truth.token_owner, truth.interacting_nodes),
            }
            for name, counts in allocation.items():
                totals[name] += np.array(counts)
            entry['allocation'] = {name: counts.to_dict() for name, counts in allocation.items()}
        images.append(entry)
        logger.debug(f"Image {i}: {len(prompts)} interaction prompt(s)")

    report: Report = {'images': images}
    if manifest is not None:
        labels = ('interacting', 'non_interacting', 'background')
        report['allocation'] = {name: dict(zip(labels, (int(v) for v in counts))) for name, counts in totals.items()}
        print(f"Queries on interacting instances: interaction {report['allocation']['interaction']['interacting']}, "
              f"object-only {report['allocation']['object_only']['interacting']}")
    print(f"✓ Selected queries for {len(images)} image(s)")
    return report


def _score_rows(cfg: RunConfig, gt: Fixture, pred: Fixture, i: int) -> EmbeddingMatrix:
    """
    Per-query class scores, first match wins:

    - scores_<i>: explicit score rows
    - queries_<i>: query features, scored by classify() against T_o
    - otherwise the node score on its own class
    """
    vocab = gt.vocabulary
    key = f"scores_{i}"
    if key in pred.embeddings:
        return pred.embeddings[key]
    key = f"queries_{i}"
    if key in pred.embeddings:
        queries = pred.embeddings[key]
        if queries.rows != len(pred.graphs[i].nodes):
            raise DimensionError(
                f"{key} has {queries.rows} row(s) for {len(pred.graphs[i].nodes)} predicted node(s)")
        if queries.rows == 0:
            return EmbeddingMatrix.empty(vocab.num_objects)
        encoder = StubEncoder(seed=cfg.scene_model.encoder_seed, dim=queries.dim)
        T_o, _ = _class_embeddings(gt, encoder)
        return EmbeddingMatrix(classify(queries, T_o, cfg.scene_model.temperature))
    rows = np.zeros((len(pred.graphs[i].nodes), vocab.num_objects))
    for q, node in enumerate(pred.graphs[i].nodes):
        rows[q, node.class_id] = node.score
    return EmbeddingMatrix(rows) if rows.shape[0] else EmbeddingMatrix.empty(vocab.num_objects)


def cmd_match(cfg: RunConfig) -> Report:
    gt = load_fixture(_require(cfg.match.fixture, 'match.fixture'))
    pred_path = _require(cfg.match.predictions, 'match.predictions')
    pred = load_fixture(pred_path)
    _check_aligned(gt, pred, pred_path)

    images = []
    for i, (p, g) in enumerate(zip(pred.graphs, gt.graphs)):
        matching = match_image([n.box for n in p.nodes], _score_rows(cfg, gt, pred, i), g.nodes,
                               cfg.match_weights)
        images.append(matching.to_dict())
    print(f"✓ Matched {len(images)} image(s)")
    return {'images': images}


def _distill_image(cfg: RunConfig, image: int, nodes: EmbeddingMatrix, edges: set,
                   combiner: EdgeCombiner, e_rln: GlobalRelationEmbedding) -> Report:
    section = cfg.distill_check
    count = nodes.rows
    pairs = [(a, b) for a in range(count) for b in range(count) if a != b]
    negative_mask = [pair not in edges for pair in pairs]
    if not any(negative_mask):
        return {'pairs': len(pairs), 'negatives': 0, 'vrd': None, 'rrd': None, 'weighted': None,
                'relative_error': None, 'passed': True, 'grad': []}

    teacher = edge_features(combiner, e_rln, nodes, pairs).data
    rng = np.random.default_rng([cfg.seed, image])
    if section.scale_rows:
        student = teacher * rng.uniform(0.5, 2.0, size=(teacher.shape[0], 1))
    else:
        student = teacher + section.noise * rng.standard_normal(teacher.shape)

    teacher_set = EdgeFeatureSet.of(teacher, negative_mask)
    beta1, beta2 = cfg.distill.beta1, cfg.distill.beta2

    def weighted(x: np.ndarray) -> Tuple[float, np.ndarray]:
        student_set = EdgeFeatureSet.of(x.reshape(teacher.shape), negative_mask)
        vrd, d_vrd = vrd_loss(student_set, teacher_set)
        rrd, d_rrd = rrd_loss(student_set, teacher_set)
        return beta1 * vrd + beta2 * rrd, beta1 * d_vrd + beta2 * d_rrd

    student_set = EdgeFeatureSet.of(student, negative_mask)
    vrd, _ = vrd_loss(student_set, teacher_set)
    rrd, _ = rrd_loss(student_set, teacher_set)
    total, grad = weighted(student.reshape(-1))

    numeric = central_difference(lambda x: weighted(x)[0], student.reshape(-1), section.step)
    smooth = np.abs(student - teacher).reshape(-1) >= KINK_MARGIN
    error = relative_error(grad.reshape(-1)[smooth], numeric[smooth])
    return {
        'pairs': len(pairs),
        'negatives': int(sum(negative_mask)),
        'vrd': vrd,
        'rrd': rrd,
        'weighted': total,
        'grad_norm': float(np.linalg.norm(grad)),
        'relative_error': error,
        'passed': error <= section.threshold,
        'grad': grad.tolist(),
    }


def cmd_distill_check(cfg: RunConfig) -> Report:
    fixture = load_fixture(_require(cfg.distill_check.fixture, 'distill_check.fixture'))
    dim = _embedding_dim(fixture)
    encoder = StubEncoder(seed=cfg.scene_model.encoder_seed, dim=dim)
    T_o, _ = _class_embeddings(fixture, encoder)
    combiner = EdgeCombiner.from_seed(T_o.dim, seed=cfg.scene_model.combiner_seed)
    e_rln = GlobalRelationEmbedding.from_seed(T_o.dim, seed=cfg.scene_model.combiner_seed)

    images = []
    for i, graph in enumerate(fixture.graphs):
        nodes = T_o.take([n.class_id for n in graph.nodes]) if graph.nodes else EmbeddingMatrix.empty(T_o.dim)
        entry = _distill_image(cfg, i, nodes, {(e.sub, e.obj) for e in graph.edges}, combiner, e_rln)
        marker = "✓" if entry['passed'] else "✗"
        print(f"  {marker} image {i}: {entry['negatives']} negative pair(s), relative error {entry['relative_error']}")
        images.append(entry)

    failed = [i for i, entry in enumerate(images) if not entry['passed']]
    return {'images': images, 'failed': failed, 'passed': not failed}


def cmd_gradcheck(cfg: RunConfig) -> Report:
    section = cfg.gradcheck
    results = run_suite(cfg.seed, section.instances, section.threshold, section.step,
                        section.corrupt_op, section.ops)
    print(f"{'Operation':<16}{'Instances':>10}{'Skipped':>9}{'Max rel. error':>17}  Verdict")
    print("-" * 70)
    for r in results:
        verdict = "✓ PASS" if r.passed else "✗ FAIL"
        print(f"{r.op:<16}{r.instances:>10}{r.skipped:>9}{r.max_relative_error:>17.3e}  {verdict}")
    print()
    return {'results': [r.to_dict() for r in results], 'passed': all(r.passed for r in results)}


def cmd_evaluate(cfg: RunConfig) -> Report:
    gt = load_fixture(_require(cfg.evaluate.fixture, 'evaluate.fixture'))
    pred_path = _require(cfg.evaluate.predictions, 'evaluate.predictions')
    pred = load_fixture(pred_path)
    _check_aligned(gt, pred, pred_path)

    report = evaluate(pred.graphs, gt.graphs, gt.vocabulary, cfg.eval)
    for K in cfg.eval.ks:
        print(f"  R@{K}: {report.recall('all', K)}  mR@{K}: {report.mean_recall('all', K)}")
    return {'report': report.to_dict()}


def cmd_generate_fixtures(cfg: RunConfig) -> Report:
    spec = cfg.generate_fixtures.model_copy(update={'seed': cfg.seed})
    scenario = generate_scenario(spec)
    paths = scenario.write(cfg.out_dir)
    planted = sum(len(g.edges) for g in scenario.graphs)
    print(f"✓ {len(scenario.graphs)} image(s), {planted} planted triplet(s)")
    return {'spec': spec.model_dump(mode='json'), 'files': sorted(p.name for p in paths.values()),
            'planted': planted}


def cmd_descend(cfg: RunConfig) -> Report:
    settings = cfg.descend.model_copy(update={'seed': cfg.seed})
    result = descend(settings, cfg.loss, cfg.distill, cfg.match_weights)
    print(f"Initial loss: {result.initial_loss:.6f}")
    print(f"Final loss:   {result.final_loss:.6f}")
    print(f"Reduction:    {result.reduction:.1%} (floor {settings.min_reduction:.0%})")
    body = result.to_dict()
    body['passed'] = result.reduction >= settings.min_reduction
    return body


COMMANDS: Dict[str, Tuple[Callable[[RunConfig], Report], str]] = {
    'generate-targets': (cmd_generate_targets, "Bidirectional-prompt pseudo supervision vs planted truth"),
    'select-queries': (cmd_select_queries, "Two-pass interaction-guided query selection"),
    'match': (cmd_match, "Hungarian matching of predictions to GT nodes"),
    'distill-check': (cmd_distill_check, "Distillation losses and gradients with a finite-difference check"),
    'gradcheck': (cmd_gradcheck, "Finite-difference check of every differentiable operation"),
    'evaluate': (cmd_evaluate, "R@K / mR@K per open-vocabulary split"),
    'generate-fixtures': (cmd_generate_fixtures, "Synthetic scenario with planted ground truth"),
    'descend': (cmd_descend, "Gradient-descent smoke test of the combined objective"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='sgkit',
        description="Interaction-aware open-vocabulary scene graph toolkit",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest='command', required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text, description=help_text)
        sub.add_argument('--config', type=str, help='JSON run config')
        sub.add_argument('--seed', type=int, help='Override the run seed')
        sub.add_argument('--out', type=str, help='Output directory for reports')
        sub.add_argument('--log-level', type=str, help='DEBUG, INFO, WARNING or ERROR')
        sub.add_argument('--verbose', action='store_true', help='Shortcut for --log-level DEBUG')
        if name == 'generate-targets':
            sub.add_argument('--mode', choices=('interaction', 'object_only'),
                             help='Ground bidirectional prompts or bare class names')
    return parser


def _load(args: argparse.Namespace) -> RunConfig:
    level = 'DEBUG' if args.verbose else args.log_level
    cfg = load_run_config(args.config, {'seed': args.seed, 'out_dir': args.out, 'log_level': level})
    if getattr(args, 'mode', None):
        section = cfg.generate_targets.model_copy(update={'mode': args.mode})
        cfg = cfg.model_copy(update={'generate_targets': section})
    if cfg.log_level:
        set_global_level(parse_level(cfg.log_level))
    return cfg


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    handler, title = COMMANDS[args.command]

    _banner(f"sgkit {args.command} - {title}")
    try:
        cfg = _load(args)
        print(f"Seed: {cfg.seed}")
        print(f"Output: {cfg.out_dir}")
        print()
        body = handler(cfg)
        _write_report(cfg, args.command, body)
        if body.get('passed') is False:
            raise VerificationError(f"{args.command} verification failed")
    except VerificationError as e:
        logger.error(str(e))
        print(f"✗ {e}")
        return 1
    except (SgkitError, OSError) as e:
        logger.error(str(e))
        print(f"✗ ERROR: {e}")
        return 2

    print()
    print("=" * 70)
    print("✓ Done")
    print("=" * 70)
    return 0


if __name__ == '__main__':
    sys.exit(main())
