"""
Synthetic scenario generator with planted ground truth.

Every image holds a few planted <subject, relation, object> triplets between
distinct object classes plus distractor nodes that reuse the interacting
classes but take part in no relation. From one seeded RNG stream it derives:

- fixture.json            vocabulary, GT graphs, T_o / T_r and V_<i> embeddings
- predictions_perfect.json  predictions identical to the GT graphs
- predictions_ranked.json   correct triplets planted at known ranks among fillers
- scenes.json             scripted grounding scenes (prompt and bare-class phrases)
- captions.json           {scene_id: [caption, ...]}
- manifest.json           {image_id: planted triplets, expected hits per K, ...}

Usage:
    from sgkit.fixtures import ScenarioSpec, generate_scenario
    scenario = generate_scenario(ScenarioSpec(seed=7, n_images=10))
    scenario.write("runs/demo")
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError, model_validator

from sgkit.core import (BoundingBox, Edge, EmbeddingMatrix, Node, PathLike, SceneGraph, TripletCandidate,
                        Vocabulary, fixture_to_dict, read_json, split_report, write_json_atomic)
from sgkit.errors import FixtureError, describe_validation_error
from sgkit.logger import get_logger
from sgkit.scene_model import StubEncoder, class_prompt, encode_class_prompt, synth_visual_tokens
from sgkit.target_gen import (CaptionTriplet, GroundedBox, ScriptedGrounder, TableCounterActionProvider,
                              build_prompts, load_lexicon)

logger = get_logger(__name__)

SUBJECT_OBJECT_SHIFT = 0.1      # object box = subject box moved by this fraction of its width
DISTRACTOR_SHIFT = 0.4          # first distractor = subject box moved by this fraction of its width

FIXTURE_FILE = 'fixture.json'
PERFECT_FILE = 'predictions_perfect.json'
RANKED_FILE = 'predictions_ranked.json'
SCENES_FILE = 'scenes.json'
CAPTIONS_FILE = 'captions.json'
MANIFEST_FILE = 'manifest.json'


class ScenarioSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    seed: int = Field(default=0, ge=0)
    n_images: int = Field(default=10, ge=1)
    num_objects: int = Field(default=12, ge=2)
    num_relations: int = Field(default=8, ge=2)
    triplets_per_image: int = Field(default=3, ge=0)
    distractors_per_image: int = Field(default=2, ge=0)
    novel_object_fraction: float = Field(default=0.0, ge=0.0, le=1.0)
    novel_relation_fraction: float = Field(default=0.0, ge=0.0, le=1.0)
    tokens_per_node: int = Field(default=3, ge=1)
    background_tokens: int = Field(default=6, ge=0)
    token_noise: float = Field(default=0.3, ge=0.0)
    dim: int = Field(default=64, ge=2)
    encoder_seed: int = Field(default=0, ge=0)
    miss_fraction: float = Field(default=0.2, ge=0.0, le=1.0,
                                 description="Planted triplets the ranked predictor misses")
    max_rank: int = Field(default=150, ge=1, description="Largest rank of a correct ranked prediction")
    ks: Tuple[int, ...] = (20, 50, 100)

    @model_validator(mode='after')
    def _check_capacity(self) -> 'ScenarioSpec':
        if 2 * self.triplets_per_image > self.num_objects:
            raise ValueError(f"{self.triplets_per_image} triplets per image need {2 * self.triplets_per_image} "
                             f"distinct object classes, vocabulary has {self.num_objects}")
        if self.triplets_per_image >= self.num_relations:
            raise ValueError("triplets_per_image must leave at least one relation class for filler predictions")
        if self.triplets_per_image > self.max_rank:
            raise ValueError("max_rank must be at least triplets_per_image")
        lex = load_lexicon()
        if self.num_objects > len(lex.nouns):
            raise ValueError(f"lexicon has only {len(lex.nouns)} nouns")
        if self.num_relations > len(lex.verbs) + len(lex.prepositions):
            raise ValueError("lexicon has too few predicates")
        return self


@dataclass(frozen=True)
class Scenario:
    spec: ScenarioSpec
    vocabulary: Vocabulary
    graphs: List[SceneGraph]
    embeddings: Dict[str, EmbeddingMatrix]
    perfect: List[SceneGraph]
    ranked: List[SceneGraph]
    scenes: List[ScriptedGrounder]
    captions: Dict[str, List[str]]
    manifest: Dict[str, Any]

    def write(self, out_dir: PathLike) -> Dict[str, Path]:
        """Write every scenario file into out_dir (atomically, one by one)."""
        out = Path(out_dir)
        paths = {
            'fixture': write_json_atomic(out / FIXTURE_FILE,
                                         fixture_to_dict(self.vocabulary, self.graphs, self.embeddings)),
            'predictions_perfect': write_json_atomic(out / PERFECT_FILE,
                                                     fixture_to_dict(self.vocabulary, self.perfect)),
            'predictions_ranked': write_json_atomic(out / RANKED_FILE,
                                                    fixture_to_dict(self.vocabulary, self.ranked)),
            'scenes': write_json_atomic(out / SCENES_FILE, [s.to_dict() for s in self.scenes]),
            'captions': write_json_atomic(out / CAPTIONS_FILE, self.captions),
            'manifest': write_json_atomic(out / MANIFEST_FILE, self.manifest),
        }
        logger.info(f"Wrote scenario with {len(self.graphs)} image(s) to {out}")
        return paths


def _pick_novel(rng: np.random.Generator, count: int, fraction: float) -> List[int]:
    n_novel = int(round(fraction * count))
    return sorted(int(i) for i in rng.choice(count, size=n_novel, replace=False)) if n_novel else []


def _build_vocabulary(spec: ScenarioSpec, rng: np.random.Generator) -> Vocabulary:
    lex = load_lexicon()
    nouns = sorted(lex.nouns)
    predicates = sorted(lex.verbs | lex.prepositions)
    objects = [nouns[i] for i in rng.permutation(len(nouns))[:spec.num_objects]]
    relations = [predicates[i] for i in rng.permutation(len(predicates))[:spec.num_relations]]
    novel_obj = set(_pick_novel(rng, spec.num_objects, spec.novel_object_fraction))
    novel_rel = set(_pick_novel(rng, spec.num_relations, spec.novel_relation_fraction))
    return Vocabulary(
        object_classes=tuple(objects),
        relation_classes=tuple(relations),
        base_object_ids=tuple(i for i in range(spec.num_objects) if i not in novel_obj),
        base_relation_ids=tuple(i for i in range(spec.num_relations) if i not in novel_rel),
    )


def _subject_box(rng: np.random.Generator) -> BoundingBox:
    w, h = (float(v) for v in rng.uniform(0.12, 0.3, size=2))
    # room on the right for the object and the shifted distractor
    cx = float(rng.uniform(w / 2.0, 1.0 - (0.5 + DISTRACTOR_SHIFT) * w))
    cy = float(rng.uniform(h / 2.0, 1.0 - h / 2.0))
    return BoundingBox(cx=cx, cy=cy, w=w, h=h)


def _shifted(box: BoundingBox, fraction: float) -> BoundingBox:
    return BoundingBox(cx=box.cx + fraction * box.w, cy=box.cy, w=box.w, h=box.h)


def _random_box(rng: np.random.Generator) -> BoundingBox:
    w, h = (float(v) for v in rng.uniform(0.1, 0.3, size=2))
    return BoundingBox(cx=float(rng.uniform(w / 2.0, 1.0 - w / 2.0)),
                       cy=float(rng.uniform(h / 2.0, 1.0 - h / 2.0)), w=w, h=h)


def _gt_graph(spec: ScenarioSpec, rng: np.random.Generator) -> SceneGraph:
    T = spec.triplets_per_image
    classes = [int(c) for c in rng.permutation(spec.num_objects)[:2 * T]]
    relations = [int(r) for r in rng.permutation(spec.num_relations)[:T]]
    nodes: List[Node] = []
    edges: List[Edge] = []
    for t in range(T):
        subject = _subject_box(rng)
        nodes.append(Node(box=subject, class_id=classes[2 * t]))
        nodes.append(Node(box=_shifted(subject, SUBJECT_OBJECT_SHIFT), class_id=classes[2 * t + 1]))
        edges.append(Edge(sub=2 * t, obj=2 * t + 1, rel=relations[t]))
    for d in range(spec.distractors_per_image):
        if T == 0:
            nodes.append(Node(box=_random_box(rng), class_id=int(rng.integers(spec.num_objects))))
        elif d < T:
            # overlaps the interacting object, not the subject
            nodes.append(Node(box=_shifted(nodes[2 * d].box, DISTRACTOR_SHIFT), class_id=classes[2 * d]))
        else:
            t = d % T
            nodes.append(Node(box=_random_box(rng), class_id=classes[2 * t + 1]))
    return SceneGraph(nodes=tuple(nodes), edges=tuple(edges))


def _ranked_predictions(spec: ScenarioSpec, gt: SceneGraph,
                        rng: np.random.Generator) -> Tuple[SceneGraph, List[Optional[int]]]:
    """Correct edges at drawn ranks (1-based), filler edges with unused relations elsewhere."""
    T = len(gt.edges)
    if T == 0:
        return SceneGraph(nodes=gt.nodes), []
    drawn = [int(r) + 1 for r in rng.choice(spec.max_rank, size=T, replace=False)]
    missed = rng.random(T) < spec.miss_fraction
    ranks: List[Optional[int]] = [None if m else r for r, m in zip(drawn, missed)]

    used = {e.rel for e in gt.edges}
    unused = [r for r in range(spec.num_relations) if r not in used]
    at_rank = {r: t for t, r in enumerate(ranks) if r is not None}
    length = max(at_rank) if at_rank else 0

    edges = []
    for position in range(1, length + 1):
        score = 1.0 - 0.5 * position / (length + 1)
        if position in at_rank:
            truth = gt.edges[at_rank[position]]
            edges.append(Edge(sub=truth.sub, obj=truth.obj, rel=truth.rel, score=score))
        else:
            sub, obj = (int(v) for v in rng.choice(len(gt.nodes), size=2, replace=False))
            rel = unused[int(rng.integers(len(unused)))]
            edges.append(Edge(sub=sub, obj=obj, rel=rel, score=score))
    return SceneGraph(nodes=gt.nodes, edges=tuple(edges)), ranks


def _scripted_scene(scene_id: str, gt: SceneGraph, vocab: Vocabulary, provider: TableCounterActionProvider,
                    rng: np.random.Generator) -> Tuple[ScriptedGrounder, List[str]]:
    phrases: Dict[str, List[GroundedBox]] = {}
    planted: List[TripletCandidate] = []
    captions: List[str] = []
    for edge in gt.edges:
        s_name = vocab.object_classes[gt.nodes[edge.sub].class_id]
        o_name = vocab.object_classes[gt.nodes[edge.obj].class_id]
        p_name = vocab.relation_classes[edge.rel]
        prompts = build_prompts(CaptionTriplet(subject=s_name, predicate=p_name, object=o_name), provider)
        conf_s, conf_o = (round(float(c), 3) for c in rng.uniform(0.6, 0.95, size=2))
        phrases[prompts.forward] = [GroundedBox(box=gt.nodes[edge.sub].box, confidence=conf_s)]
        phrases[prompts.reverse] = [GroundedBox(box=gt.nodes[edge.obj].box, confidence=conf_o)]
        planted.append(TripletCandidate(subject_label=s_name, relation_label=p_name, object_label=o_name,
                                        subject_box=gt.nodes[edge.sub].box, object_box=gt.nodes[edge.obj].box,
                                        confidence=1.0))
        captions.append(f"the {s_name} {p_name} the {o_name}.")

    # bare class names answer with every instance of the class, distractors included
    for node in gt.nodes:
        name = vocab.object_classes[node.class_id]
        conf = round(float(rng.uniform(0.5, 0.9)), 3)
        phrases.setdefault(name, []).append(GroundedBox(box=node.box, confidence=conf))
    return ScriptedGrounder(scene_id, phrases, planted), captions


def generate_scenario(spec: ScenarioSpec) -> Scenario:
    """Build every scenario artefact from spec.seed; same spec, same files."""
    rng = np.random.default_rng(spec.seed)
    vocab = _build_vocabulary(spec, rng)
    encoder = StubEncoder(seed=spec.encoder_seed, dim=spec.dim)
    T_o, T_r = encode_class_prompt(encoder, class_prompt(vocab))
    provider = TableCounterActionProvider.default()

    embeddings: Dict[str, EmbeddingMatrix] = {'T_o': T_o, 'T_r': T_r}
    graphs: List[SceneGraph] = []
    ranked: List[SceneGraph] = []
    scenes: List[ScriptedGrounder] = []
    captions: Dict[str, List[str]] = {}
    manifest: Dict[str, Any] = {}

    for i in range(spec.n_images):
        gt = _gt_graph(spec, rng)
        tokens = synth_visual_tokens(gt, T_o, T_r, spec.tokens_per_node, spec.background_tokens,
                                     spec.token_noise, rng)
        prediction, ranks = _ranked_predictions(spec, gt, rng)
        scene_id = f"scene_{i:03d}"
        scene, scene_captions = _scripted_scene(scene_id, gt, vocab, provider, rng)

        graphs.append(gt)
        ranked.append(prediction)
        scenes.append(scene)
        captions[scene_id] = scene_captions
        embeddings[f"V_{i}"] = tokens.tokens

        tags = split_report(gt, vocab)
        planted = []
        for t, edge in enumerate(gt.edges):
            planted.append({
                'subject': vocab.object_classes[gt.nodes[edge.sub].class_id],
                'predicate': vocab.relation_classes[edge.rel],
                'object': vocab.object_classes[gt.nodes[edge.obj].class_id],
                'subject_class': gt.nodes[edge.sub].class_id,
                'relation': edge.rel,
                'object_class': gt.nodes[edge.obj].class_id,
                'subject_node': edge.sub,
                'object_node': edge.obj,
                'split': tags[t].value,
                'rank': ranks[t],
            })
        manifest[str(i)] = {
            'scene_id': scene_id,
            'planted': planted,
            'expected_hits': {str(K): sum(1 for r in ranks if r is not None and r <= K) for K in spec.ks},
            'expected_hits_perfect': {str(K): min(K, len(gt.edges)) for K in spec.ks},
            'token_owner': tokens.token_owner,
            'interacting_nodes': sorted({n for e in gt.edges for n in (e.sub, e.obj)}),
        }

    logger.debug(f"Generated {spec.n_images} image(s) with seed {spec.seed}")
    return Scenario(spec=spec, vocabulary=vocab, graphs=graphs, embeddings=embeddings, perfect=list(graphs),
                    ranked=ranked, scenes=scenes, captions=captions, manifest=manifest)


class ManifestEntry(BaseModel):
    """The parts of one manifest image entry that the query allocation reads."""
    model_config = ConfigDict(frozen=True, extra='ignore')

    scene_id: Optional[str] = None
    token_owner: Tuple[Annotated[int, Field(ge=-1)], ...] = Field(
        description="Node index per visual token, -1 for background")
    interacting_nodes: Tuple[Annotated[int, Field(ge=0)], ...] = Field(
        description="Nodes taking part in a planted triplet")


_MANIFEST = TypeAdapter(Dict[str, ManifestEntry])


def load_manifest(path: PathLike) -> Dict[str, ManifestEntry]:
    """Read manifest.json; a missing or malformed entry raises FixtureError naming the field."""
    raw = read_json(path)
    try:
        return _MANIFEST.validate_python(raw)
    except ValidationError as e:
        raise FixtureError(describe_validation_error(e), path=str(path)) from e
