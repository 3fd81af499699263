"""
Interaction-aware target generation.

Captions are parsed into <subject, predicate, object> triplets; every triplet
becomes a bidirectional prompt pair ("man hold surfboard" /
"surfboard held by man"); a grounder answers each prompt with scored boxes;
the forward answer gives subject boxes, the reverse answer object boxes, and
overlapping pairs become pseudo-supervision TripletCandidates.

The object_only mode grounds bare class names instead, which is the baseline
that cannot tell an interacting instance from an idle one of the same class.
"""

import re
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Literal, Optional, Protocol, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from sgkit.core import BoundingBox, PathLike, TripletCandidate, coerce_box, read_json
from sgkit.errors import FixtureError, GroundingError, InvariantError, describe_validation_error
from sgkit.geometry import iou
from sgkit.logger import get_logger

logger = get_logger(__name__)

DATA_DIR = Path(__file__).resolve().parent / 'data'
DEFAULT_LEXICON = DATA_DIR / 'lexicon.json'
DEFAULT_COUNTER_ACTIONS = DATA_DIR / 'counter_actions.tsv'

Mode = Literal['interaction', 'object_only']

_TOKEN_RE = re.compile(r"[a-z]+|[^\sa-z]")


def normalize_phrase(text: str) -> str:
    return ' '.join(text.lower().split())


class CaptionTriplet(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    subject: str = Field(min_length=1)
    predicate: str = Field(min_length=1)
    object: str = Field(min_length=1)

    @field_validator('subject', 'predicate', 'object', mode='before')
    @classmethod
    def _normalize(cls, value: Any) -> Any:
        return normalize_phrase(value) if isinstance(value, str) else value

    @property
    def labels(self) -> Tuple[str, str, str]:
        return (self.subject, self.predicate, self.object)


class BidirectionalPrompt(BaseModel):
    model_config = ConfigDict(frozen=True)

    forward: str = Field(min_length=1, description="subject predicate object")
    reverse: str = Field(min_length=1, description="object counter_predicate subject")


class GroundedBox(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    box: BoundingBox
    confidence: float = Field(ge=0.0, le=1.0)

    @field_validator('box', mode='before')
    @classmethod
    def _box_from_list(cls, value: Any) -> Any:
        return coerce_box(value)


class GroundingResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    phrase: str
    boxes: Tuple[GroundedBox, ...] = ()


class TargetGenConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    iou_threshold: float = Field(default=0.5, ge=0.0, le=1.0, description="Subject/object box overlap gate")
    min_confidence: float = Field(default=0.3, ge=0.0, le=1.0, description="Minimum grounding confidence per box")


# ---------------------------------------------------------------------------
# Caption parsing
# ---------------------------------------------------------------------------

class Lexicon(BaseModel):
    model_config = ConfigDict(frozen=True)

    determiners: FrozenSet[str] = frozenset()
    nouns: FrozenSet[str] = frozenset()
    verbs: FrozenSet[str] = frozenset()
    prepositions: FrozenSet[str] = frozenset()


@lru_cache(maxsize=8)
def _load_lexicon(path: str) -> Lexicon:
    raw = read_json(path)
    try:
        return Lexicon(**{k: frozenset(normalize_phrase(w) for w in raw.get(k, ())) for k in
                          ('determiners', 'nouns', 'verbs', 'prepositions')})
    except (AttributeError, TypeError) as e:
        raise FixtureError(f"malformed lexicon: {e}", path=path) from e


def load_lexicon(path: Optional[PathLike] = None) -> Lexicon:
    """The caption lexicon; the bundled one unless a path is given."""
    return _load_lexicon(str(path or DEFAULT_LEXICON))


def _match_noun_phrase(tokens: List[str], i: int, lex: Lexicon) -> Optional[Tuple[str, int]]:
    if i < len(tokens) and tokens[i] in lex.determiners:
        i += 1
    if i < len(tokens) and tokens[i] in lex.nouns:
        return tokens[i], i + 1
    return None


def _predicate_options(tokens: List[str], i: int, lex: Lexicon) -> List[Tuple[str, int]]:
    if i >= len(tokens):
        return []
    word = tokens[i]
    if word in lex.verbs:
        options = []
        if i + 1 < len(tokens) and tokens[i + 1] in lex.prepositions:
            options.append((f"{word} {tokens[i + 1]}", i + 2))
        options.append((word, i + 1))
        return options
    if word in lex.prepositions:
        return [(word, i + 1)]
    return []


def parse_caption(caption: str, lexicon: Optional[Lexicon] = None) -> List[CaptionTriplet]:
    """
    Extract triplets matching NP PRED NP, scanning left to right.

    NP is an optional determiner followed by a lexicon noun; PRED is a verb,
    a verb followed by a preposition, or a bare preposition. Matches do not
    overlap and punctuation breaks them. Text outside the grammar is skipped.
    """
    lex = lexicon or load_lexicon()
    tokens = _TOKEN_RE.findall(caption.lower())
    triplets = []
    i = 0
    while i < len(tokens):
        found = None
        subject = _match_noun_phrase(tokens, i, lex)
        if subject is not None:
            for predicate, after_pred in _predicate_options(tokens, subject[1], lex):
                obj = _match_noun_phrase(tokens, after_pred, lex)
                if obj is not None:
                    found = (CaptionTriplet(subject=subject[0], predicate=predicate, object=obj[0]), obj[1])
                    break
        if found is None:
            i += 1
            continue
        triplets.append(found[0])
        i = found[1]
    return triplets


# ---------------------------------------------------------------------------
# Counter-actions and prompts
# ---------------------------------------------------------------------------

class CounterActionProvider(Protocol):
    def counter(self, predicate: str) -> Optional[str]:
        """Reverse-view phrase of `predicate`, or None when unknown."""
        ...


class TableCounterActionProvider:
    """Counter-actions from a `predicate<TAB>counter_phrase` table."""

    def __init__(self, table: Dict[str, str]):
        self.table = {normalize_phrase(k): normalize_phrase(v) for k, v in table.items()}

    @classmethod
    def from_file(cls, path: PathLike) -> 'TableCounterActionProvider':
        path = Path(path)
        if not path.is_file():
            raise FixtureError("file not found", path=str(path))
        table: Dict[str, str] = {}
        with path.open('r', encoding='utf-8') as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip('\n')
                if not line.strip() or line.lstrip().startswith('#'):
                    continue
                parts = line.split('\t')
                if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                    raise FixtureError("expected 'predicate<TAB>counter_phrase'", path=str(path),
                                       field=f"line {lineno}")
                table[parts[0]] = parts[1]
        logger.debug(f"Loaded {len(table)} counter-action(s) from {path}")
        return cls(table)

    @classmethod
    def default(cls) -> 'TableCounterActionProvider':
        return _default_provider()

    def counter(self, predicate: str) -> Optional[str]:
        return self.table.get(normalize_phrase(predicate))


@lru_cache(maxsize=1)
def _default_provider() -> TableCounterActionProvider:
    return TableCounterActionProvider.from_file(DEFAULT_COUNTER_ACTIONS)


def counter_action(predicate: str, provider: Optional[CounterActionProvider] = None,
                   lexicon: Optional[Lexicon] = None) -> str:
    """
    Provider lookup with a fallback for unknown predicates.

    A predicate ending in a preposition ("sitting in", "near") takes the
    counter-action of that preposition, or the preposition itself when the
    provider has none. Anything else falls back to "<predicate> by".
    """
    predicate = normalize_phrase(predicate)
    if not predicate:
        raise InvariantError("predicate is empty")
    provider = provider or TableCounterActionProvider.default()
    phrase = provider.counter(predicate)
    if phrase:
        return phrase
    last = predicate.split()[-1]
    if last in (lexicon or load_lexicon()).prepositions:
        logger.debug(f"No counter-action for {predicate!r}, using the one for {last!r}")
        return provider.counter(last) or last
    logger.debug(f"No counter-action for {predicate!r}, using fallback")
    return f"{predicate} by"


def build_prompts(triplet: CaptionTriplet, provider: Optional[CounterActionProvider] = None) -> BidirectionalPrompt:
    return BidirectionalPrompt(
        forward=f"{triplet.subject} {triplet.predicate} {triplet.object}",
        reverse=f"{triplet.object} {counter_action(triplet.predicate, provider)} {triplet.subject}",
    )


# ---------------------------------------------------------------------------
# Grounding
# ---------------------------------------------------------------------------

class Grounder(Protocol):
    def detect(self, prompt: str) -> Sequence[GroundedBox]:
        """Boxes (with confidences) answering the prompt; deterministic per prompt."""
        ...


class _ScriptedScene(BaseModel):
    model_config = ConfigDict(extra='forbid')

    scene_id: str = Field(min_length=1)
    phrases: Dict[str, List[GroundedBox]] = Field(default_factory=dict)
    planted: List[TripletCandidate] = Field(default_factory=list)

    @field_validator('phrases', mode='before')
    @classmethod
    def _rename_conf(cls, value: Any) -> Any:
        if not isinstance(value, dict):
            return value
        return {phrase: [_scripted_box(b) for b in boxes] if isinstance(boxes, list) else boxes
                for phrase, boxes in value.items()}

    @field_validator('planted', mode='before')
    @classmethod
    def _planted_entries(cls, value: Any) -> Any:
        if not isinstance(value, list):
            return value
        return [_planted_entry(p) for p in value]


def _scripted_box(entry: Any) -> Any:
    if isinstance(entry, dict) and 'conf' in entry:
        entry = {'box': entry.get('box'), 'confidence': entry['conf']}
    return entry


def _planted_entry(entry: Any) -> Any:
    if isinstance(entry, dict) and 'subject' in entry:
        return {
            'subject_label': entry.get('subject'),
            'relation_label': entry.get('predicate'),
            'object_label': entry.get('object'),
            'subject_box': entry.get('subject_box'),
            'object_box': entry.get('object_box'),
            'confidence': entry.get('confidence', 1.0),
        }
    return entry


class ScriptedGrounder:
    """Grounder for a scripted scene: phrase -> planted boxes, nothing else."""

    def __init__(self, scene_id: str, phrases: Dict[str, Sequence[GroundedBox]],
                 planted: Sequence[TripletCandidate] = ()):
        self.scene_id = scene_id
        self.phrases = {normalize_phrase(k): tuple(v) for k, v in phrases.items()}
        self.planted = list(planted)

    @classmethod
    def from_dict(cls, raw: Any, source: Optional[str] = None) -> 'ScriptedGrounder':
        try:
            scene = _ScriptedScene.model_validate(raw)
        except ValidationError as e:
            raise FixtureError(describe_validation_error(e), path=source) from e
        return cls(scene.scene_id, scene.phrases, scene.planted)

    def detect(self, prompt: str) -> Sequence[GroundedBox]:
        return self.phrases.get(normalize_phrase(prompt), ())

    def to_dict(self) -> Dict[str, Any]:
        return {
            'scene_id': self.scene_id,
            'phrases': {p: [{'box': b.box.to_list(), 'conf': b.confidence} for b in boxes]
                        for p, boxes in self.phrases.items()},
            'planted': [c.to_dict() for c in self.planted],
        }


def load_scenes(path: PathLike) -> List[ScriptedGrounder]:
    """Scripted scenes from a file holding one scene object or a list of them."""
    raw = read_json(path)
    entries = raw if isinstance(raw, list) else [raw]
    scenes = []
    for idx, entry in enumerate(entries):
        source = f"{path}[{idx}]" if isinstance(raw, list) else str(path)
        scenes.append(ScriptedGrounder.from_dict(entry, source=source))
    ids = [s.scene_id for s in scenes]
    if len(set(ids)) != len(ids):
        raise FixtureError("duplicate scene_id", path=str(path))
    return scenes


def ground(prompt: str, grounder: Grounder) -> GroundingResult:
    """Ask the grounder; any failure is re-raised as GroundingError naming the prompt."""
    try:
        boxes = tuple(grounder.detect(prompt))
    except Exception as e:
        raise GroundingError(prompt, e) from e
    return GroundingResult(phrase=prompt, boxes=boxes)


def combine(subject_result: GroundingResult, object_result: GroundingResult,
            triplet: CaptionTriplet, cfg: TargetGenConfig = TargetGenConfig()) -> List[TripletCandidate]:
    """
    One candidate per (subject box, object box) pair whose boxes overlap with
    IoU >= cfg.iou_threshold and whose confidences both reach
    cfg.min_confidence. Candidate confidence is the product of the two.
    """
    out = []
    for s in subject_result.boxes:
        if s.confidence < cfg.min_confidence:
            continue
        for o in object_result.boxes:
            if o.confidence < cfg.min_confidence:
                continue
            if iou(s.box, o.box) < cfg.iou_threshold:
                continue
            out.append(TripletCandidate(
                subject_label=triplet.subject,
                relation_label=triplet.predicate,
                object_label=triplet.object,
                subject_box=s.box,
                object_box=o.box,
                confidence=s.confidence * o.confidence,
            ))
    return out


def generate_targets(
    captions: Sequence[str],
    grounder: Grounder,
    provider: Optional[CounterActionProvider] = None,
    cfg: TargetGenConfig = TargetGenConfig(),
    mode: Mode = 'interaction',
    lexicon: Optional[Lexicon] = None,
) -> List[TripletCandidate]:
    """
    Pseudo supervision for one scene: parse -> prompts -> ground -> combine.

    In 'interaction' mode the forward prompt grounds the subject and the
    reverse prompt grounds the object. In 'object_only' mode the bare class
    names are grounded instead.
    """
    if mode not in ('interaction', 'object_only'):
        raise InvariantError(f"unknown target generation mode {mode!r}")
    candidates: List[TripletCandidate] = []
    for caption in captions:
        triplets = parse_caption(caption, lexicon)
        if not triplets:
            logger.warning(f"Caption matched no triplet, skipped: {caption!r}")
            continue
        for triplet in triplets:
            if mode == 'interaction':
                prompts = build_prompts(triplet, provider)
                subject_result = ground(prompts.forward, grounder)
                object_result = ground(prompts.reverse, grounder)
            else:
                subject_result = ground(triplet.subject, grounder)
                object_result = ground(triplet.object, grounder)
            found = combine(subject_result, object_result, triplet, cfg)
            logger.debug(f"{triplet.labels}: {len(found)} candidate(s)")
            candidates.extend(found)
    return candidates


class TargetScore(BaseModel):
    model_config = ConfigDict(frozen=True)

    true_positives: int = Field(ge=0)
    candidates: int = Field(ge=0)
    planted: int = Field(ge=0)
    precision: Optional[float] = None
    recall: Optional[float] = None

    def to_dict(self) -> Dict[str, Union[int, Optional[float]]]:
        return self.model_dump()

    @classmethod
    def merge(cls, scores: Sequence['TargetScore']) -> 'TargetScore':
        tp = sum(s.true_positives for s in scores)
        n_cand = sum(s.candidates for s in scores)
        n_plant = sum(s.planted for s in scores)
        return cls.of(tp, n_cand, n_plant)

    @classmethod
    def of(cls, tp: int, n_cand: int, n_plant: int) -> 'TargetScore':
        return cls(
            true_positives=tp,
            candidates=n_cand,
            planted=n_plant,
            precision=tp / n_cand if n_cand else None,
            recall=tp / n_plant if n_plant else None,
        )


def score_against_planted(candidates: Sequence[TripletCandidate], planted: Sequence[TripletCandidate],
                          iou_threshold: float = 0.5) -> TargetScore:
    """
    Precision/recall of candidates against planted supervision.

    Candidates are visited by descending confidence (stable); each one claims
    the lowest-index unclaimed planted triplet with identical labels whose
    subject and object boxes both overlap it with IoU >= iou_threshold.
    """
    claimed = [False] * len(planted)
    order = sorted(range(len(candidates)), key=lambda k: -candidates[k].confidence)
    tp = 0
    for k in order:
        cand = candidates[k]
        for j, truth in enumerate(planted):
            if claimed[j] or cand.labels != truth.labels:
                continue
            if iou(cand.subject_box, truth.subject_box) >= iou_threshold \
                    and iou(cand.object_box, truth.object_box) >= iou_threshold:
                claimed[j] = True
                tp += 1
                break
    return TargetScore.of(tp, len(candidates), len(planted))
