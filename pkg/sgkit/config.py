"""
Run configuration for the sgkit CLI.

One JSON file holds a top-level seed, shared module sections and one section
per command:

    {
      "seed": 7,
      "selection": {"K": 10, "gamma": 0.5},
      "eval": {"ks": [20, 50, 100]},
      "evaluate": {"fixture": "fixture.json", "predictions": "predictions_ranked.json"}
    }

Precedence: command-line flag > config file > environment (.env: SGKIT_SEED,
SGKIT_OUT_DIR, SGKIT_LOG_LEVEL) > default. Relative paths are resolved
against the config file's directory and must exist.
"""

import hashlib
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from sgkit.assignment import MatchWeights
from sgkit.core import PathLike, dumps_canonical, read_json
from sgkit.distillation import DistillConfig
from sgkit.errors import ConfigError, FixtureError, describe_validation_error
from sgkit.fixtures import ScenarioSpec
from sgkit.losses import LossConfig
from sgkit.metrics import EvalConfig
from sgkit.objective import DescentConfig
from sgkit.query_selection import SelectionConfig
from sgkit.scene_model import DEFAULT_TEMPERATURE
from sgkit.target_gen import Mode, TargetGenConfig

DEFAULT_OUT_DIR = 'runs'

# config keys that never influence report contents
_UNHASHED = ('out_dir', 'log_level')


class SceneModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    encoder_seed: int = Field(default=0, ge=0)
    temperature: float = Field(default=DEFAULT_TEMPERATURE, gt=0.0)
    max_triplets: int = Field(default=10, ge=1)
    min_relation_similarity: float = Field(default=0.25, ge=-1.0, le=1.0)
    combiner_seed: int = Field(default=0, ge=0, description="Seed of the frozen edge combiner and e_rln")


class GenerateTargetsSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    scenes: Optional[Path] = None
    captions: Optional[Path] = None
    table: Optional[Path] = Field(default=None, description="Counter-action TSV; bundled table when omitted")
    mode: Mode = 'interaction'


class SelectQueriesSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    fixture: Optional[Path] = None
    manifest: Optional[Path] = Field(default=None, description="Enables query-allocation counts per image")


class PredictionInputs(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    fixture: Optional[Path] = None
    predictions: Optional[Path] = None


class DistillCheckSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    fixture: Optional[Path] = None
    noise: float = Field(default=0.05, ge=0.0, description="Std of the student offset from the teacher")
    scale_rows: bool = Field(default=False, description="Student = teacher rows times positive scales")
    threshold: float = Field(default=1e-4, gt=0.0)
    step: float = Field(default=1e-6, gt=0.0)


class GradcheckSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    instances: int = Field(default=100, ge=1)
    threshold: float = Field(default=1e-4, gt=0.0)
    step: float = Field(default=1e-6, gt=0.0)
    ops: Optional[List[str]] = None
    corrupt_op: Optional[str] = Field(default=None, description="Doubles this op's analytic gradient")


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    seed: int = Field(default=0, ge=0)
    out_dir: Path = Path(DEFAULT_OUT_DIR)
    log_level: Optional[str] = None

    selection: SelectionConfig = SelectionConfig()
    distill: DistillConfig = DistillConfig()
    loss: LossConfig = LossConfig()
    target_gen: TargetGenConfig = TargetGenConfig()
    eval: EvalConfig = EvalConfig()
    match_weights: MatchWeights = MatchWeights()
    scene_model: SceneModelConfig = SceneModelConfig()

    generate_targets: GenerateTargetsSection = GenerateTargetsSection()
    select_queries: SelectQueriesSection = SelectQueriesSection()
    match: PredictionInputs = PredictionInputs()
    distill_check: DistillCheckSection = DistillCheckSection()
    gradcheck: GradcheckSection = GradcheckSection()
    evaluate: PredictionInputs = PredictionInputs()
    descend: DescentConfig = DescentConfig()
    generate_fixtures: ScenarioSpec = ScenarioSpec()


PATH_FIELDS: Dict[str, tuple] = {
    'generate_targets': ('scenes', 'captions', 'table'),
    'select_queries': ('fixture', 'manifest'),
    'match': ('fixture', 'predictions'),
    'distill_check': ('fixture',),
    'evaluate': ('fixture', 'predictions'),
}


def _resolve_paths(raw: Dict[str, Any], base: Path) -> None:
    for section, names in PATH_FIELDS.items():
        values = raw.get(section)
        if not isinstance(values, dict):
            continue
        for name in names:
            value = values.get(name)
            if isinstance(value, str) and not Path(value).is_absolute():
                values[name] = str(base / value)


def _check_paths(cfg: RunConfig) -> None:
    for section, names in PATH_FIELDS.items():
        values = getattr(cfg, section)
        for name in names:
            path = getattr(values, name)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"{section}.{name}: path does not exist: {path}")


def _env_defaults() -> Dict[str, Any]:
    load_dotenv()
    env: Dict[str, Any] = {}
    seed = os.getenv('SGKIT_SEED')
    if seed:
        try:
            env['seed'] = int(seed)
        except ValueError:
            raise ConfigError(f"SGKIT_SEED must be an integer, got {seed!r}") from None
    if os.getenv('SGKIT_OUT_DIR'):
        env['out_dir'] = os.getenv('SGKIT_OUT_DIR')
    if os.getenv('SGKIT_LOG_LEVEL'):
        env['log_level'] = os.getenv('SGKIT_LOG_LEVEL')
    return env


def load_run_config(path: Optional[PathLike] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Build the effective RunConfig.

    Args:
        path: JSON config file, or None for defaults only
        overrides: top-level values from flags (None values are ignored)

    Raises:
        ConfigError: unreadable file, schema violation or missing referenced path
    """
    raw: Dict[str, Any] = {}
    base = Path.cwd()
    if path is not None:
        try:
            loaded = read_json(path)
        except FixtureError as e:
            raise ConfigError(str(e)) from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        raw = loaded
        base = Path(path).resolve().parent

    for key, value in _env_defaults().items():
        raw.setdefault(key, value)
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    _resolve_paths(raw, base)

    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(describe_validation_error(e)) from e
    _check_paths(cfg)
    return cfg


def config_hash(cfg: RunConfig) -> str:
    """
    SHA-256 of the canonical effective configuration.

    Output locations and log levels are left out and input paths are reduced
    to file names, so the same inputs in another directory hash the same.
    """
    payload = cfg.model_dump(mode='json', exclude=set(_UNHASHED))
    for section, names in PATH_FIELDS.items():
        for name in names:
            value = payload[section].get(name)
            if value is not None:
                payload[section][name] = Path(value).name
    return hashlib.sha256(dumps_canonical(payload).encode('utf-8')).hexdigest()
