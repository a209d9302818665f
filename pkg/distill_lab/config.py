"""
Experiment configuration.

A config is one JSON document. Hyper-parameters resolve in the order
built-in defaults < preset < config file < command-line overrides, and
``ExperimentConfig.to_dict`` writes the resolved values back out so that
parsing the output again yields the same config.
"""

import json
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from .distill import TemperatureSchedule, VanillaKdConfig
from .errors import ConfigError, DistillLabError
from .nn import Activation, MlpSpec, SgdConfig
from .ntk import NtkSettings
from .trainers import SCHEDULED_METHODS, Method, TrainingPlan

logger = logging.getLogger('distill-lab.config')

CONFIG_VERSION = 1
PRESET_DIR = Path(__file__).resolve().parent / 'presets'

PathLike = Union[str, Path]

ALL_METHODS = tuple(Method)


@dataclass(frozen=True)
class Hyperparameters:
    learning_rate: float = 0.05
    momentum: float = 0.9
    grad_clip: Optional[float] = 1.0
    batch_size: int = 32
    n_teacher_epochs: int = 10
    tau_max: int = 10
    phase1_epochs: int = 20
    increment_factor: int = 1
    warmup_epochs: int = 0
    phase2_epochs: int = 10
    student_epochs: int = 30
    vanilla_kd_alpha: float = 0.5
    kd_temperature: float = 2.0
    rco_anchors: Optional[Tuple[int, ...]] = None
    rco_epochs_per_anchor: int = 3
    disable_temperature: bool = False
    search_epochs: int = 10

    def __post_init__(self):
        if self.rco_anchors is not None:
            object.__setattr__(self, 'rco_anchors', tuple(int(a) for a in self.rco_anchors))
        for name in ('batch_size', 'n_teacher_epochs', 'search_epochs', 'rco_epochs_per_anchor'):
            if getattr(self, name) < 1:
                raise ConfigError(f"hyperparameter {name} must be >= 1, got {getattr(self, name)}")
        for name in ('warmup_epochs', 'phase2_epochs', 'student_epochs'):
            if getattr(self, name) < 0:
                raise ConfigError(f"hyperparameter {name} must be >= 0, got {getattr(self, name)}")
        try:
            self.sgd()
            self.kd()
            self.schedule()
        except DistillLabError as e:
            raise ConfigError(f"invalid hyperparameters: {e}") from e

    def sgd(self) -> SgdConfig:
        return SgdConfig(self.learning_rate, self.grad_clip, self.momentum)

    def kd(self) -> VanillaKdConfig:
        return VanillaKdConfig(self.vanilla_kd_alpha, self.kd_temperature)

    def schedule(self) -> TemperatureSchedule:
        return TemperatureSchedule.allocate(self.tau_max, self.phase1_epochs, self.increment_factor)

    def training_plan(self, method: Method, seed: int) -> TrainingPlan:
        method = Method(method)
        return TrainingPlan(
            method=method,
            sgd=self.sgd(),
            seed=int(seed),
            batch_size=self.batch_size,
            teacher_epochs=self.n_teacher_epochs,
            schedule=self.schedule() if method in SCHEDULED_METHODS else None,
            phase2_epochs=self.phase2_epochs,
            warmup_epochs=self.warmup_epochs,
            disable_temperature=self.disable_temperature,
            student_epochs=self.student_epochs,
            kd=self.kd(),
            rco_anchors=self.rco_anchors,
            rco_epochs_per_anchor=self.rco_epochs_per_anchor,
        )

    def to_dict(self) -> Dict[str, Any]:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        if self.rco_anchors is not None:
            data['rco_anchors'] = list(self.rco_anchors)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Hyperparameters':
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown hyperparameters: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"invalid hyperparameters: {e}") from e


@dataclass(frozen=True)
class ArchitectureSpec:
    """Hidden layers and activation; input/output dims come from the dataset."""
    hidden_dims: Tuple[int, ...] = ()
    activation: Activation = Activation.RELU

    def __post_init__(self):
        object.__setattr__(self, 'hidden_dims', tuple(int(h) for h in self.hidden_dims))
        try:
            object.__setattr__(self, 'activation', Activation(self.activation))
        except ValueError as e:
            raise ConfigError(f"unknown activation {self.activation!r}") from e
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError(f"hidden layer widths must be >= 1, got {list(self.hidden_dims)}")

    def mlp(self, input_dim: int, n_classes: int) -> MlpSpec:
        return MlpSpec(input_dim, self.hidden_dims, n_classes, self.activation).require_classifier()

    def to_dict(self) -> Dict[str, Any]:
        return {'hidden_dims': list(self.hidden_dims), 'activation': self.activation.value}

    @classmethod
    def from_dict(cls, data: Dict[str, Any], role: str) -> 'ArchitectureSpec':
        if not isinstance(data, dict):
            raise ConfigError(f"{role} must be an object with hidden_dims and activation")
        unknown = set(data) - {'hidden_dims', 'activation'}
        if unknown:
            raise ConfigError(f"unknown {role} keys: {sorted(unknown)}")
        return cls(tuple(data.get('hidden_dims', ())), data.get('activation', 'relu'))


def list_presets() -> List[str]:
    return sorted(path.stem for path in PRESET_DIR.glob('*.json'))


def load_preset(name: str) -> Dict[str, Any]:
    """Hyper-parameters of a shipped preset."""
    path = PRESET_DIR / f'{name}.json'
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(list_presets())}")
    document = read_json(path)
    return dict(document.get('hyperparameters', {}))


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: Dict[str, Any]
    teacher: ArchitectureSpec
    student: ArchitectureSpec
    ta: Optional[ArchitectureSpec] = None
    methods: Tuple[Method, ...] = ALL_METHODS
    hyperparameters: Hyperparameters = field(default_factory=Hyperparameters)
    seeds: Tuple[int, ...] = (1,)
    output_dir: str = 'runs'
    preset: Optional[str] = None
    ntk: Optional[NtkSettings] = None
    config_version: int = CONFIG_VERSION

    def __post_init__(self):
        object.__setattr__(self, 'seeds', tuple(int(s) for s in self.seeds))
        try:
            object.__setattr__(self, 'methods', tuple(Method(m) for m in self.methods))
        except ValueError as e:
            raise ConfigError(f"unknown method: {e}") from e
        if self.config_version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config_version {self.config_version!r}; "
                              f"expected {CONFIG_VERSION}")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if len(set(self.seeds)) != len(self.seeds) or min(self.seeds) < 0:
            raise ConfigError(f"seeds must be distinct and >= 0, got {list(self.seeds)}")
        if not self.methods:
            raise ConfigError("methods must not be empty")
        if not ('synthetic' in self.dataset) ^ ('csv' in self.dataset):
            raise ConfigError("dataset needs exactly one of 'synthetic' or 'csv'")
        if Method.TAKD in self.methods and self.ta is None:
            raise ConfigError("method takd needs a 'ta' architecture")
        hp = self.hyperparameters
        if Method.PRO_KD in self.methods and hp.warmup_epochs + hp.tau_max > hp.n_teacher_epochs:
            raise ConfigError(
                f"pro_kd needs teacher checkpoints up to epoch warmup_epochs + tau_max = "
                f"{hp.warmup_epochs + hp.tau_max}, but n_teacher_epochs is {hp.n_teacher_epochs}")
        if hp.rco_anchors is not None and any(
                not 1 <= a <= hp.n_teacher_epochs for a in hp.rco_anchors):
            raise ConfigError(f"rco_anchors must lie in [1, {hp.n_teacher_epochs}]")

    def with_overrides(self, seeds: Optional[Sequence[int]] = None,
                       output_dir: Optional[str] = None,
                       methods: Optional[Sequence[str]] = None) -> 'ExperimentConfig':
        changes: Dict[str, Any] = {}
        if seeds is not None:
            changes['seeds'] = tuple(seeds)
        if output_dir is not None:
            changes['output_dir'] = str(output_dir)
        if methods is not None:
            changes['methods'] = tuple(methods)
        return replace(self, **changes) if changes else self

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            'config_version': self.config_version,
            'preset': self.preset,
            'dataset': self.dataset,
            'teacher': self.teacher.to_dict(),
            'student': self.student.to_dict(),
            'ta': self.ta.to_dict() if self.ta is not None else None,
            'methods': [m.value for m in self.methods],
            'hyperparameters': self.hyperparameters.to_dict(),
            'seeds': list(self.seeds),
            'output_dir': self.output_dir,
        }
        if self.ntk is not None:
            data['ntk'] = self.ntk.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for required in ('dataset', 'teacher', 'student'):
            if required not in data:
                raise ConfigError(f"config is missing {required!r}")

        preset = data.get('preset')
        merged: Dict[str, Any] = {}
        if preset:
            merged.update(load_preset(preset))
        merged.update(data.get('hyperparameters') or {})

        ta = data.get('ta')
        ntk = data.get('ntk')
        try:
            ntk_settings = NtkSettings.from_dict(ntk) if ntk is not None else None
        except (DistillLabError, TypeError) as e:
            raise ConfigError(f"invalid ntk section: {e}") from e
        return cls(
            dataset=dict(data['dataset']),
            teacher=ArchitectureSpec.from_dict(data['teacher'], 'teacher'),
            student=ArchitectureSpec.from_dict(data['student'], 'student'),
            ta=ArchitectureSpec.from_dict(ta, 'ta') if ta is not None else None,
            methods=tuple(data.get('methods', [m.value for m in ALL_METHODS])),
            hyperparameters=Hyperparameters.from_dict(merged),
            seeds=tuple(data.get('seeds', (1,))),
            output_dir=str(data.get('output_dir', 'runs')),
            preset=preset,
            ntk=ntk_settings,
            config_version=int(data.get('config_version', CONFIG_VERSION)),
        )


def read_json(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            document = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: invalid JSON: {e.msg}") from e
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return document


def load_config(path: PathLike, preset: Optional[str] = None) -> ExperimentConfig:
    """Parse an experiment config; a ``preset`` argument replaces the file's preset."""
    document = read_json(path)
    if preset is not None:
        document['preset'] = preset
    config = ExperimentConfig.from_dict(document)
    logger.info("Loaded config %s (methods: %s, seeds: %s)", path,
                ', '.join(m.value for m in config.methods), list(config.seeds))
    return config


def load_ntk_settings(path: PathLike) -> NtkSettings:
    """The ``ntk`` section of a config file (or the whole file if it has none)."""
    document = read_json(path)
    section = document.get('ntk', document)
    try:
        return NtkSettings.from_dict(section)
    except (DistillLabError, TypeError) as e:
        raise ConfigError(f"invalid ntk settings in {path}: {e}") from e


def save_config(config: ExperimentConfig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(config.to_dict(), f, indent=2)
        f.write('\n')
    return path
