from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union, get_type_hints

import yaml

from config import CF_GRID_MAX, CF_GRID_MIN, CF_GRID_SIZE, ODE_GRID, ODE_TRUTH_GRID, OUTPUT_DIR
from modules.metacv.errors import ConfigError, UnsupportedModeError
from modules.metacv.network import BoundaryCorrection, NetworkSpec
from modules.metacv.stein import SteinCV, gaussian_score, zero_score
from modules.metacv.training import MetaConfig

CONFIG_SCHEMA_VERSION = 1
EXPERIMENT_KINDS = ("oscillatory", "ode")
ESTIMATORS = ("mc", "ncv", "cf", "mcv")
ALPHA_SCALINGS = ("none", "per_step")

# Поля, не влияющие на мета-обучение (для training_hash)
_NOT_TRAINING = {
    "experiment": {"t_test"},
    "meta": {"workers", "checkpoint_every"},
}


# ============================
# Секции конфига
# ============================

@dataclass(frozen=True)
class ExperimentSection:
    kind: str = "oscillatory"
    d: int = 2
    t_train: int = 2000
    t_test: int = 200
    n_per_task: int = 10
    seed: int = 0
    output_dir: str = OUTPUT_DIR


@dataclass(frozen=True)
class NetworkSection:
    hidden_widths: Tuple[int, ...] = (80, 80)
    activation: str = "sigmoid"
    output_mode: str = "replicate_scalar"
    sigma_init: float = 0.01


@dataclass(frozen=True)
class MetaSection:
    inner_steps: int = 1
    alpha: float = 0.01
    alpha_scaling: str = "none"
    eta: float = 0.002
    eta_schedule: str = "constant"
    meta_batch_size: int = 5
    meta_iterations: int = 2000
    lam: float = 5e-6
    grad_mode: str = "first_order"
    inner_rule: str = "adam"
    outer_rule: str = "adam"
    workers: int = 1
    checkpoint_every: int = 0


@dataclass(frozen=True)
class NeuralCVSection:
    epochs: int = 20
    batch_size: int = 5
    alpha: float = 0.002
    rule: str = "adam"
    lam: float = 5e-6


@dataclass(frozen=True)
class CFSection:
    grid_size: int = CF_GRID_SIZE
    grid_min: float = CF_GRID_MIN
    grid_max: float = CF_GRID_MAX
    nugget: Optional[float] = None


@dataclass(frozen=True)
class OdeSection:
    n_s: int = ODE_GRID
    n_s_truth: int = ODE_TRUTH_GRID


SECTIONS = {
    "experiment": ExperimentSection,
    "network": NetworkSection,
    "meta": MetaSection,
    "neural_cv": NeuralCVSection,
    "cf": CFSection,
    "ode": OdeSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Полностью разрешённый конфиг прогона. Пропущенные ключи получают значения по умолчанию,
    неизвестные — ошибка с указанием места.
    """
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    meta: MetaSection = field(default_factory=MetaSection)
    neural_cv: NeuralCVSection = field(default_factory=NeuralCVSection)
    cf: CFSection = field(default_factory=CFSection)
    ode: OdeSection = field(default_factory=OdeSection)
    estimators: Tuple[str, ...] = ESTIMATORS

    def __post_init__(self):
        self._validate()

    # ---- производные объекты ----

    @property
    def input_dim(self) -> int:
        return self.experiment.d if self.experiment.kind == "oscillatory" else 1

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(
            input_dim=self.input_dim,
            hidden_widths=self.network.hidden_widths,
            output_dim=1 if self.network.output_mode == "replicate_scalar" else self.input_dim,
            activation=self.network.activation,
            output_mode=self.network.output_mode,
        )

    def boundary(self) -> BoundaryCorrection:
        # для равномерной плотности на кубе поправка δ(x) обязательна
        return BoundaryCorrection("unit_cube_product" if self.experiment.kind == "oscillatory" else "none")

    def stein_cv(self) -> SteinCV:
        score = zero_score if self.experiment.kind == "oscillatory" else gaussian_score
        return SteinCV(spec=self.network_spec(), bc=self.boundary(), score=score)

    def effective_alpha(self) -> float:
        if self.meta.alpha_scaling == "per_step" and self.meta.inner_steps > 0:
            return self.meta.alpha / (50.0 * self.meta.inner_steps)
        return self.meta.alpha

    def meta_config(self) -> MetaConfig:
        m = self.meta
        return MetaConfig(
            inner_steps=m.inner_steps,
            alpha=self.effective_alpha(),
            eta=m.eta,
            eta_schedule=m.eta_schedule,
            meta_batch_size=m.meta_batch_size,
            meta_iterations=m.meta_iterations,
            lam=m.lam,
            grad_mode=m.grad_mode,
            inner_rule=m.inner_rule,
            outer_rule=m.outer_rule,
            seed=self.experiment.seed,
            sigma_init=self.network.sigma_init,
            workers=m.workers,
            checkpoint_every=m.checkpoint_every,
        )

    # ---- сериализация и хэши ----

    def to_dict(self) -> Dict[str, Any]:
        data = {"schema_version": CONFIG_SCHEMA_VERSION}
        for name in SECTIONS:
            section = asdict(getattr(self, name))
            data[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        data["estimators"] = list(self.estimators)
        return data

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def _hashable(self) -> Dict[str, Any]:
        # куда писать результаты — не часть эксперимента
        data = self.to_dict()
        data["experiment"] = {k: v for k, v in data["experiment"].items() if k != "output_dir"}
        return data

    def config_hash(self) -> str:
        return _digest(self._hashable())

    def training_hash(self) -> str:
        data = self._hashable()
        for section, skipped in _NOT_TRAINING.items():
            data[section] = {k: v for k, v in data[section].items() if k not in skipped}
        for section in ("neural_cv", "cf", "estimators"):
            data.pop(section)
        return _digest(data)

    def override(self, section: str, **values) -> "ExperimentConfig":
        return replace(self, **{section: replace(getattr(self, section), **values)})

    # ---- проверки ----

    def _validate(self) -> None:
        e = self.experiment
        if e.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown kind '{e.kind}', expected one of {EXPERIMENT_KINDS}", "experiment.kind")
        for key in ("d", "t_train", "t_test", "n_per_task"):
            if getattr(e, key) < 1:
                raise ConfigError("must be >= 1", f"experiment.{key}")
        if e.n_per_task < 2:
            raise ConfigError("need at least 2 points per task (support and query)", "experiment.n_per_task")
        if e.kind == "ode" and e.d != 1:
            raise ConfigError("the ODE family is one-dimensional, set d: 1", "experiment.d")
        if not self.estimators:
            raise ConfigError("select at least one estimator", "estimators")
        unknown = [name for name in self.estimators if name not in ESTIMATORS]
        if unknown or len(set(self.estimators)) != len(self.estimators):
            raise ConfigError(f"estimators must be distinct names from {ESTIMATORS}, got {list(self.estimators)}", "estimators")
        if self.meta.alpha_scaling not in ALPHA_SCALINGS:
            raise ConfigError(f"expected one of {ALPHA_SCALINGS}", "meta.alpha_scaling")
        if self.neural_cv.rule not in ("gd", "adam"):
            raise ConfigError("expected 'gd' or 'adam'", "neural_cv.rule")
        for key in ("epochs", "batch_size"):
            if getattr(self.neural_cv, key) < (0 if key == "epochs" else 1):
                raise ConfigError("out of range", f"neural_cv.{key}")
        if self.neural_cv.alpha <= 0 or self.neural_cv.lam < 0:
            raise ConfigError("alpha must be > 0 and lam >= 0", "neural_cv")
        if self.cf.grid_size < 1 or not 0 < self.cf.grid_min <= self.cf.grid_max:
            raise ConfigError("grid_size >= 1 and 0 < grid_min <= grid_max required", "cf")
        if self.cf.nugget is not None and self.cf.nugget < 0:
            raise ConfigError("must be >= 0", "cf.nugget")
        if self.ode.n_s < 2 or self.ode.n_s_truth < 4:
            raise ConfigError("grids too small", "ode")
        try:
            self.network_spec()
        except ValueError as err:
            raise ConfigError(str(err), "network") from err
        try:
            self.meta_config()
        except UnsupportedModeError as err:
            raise ConfigError(str(err), "meta.grad_mode") from err
        except ValueError as err:
            raise ConfigError(str(err), "meta") from err


def _digest(data: Mapping[str, Any]) -> str:
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ============================
# Разбор YAML со строгой схемой
# ============================

def _coerce(value: Any, hint: Any, location: str) -> Any:
    if hint is bool:
        if isinstance(value, bool):
            return value
    elif hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif hint is str:
        if isinstance(value, str):
            return value
    elif hint == Optional[float]:
        if value is None:
            return None
        return _coerce(value, float, location)
    elif hint == Tuple[int, ...] or hint == Tuple[str, ...]:
        item = int if hint == Tuple[int, ...] else str
        if isinstance(value, (list, tuple)):
            return tuple(_coerce(v, item, f"{location}[{i}]") for i, v in enumerate(value))
    raise ConfigError(f"expected {getattr(hint, '__name__', hint)}, got {type(value).__name__} ({value!r})", location)


def _build_section(cls, raw: Any, location: str):
    if raw is None:
        return cls()
    if not isinstance(raw, Mapping):
        raise ConfigError(f"expected a mapping, got {type(raw).__name__}", location)
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    values = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError("unknown key", f"{location}.{key}")
        values[key] = _coerce(value, hints[key], f"{location}.{key}")
    return cls(**values)


def config_from_mapping(raw: Mapping[str, Any]) -> ExperimentConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError("config root must be a mapping")
    version = raw.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {version}", "schema_version")
    allowed = set(SECTIONS) | {"estimators", "schema_version"}
    for key in raw:
        if key not in allowed:
            raise ConfigError("unknown key", str(key))
    sections = {name: _build_section(cls, raw.get(name), name) for name, cls in SECTIONS.items()}
    estimators = raw.get("estimators", list(ESTIMATORS))
    if isinstance(estimators, str):
        estimators = [part.strip() for part in estimators.split(",") if part.strip()]
    return ExperimentConfig(**sections, estimators=_coerce(estimators, Tuple[str, ...], "estimators"))


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML: {e}", str(path)) from e
    return config_from_mapping(raw or {})
