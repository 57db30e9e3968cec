# automatika/config.py
#
# Конфигурация эксперимента:
# - .env (FEDPRUNE_*) — пути, уровень логов, число воркеров и потоков torch
# - JSON-конфиг, провалидированный pydantic-моделями секций
# - флаги CLI поверх конфига (флаги > конфиг > .env > дефолты)
# Все нарушения собираются одним списком (collect_violations) и для validate, и для запуска.

import copy
import hashlib
import json
import os
import pathlib
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from Models.errors import ConfigError
from Models.ids_cnn import ArchConfig
from analytics.cost_model import EnergyConstants
from data.partition import GammaSpec
from data.split_dataset import SplitSpec
from analytics.rho_optimizer import ScoreConfig, SearchMode
from train.federation import RoundConfig

# Ищем .env, поднимаясь вверх от файла config.py
CURRENT_FILE = pathlib.Path(__file__).resolve()
for parent in [CURRENT_FILE.parent] + list(CURRENT_FILE.parents):
    env_path = parent / ".env"
    if env_path.is_file():
        load_dotenv(env_path)
        break


def _clean(value: Optional[str]) -> Optional[str]:
    if value is None:
        return None
    # убираем пробелы и кавычки
    return value.strip().strip('"').strip("'")


def _env_int(name: str, default: int) -> int:
    raw = _clean(os.getenv(name))
    if not raw:
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{name}: ожидается целое число, пришло {raw!r}")


OUT_DIR = _clean(os.getenv("FEDPRUNE_OUT_DIR")) or "results"
LOG_LEVEL = (_clean(os.getenv("FEDPRUNE_LOG_LEVEL")) or "INFO").upper()
WORKERS = _env_int("FEDPRUNE_WORKERS", 1)
TORCH_THREADS = _env_int("FEDPRUNE_TORCH_THREADS", 1)


# ================== СЕКЦИИ КОНФИГА ==================


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticSection(_Section):
    classes: int = Field(ge=2)
    features: int = Field(ge=2)
    per_class_counts: List[int]
    separation: float = 4.0
    class_names: Optional[List[str]] = None


class DatasetSection(_Section):
    source: Literal["synthetic", "csv"] = "synthetic"
    synthetic: Optional[SyntheticSection] = None
    path: Optional[str] = None
    label_column: Optional[str] = None
    scaling: Literal["minmax", "none"] = "minmax"
    class_order: Optional[List[str]] = None


class SplitSection(_Section):
    train_fraction: float = 0.8
    stratified: bool = False


class PartitionSection(_Section):
    mode: Literal["quantity", "label", "mixed"] = "label"
    alpha: float = 1e6
    beta: float = 1.0
    label_alpha: Optional[float] = None


class ScoreSection(_Section):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    acc_unp: Any = 0.9375
    e_unp: Any = None  # None → энергия неприрезанной модели из arch + energy
    alpha1: float = 1.0
    alpha2: float = 50000.0
    beta: Any = 2e-5
    lam: Any = Field(default=10.0, alias="lambda")
    delta: Optional[float] = 0.05
    mode: SearchMode = "uniform-grid"
    step: float = 1e-4
    curve_step: float = 1e-3


class CostSection(_Section):
    multiply_add: bool = False
    published: Optional[Dict[str, float]] = None


class ExperimentConfig(_Section):
    """
    Один JSON-файл на эксперимент. Секции:
    dataset, split, partition, clients, arch, federation, sweep, score, energy, cost,
    output_dir, seed. Мастер-сид раскладывается на независимые потоки (stream_seeds).
    """

    dataset: DatasetSection = Field(default_factory=DatasetSection)
    split: SplitSection = Field(default_factory=SplitSection)
    partition: PartitionSection = Field(default_factory=PartitionSection)
    clients: int = Field(default=10, ge=1)
    arch: ArchConfig = Field(default_factory=ArchConfig)
    federation: RoundConfig = Field(default_factory=RoundConfig)
    sweep: List[float] = Field(default_factory=lambda: [0.0, 0.3, 0.5, 0.7, 0.9])
    score: ScoreSection = Field(default_factory=ScoreSection)
    energy: EnergyConstants = Field(default_factory=EnergyConstants)
    cost: CostSection = Field(default_factory=CostSection)
    output_dir: Optional[str] = None
    seed: int = Field(default=42, ge=0)

    @model_validator(mode="after")
    def _dataset_source(self) -> "ExperimentConfig":
        ds = self.dataset
        if ds.source == "synthetic" and ds.synthetic is None:
            raise ValueError("dataset.synthetic обязателен для source=synthetic")
        if ds.source == "csv" and (not ds.path or not ds.label_column):
            raise ValueError("dataset.path и dataset.label_column обязательны для source=csv")
        return self

    def data_dims(self) -> Tuple[Optional[int], Optional[int]]:
        """(features, classes), если они известны без чтения данных."""
        if self.dataset.source == "synthetic" and self.dataset.synthetic is not None:
            return self.dataset.synthetic.features, self.dataset.synthetic.classes
        return self.arch.input_length, self.arch.n_classes

    def resolved_arch(self, features: Optional[int] = None, classes: Optional[int] = None) -> ArchConfig:
        f, c = self.data_dims()
        return self.arch.resolved(features or f, classes or c)

    def score_config(self, e_unp_default: Optional[float] = None) -> ScoreConfig:
        s = self.score
        e_unp = s.e_unp if s.e_unp is not None else e_unp_default
        if e_unp is None:
            raise ConfigError("score.e_unp не задан и не может быть выведен из arch")
        return ScoreConfig(
            n_clients=self.clients,
            acc_unp=s.acc_unp,
            e_unp=e_unp,
            alpha1=s.alpha1,
            alpha2=s.alpha2,
            beta=s.beta,
            lam=s.lam,
            delta=s.delta,
        )


# ================== ЗАГРУЗКА И ВАЛИДАЦИЯ ==================


def _format_pydantic(e: ValidationError) -> List[str]:
    out = []
    for err in e.errors():
        loc = ".".join(str(p) for p in err.get("loc", ()))
        msg = err.get("msg", "")
        for prefix in ("Value error, ", "Assertion failed, "):
            if msg.startswith(prefix):
                msg = msg[len(prefix):]
        out.append(f"{loc}: {msg}" if loc else msg)
    return out


def read_raw(path: str) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Не найден конфиг: {path}")
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: ошибка разбора JSON: {e.msg}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: корень конфига должен быть объектом")
    return raw


def apply_env_defaults(raw: Dict[str, Any]) -> Dict[str, Any]:
    """.env задаёт значения, которых нет в конфиге (флаги > конфиг > .env > дефолты)."""
    out = copy.deepcopy(raw)
    fed = out.setdefault("federation", {})
    if isinstance(fed, dict):
        fed.setdefault("workers", WORKERS)
        fed.setdefault("torch_threads", TORCH_THREADS)
    return out


def _cross_field(cfg: ExperimentConfig) -> List[str]:
    out = []
    if isinstance(cfg.federation.rho, list) and len(cfg.federation.rho) != cfg.clients:
        out.append(f"federation.rho: вектор длины {len(cfg.federation.rho)}, а clients = {cfg.clients}")
    for i, r in enumerate(cfg.sweep):
        if not 0.0 <= r < 1.0:
            out.append(f"sweep.{i}: rho must be in [0, 1), got {r}")

    syn = cfg.dataset.synthetic
    if cfg.dataset.source == "synthetic" and syn is not None:
        if len(syn.per_class_counts) != syn.classes:
            out.append(f"dataset.synthetic.per_class_counts: ожидается {syn.classes} значений")
        if any(c < 1 for c in syn.per_class_counts):
            out.append("dataset.synthetic.per_class_counts: каждое значение должно быть ≥ 1")
        elif sum(syn.per_class_counts) < 2:
            out.append("dataset.synthetic.per_class_counts: нужно минимум 2 сэмпла")

    features, classes = cfg.data_dims()
    if features is not None and (classes is not None or cfg.arch.layers is not None):
        try:
            cfg.resolved_arch().layer_specs()
        except ConfigError as e:
            out.append(f"arch: {e}")

    s = cfg.score
    try:
        e_default = 1.0 if s.e_unp is None else None  # значение неважно, проверяем остальное
        cfg.score_config(e_default)
    except ValidationError as e:
        out += [f"score.{m}" for m in _format_pydantic(e)]
    if s.e_unp is None and features is None:
        out.append("score.e_unp: не задан, а arch.input_length неизвестен — энергию не вывести")
    if not 0.0 < s.step < 1.0:
        out.append("score.step: должен лежать в (0, 1)")
    if not 0.0 < s.curve_step < 1.0:
        out.append("score.curve_step: должен лежать в (0, 1)")

    try:
        SplitSpec(train_fraction=cfg.split.train_fraction, stratified=cfg.split.stratified)
        GammaSpec(alpha=cfg.partition.alpha, beta=cfg.partition.beta)
        if cfg.partition.label_alpha is not None:
            GammaSpec(alpha=cfg.partition.label_alpha, beta=cfg.partition.beta)
    except ValidationError as e:
        for m in _format_pydantic(e):
            section = "split" if "train_fraction" in m else "partition"
            out.append(f"{section}.{m}")
    return out


def collect_violations(raw: Dict[str, Any]) -> Tuple[Optional[ExperimentConfig], List[str]]:
    """Общий путь валидации для `validate` и всех остальных подкоманд."""
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        return None, _format_pydantic(e)
    violations = _cross_field(cfg)
    return (cfg if not violations else None), violations


def load_config(path: str, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    raw = apply_env_defaults(read_raw(path))
    if overrides:
        raw = apply_overrides(raw, overrides)
    cfg, violations = collect_violations(raw)
    if violations:
        raise ConfigError("некорректный конфиг:\n  " + "\n  ".join(violations))
    return cfg


def apply_overrides(raw: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Флаги CLI поверх конфига. None — флаг не задан."""
    out = copy.deepcopy(raw)

    def section(name: str) -> Dict[str, Any]:
        value = out.get(name)
        if not isinstance(value, dict):
            value = {}
            out[name] = value
        return value

    if overrides.get("seed") is not None:
        out["seed"] = overrides["seed"]
    if overrides.get("out") is not None:
        out["output_dir"] = overrides["out"]
    if overrides.get("label_col") is not None:
        section("dataset")["label_column"] = overrides["label_col"]
    if overrides.get("clients") is not None:
        out["clients"] = overrides["clients"]
    if overrides.get("alpha") is not None:
        section("partition")["alpha"] = overrides["alpha"]
    if overrides.get("algorithm") is not None:
        fed = section("federation")
        if fed.get("algorithm") != overrides["algorithm"]:
            # μ из конфига относится к другому алгоритму
            fed.pop("mu", None)
        fed["algorithm"] = overrides["algorithm"]
    if overrides.get("agg") is not None:
        section("federation")["aggregation_mode"] = overrides["agg"]
    if overrides.get("rho") is not None:
        rho = overrides["rho"]
        out["sweep"] = rho
        if len(rho) == 1:
            section("federation")["rho"] = rho[0]
        elif len(rho) == out.get("clients", 10):
            # вектор ρ_i задаётся флагом, только если длина совпала с K; иначе это список для sweep
            section("federation")["rho"] = rho
    if overrides.get("mode") is not None:
        section("score")["mode"] = overrides["mode"]
    return out


def config_hash(cfg: ExperimentConfig) -> str:
    payload = json.dumps(cfg.model_dump(mode="json", by_alias=True), sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def stream_seeds(master: int) -> Dict[str, int]:
    """Независимые сиды для данных, сплита, разбиения и федерации."""
    names = ("data", "split", "partition", "federation")
    children = np.random.SeedSequence(master).spawn(len(names))
    return {name: int(ss.generate_state(1)[0]) for name, ss in zip(names, children)}
