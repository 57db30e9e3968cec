# data/partition.py
#
# Раздача датасета по K клиентам с управляемой неоднородностью.
# Пропорции — нормированные Gamma(α, β)-выборки (β сокращается при нормировке):
#
# - quantity: один вектор θ на клиентов, размеры |D_k| = round(θ_k · samples)
# - label:    для каждого класса свой независимый вектор θ по клиентам
# - mixed:    label-раздача, затем сабсэмплинг клиентов до quantity-целей
#
# Целочисленные размеры — методом наибольшего остатка, так что суммы сходятся точно.

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator

from Models.errors import ConfigError, InputError

from .dataset import Dataset

logger = logging.getLogger(__name__)

PartitionMode = Literal["quantity", "label", "mixed"]

IID_ALPHA = 1e6


class GammaSpec(BaseModel):
    alpha: float
    beta: float = 1.0
    seed: int = Field(default=0, ge=0)

    @field_validator("alpha")
    @classmethod
    def _alpha_positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("alpha must be > 0")
        return v

    @field_validator("beta")
    @classmethod
    def _beta_positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("beta must be > 0")
        return v


def _check_gamma(spec: GammaSpec) -> None:
    # model_construct обходит валидаторы, поэтому проверяем ещё раз
    if not spec.alpha > 0:
        raise ConfigError(f"alpha must be > 0, пришло {spec.alpha}")
    if not spec.beta > 0:
        raise ConfigError(f"beta must be > 0, пришло {spec.beta}")


def _normalized_gamma(rng: np.random.Generator, alpha: float, beta: float, shape) -> np.ndarray:
    """Gamma-выборки, нормированные по последней оси. Нули от underflow (малые α) поднимаются до tiny."""
    draws = rng.gamma(shape=alpha, scale=beta, size=shape)
    draws = np.maximum(draws, np.finfo(np.float64).tiny)
    return draws / draws.sum(axis=-1, keepdims=True)


def sample_gamma_proportions(spec: GammaSpec, n: int) -> np.ndarray:
    if n < 1:
        raise ConfigError("n должно быть ≥ 1")
    _check_gamma(spec)
    rng = np.random.default_rng(spec.seed)
    return _normalized_gamma(rng, spec.alpha, spec.beta, n)


def largest_remainder(total: int, weights: Sequence[float]) -> np.ndarray:
    """
    Целые доли total пропорционально weights с точной суммой.
    Остаток раздаётся по убыванию дробных частей, при равенстве — меньшему индексу.
    """
    w = np.asarray(weights, dtype=np.float64)
    raw = total * w / w.sum()
    counts = np.floor(raw).astype(np.int64)
    rest = min(int(total - counts.sum()), len(w))
    if rest > 0:
        frac = raw - counts
        order = np.lexsort((np.arange(len(w)), -frac))
        counts[order[:rest]] += 1
    return counts


# ================== ПЛАН ==================


@dataclass(frozen=True)
class PartitionPlan:
    assignments: Tuple[np.ndarray, ...]
    proportions: np.ndarray  # K×C (label/mixed) или K×1 (quantity)
    mode: PartitionMode
    n_samples: int
    quantity_proportions: Optional[np.ndarray] = None
    warnings: Tuple[str, ...] = field(default_factory=tuple)
    subsampled: int = 0

    @property
    def n_clients(self) -> int:
        return len(self.assignments)

    def client_sizes(self) -> np.ndarray:
        return np.array([len(a) for a in self.assignments], dtype=np.int64)

    @property
    def empty_clients(self) -> List[int]:
        return [k for k, a in enumerate(self.assignments) if len(a) == 0]

    def count_matrix(self, ds: Dataset) -> np.ndarray:
        """clients × classes: сколько сэмплов каждого класса у клиента."""
        out = np.zeros((self.n_clients, ds.n_classes), dtype=np.int64)
        for k, idx in enumerate(self.assignments):
            out[k] = np.bincount(ds.labels[idx], minlength=ds.n_classes)
        return out

    def client_dataset(self, ds: Dataset, k: int) -> Dataset:
        return ds.subset(self.assignments[k])


def _with_empty_warnings(assignments: Sequence[np.ndarray]) -> Tuple[str, ...]:
    warnings = []
    for k, idx in enumerate(assignments):
        if len(idx) == 0:
            msg = f"клиент {k} не получил ни одного сэмпла"
            logger.warning(msg)
            warnings.append(msg)
    return tuple(warnings)


def _check_clients(ds: Dataset, n_clients: int) -> None:
    if n_clients < 1:
        raise ConfigError("число клиентов должно быть ≥ 1")
    if len(ds) < n_clients:
        raise ConfigError(f"клиентов ({n_clients}) больше, чем сэмплов ({len(ds)})")


def partition_quantity(ds: Dataset, n_clients: int, spec: GammaSpec) -> PartitionPlan:
    _check_clients(ds, n_clients)
    _check_gamma(spec)
    rng = np.random.default_rng(spec.seed)

    theta = _normalized_gamma(rng, spec.alpha, spec.beta, n_clients)
    sizes = largest_remainder(len(ds), theta)
    perm = rng.permutation(len(ds))

    bounds = np.concatenate([[0], np.cumsum(sizes)])
    assignments = tuple(np.sort(perm[bounds[k]:bounds[k + 1]]) for k in range(n_clients))

    return PartitionPlan(
        assignments=assignments,
        proportions=theta.reshape(-1, 1),
        mode="quantity",
        n_samples=len(ds),
        warnings=_with_empty_warnings(assignments),
    )


def partition_label(ds: Dataset, n_clients: int, spec: GammaSpec) -> PartitionPlan:
    if n_clients < 1:
        raise ConfigError("число клиентов должно быть ≥ 1")
    _check_gamma(spec)
    counts = ds.class_counts()
    if (counts == 0).any():
        missing = [ds.class_names[c] for c in np.flatnonzero(counts == 0)]
        raise InputError(f"классы без сэмплов: {missing}")

    rng = np.random.default_rng(spec.seed)
    # строка c — доли клиентов внутри класса c
    theta = _normalized_gamma(rng, spec.alpha, spec.beta, (ds.n_classes, n_clients))

    per_client: List[List[np.ndarray]] = [[] for _ in range(n_clients)]
    for c in range(ds.n_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        sizes = largest_remainder(idx.size, theta[c])
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        for k in range(n_clients):
            per_client[k].append(idx[bounds[k]:bounds[k + 1]])

    assignments = tuple(np.sort(np.concatenate(parts)) for parts in per_client)
    return PartitionPlan(
        assignments=assignments,
        proportions=theta.T.copy(),
        mode="label",
        n_samples=len(ds),
        warnings=_with_empty_warnings(assignments),
    )


def partition_mixed(
    ds: Dataset,
    n_clients: int,
    quantity_spec: GammaSpec,
    label_spec: GammaSpec,
) -> PartitionPlan:
    label_plan = partition_label(ds, n_clients, label_spec)
    q_theta = sample_gamma_proportions(quantity_spec, n_clients)
    q_targets = largest_remainder(len(ds), q_theta)

    rng = np.random.default_rng([quantity_spec.seed, label_spec.seed])
    assignments = []
    dropped = 0
    for k, idx in enumerate(label_plan.assignments):
        target = min(len(idx), int(q_targets[k]))
        if target < len(idx):
            idx = np.sort(rng.choice(idx, size=target, replace=False))
            dropped += len(label_plan.assignments[k]) - target
        assignments.append(idx)

    if dropped:
        logger.info("mixed skew: отброшено %d сэмплов при подгонке к quantity-целям", dropped)

    assignments = tuple(assignments)
    return PartitionPlan(
        assignments=assignments,
        proportions=label_plan.proportions,
        mode="mixed",
        n_samples=len(ds),
        quantity_proportions=q_theta.reshape(-1, 1),
        warnings=_with_empty_warnings(assignments),
        subsampled=dropped,
    )


def make_partition(
    ds: Dataset,
    n_clients: int,
    mode: PartitionMode,
    alpha: float,
    seed: int,
    beta: float = 1.0,
    label_alpha: Optional[float] = None,
) -> PartitionPlan:
    """Фасад для CLI: один α (или отдельный label_alpha для mixed)."""
    spec = GammaSpec(alpha=alpha, beta=beta, seed=seed)
    if mode == "quantity":
        return partition_quantity(ds, n_clients, spec)
    if mode == "label":
        return partition_label(ds, n_clients, spec)
    if mode == "mixed":
        label_spec = GammaSpec(alpha=label_alpha if label_alpha is not None else alpha, beta=beta, seed=seed + 1)
        return partition_mixed(ds, n_clients, spec, label_spec)
    raise ConfigError(f"неизвестный режим разбиения: {mode}")


def export_heatmap(plan: PartitionPlan, ds: Dataset, path: str) -> pd.DataFrame:
    """CSV clients × classes с числом сэмплов — вход для тепловой карты раздачи."""
    df = pd.DataFrame(plan.count_matrix(ds), columns=list(ds.class_names))
    df.insert(0, "client", np.arange(plan.n_clients))
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    df.to_csv(path, index=False, encoding="utf-8")
    return df
