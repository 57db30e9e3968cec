# analytics/rho_optimizer.py
#
# Подбор коэффициентов прунинга ρ_i по скору «точность vs энергия»:
#
#   Acc_i(ρ)  = Acc_i^unp · (1 − β_i · e^{λ_i·ρ_i})
#   score(ρ)  = (α1/N)·Σ Acc_i(ρ) + α2 / ((1/N)·Σ (1 − ρ_i)·E_i^unp)
#   ограничения: 0 ≤ ρ_i < 1,  Acc_i(ρ) ≥ Acc_i^unp − δ
#
# Режимы поиска:
# - uniform-grid: общий ρ по сетке [0, 0.999] с шагом 1e-4
# - coordinate:   циклическое уточнение каждого ρ_i по той же сетке от uniform-оптимума
# - hill-climb:   сидированный случайный поиск (гауссовы шаги с затухающей σ)
# Оптимум — первый локальный максимум допустимой кривой скора: α2/((1−ρ)·E) неограниченно
# растёт при ρ → 1, и глобальный максимум сетки всегда упирается в край.
# При равных скорах выигрывает меньший ρ.

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from Models.errors import ConfigError

logger = logging.getLogger(__name__)

SearchMode = Literal["uniform-grid", "coordinate", "hill-climb"]

# измеренные точности клиентов для вектора ρ (вместо аналитического прогноза)
AccuracyProvider = Callable[[np.ndarray], Sequence[float]]

GRID_STEP = 1e-4
RHO_MAX = 0.999


class ScoreConfig(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    n_clients: int = Field(ge=1)
    acc_unp: Union[float, List[float]]
    e_unp: Union[float, List[float]]  # pJ
    alpha1: float = Field(default=1.0, ge=0)
    alpha2: float = Field(default=50000.0, ge=0)
    beta: Union[float, List[float]] = 2e-5
    lam: Union[float, List[float]] = Field(default=10.0, alias="lambda")
    delta: Optional[float] = Field(default=0.05, ge=0)  # None — без ограничения на деградацию

    @model_validator(mode="after")
    def _broadcast(self) -> "ScoreConfig":
        n = self.n_clients
        for name in ("acc_unp", "e_unp", "beta", "lam"):
            value = getattr(self, name)
            vec = [float(v) for v in value] if isinstance(value, list) else [float(value)] * n
            if len(vec) != n:
                raise ValueError(f"{name}: ожидается {n} значений, пришло {len(vec)}")
            setattr(self, name, vec)
        if any(not 0.0 <= a <= 1.0 for a in self.acc_unp):
            raise ValueError("acc_unp must be in [0, 1]")
        if any(not e > 0 for e in self.e_unp):
            raise ValueError("e_unp must be > 0")
        if any(not b > 0 for b in self.beta):
            raise ValueError("beta must be > 0")
        if any(not lam > 0 for lam in self.lam):
            raise ValueError("lambda must be > 0")
        return self

    def vectors(self):
        return (
            np.asarray(self.acc_unp, dtype=np.float64),
            np.asarray(self.e_unp, dtype=np.float64),
            np.asarray(self.beta, dtype=np.float64),
            np.asarray(self.lam, dtype=np.float64),
        )


@dataclass
class RhoSolution:
    rho: np.ndarray
    score: float
    acc_pred: np.ndarray
    energy_pred: np.ndarray
    feasible: bool
    mode: str = "uniform-grid"

    def as_dict(self) -> dict:
        return {
            "mode": self.mode,
            "rho": [float(r) for r in self.rho],
            "score": float(self.score),
            "acc_pred": [float(a) for a in self.acc_pred],
            "energy_pred": [float(e) for e in self.energy_pred],
            "feasible": bool(self.feasible),
        }


def decayed_accuracy(acc_unp, beta, lam, rho):
    """Acc^unp·(1 − β·e^{λρ}); без клиппинга, клиппинг только для отчётов."""
    out = np.asarray(acc_unp, dtype=np.float64) * (1.0 - np.asarray(beta) * np.exp(np.asarray(lam) * np.asarray(rho)))
    return float(out) if out.ndim == 0 else out


def _as_rho(rho_vector, cfg: ScoreConfig) -> np.ndarray:
    rho = np.asarray(rho_vector, dtype=np.float64)
    if rho.ndim == 0:
        rho = np.full(cfg.n_clients, float(rho))
    if rho.shape != (cfg.n_clients,):
        raise ConfigError(f"rho: ожидается вектор длины {cfg.n_clients}, пришло {rho.shape}")
    if ((rho < 0) | (rho >= 1)).any():
        raise ConfigError("rho_i должны лежать в [0, 1)")
    return rho


def score_terms(rho_vector, cfg: ScoreConfig):
    """(acc_term, energy_term) — слагаемые скора по отдельности."""
    rho = _as_rho(rho_vector, cfg)
    acc, e_unp, beta, lam = cfg.vectors()
    acc_term = cfg.alpha1 / cfg.n_clients * float(np.sum(acc * (1.0 - beta * np.exp(lam * rho))))
    energy_term = cfg.alpha2 / float(np.mean((1.0 - rho) * e_unp))
    return acc_term, energy_term


def score(rho_vector, cfg: ScoreConfig) -> float:
    acc_term, energy_term = score_terms(rho_vector, cfg)
    return acc_term + energy_term


def is_feasible(rho_vector, cfg: ScoreConfig, accuracy_provider: Optional[AccuracyProvider] = None) -> bool:
    rho = _as_rho(rho_vector, cfg)
    if cfg.delta is None:
        return True
    acc, _, beta, lam = cfg.vectors()
    pred = np.asarray(accuracy_provider(rho), dtype=np.float64) if accuracy_provider else acc * (1.0 - beta * np.exp(lam * rho))
    return bool(np.all(pred >= acc - cfg.delta))


def _grid(step: float, rho_max: float) -> np.ndarray:
    n = int(math.floor(rho_max / step + 1e-9)) + 1
    return np.arange(n, dtype=np.float64) * step


def _uniform_table(cfg: ScoreConfig, grid: np.ndarray, accuracy_provider: Optional[AccuracyProvider]):
    """Векторизованный скан общего ρ: скор, слагаемые и допустимость для каждой точки сетки."""
    acc, e_unp, beta, lam = cfg.vectors()
    per_client = acc[None, :] * (1.0 - beta[None, :] * np.exp(lam[None, :] * grid[:, None]))
    acc_term = cfg.alpha1 / cfg.n_clients * per_client.sum(axis=1)
    energy_term = cfg.alpha2 / ((1.0 - grid) * float(np.mean(e_unp)))
    if cfg.delta is None:
        feasible = np.ones(grid.shape, dtype=bool)
    elif accuracy_provider is None:
        feasible = (per_client >= acc[None, :] - cfg.delta).all(axis=1)
    else:
        feasible = np.array([is_feasible(r, cfg, accuracy_provider) for r in grid])
    return acc_term + energy_term, acc_term, energy_term, feasible


def score_curve(cfg: ScoreConfig, step: float = 1e-3, rho_max: float = RHO_MAX) -> pd.DataFrame:
    grid = _grid(step, rho_max)
    total, acc_term, energy_term, feasible = _uniform_table(cfg, grid, None)
    return pd.DataFrame(
        {"rho": grid, "score": total, "acc_term": acc_term, "energy_term": energy_term, "feasible": feasible}
    )


def _solution(rho: np.ndarray, cfg: ScoreConfig, feasible: bool, mode: str) -> RhoSolution:
    acc, e_unp, beta, lam = cfg.vectors()
    return RhoSolution(
        rho=rho,
        score=score(rho, cfg),
        acc_pred=acc * (1.0 - beta * np.exp(lam * rho)),
        energy_pred=(1.0 - rho) * e_unp,
        feasible=feasible,
        mode=mode,
    )


def _first_local_max(total: np.ndarray, feasible: np.ndarray) -> Optional[int]:
    """Первая допустимая точка сетки, после которой скор перестаёт расти (или кончается допустимость)."""
    if not feasible.any():
        return None
    next_total = np.append(total[1:], -np.inf)
    next_ok = np.append(feasible[1:], False)
    stops = feasible & (~next_ok | (next_total <= total))
    return int(np.flatnonzero(stops)[0])


def _basin_edge(total: np.ndarray, peak: int) -> int:
    """Первый локальный минимум правее пика — граница области притяжения оптимума."""
    rising = np.flatnonzero(np.diff(total[peak:]) > 0)
    return peak + int(rising[0]) if rising.size else len(total) - 1


def _uniform_grid(cfg, step, rho_max, accuracy_provider) -> RhoSolution:
    grid = _grid(step, rho_max)
    total, _, _, feasible = _uniform_table(cfg, grid, accuracy_provider)
    best = _first_local_max(total, feasible)
    ok = best is not None
    if not ok:
        logger.warning("нет допустимых ρ при δ=%s — возвращаем безусловный оптимум", cfg.delta)
        best = _first_local_max(total, np.ones(grid.shape, dtype=bool))
    return _solution(np.full(cfg.n_clients, grid[best]), cfg, ok, "uniform-grid")


def _coordinate(cfg, step, rho_max, accuracy_provider, tol, max_cycles) -> RhoSolution:
    start = _uniform_grid(cfg, step, rho_max, accuracy_provider)
    constrained = start.feasible and cfg.delta is not None
    grid = _grid(step, rho_max)
    acc, e_unp, beta, lam = cfg.vectors()
    n = cfg.n_clients
    everywhere = np.ones(grid.shape, dtype=bool)

    rho = start.rho.copy()
    current = start.score
    for cycle in range(max_cycles):
        before = current
        for i in range(n):
            # скор как функция одного ρ_i при фиксированных остальных
            acc_rest = acc * (1.0 - beta * np.exp(lam * rho))
            acc_rest_sum = acc_rest.sum() - acc_rest[i]
            acc_i = acc[i] * (1.0 - beta[i] * np.exp(lam[i] * grid))
            energy_rest = float(np.sum((1.0 - rho) * e_unp) - (1.0 - rho[i]) * e_unp[i])
            mean_energy = (energy_rest + (1.0 - grid) * e_unp[i]) / n
            cand = cfg.alpha1 / n * (acc_rest_sum + acc_i) + cfg.alpha2 / mean_energy

            ok = everywhere
            if constrained:
                if accuracy_provider is None:
                    ok = acc_i >= acc[i] - cfg.delta
                else:
                    ok = np.array([is_feasible(_with(rho, i, g), cfg, accuracy_provider) for g in grid])
            j = _first_local_max(cand, ok)
            if j is not None and cand[j] > current:
                trial = _with(rho, i, grid[j])
                s = score(trial, cfg)
                if s > current:
                    rho, current = trial, s
        if current - before < tol:
            logger.debug("coordinate: сошлось за %d циклов", cycle + 1)
            break

    return _solution(rho, cfg, start.feasible, "coordinate")


def _with(rho: np.ndarray, i: int, value: float) -> np.ndarray:
    out = rho.copy()
    out[i] = value
    return out


def _hill_climb(cfg, rho_max, accuracy_provider, seed, iterations, sigma0, sigma_min) -> RhoSolution:
    rng = np.random.default_rng(seed)
    n = cfg.n_clients
    decay = (sigma_min / sigma0) ** (1.0 / max(iterations, 1))

    # поиск не выходит за область притяжения первого оптимума общего ρ
    grid = _grid(GRID_STEP, rho_max)
    total, _, _, _ = _uniform_table(cfg, grid, None)
    ceiling = float(grid[_basin_edge(total, _first_local_max(total, np.ones(grid.shape, dtype=bool)))])

    rho = np.zeros(n)
    feasible = is_feasible(rho, cfg, accuracy_provider)
    current = score(rho, cfg) if feasible else -np.inf
    # лучшая точка без учёта δ — ответ, если допустимых нет
    free_rho, free_score = rho, score(rho, cfg)
    sigma = sigma0

    for it in range(iterations):
        if it % 2 == 0:
            cand = rho + rng.normal(0.0, sigma)
        else:
            i = int(rng.integers(n))
            cand = _with(rho, i, rho[i] + rng.normal(0.0, sigma))
        cand = np.clip(cand, 0.0, ceiling)
        s = score(cand, cfg)
        if s > free_score:
            free_rho, free_score = cand, s
        if is_feasible(cand, cfg, accuracy_provider) and s > current:
            rho, current, feasible = cand, s, True
        elif not feasible and s >= free_score:
            # пока допустимых нет, блуждаем по безусловному скору
            rho = cand
        sigma = max(sigma * decay, sigma_min)

    if not feasible:
        logger.warning("hill-climb не нашёл допустимой точки — возвращаем безусловный оптимум")
        return _solution(free_rho, cfg, False, "hill-climb")
    return _solution(rho, cfg, True, "hill-climb")


def optimize_rho(
    cfg: ScoreConfig,
    mode: SearchMode = "uniform-grid",
    step: float = GRID_STEP,
    rho_max: float = RHO_MAX,
    accuracy_provider: Optional[AccuracyProvider] = None,
    seed: int = 0,
    tol: float = 1e-8,
    max_cycles: int = 50,
    iterations: int = 4000,
    sigma0: float = 0.1,
    sigma_min: float = 1e-4,
) -> RhoSolution:
    if not 0.0 < step < 1.0:
        raise ConfigError("step должен лежать в (0, 1)")
    if not 0.0 <= rho_max < 1.0:
        raise ConfigError("rho_max должен лежать в [0, 1)")

    if mode == "uniform-grid":
        return _uniform_grid(cfg, step, rho_max, accuracy_provider)
    if mode == "coordinate":
        return _coordinate(cfg, step, rho_max, accuracy_provider, tol, max_cycles)
    if mode == "hill-climb":
        return _hill_climb(cfg, rho_max, accuracy_provider, seed, iterations, sigma0, sigma_min)
    raise ConfigError(f"неизвестный режим поиска: {mode}")
