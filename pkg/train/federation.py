# train/federation.py
#
# Серверный цикл федеративного обучения с прунингом:
#
#   раунд 0:      рассылка начальной модели → local_update(первый раунд, прунинг)
#                 → клиенты один раз отправляют маски → агрегация
#   раунды 1..Q−1: рассылка → local_update → агрегация
#   после каждого раунда: оценка глобальной модели на test
#
# Агрегация учитывает маски: координату усредняют только клиенты, которые её сохранили.
# Порядок редукции — по возрастанию client_id, поэтому последовательный
# и параллельный запуск дают побитово одинаковые модели.

from __future__ import annotations

import logging
import math
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, Field, field_validator, model_validator

from Models.adam import AdamState
from Models.errors import ConfigError, InternalError
from Models.ids_cnn import ArchConfig, ModelParams, build_model, evaluate

from data.dataset import Dataset
from data.partition import PartitionPlan

from .local_update import ClientState, local_update, train_epochs
from .pruning import PruneMask, mask_from_bytes, mask_to_bytes

logger = logging.getLogger(__name__)

DEFAULT_MU = 0.001
P_SUM_TOL = 1e-9


class RoundConfig(BaseModel):
    """
    Параметры протокола. Значения по умолчанию — настройки эталонных экспериментов:
    Q = 40 раундов, E = 20 локальных эпох, η = 0.001, μ = 0.001 для FedProx.
    """

    algorithm: Literal["fedavg", "fedprox"] = "fedprox"
    mu: Optional[float] = None  # None → 0.001 для fedprox, 0 для fedavg
    local_epochs: int = Field(default=20, ge=1)
    finetune_epochs: Optional[int] = Field(default=None, ge=0)  # None → local_epochs
    rounds: int = Field(default=40, ge=1)
    rho: Union[float, List[float]] = 0.0
    aggregation_mode: Literal["normalized", "literal"] = "normalized"
    lr: float = Field(default=1e-3, gt=0)
    batch_size: int = Field(default=128, ge=1)
    beta1: float = Field(default=0.9, gt=0, lt=1)
    beta2: float = Field(default=0.999, gt=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    seed: int = Field(default=42, ge=0)
    workers: int = Field(default=1, ge=1)
    torch_threads: int = Field(default=1, ge=1)

    @field_validator("mu")
    @classmethod
    def _mu_non_negative(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and v < 0:
            raise ValueError("mu must be ≥ 0")
        return v

    @field_validator("rho")
    @classmethod
    def _rho_range(cls, v):
        values = v if isinstance(v, list) else [v]
        if not values:
            raise ValueError("rho: пустой список")
        for r in values:
            if not 0.0 <= r < 1.0:
                raise ValueError(f"rho must be in [0, 1), got {r}")
        return v

    @model_validator(mode="after")
    def _mu_matches_algorithm(self) -> "RoundConfig":
        if self.mu is None:
            self.mu = 0.0 if self.algorithm == "fedavg" else DEFAULT_MU
        elif self.algorithm == "fedavg" and self.mu != 0:
            raise ValueError("fedavg requires mu = 0")
        return self

    def client_rhos(self, n_clients: int) -> List[float]:
        if isinstance(self.rho, list):
            if len(self.rho) != n_clients:
                raise ConfigError(f"rho: вектор длины {len(self.rho)}, а клиентов {n_clients}")
            return [float(r) for r in self.rho]
        return [float(self.rho)] * n_clients


@dataclass
class RoundMetrics:
    round: int
    accuracy: float
    loss: float
    client_losses: Dict[int, float]
    confusion: np.ndarray
    seconds: float
    nonzero_weights: int

    @property
    def mean_train_loss(self) -> float:
        losses = list(self.client_losses.values())
        return float(np.mean(losses)) if losses else math.nan


@dataclass
class SimulationResult:
    metrics: List[RoundMetrics]
    global_model: ModelParams
    clients: List[ClientState]
    mask_registry: Dict[int, bytes] = field(default_factory=dict)
    mask_uploads: int = 0

    def server_mask(self, client_id: int) -> PruneMask:
        return mask_from_bytes(self.mask_registry[client_id])


# ================== ВЕСА КЛИЕНТОВ И СИДЫ ==================


def client_weights(sizes: Sequence[int]) -> np.ndarray:
    """p_k = |D_k| / Σ|D_i|."""
    sizes = np.asarray(sizes, dtype=np.float64)
    total = sizes.sum()
    if total <= 0:
        raise ConfigError("у всех клиентов пустые датасеты")
    return sizes / total


def derive_seeds(master: int, n_clients: int) -> Tuple[int, List[np.random.SeedSequence]]:
    """Сид инициализации модели и независимые потоки для клиентов."""
    init_ss, *client_ss = np.random.SeedSequence(master).spawn(n_clients + 1)
    init_seed = int(init_ss.generate_state(1, dtype=np.uint64)[0])
    return init_seed, client_ss


def make_clients(ds: Dataset, plan: PartitionPlan, cfg: RoundConfig) -> List[ClientState]:
    _, streams = derive_seeds(cfg.seed, plan.n_clients)
    rhos = cfg.client_rhos(plan.n_clients)
    p = client_weights(plan.client_sizes())
    return [
        ClientState(
            client_id=k,
            dataset=plan.client_dataset(ds, k),
            weight=float(p[k]),
            rng=np.random.default_rng(streams[k]),
            rho=rhos[k],
        )
        for k in range(plan.n_clients)
    ]


# ================== АГРЕГАЦИЯ ==================


def aggregate_masked(
    clients: Sequence[ClientState],
    previous_global: ModelParams,
    mode: Literal["normalized", "literal"] = "normalized",
) -> ModelParams:
    """
    normalized: W_j = Σ p_k·m_kj·w_kj / Σ p_k·m_kj; координата, срезанная всеми, берётся из previous_global.
    literal:    W_j = Σ p_k·m_kj·w_kj без нормировки.
    Смещения — обычное взвешенное среднее Σ p_k·b_k.
    """
    if mode not in ("normalized", "literal"):
        raise ConfigError(f"неизвестный режим агрегации: {mode}")
    if not clients:
        raise ConfigError("агрегация без клиентов")

    ordered = sorted(clients, key=lambda c: c.client_id)
    p_total = 0.0
    for c in ordered:
        p_total += c.weight
    if abs(p_total - 1.0) > P_SUM_TOL:
        raise ConfigError(f"веса клиентов дают в сумме {p_total!r}, а не 1")

    n_w = len(previous_global.weights)
    for c in ordered:
        if c.model is None or c.mask is None:
            raise InternalError(f"клиент {c.client_id} не прислал модель/маску")
        shapes = [tuple(w.shape) for w in c.model.weights]
        if shapes != [tuple(w.shape) for w in previous_global.weights] or tuple(c.mask.shapes) != tuple(shapes):
            raise InternalError(f"клиент {c.client_id}: топология не совпадает с глобальной моделью")

    weights = []
    for i in range(n_w):
        prev = previous_global.weights[i]
        num = torch.zeros_like(prev)
        cov = torch.zeros_like(prev)
        for c in ordered:
            m = c.mask.tensors()[i].to(prev.dtype)
            pm = c.weight * m
            num = num + pm * c.model.weights[i]
            cov = cov + pm
        if mode == "literal":
            weights.append(num)
        else:
            # где координату сохранили все, числитель уже и есть взвешенное среднее
            full = cov == p_total
            partial = torch.where(cov > 0, num / torch.where(cov > 0, cov, torch.ones_like(cov)), prev)
            weights.append(torch.where(full, num, partial))

    biases = []
    for i in range(n_w):
        acc = torch.zeros_like(previous_global.biases[i])
        for c in ordered:
            acc = acc + c.weight * c.model.biases[i]
        biases.append(acc)

    return previous_global.with_tensors(weights + biases)


# ================== СИМУЛЯЦИЯ ==================

RoundHook = Callable[[int, ModelParams, Sequence[ClientState]], None]


def _init_worker(threads: int) -> None:
    torch.set_num_threads(threads)


def _client_job(args) -> ClientState:
    client, global_model, cfg, first, round_idx = args
    return local_update(client, global_model, cfg, first, round_idx)


def _run_round(
    active: List[ClientState],
    global_model: ModelParams,
    cfg: RoundConfig,
    first: bool,
    round_idx: int,
    pool: Optional[ProcessPoolExecutor],
) -> List[ClientState]:
    jobs = [(c, global_model, cfg, first, round_idx) for c in active]
    if pool is None:
        return [_client_job(j) for j in jobs]
    # map сохраняет порядок задач, так что редукция не зависит от расписания воркеров
    return list(pool.map(_client_job, jobs))


def run_simulation(
    ds: Dataset,
    partition: PartitionPlan,
    cfg: RoundConfig,
    test: Dataset,
    arch: Optional[ArchConfig] = None,
    on_round: Optional[RoundHook] = None,
) -> SimulationResult:
    if partition.n_samples != len(ds):
        raise ConfigError(f"план разбиения построен для {partition.n_samples} сэмплов, а датасет — {len(ds)}")

    arch = (arch or ArchConfig()).resolved(ds.n_features, ds.n_classes)
    init_seed, _ = derive_seeds(cfg.seed, partition.n_clients)
    global_model = build_model(arch, init_seed)

    clients = make_clients(ds, partition, cfg)
    empty = [c.client_id for c in clients if len(c.dataset) == 0]
    if empty:
        logger.warning("пустые клиенты %s пропускаются, p_k перенормированы по остальным", empty)

    registry: Dict[int, bytes] = {}
    uploads = 0
    metrics: List[RoundMetrics] = []

    prev_threads = torch.get_num_threads()
    torch.set_num_threads(cfg.torch_threads)
    pool = None
    if cfg.workers > 1:
        pool = ProcessPoolExecutor(
            max_workers=cfg.workers,
            mp_context=multiprocessing.get_context("spawn"),
            initializer=_init_worker,
            initargs=(cfg.torch_threads,),
        )

    try:
        for q in range(cfg.rounds):
            t0 = time.perf_counter()
            first = q == 0
            active = [c for c in clients if len(c.dataset) > 0]
            updated = _run_round(active, global_model, cfg, first, q, pool)
            by_id = {c.client_id: c for c in updated}
            clients = [by_id.get(c.client_id, c) for c in clients]

            if first:
                # маска уходит на сервер ровно один раз за всю симуляцию
                for c in updated:
                    if c.client_id in registry:
                        raise InternalError(f"повторная отправка маски клиентом {c.client_id}")
                    registry[c.client_id] = mask_to_bytes(c.mask)
                    uploads += 1

            global_model = aggregate_masked(updated, global_model, cfg.aggregation_mode)
            result = evaluate(global_model, test)
            seconds = time.perf_counter() - t0

            m = RoundMetrics(
                round=q,
                accuracy=result.accuracy,
                loss=result.loss,
                client_losses={c.client_id: c.train_loss for c in updated},
                confusion=result.confusion,
                seconds=seconds,
                nonzero_weights=global_model.nonzero_weights(),
            )
            metrics.append(m)
            logger.info(
                "раунд %d/%d: acc=%.4f loss=%.4f train_loss=%.4f (%.2fs)",
                q + 1, cfg.rounds, m.accuracy, m.loss, m.mean_train_loss, seconds,
            )
            if on_round is not None:
                on_round(q, global_model, clients)
    finally:
        if pool is not None:
            pool.shutdown()
        torch.set_num_threads(prev_threads)

    return SimulationResult(
        metrics=metrics,
        global_model=global_model,
        clients=clients,
        mask_registry=registry,
        mask_uploads=uploads,
    )


def centralized_baseline(
    train: Dataset,
    cfg: RoundConfig,
    arch: Optional[ArchConfig] = None,
    epochs: Optional[int] = None,
) -> ModelParams:
    """
    Обычное обучение Adam на всём train с теми же сидами, что у клиента 0
    при K = 1: эталон для проверки сведения симуляции к централизованному случаю.
    """
    arch = (arch or ArchConfig()).resolved(train.n_features, train.n_classes)
    init_seed, streams = derive_seeds(cfg.seed, 1)
    model = build_model(arch, init_seed)
    state = AdamState.zeros_like(model, eta=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.eps)
    rng = np.random.default_rng(streams[0])
    n_epochs = epochs if epochs is not None else cfg.rounds * cfg.local_epochs
    model, _, _ = train_epochs(model, state, train, n_epochs, cfg.batch_size, rng)
    return model
