# train/local_update.py
#
# Локальное обучение клиента:
#   (a) получить глобальную модель и наложить свою маску (до прунинга — маска из единиц)
#   (b) E эпох mini-batch Adam на D_k; для FedProx — якорь на полученной модели
#   (c) в первом раунде: L1-важность → маска при ρ_k → применить → дообучить E_ft эпох
#   (d) моменты Adam и генератор порядка батчей живут в ClientState между раундами
#
# Градиенты срезанных координат зануляются перед каждым шагом, моменты на них
# обнулены в момент прунинга, поэтому срезанные веса остаются ровно нулём.

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Optional, Tuple

import numpy as np

from Models.adam import AdamState, adam_step
from Models.errors import DivergenceError, NumericError
from Models.ids_cnn import Gradients, ModelParams, Prox, loss_and_grads

from data.dataset import Dataset

from .pruning import PruneMask, apply_mask, full_mask, prune_model, zero_pruned

if TYPE_CHECKING:
    from .federation import RoundConfig

logger = logging.getLogger(__name__)


@dataclass
class ClientState:
    client_id: int
    dataset: Dataset
    weight: float  # p_k = |D_k| / Σ|D_i|
    rng: np.random.Generator
    rho: float = 0.0
    model: Optional[ModelParams] = None
    mask: Optional[PruneMask] = None
    optimizer: Optional[AdamState] = None
    train_loss: float = field(default=math.nan)


def train_epochs(
    model: ModelParams,
    state: AdamState,
    dataset: Dataset,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    prox: Optional[Prox] = None,
    mask: Optional[PruneMask] = None,
) -> Tuple[ModelParams, AdamState, float]:
    """
    Общий mini-batch цикл (клиенты и централизованный бейзлайн).
    Порядок сэмплов — rng.permutation на каждую эпоху.
    Возвращает модель, состояние Adam и средний лосс последней эпохи.
    """
    n = len(dataset)
    epoch_loss = math.nan
    if n == 0:
        return model, state, epoch_loss
    for _ in range(epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = loss_and_grads(model, dataset.features[idx], dataset.labels[idx], prox)
            if not math.isfinite(loss):
                raise DivergenceError(f"лосс ушёл в {loss}")
            if mask is not None:
                n_w = len(grads.weights)
                masked = zero_pruned(grads.tensors(), mask)
                grads = Gradients(weights=masked[:n_w], biases=masked[n_w:])
            model, state = adam_step(model, grads, state)
            loss_sum += loss * len(idx)
        epoch_loss = loss_sum / n
    return model, state, epoch_loss


def _prox_for(received: ModelParams, cfg: "RoundConfig") -> Optional[Prox]:
    if cfg.algorithm == "fedprox" and cfg.mu > 0:
        return Prox(mu=cfg.mu, anchor=received)
    return None


def local_update(
    client: ClientState,
    global_model: ModelParams,
    cfg: "RoundConfig",
    is_first_round: bool,
    round_idx: int = 0,
) -> ClientState:
    received = apply_mask(global_model, client.mask) if client.mask is not None else global_model
    opt = client.optimizer
    if opt is None:
        opt = AdamState.zeros_like(received, eta=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.eps)
    prox = _prox_for(received, cfg)

    try:
        model, opt, loss = train_epochs(
            received, opt, client.dataset, cfg.local_epochs, cfg.batch_size, client.rng, prox, client.mask
        )

        mask = client.mask
        if is_first_round:
            if client.rho > 0:
                model, mask = prune_model(model, client.rho)
                opt = replace(opt, m=zero_pruned(opt.m, mask), v=zero_pruned(opt.v, mask))
                ft_epochs = cfg.finetune_epochs if cfg.finetune_epochs is not None else cfg.local_epochs
                if ft_epochs:
                    model, opt, loss = train_epochs(
                        model, opt, client.dataset, ft_epochs, cfg.batch_size, client.rng, prox, mask
                    )
                logger.debug(
                    "клиент %d: срезано %d из %d весов (ρ=%.4f)",
                    client.client_id, mask.np_total - mask.kept_count, mask.np_total, client.rho,
                )
            else:
                mask = full_mask(model)
    except (DivergenceError, NumericError) as e:
        raise DivergenceError(
            f"клиент {client.client_id}, раунд {round_idx}: {e}",
            client_id=client.client_id,
            round_idx=round_idx,
        ) from e

    if mask is not None:
        model = apply_mask(model, mask)
    return replace(client, model=model, mask=mask, optimizer=opt, train_loss=loss)
