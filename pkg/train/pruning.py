# train/pruning.py
#
# Одноразовый magnitude-прунинг:
# - важность весов: точная (квадрат изменения лосса при обнулении веса) или L1 = |w|
# - маска строится по ОДНОМУ глобальному ранжированию всех весов (conv + dense вместе)
# - смещения в пространство индексов не входят и никогда не прунятся
# - маска сериализуется в компактный бинарный блоб (один раз уходит на сервер)

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from typing import Callable, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch

from Models.errors import ConfigError, InputError, InternalError
from Models.ids_cnn import ModelParams, mean_loss

from data.dataset import Dataset

logger = logging.getLogger(__name__)

ImportanceMethod = Literal["exact", "l1"]


@dataclass(frozen=True)
class ImportanceVector:
    scores: np.ndarray
    method: ImportanceMethod
    shapes: Tuple[Tuple[int, ...], ...]

    def __len__(self) -> int:
        return int(self.scores.shape[0])


@dataclass(frozen=True)
class PruneMask:
    bits: Tuple[np.ndarray, ...]  # bool, по одному на тензор весов
    rho: float
    kept_count: int

    @property
    def np_total(self) -> int:
        return int(sum(b.size for b in self.bits))

    @property
    def shapes(self) -> Tuple[Tuple[int, ...], ...]:
        return tuple(tuple(b.shape) for b in self.bits)

    def flat(self) -> np.ndarray:
        return np.concatenate([b.reshape(-1) for b in self.bits])

    def tensors(self) -> List[torch.Tensor]:
        return [torch.from_numpy(b.copy()) for b in self.bits]


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def n_pruned(rho: float, np_total: int) -> int:
    # строгий floor: 0.29·100 в double = 28.999… → 28
    return int(math.floor(rho * np_total))


def _check_rho(rho: float) -> None:
    if not (0.0 <= rho < 1.0):
        raise ConfigError(f"rho должен лежать в [0, 1), пришло {rho}")


# ================== ВАЖНОСТЬ ==================


def importance_l1(model: ModelParams) -> ImportanceVector:
    scores = model.flat_weights().abs().numpy().copy()
    return ImportanceVector(
        scores=_readonly(scores),
        method="l1",
        shapes=tuple(tuple(w.shape) for w in model.weights),
    )


def importance_exact(
    model: ModelParams,
    dataset: Optional[Dataset],
    loss_fn: Optional[Callable[[ModelParams], float]] = None,
) -> ImportanceVector:
    """
    score_j = (F(W) − F(W | w_j = 0))², по умолчанию F — средняя кросс-энтропия на dataset.

    Один прогон по датасету на каждый вес, поэтому только для маленьких
    моделей (тестовый оракул). Исходная модель не меняется.
    loss_fn подменяет F (например, игрушечный квадратичный лосс).
    """
    if loss_fn is None:
        if dataset is None or len(dataset) == 0:
            raise InputError("importance_exact: пустой датасет")

        def loss_fn(m: ModelParams) -> float:
            return mean_loss(m, dataset.features, dataset.labels)

    base = loss_fn(model)
    probe = model.clone()
    scores = np.zeros(model.num_weights, dtype=np.float64)

    for k, w in enumerate(probe.weights):
        flat = w.view(-1)
        for pos in range(flat.numel()):
            saved = flat[pos].item()
            if saved == 0.0:
                continue
            flat[pos] = 0.0
            loss = loss_fn(probe)
            flat[pos] = saved
            scores[model.offsets[k] + pos] = (base - loss) ** 2

    return ImportanceVector(
        scores=_readonly(scores),
        method="exact",
        shapes=tuple(tuple(w.shape) for w in model.weights),
    )


# ================== МАСКА ==================


def build_mask(importance: ImportanceVector, rho: float) -> PruneMask:
    """
    Обнуляет ровно floor(ρ·NP) позиций с наименьшими scores.
    При равных scores выживает меньший глобальный индекс.
    """
    _check_rho(rho)
    scores = np.asarray(importance.scores, dtype=np.float64)
    total = scores.size
    if total != sum(int(np.prod(s)) for s in importance.shapes):
        raise InternalError("длина scores не совпадает с формами весов")

    n_prune = n_pruned(rho, total)
    flat = np.ones(total, dtype=bool)
    if n_prune:
        idx = np.arange(total)
        # по возрастанию score, среди равных — сначала старшие индексы
        order = np.lexsort((-idx, scores))
        flat[order[:n_prune]] = False

    bits = []
    start = 0
    for shape in importance.shapes:
        size = int(np.prod(shape))
        bits.append(_readonly(flat[start:start + size].reshape(shape).copy()))
        start += size

    return PruneMask(bits=tuple(bits), rho=float(rho), kept_count=total - n_prune)


def full_mask(model: ModelParams) -> PruneMask:
    """Маска «ничего не срезано» — до прунинга первого раунда."""
    bits = tuple(_readonly(np.ones(tuple(w.shape), dtype=bool)) for w in model.weights)
    return PruneMask(bits=bits, rho=0.0, kept_count=model.num_weights)


def _check_congruent(model: ModelParams, mask: PruneMask) -> None:
    shapes = tuple(tuple(w.shape) for w in model.weights)
    if shapes != mask.shapes:
        raise InternalError(f"маска {mask.shapes} не совпадает с весами модели {shapes}")


def apply_mask(model: ModelParams, mask: PruneMask) -> ModelParams:
    """W ← W ⊙ M. Срезанные позиции становятся +0.0, смещения не трогаются."""
    _check_congruent(model, mask)
    weights = [
        torch.where(m, w, torch.zeros((), dtype=w.dtype))
        for w, m in zip(model.weights, mask.tensors())
    ]
    return model.with_tensors(weights + list(model.biases))


def zero_pruned(tensors: Sequence[torch.Tensor], mask: PruneMask) -> List[torch.Tensor]:
    """
    Обнуляет срезанные позиции в списке, выровненном с model.tensors()
    (веса, затем смещения). Используется для градиентов и моментов Adam.
    """
    n = len(mask.bits)
    out = [
        torch.where(m, t, torch.zeros((), dtype=t.dtype))
        for t, m in zip(tensors[:n], mask.tensors())
    ]
    return out + list(tensors[n:])


def remaining_weights(mask: PruneMask) -> int:
    return mask.kept_count


def prune_model(model: ModelParams, rho: float) -> Tuple[ModelParams, PruneMask]:
    mask = build_mask(importance_l1(model), rho)
    return apply_mask(model, mask), mask


# ================== СЕРИАЛИЗАЦИЯ ==================
#
# Формат блоба (little-endian):
#   "PMSK" | u16 version | u16 n_layers | u64 NP | f64 rho
#   n_layers × ( u64 offset | u8 ndim | ndim × u32 dims )
#   packbits(flat mask, bitorder=little)

MASK_MAGIC = b"PMSK"
MASK_VERSION = 1
_HEADER = struct.Struct("<4sHHQd")
_LAYER = struct.Struct("<QB")


def mask_to_bytes(mask: PruneMask) -> bytes:
    parts = [_HEADER.pack(MASK_MAGIC, MASK_VERSION, len(mask.bits), mask.np_total, mask.rho)]
    offset = 0
    for b in mask.bits:
        parts.append(_LAYER.pack(offset, b.ndim))
        parts.append(struct.pack(f"<{b.ndim}I", *b.shape))
        offset += b.size
    parts.append(np.packbits(mask.flat().astype(np.uint8), bitorder="little").tobytes())
    return b"".join(parts)


def mask_from_bytes(blob: bytes) -> PruneMask:
    try:
        magic, version, n_layers, np_total, rho = _HEADER.unpack_from(blob, 0)
    except struct.error as e:
        raise InputError("блоб маски обрезан (заголовок)") from e
    if magic != MASK_MAGIC:
        raise InputError(f"неверная сигнатура блоба маски: {magic!r}")
    if version != MASK_VERSION:
        raise InputError(f"неподдерживаемая версия блоба маски: {version}")

    pos = _HEADER.size
    shapes = []
    try:
        for _ in range(n_layers):
            offset, ndim = _LAYER.unpack_from(blob, pos)
            pos += _LAYER.size
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            if offset != sum(int(np.prod(s)) for s in shapes):
                raise InputError(f"блоб маски: неверный offset слоя {len(shapes)}")
            shapes.append(tuple(dims))
    except struct.error as e:
        raise InputError("блоб маски обрезан (описание слоёв)") from e

    if sum(int(np.prod(s)) for s in shapes) != np_total:
        raise InputError("блоб маски: NP не совпадает с формами слоёв")

    payload = np.frombuffer(blob, dtype=np.uint8, offset=pos)
    if payload.size * 8 < np_total:
        raise InputError("блоб маски обрезан (биты)")
    flat = np.unpackbits(payload, count=np_total, bitorder="little").astype(bool)

    bits = []
    start = 0
    for shape in shapes:
        size = int(np.prod(shape))
        bits.append(_readonly(flat[start:start + size].reshape(shape).copy()))
        start += size

    return PruneMask(bits=tuple(bits), rho=float(rho), kept_count=int(flat.sum()))
