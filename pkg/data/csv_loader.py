# data/csv_loader.py
#
# Загрузка реальных IDS-датасетов из CSV (UTF-8, запятая, обязательный заголовок)
# и обратная выгрузка.
#
# - все не-метки парсятся как числа, битая ячейка → ошибка с номером строки/колонки
# - метки → плотные id 0..C−1 в порядке первого появления (или по class_order)
# - scaling="minmax": каждый признак в [0, 1], константная колонка → 0

from __future__ import annotations

import logging
import os
from typing import Literal, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.preprocessing import MinMaxScaler

from Models.errors import InputError

from .dataset import Dataset

logger = logging.getLogger(__name__)

Scaling = Literal["minmax", "none"]


def _parse_column(cells: pd.Series) -> np.ndarray:
    """Точный разбор (strtod); битые ячейки → nan, их ищет вызывающий."""
    cells = cells.str.strip()
    try:
        return cells.astype(np.float64).to_numpy()
    except ValueError:
        # to_numeric теряет последний бит на 17-значных строках, но годится для поиска битой ячейки
        return pd.to_numeric(cells, errors="coerce").to_numpy(dtype=np.float64, na_value=np.nan)


def load_csv(
    path: str,
    label_column: str,
    scaling: Scaling = "minmax",
    class_order: Optional[Sequence[str]] = None,
) -> Dataset:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Не найден CSV: {path}")

    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as e:
        raise InputError(f"{path}: пустой файл") from e

    if raw.shape[0] == 0:
        raise InputError(f"{path}: нет строк с данными")
    if label_column not in raw.columns:
        raise InputError(f"{path}: колонка метки '{label_column}' не найдена")

    feature_cols = [c for c in raw.columns if c != label_column]
    if not feature_cols:
        raise InputError(f"{path}: нет колонок-признаков")

    features = np.column_stack([_parse_column(raw[col]) for col in feature_cols])
    bad = ~np.isfinite(features)
    if bad.any():
        row_pos, col_pos = np.argwhere(bad)[0]
        col = feature_cols[col_pos]
        # +2: заголовок и нумерация строк файла с 1
        raise InputError(
            f"{path}: не удалось распарсить ячейку в строке {row_pos + 2}, колонка '{col}': "
            f"{raw.iloc[row_pos][col]!r}"
        )

    raw_labels = raw[label_column].str.strip()

    if class_order is not None:
        class_names = [str(c) for c in class_order]
        unknown = sorted(set(raw_labels) - set(class_names))
        if unknown:
            raise InputError(f"{path}: метки {unknown} отсутствуют в class_order")
    else:
        class_names = list(pd.unique(raw_labels))

    mapping = {name: i for i, name in enumerate(class_names)}
    labels = raw_labels.map(mapping).to_numpy(dtype=np.int64)

    if scaling == "minmax":
        features = MinMaxScaler().fit_transform(features)
    elif scaling != "none":
        raise InputError(f"неизвестный scaling: {scaling}")

    logger.info("CSV %s: %d строк, %d признаков, %d классов", path, len(labels), features.shape[1], len(class_names))
    return Dataset(features, labels, tuple(class_names))


def save_csv(ds: Dataset, path: str, label_column: str = "label") -> None:
    """Выгрузка с 17 значащими цифрами: load_csv(save_csv(ds), scaling='none') == ds."""
    df = pd.DataFrame(ds.features, columns=[f"f{i}" for i in range(ds.n_features)])
    df[label_column] = [ds.class_names[i] for i in ds.labels]
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    df.to_csv(path, index=False, float_format="%.17g", encoding="utf-8")
