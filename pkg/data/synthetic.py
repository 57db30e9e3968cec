# data/synthetic.py
#
# Синтетический IDS-подобный датасет для настольных прогонов:
# каждый класс — изотропное гауссово облако (дисперсия 1) с центром
# на расстоянии `separation` от нуля вдоль случайного направления.
# Неравные per_class_counts имитируют перекос меток, типичный для IDS.

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from Models.errors import ConfigError

from .dataset import Dataset


def generate_synthetic(
    classes: int,
    features: int,
    per_class_counts: Sequence[int],
    separation: float,
    seed: int,
    class_names: Optional[Sequence[str]] = None,
) -> Dataset:
    if classes < 2:
        raise ConfigError("classes должно быть ≥ 2")
    if features < 2:
        raise ConfigError("features должно быть ≥ 2")
    counts = [int(c) for c in per_class_counts]
    if len(counts) != classes:
        raise ConfigError(f"per_class_counts: ожидается {classes} значений, пришло {len(counts)}")
    if any(c < 1 for c in counts):
        raise ConfigError("per_class_counts: каждое значение должно быть ≥ 1")

    rng = np.random.default_rng(seed)

    directions = rng.standard_normal((classes, features))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = separation * directions

    xs, ys = [], []
    for c, n_c in enumerate(counts):
        xs.append(centers[c] + rng.standard_normal((n_c, features)))
        ys.append(np.full(n_c, c, dtype=np.int64))

    x = np.concatenate(xs)
    y = np.concatenate(ys)
    order = rng.permutation(len(y))

    names = list(class_names) if class_names is not None else [f"class_{c}" for c in range(classes)]
    if len(names) != classes:
        raise ConfigError("class_names не совпадает с числом классов")
    return Dataset(x[order], y[order], tuple(names))
