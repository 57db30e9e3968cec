# data/dataset.py
#
# Неизменяемый размеченный датасет: признаки [samples, d] (float64),
# метки в [0, C), имена классов. Массивы помечаются read-only,
# поэтому датасет можно безопасно раздавать воркерам.

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from Models.errors import InputError


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_names: Tuple[str, ...]

    def __post_init__(self) -> None:
        features = np.array(self.features, dtype=np.float64, copy=True)
        labels = np.array(self.labels, dtype=np.int64, copy=True).reshape(-1)
        if features.ndim != 2:
            raise InputError(f"features должны быть 2D, пришло {features.ndim}D")
        if features.shape[0] != labels.shape[0]:
            raise InputError("число строк features и labels не совпадает")
        if not np.isfinite(features).all():
            raise InputError("features содержат inf/nan")
        n_classes = len(self.class_names)
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise InputError(f"метки должны лежать в [0, {n_classes})")

        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", tuple(str(c) for c in self.class_names))

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.class_names)
