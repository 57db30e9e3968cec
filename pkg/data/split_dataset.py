# data/split_dataset.py
#
# Разбиение датасета на train / test (по умолчанию 80% / 20%).
#
# - обычный режим: |train| = round(train_fraction · samples) после перемешивания
# - стратифицированный: доля применяется к каждому классу отдельно,
#   остаток от округления уходит в train (класс из одного сэмпла → train + warning)
#
# Можно запускать и как скрипт: разрезает CSV на два файла.

import os
import sys
import math
import logging
import argparse
import pathlib
from datetime import datetime
from typing import Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

BASE_DIR = str(pathlib.Path(__file__).resolve().parents[1])
if BASE_DIR not in sys.path:
    sys.path.insert(0, BASE_DIR)

from Models.errors import InputError
from data.dataset import Dataset

logger = logging.getLogger(__name__)

SPLIT_RATIO = 0.8  # 80% train / 20% test
SEED = 42


class SplitSpec(BaseModel):
    train_fraction: float = SPLIT_RATIO
    seed: int = Field(default=SEED, ge=0)
    stratified: bool = False

    @field_validator("train_fraction")
    @classmethod
    def _fraction_open_interval(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        return v


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_indices(ds: Dataset, spec: SplitSpec) -> Tuple[np.ndarray, np.ndarray]:
    n = len(ds)
    if n < 2:
        raise InputError("split: нужно минимум 2 сэмпла")

    rng = np.random.default_rng(spec.seed)

    if not spec.stratified:
        perm = rng.permutation(n)
        n_train = _round_half_up(spec.train_fraction * n)
        clamped = min(max(n_train, 1), n - 1)
        if clamped != n_train:
            logger.warning("split: размер train %d прижат к %d, чтобы обе части были непустыми", n_train, clamped)
        return np.sort(perm[:clamped]), np.sort(perm[clamped:])

    train_parts, test_parts = [], []
    for c in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            continue
        if idx.size == 1:
            logger.warning("split: класс '%s' содержит один сэмпл — он уходит в train", ds.class_names[c])
        idx = rng.permutation(idx)
        # остаток от округления — в train
        n_train = min(idx.size, math.ceil(spec.train_fraction * idx.size - 1e-9))
        train_parts.append(idx[:n_train])
        test_parts.append(idx[n_train:])

    train = np.sort(np.concatenate(train_parts))
    test = np.sort(np.concatenate(test_parts)) if test_parts else np.empty(0, dtype=np.int64)
    return train, test


def split(ds: Dataset, spec: SplitSpec) -> Tuple[Dataset, Dataset]:
    train_idx, test_idx = split_indices(ds, spec)
    return ds.subset(train_idx), ds.subset(test_idx)


def main():
    from data.csv_loader import load_csv, save_csv

    parser = argparse.ArgumentParser(description="Split an IDS CSV into train/test files.")
    parser.add_argument("--csv", required=True)
    parser.add_argument("--label-col", required=True)
    parser.add_argument("--fraction", type=float, default=SPLIT_RATIO)
    parser.add_argument("--seed", type=int, default=SEED)
    parser.add_argument("--stratified", action="store_true")
    parser.add_argument("--out-dir", default=os.path.join(BASE_DIR, "data"))
    args = parser.parse_args()

    print(f"[{datetime.now().isoformat()}] 📂 Читаем датасет: {args.csv}")
    ds = load_csv(args.csv, args.label_col, scaling="none")
    print(f"[{datetime.now().isoformat()}] Найдено {len(ds)} примеров.")

    spec = SplitSpec(train_fraction=args.fraction, seed=args.seed, stratified=args.stratified)
    train, test = split(ds, spec)
    print(f"[{datetime.now().isoformat()}] Train: {len(train)}, Test: {len(test)}")

    stem = pathlib.Path(args.csv).stem
    train_path = os.path.join(args.out_dir, f"{stem}_train.csv")
    test_path = os.path.join(args.out_dir, f"{stem}_test.csv")
    save_csv(train, train_path, label_column=args.label_col)
    save_csv(test, test_path, label_column=args.label_col)

    print(f"[{datetime.now().isoformat()}] ✅ Записаны:\n  • {train_path}\n  • {test_path}")


if __name__ == "__main__":
    main()
