# automatika/artifacts.py
#
# Запись результатов эксперимента: CSV (UTF-8, заголовок, '\n'), JSON, бинарные блобы
# и manifest.json с SHA-256 каждого файла, хешем конфига, сидом и версиями библиотек.
# Таймстемпов в файлах нет: повторный прогон с тем же конфигом даёт те же байты
# (кроме колонки seconds в метриках).

from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
from typing import Any, Dict, List

import numpy as np
import pandas as pd
import pydantic
import sklearn
import torch

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
FLOAT_FORMAT = "%.17g"


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def library_versions() -> Dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "torch": torch.__version__,
        "scikit-learn": sklearn.__version__,
        "pydantic": pydantic.VERSION,
    }


class ArtifactWriter:
    def __init__(self, out_dir: str) -> None:
        self.out_dir = out_dir
        self.files: List[str] = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def track(self, name: str) -> str:
        """Регистрирует файл в манифесте и возвращает его путь (родительские папки создаются)."""
        if name not in self.files:
            self.files.append(name)
        path = self.path(name)
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        return path

    def write_csv(self, name: str, df: pd.DataFrame) -> str:
        path = self.track(name)
        df.to_csv(path, index=False, float_format=FLOAT_FORMAT, encoding="utf-8", lineterminator="\n")
        logger.info("записан %s (%d строк)", path, len(df))
        return path

    def write_json(self, name: str, payload: Any) -> str:
        path = self.track(name)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(payload, f, ensure_ascii=False, indent=2, sort_keys=True)
            f.write("\n")
        return path

    def write_bytes(self, name: str, blob: bytes) -> str:
        path = self.track(name)
        with open(path, "wb") as f:
            f.write(blob)
        return path

    def write_manifest(self, command: str, config_hash: str, seed: int) -> str:
        payload = {
            "command": command,
            "config_sha256": config_hash,
            "seed": seed,
            "versions": library_versions(),
            "files": {name: sha256_file(self.path(name)) for name in sorted(self.files)},
        }
        path = self.path(MANIFEST)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(payload, f, ensure_ascii=False, indent=2, sort_keys=True)
            f.write("\n")
        return path
