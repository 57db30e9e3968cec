# Models/errors.py
#
# Общая иерархия ошибок симулятора. Все модули поднимают только эти классы,
# CLI переводит их в коды выхода.

from __future__ import annotations

from typing import Optional


class FedPruneError(Exception):
    """Базовая ошибка проекта."""


class ConfigError(FedPruneError, ValueError):
    """Некорректная конфигурация (архитектура, ρ, веса клиентов и т.п.)."""


class InputError(FedPruneError, ValueError):
    """Некорректные входные данные: формы тензоров, метки, CSV."""


class NumericError(FedPruneError, ArithmeticError):
    def __init__(self, message: str, layer: Optional[str] = None) -> None:
        super().__init__(message)
        self.layer = layer


class DivergenceError(FedPruneError, RuntimeError):
    """Лосс клиента ушёл в inf/nan — раунд прерывается."""

    def __init__(
        self,
        message: str,
        client_id: Optional[int] = None,
        round_idx: Optional[int] = None,
    ) -> None:
        super().__init__(message)
        self.client_id = client_id
        self.round_idx = round_idx


class InternalError(FedPruneError, RuntimeError):
    """Нарушен внутренний контракт (например, маска не совпадает с моделью)."""
