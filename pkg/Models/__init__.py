"""Движок сети: слои, Adam, ошибки."""
