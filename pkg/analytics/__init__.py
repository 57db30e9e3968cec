"""Модель стоимости и оптимизатор ρ."""
