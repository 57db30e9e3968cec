"""Прунинг, локальный апдейт клиента, федерация."""
