# Models/adam.py
#
# Adam с поправкой смещения моментов:
#   m ← β1·m + (1 − β1)·g,  v ← β2·v + (1 − β2)·g²
#   W ← W − η · m̂ / (√v̂ + ε),  m̂ = m / (1 − β1^t),  v̂ = v / (1 − β2^t)
# Смещения обновляются тем же правилом. Функции не мутируют вход.

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Sequence, Tuple

import torch

from .errors import InputError, NumericError
from .ids_cnn import Gradients, ModelParams


@dataclass
class AdamState:
    m: List[torch.Tensor]
    v: List[torch.Tensor]
    t: int = 0
    eta: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise InputError("beta1/beta2 должны лежать в (0, 1)")
        if self.epsilon <= 0:
            raise InputError("epsilon должен быть > 0")
        if self.t < 0:
            raise InputError("t должен быть ≥ 0")

    @classmethod
    def zeros_like(
        cls,
        model: ModelParams,
        eta: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ) -> "AdamState":
        tensors = model.tensors()
        return cls(
            m=[torch.zeros_like(t) for t in tensors],
            v=[torch.zeros_like(t) for t in tensors],
            eta=eta,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(model: ModelParams, grads: Gradients, state: AdamState) -> Tuple[ModelParams, AdamState]:
    params = model.tensors()
    gs: Sequence[torch.Tensor] = grads.tensors()
    if len(gs) != len(params) or len(state.m) != len(params):
        raise InputError("градиенты/состояние Adam не совпадают с моделью")

    names = model.tensor_names()
    for name, p, g in zip(names, params, gs):
        if g.shape != p.shape:
            raise InputError(f"{name}: градиент формы {tuple(g.shape)}, параметр {tuple(p.shape)}")
        if not bool(torch.isfinite(g).all()):
            raise NumericError(f"нечисловой градиент в слое {name}", layer=name)

    t = state.t + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t

    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, gs, state.m, state.v):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params.append(p - state.eta * m_hat / (torch.sqrt(v_hat) + state.epsilon))
        new_m.append(m)
        new_v.append(v)

    return model.with_tensors(new_params), replace(state, m=new_m, v=new_v, t=t)
