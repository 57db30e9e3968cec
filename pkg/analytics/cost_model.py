# analytics/cost_model.py
#
# Аналитическая сложность и энергия инференса.
#
#   NP    = Σ_conv K·C_in·C_out + Σ_dense N_in·N_out      (только веса, без bias)
#   FLOPs = Σ_conv 2·K·C_in·L_out·C_out + Σ_dense 2·N_in·N_out,  L_out = L_in − K + 1
#   E     = FLOPs·E_FLOP + (NP·B / 2^20)·E_access   [pJ]
#
# После прунинга NP и FLOPs масштабируются на (1 − ρ), поэтому и энергия тоже.

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
from pydantic import BaseModel, ConfigDict, Field

from Models.errors import ConfigError
from Models.ids_cnn import DTYPE, ArchConfig, LayerSpec, ModelParams, forward

ArchLike = Union[ArchConfig, Sequence[LayerSpec]]


class EnergyConstants(BaseModel):
    model_config = ConfigDict(frozen=True)

    e_flop: float = Field(default=2.3, gt=0)  # pJ на операцию
    e_access: float = Field(default=640.0, gt=0)  # pJ на MB размера модели
    bytes_per_param: float = Field(default=4.0, gt=0)
    mb_bytes: float = Field(default=float(2 ** 20), gt=0)


@dataclass(frozen=True)
class CostProfile:
    params: float  # NP; после прунинга — вещественная величина (1 − ρ)·NP
    flops: float
    model_size_bytes: float
    energy_pj: float
    rho: float
    consts: EnergyConstants

    def as_dict(self) -> Dict[str, float]:
        return {
            "params": self.params,
            "flops": self.flops,
            "model_size_bytes": self.model_size_bytes,
            "energy_pj": self.energy_pj,
            "rho": self.rho,
        }


def _layers_of(arch: ArchLike) -> List[LayerSpec]:
    if isinstance(arch, ArchConfig):
        if arch.layers is not None and arch.input_length is None:
            return list(arch.layers)
        return arch.layer_specs()
    return list(arch)


def count_params(arch: ArchLike) -> int:
    total = 0
    for spec in _layers_of(arch):
        if spec.kind == "conv1d":
            total += spec.kernel_size * spec.in_channels * spec.out_channels
        elif spec.kind == "dense":
            total += spec.n_in * spec.n_out
    return total


def count_flops(arch: ArchLike, input_length: Optional[int] = None, multiply_add: bool = False) -> int:
    """multiply_add=True считает пару умножение+сложение за одну операцию."""
    if input_length is None and isinstance(arch, ArchConfig):
        input_length = arch.input_length
    if input_length is None:
        raise ConfigError("count_flops: не задан input_length")

    factor = 1 if multiply_add else 2
    length = input_length
    total = 0
    for idx, spec in enumerate(_layers_of(arch)):
        if spec.kind == "conv1d":
            length = length - spec.kernel_size + 1
            if length < 1:
                raise ConfigError(
                    f"слой {idx}: вход длины {input_length} слишком короткий для CONV-стека"
                )
            total += factor * spec.kernel_size * spec.in_channels * length * spec.out_channels
        elif spec.kind == "dense":
            total += factor * spec.n_in * spec.n_out
    return total


def energy(profile: CostProfile, consts: Optional[EnergyConstants] = None) -> float:
    c = consts or profile.consts
    return energy_of(profile.flops, profile.params, c)


def energy_of(flops: float, params: float, consts: EnergyConstants) -> float:
    size_mb = params * consts.bytes_per_param / consts.mb_bytes
    return flops * consts.e_flop + size_mb * consts.e_access


def make_profile(params: float, flops: float, consts: Optional[EnergyConstants] = None, rho: float = 0.0) -> CostProfile:
    c = consts or EnergyConstants()
    return CostProfile(
        params=params,
        flops=flops,
        model_size_bytes=params * c.bytes_per_param,
        energy_pj=energy_of(flops, params, c),
        rho=rho,
        consts=c,
    )


def pruned_profile(profile: CostProfile, rho: float) -> CostProfile:
    if not 0.0 <= rho < 1.0:
        raise ConfigError(f"rho должен лежать в [0, 1), пришло {rho}")
    if rho == 0.0:
        return profile
    keep = 1.0 - rho
    total_rho = 1.0 - (1.0 - profile.rho) * keep
    return make_profile(keep * profile.params, keep * profile.flops, profile.consts, rho=total_rho)


def profile(
    arch: ArchConfig,
    consts: Optional[EnergyConstants] = None,
    rho: float = 0.0,
    multiply_add: bool = False,
) -> CostProfile:
    base = make_profile(count_params(arch), count_flops(arch, multiply_add=multiply_add), consts)
    return pruned_profile(base, rho)


def instrumented_counts(model: ModelParams) -> Tuple[int, int]:
    """
    (NP, FLOPs) по фактическим тензорам: веса считаются по модели,
    операции — по формам входов/выходов в трассированном прямом проходе.
    """
    flops = 0

    def trace(spec: LayerSpec, h: torch.Tensor, out: torch.Tensor) -> None:
        nonlocal flops
        if spec.kind == "conv1d":
            c_in, l_in = h.shape[1], h.shape[2]
            c_out, l_out = out.shape[1], out.shape[2]
            k = l_in - l_out + 1
            flops += 2 * k * c_in * l_out * c_out
        elif spec.kind == "dense":
            n_in = h.reshape(h.shape[0], -1).shape[1]
            flops += 2 * n_in * out.shape[1]

    forward(model, torch.zeros((1, model.input_length), dtype=DTYPE), trace=trace)
    params = sum(w.numel() for w in model.weights)
    return int(params), int(flops)


def published_discrepancy(computed: CostProfile, published: Dict[str, float]) -> Dict[str, float]:
    """Разница с опубликованными NP/FLOPs/энергией (computed − published)."""
    out = {}
    for key, attr in (("params", "params"), ("flops", "flops"), ("energy_pj", "energy_pj")):
        if key in published:
            out[key] = getattr(computed, attr) - float(published[key])
    return out
