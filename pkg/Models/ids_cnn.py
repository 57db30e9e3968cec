# Models/ids_cnn.py
#
# Минимальный движок для IDS-классификатора:
# - описание архитектуры (Conv1D → ReLU → ... → Flatten → Dense → ...)
# - детерминированная инициализация (Kaiming для CONV, N(0, 0.01) для FC)
# - прямой проход, кросс-энтропия (+ проксимальный член FedProx), точные градиенты
# - оценка: accuracy / loss / confusion matrix
#
# Все вычисления в float64. Смещения (bias) существуют, но не входят
# в пространство индексов прунинга.

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field
from sklearn.metrics import confusion_matrix

from .errors import ConfigError, InputError

if TYPE_CHECKING:
    from data.dataset import Dataset

DTYPE = torch.float64
DENSE_INIT_STD = 0.01
EVAL_BATCH = 4096


# ================== АРХИТЕКТУРА ==================


class LayerSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["conv1d", "dense", "relu", "flatten"]
    in_channels: Optional[int] = Field(default=None, ge=1)
    out_channels: Optional[int] = Field(default=None, ge=1)
    kernel_size: Optional[int] = Field(default=None, ge=1)
    n_in: Optional[int] = Field(default=None, ge=1)
    n_out: Optional[int] = Field(default=None, ge=1)
    # stride/padding в этом движке не настраиваются
    stride: Literal[1] = 1
    padding: Literal[0] = 0

    @property
    def parameterized(self) -> bool:
        return self.kind in ("conv1d", "dense")

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        if self.kind == "conv1d":
            return (self.out_channels, self.in_channels, self.kernel_size)
        if self.kind == "dense":
            return (self.n_out, self.n_in)
        return ()

    @property
    def bias_size(self) -> int:
        if self.kind == "conv1d":
            return self.out_channels
        if self.kind == "dense":
            return self.n_out
        return 0


def conv1d(in_channels: int, out_channels: int, kernel_size: int) -> LayerSpec:
    return LayerSpec(kind="conv1d", in_channels=in_channels, out_channels=out_channels, kernel_size=kernel_size)


def dense(n_in: int, n_out: int) -> LayerSpec:
    return LayerSpec(kind="dense", n_in=n_in, n_out=n_out)


RELU = LayerSpec(kind="relu")
FLATTEN = LayerSpec(kind="flatten")


class ConvBlock(BaseModel):
    out_channels: int = Field(ge=1)
    kernel_size: int = Field(ge=1)


class ArchConfig(BaseModel):
    """
    Компактное описание сети: стек CONV-блоков, затем FC-слои.

    По умолчанию — эталонная архитектура:
    Conv1D(1→32, K=3) → ReLU → Conv1D(32→64, K=3) → ReLU → Flatten
    → Dense(→128) → ReLU → Dense(128→classes).

    input_length / n_classes можно не задавать в конфиге — их подставит
    пайплайн по датасету. Поле `layers` позволяет задать слои явно.
    """

    input_length: Optional[int] = Field(default=None, ge=1)
    n_classes: Optional[int] = Field(default=None, ge=2)
    conv: List[ConvBlock] = Field(
        default_factory=lambda: [ConvBlock(out_channels=32, kernel_size=3), ConvBlock(out_channels=64, kernel_size=3)]
    )
    hidden: List[int] = Field(default_factory=lambda: [128])
    layers: Optional[List[LayerSpec]] = None

    def resolved(self, input_length: Optional[int] = None, n_classes: Optional[int] = None) -> "ArchConfig":
        update = {}
        if self.input_length is None and input_length is not None:
            update["input_length"] = input_length
        if self.n_classes is None and n_classes is not None:
            update["n_classes"] = n_classes
        return self.model_copy(update=update) if update else self

    def layer_specs(self) -> List[LayerSpec]:
        if self.input_length is None:
            raise ConfigError("arch.input_length не задан")

        if self.layers is not None:
            layers = list(self.layers)
        else:
            if self.n_classes is None:
                raise ConfigError("arch.n_classes не задан")
            layers = []
            channels, length = 1, self.input_length
            for block in self.conv:
                length = length - block.kernel_size + 1
                if length < 1:
                    raise ConfigError(
                        f"input_length={self.input_length} слишком короткий для CONV-стека "
                        f"(kernel_size={block.kernel_size})"
                    )
                layers += [conv1d(channels, block.out_channels, block.kernel_size), RELU]
                channels = block.out_channels
            layers.append(FLATTEN)
            n_in = channels * length
            for h in self.hidden:
                layers += [dense(n_in, h), RELU]
                n_in = h
            layers.append(dense(n_in, self.n_classes))

        check_layers(layers, self.input_length)
        return layers


def check_layers(layers: Sequence[LayerSpec], input_length: int) -> int:
    """
    Прогоняет формы по слоям и возвращает число выходов.
    Несовместимые соседние слои → ConfigError.
    Dense поверх (C, L) выполняет неявный flatten и требует n_in == C·L.
    """
    if not layers:
        raise ConfigError("архитектура пуста")

    channels: Optional[int] = 1
    length = input_length
    features: Optional[int] = None  # после flatten

    for idx, spec in enumerate(layers):
        if spec.kind == "conv1d":
            if spec.in_channels is None or spec.out_channels is None or spec.kernel_size is None:
                raise ConfigError(f"слой {idx}: conv1d требует in_channels/out_channels/kernel_size")
            if features is not None:
                raise ConfigError(f"слой {idx}: conv1d после flatten/dense")
            if spec.in_channels != channels:
                raise ConfigError(f"слой {idx}: conv1d ждёт {spec.in_channels} каналов, приходит {channels}")
            length = length - spec.kernel_size + 1
            if length < 1:
                raise ConfigError(f"слой {idx}: вход слишком короткий для kernel_size={spec.kernel_size}")
            channels = spec.out_channels
        elif spec.kind == "dense":
            if spec.n_in is None or spec.n_out is None:
                raise ConfigError(f"слой {idx}: dense требует n_in/n_out")
            incoming = features if features is not None else channels * length
            if spec.n_in != incoming:
                raise ConfigError(f"слой {idx}: dense ждёт n_in={spec.n_in}, приходит {incoming}")
            features = spec.n_out
        elif spec.kind == "flatten":
            if features is None:
                features = channels * length
        # relu форму не меняет

    if features is None:
        raise ConfigError("архитектура должна заканчиваться dense-слоем")
    if layers[-1].kind != "dense":
        raise ConfigError("последний слой должен быть dense (логиты)")
    return features


# ================== ПАРАМЕТРЫ МОДЕЛИ ==================


@dataclass
class ModelParams:
    layers: Tuple[LayerSpec, ...]
    input_length: int
    weights: List[torch.Tensor]
    biases: List[torch.Tensor]
    names: List[str]
    offsets: List[int] = field(init=False)

    def __post_init__(self) -> None:
        # flat_index_map: глобальный индекс j = offsets[k] + позиция внутри weights[k]
        self.offsets = []
        total = 0
        for w in self.weights:
            self.offsets.append(total)
            total += w.numel()

    @property
    def n_classes(self) -> int:
        return self.layers[-1].n_out

    @property
    def num_weights(self) -> int:
        return sum(w.numel() for w in self.weights)

    def tensors(self) -> List[torch.Tensor]:
        """weights, затем biases — порядок, общий для градиентов и моментов Adam."""
        return list(self.weights) + list(self.biases)

    def tensor_names(self) -> List[str]:
        return [f"{n}.weight" for n in self.names] + [f"{n}.bias" for n in self.names]

    def flat_weights(self) -> torch.Tensor:
        return torch.cat([w.reshape(-1) for w in self.weights])

    def locate(self, j: int) -> Tuple[int, int]:
        if j < 0 or j >= self.num_weights:
            raise InputError(f"глобальный индекс {j} вне [0, {self.num_weights})")
        for k in range(len(self.weights) - 1, -1, -1):
            if j >= self.offsets[k]:
                return k, j - self.offsets[k]
        raise AssertionError("unreachable")

    def nonzero_weights(self) -> int:
        return int(sum(int(torch.count_nonzero(w)) for w in self.weights))

    def with_tensors(self, tensors: Sequence[torch.Tensor]) -> "ModelParams":
        n = len(self.weights)
        return ModelParams(
            layers=self.layers,
            input_length=self.input_length,
            weights=list(tensors[:n]),
            biases=list(tensors[n:]),
            names=list(self.names),
        )

    def clone(self) -> "ModelParams":
        return self.with_tensors([t.detach().clone() for t in self.tensors()])


@dataclass
class Gradients:
    weights: List[torch.Tensor]
    biases: List[torch.Tensor]

    def tensors(self) -> List[torch.Tensor]:
        return list(self.weights) + list(self.biases)


class Prox(NamedTuple):
    mu: float
    anchor: ModelParams


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    confusion: np.ndarray


LayerTrace = Callable[[LayerSpec, torch.Tensor, torch.Tensor], None]


def _torch_seed(seed: int) -> int:
    return int(seed) & 0xFFFF_FFFF_FFFF_FFFF


def build_model(arch: ArchConfig, seed: int) -> ModelParams:
    layers = tuple(arch.layer_specs())
    gen = torch.Generator().manual_seed(_torch_seed(seed))

    weights: List[torch.Tensor] = []
    biases: List[torch.Tensor] = []
    names: List[str] = []
    for idx, spec in enumerate(layers):
        if not spec.parameterized:
            continue
        if spec.kind == "conv1d":
            # Kaiming He (fan_in, ReLU): std = sqrt(2 / (C_in · K))
            std = math.sqrt(2.0 / (spec.in_channels * spec.kernel_size))
        else:
            std = DENSE_INIT_STD
        w = torch.randn(spec.weight_shape, generator=gen, dtype=DTYPE) * std
        weights.append(w)
        biases.append(torch.zeros(spec.bias_size, dtype=DTYPE))
        names.append(f"{spec.kind}_{idx}")

    return ModelParams(layers=layers, input_length=arch.input_length, weights=weights, biases=biases, names=names)


# ================== ПРЯМОЙ ПРОХОД ==================


def _as_batch(model: ModelParams, batch) -> torch.Tensor:
    x = torch.as_tensor(batch, dtype=DTYPE)
    if x.dim() != 2 or x.shape[0] < 1 or x.shape[1] != model.input_length:
        raise InputError(
            f"ожидается батч формы [batch≥1, {model.input_length}], пришло {tuple(x.shape)}"
        )
    return x


def _run_layers(
    layers: Sequence[LayerSpec],
    weights: Sequence[torch.Tensor],
    biases: Sequence[torch.Tensor],
    x: torch.Tensor,
    trace: Optional[LayerTrace] = None,
) -> torch.Tensor:
    h = x.unsqueeze(1)  # [batch, 1 канал, d]
    p = 0
    for spec in layers:
        if spec.kind == "conv1d":
            out = F.conv1d(h, weights[p], biases[p])
            p += 1
        elif spec.kind == "dense":
            if h.dim() == 3:
                h = h.flatten(1)
            out = F.linear(h, weights[p], biases[p])
            p += 1
        elif spec.kind == "relu":
            out = F.relu(h)
        else:
            out = h.flatten(1)
        if trace is not None:
            trace(spec, h, out)
        h = out
    return h


def forward(model: ModelParams, batch, trace: Optional[LayerTrace] = None) -> torch.Tensor:
    """Логиты до softmax; чистая функция (model, batch)."""
    x = _as_batch(model, batch)
    with torch.no_grad():
        return _run_layers(model.layers, model.weights, model.biases, x, trace)


def _as_labels(model: ModelParams, labels, n: int) -> torch.Tensor:
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long).reshape(-1)
    if y.numel() != n:
        raise InputError(f"меток {y.numel()}, а сэмплов {n}")
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= model.n_classes):
        raise InputError(f"метки должны лежать в [0, {model.n_classes})")
    return y


def _check_congruent(model: ModelParams, other: ModelParams, what: str) -> None:
    a, b = model.tensors(), other.tensors()
    if len(a) != len(b) or any(x.shape != y.shape for x, y in zip(a, b)):
        raise InputError(f"{what} не совпадает по форме с моделью")


def loss_and_grads(
    model: ModelParams,
    batch,
    labels,
    prox: Optional[Prox] = None,
) -> Tuple[float, Gradients]:
    """
    Средняя softmax-кросс-энтропия по батчу (+ (mu/2)·‖W − W_anchor‖² для FedProx)
    и её точные частные производные по всем весам и смещениям.
    """
    x = _as_batch(model, batch)
    y = _as_labels(model, labels, x.shape[0])

    if prox is not None:
        if prox.mu < 0:
            raise InputError("mu must be ≥ 0")
        _check_congruent(model, prox.anchor, "anchor")

    params = [t.detach().clone().requires_grad_(True) for t in model.tensors()]
    n = len(model.weights)
    logits = _run_layers(model.layers, params[:n], params[n:], x)
    loss = F.cross_entropy(logits, y)

    if prox is not None and prox.mu != 0:
        sq = sum(((p - a) ** 2).sum() for p, a in zip(params, prox.anchor.tensors()))
        loss = loss + 0.5 * prox.mu * sq

    grads = torch.autograd.grad(loss, params)
    return float(loss.item()), Gradients(weights=list(grads[:n]), biases=list(grads[n:]))


def mean_loss(model: ModelParams, features, labels) -> float:
    """F(W): средняя кросс-энтропия без регуляризаторов."""
    x = _as_batch(model, features)
    y = _as_labels(model, labels, x.shape[0])
    with torch.no_grad():
        logits = _run_layers(model.layers, model.weights, model.biases, x)
        return float(F.cross_entropy(logits, y).item())


# ================== ОЦЕНКА ==================


def predict(model: ModelParams, features, batch_size: int = EVAL_BATCH) -> np.ndarray:
    """argmax логитов; при равенстве выигрывает меньший индекс класса."""
    x = _as_batch(model, features)
    preds = []
    for start in range(0, x.shape[0], batch_size):
        logits = forward(model, x[start:start + batch_size]).numpy()
        preds.append(np.argmax(logits, axis=1))  # numpy берёт первое вхождение максимума
    return np.concatenate(preds)


def evaluate(model: ModelParams, dataset: "Dataset", batch_size: int = EVAL_BATCH) -> EvalResult:
    if dataset is None or len(dataset.labels) == 0:
        raise InputError("evaluate: пустой датасет")

    x = _as_batch(model, dataset.features)
    y = _as_labels(model, dataset.labels, x.shape[0])

    loss_sum = 0.0
    preds = []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            logits = _run_layers(model.layers, model.weights, model.biases, x[start:start + batch_size])
            loss_sum += float(F.cross_entropy(logits, y[start:start + batch_size], reduction="sum").item())
            preds.append(np.argmax(logits.numpy(), axis=1))

    y_pred = np.concatenate(preds)
    y_true = y.numpy()
    cm = confusion_matrix(y_true, y_pred, labels=np.arange(model.n_classes))
    n = len(y_true)
    return EvalResult(accuracy=float(np.trace(cm)) / n, loss=loss_sum / n, confusion=cm)
