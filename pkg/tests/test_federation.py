import math

import numpy as np
import pytest
import torch
from pydantic import ValidationError

import train.local_update as local_update_module
from conftest import tiny_arch
from Models.adam import AdamState
from Models.errors import ConfigError, DivergenceError
from Models.ids_cnn import build_model, evaluate
from data.dataset import Dataset
from data.partition import IID_ALPHA, PartitionPlan, make_partition
from data.split_dataset import SplitSpec, split
from data.synthetic import generate_synthetic
from train.federation import (
    RoundConfig,
    aggregate_masked,
    centralized_baseline,
    client_weights,
    derive_seeds,
    run_simulation,
)
from train.local_update import ClientState, local_update, train_epochs
from train.pruning import PruneMask, build_mask, full_mask, importance_l1, n_pruned

_DUMMY = Dataset(np.zeros((1, 8)), [0], ("a", "b", "c"))


def _client(k, weight, model, mask):
    return ClientState(
        client_id=k, dataset=_DUMMY, weight=weight, rng=np.random.default_rng(k), model=model, mask=mask
    )


def _random_like(model, seed):
    gen = torch.Generator().manual_seed(seed)
    return model.with_tensors([torch.randn(t.shape, generator=gen, dtype=torch.float64) for t in model.tensors()])


def _mask_without(model, tensor_idx, pos):
    bits = [np.ones(tuple(w.shape), dtype=bool) for w in model.weights]
    bits[tensor_idx].reshape(-1)[pos] = False
    return PruneMask(bits=tuple(bits), rho=0.0, kept_count=model.num_weights - 1)


@pytest.fixture
def fed_data():
    ds = generate_synthetic(4, 8, [80, 60, 40, 40], separation=3.0, seed=21)
    return split(ds, SplitSpec(seed=2))


# ================== АГРЕГАЦИЯ ==================


@pytest.mark.parametrize("mode", ["normalized", "literal"])
def test_all_ones_masks_reduce_to_fedavg_bitwise(small_arch, mode):
    base = build_model(small_arch, seed=0)
    p = [0.5, 0.25, 0.25]
    models = [_random_like(base, s) for s in (1, 2, 3)]
    clients = [_client(k, p[k], models[k], full_mask(base)) for k in range(3)]

    out = aggregate_masked(clients, base, mode)

    for i, w in enumerate(out.tensors()):
        expected = torch.zeros_like(w)
        for k in range(3):
            expected = expected + p[k] * models[k].tensors()[i]
        assert torch.equal(w, expected)


def test_three_client_masked_oracle(small_arch):
    base = build_model(small_arch, seed=0)
    p = [0.5, 0.3, 0.2]
    models = [_random_like(base, s) for s in (4, 5, 6)]
    masks = [full_mask(base), _mask_without(base, 2, 7), full_mask(base)]
    clients = [_client(k, p[k], models[k], masks[k]) for k in range(3)]

    out = aggregate_masked(clients, base, "normalized")

    w = [m.weights[2].reshape(-1)[7].item() for m in models]
    expected = (0.5 * w[0] + 0.2 * w[2]) / (0.5 + 0.2)
    assert out.weights[2].reshape(-1)[7].item() == pytest.approx(expected, rel=1e-12, abs=1e-12)

    other = [m.weights[2].reshape(-1)[3].item() for m in models]
    assert out.weights[2].reshape(-1)[3].item() == pytest.approx(
        0.5 * other[0] + 0.3 * other[1] + 0.2 * other[2], rel=1e-12, abs=1e-12
    )
    for i, b in enumerate(out.biases):
        torch.testing.assert_close(b, sum(p[k] * models[k].biases[i] for k in range(3)), rtol=1e-12, atol=1e-12)


def test_coordinate_pruned_everywhere(small_arch):
    base = _random_like(build_model(small_arch, seed=0), 9)
    models = [_random_like(base, s) for s in (10, 11)]
    masks = [_mask_without(base, 0, 1), _mask_without(base, 0, 1)]
    clients = [_client(k, 0.5, models[k], masks[k]) for k in range(2)]

    normalized = aggregate_masked(clients, base, "normalized")
    literal = aggregate_masked(clients, base, "literal")
    assert normalized.weights[0].reshape(-1)[1].item() == base.weights[0].reshape(-1)[1].item()
    assert literal.weights[0].reshape(-1)[1].item() == 0.0


def test_weights_must_sum_to_one(small_arch):
    base = build_model(small_arch, seed=0)
    clients = [_client(k, 0.4, base, full_mask(base)) for k in range(2)]
    with pytest.raises(ConfigError):
        aggregate_masked(clients, base)


def test_aggregation_order_does_not_depend_on_input_order(small_arch):
    base = build_model(small_arch, seed=0)
    clients = [_client(k, w, _random_like(base, 20 + k), full_mask(base)) for k, w in enumerate([0.2, 0.3, 0.5])]
    a = aggregate_masked(clients, base)
    b = aggregate_masked(list(reversed(clients)), base)
    assert all(torch.equal(x, y) for x, y in zip(a.tensors(), b.tensors()))


def test_client_weights():
    np.testing.assert_allclose(client_weights([10, 30, 0, 60]), [0.1, 0.3, 0.0, 0.6])
    with pytest.raises(ConfigError):
        client_weights([0, 0])


# ================== ЛОКАЛЬНОЕ ОБУЧЕНИЕ ==================


def _fresh_client(ds, rho=0.0, seed=5):
    return ClientState(client_id=0, dataset=ds, weight=1.0, rng=np.random.default_rng(seed), rho=rho)


def test_single_epoch_equals_plain_adam(fed_data):
    train, _ = fed_data
    cfg = RoundConfig(algorithm="fedavg", local_epochs=1, batch_size=16)
    global_model = build_model(tiny_arch(8, 4), seed=3)

    updated = local_update(_fresh_client(train), global_model, cfg, is_first_round=True)

    state = AdamState.zeros_like(global_model, eta=cfg.lr)
    reference, _, _ = train_epochs(global_model, state, train, 1, 16, np.random.default_rng(5))
    assert all(torch.equal(a, b) for a, b in zip(updated.model.tensors(), reference.tensors()))
    assert updated.mask.kept_count == global_model.num_weights


def test_huge_mu_pins_weights_to_global(fed_data):
    train, _ = fed_data
    cfg = RoundConfig(algorithm="fedprox", mu=1e6, local_epochs=2, batch_size=16, lr=1e-4)
    global_model = build_model(tiny_arch(8, 4), seed=3)

    updated = local_update(_fresh_client(train), global_model, cfg, is_first_round=False)
    gap = max(float((a - b).abs().max()) for a, b in zip(updated.model.tensors(), global_model.tensors()))
    assert gap < 1e-3


def test_first_round_prunes_exact_count(fed_data):
    train, _ = fed_data
    cfg = RoundConfig(algorithm="fedprox", local_epochs=1, finetune_epochs=1, batch_size=16)
    global_model = build_model(tiny_arch(8, 4), seed=3)
    np_total = global_model.num_weights

    updated = local_update(_fresh_client(train, rho=0.5), global_model, cfg, is_first_round=True)
    assert updated.model.nonzero_weights() == np_total - n_pruned(0.5, np_total)
    assert updated.mask.kept_count == np_total - n_pruned(0.5, np_total)
    assert updated.optimizer.t > 0
    assert math.isfinite(updated.train_loss)


def test_divergence_reports_client_and_round(fed_data, monkeypatch):
    train, _ = fed_data

    def broken(model, batch, labels, prox=None):
        raise DivergenceError("loss is nan")

    monkeypatch.setattr(local_update_module, "loss_and_grads", broken)
    client = _fresh_client(train)
    client.client_id = 7
    with pytest.raises(DivergenceError) as err:
        local_update(client, build_model(tiny_arch(8, 4), seed=0), RoundConfig(), is_first_round=False, round_idx=3)
    assert (err.value.client_id, err.value.round_idx) == (7, 3)


# ================== КОНФИГ ПРОТОКОЛА ==================


def test_round_config_defaults():
    assert RoundConfig().mu == pytest.approx(0.001)
    assert RoundConfig().local_epochs == 20
    assert RoundConfig().rounds == 40
    assert RoundConfig(algorithm="fedavg").mu == 0.0


def test_round_config_validation_messages():
    with pytest.raises(ValidationError, match="mu must be ≥ 0"):
        RoundConfig(mu=-0.1)
    with pytest.raises(ValidationError, match="fedavg requires mu = 0"):
        RoundConfig(algorithm="fedavg", mu=0.01)
    with pytest.raises(ValidationError):
        RoundConfig(rho=1.0)
    with pytest.raises(ValidationError):
        RoundConfig(local_epochs=0)


def test_client_rhos():
    assert RoundConfig(rho=0.3).client_rhos(3) == [0.3, 0.3, 0.3]
    assert RoundConfig(rho=[0.1, 0.2]).client_rhos(2) == [0.1, 0.2]
    with pytest.raises(ConfigError):
        RoundConfig(rho=[0.1, 0.2]).client_rhos(3)


def test_derive_seeds_is_stable():
    a_init, a_streams = derive_seeds(42, 3)
    b_init, b_streams = derive_seeds(42, 3)
    assert a_init == b_init
    assert [s.generate_state(2).tolist() for s in a_streams] == [s.generate_state(2).tolist() for s in b_streams]


# ================== СИМУЛЯЦИЯ ==================


def test_single_client_reduces_to_centralized(fed_data):
    train, test = fed_data
    cfg = RoundConfig(algorithm="fedavg", local_epochs=2, rounds=2, batch_size=16, seed=13)
    arch = tiny_arch(8, 4)
    plan = make_partition(train, 1, "quantity", 10.0, seed=0)

    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        result = run_simulation(train, plan, cfg, test, arch=arch)
        reference = centralized_baseline(train, cfg, arch=arch)
    finally:
        torch.set_num_threads(threads)

    assert all(torch.equal(a, b) for a, b in zip(result.global_model.tensors(), reference.tensors()))
    assert len(result.metrics) == 2


def test_pruned_coordinates_stay_zero(fed_data):
    train, test = fed_data
    cfg = RoundConfig(algorithm="fedprox", local_epochs=1, finetune_epochs=1, rounds=10, rho=0.5, batch_size=32)
    plan = make_partition(train, 5, "quantity", IID_ALPHA, seed=1)
    np_total = build_model(tiny_arch(8, 4), seed=0).num_weights
    allowed = np_total - n_pruned(0.5, np_total)
    checked = []

    def check(q, global_model, clients):
        for c in clients:
            assert c.mask.kept_count == allowed
            for w, bits in zip(c.model.weights, c.mask.bits):
                assert float(w[torch.from_numpy(~bits)].abs().sum()) == 0.0
        checked.append(q)

    result = run_simulation(train, plan, cfg, test, arch=tiny_arch(8, 4), on_round=check)

    assert checked == list(range(10))
    assert result.mask_uploads == 5
    for c in result.clients:
        assert np.array_equal(result.server_mask(c.client_id).flat(), c.mask.flat())
    assert all(0.0 <= m.accuracy <= 1.0 for m in result.metrics)
    assert result.metrics[-1].confusion.sum() == len(test)


def test_empty_client_is_skipped(fed_data, caplog):
    train, test = fed_data
    n = len(train)
    plan = PartitionPlan(
        assignments=(np.arange(0, n // 2), np.array([], dtype=np.int64), np.arange(n // 2, n)),
        proportions=np.array([[0.5], [0.0], [0.5]]),
        mode="quantity",
        n_samples=n,
    )
    cfg = RoundConfig(algorithm="fedavg", local_epochs=1, rounds=2, batch_size=32)
    result = run_simulation(train, plan, cfg, test, arch=tiny_arch(8, 4))
    assert result.mask_uploads == 2
    assert sorted(result.metrics[-1].client_losses) == [0, 2]
    assert any("пустые клиенты" in r.getMessage() for r in caplog.records)


def test_simulation_is_deterministic(fed_data):
    train, test = fed_data
    cfg = RoundConfig(local_epochs=1, rounds=3, rho=[0.2, 0.5, 0.7], batch_size=32, seed=8)
    plan = make_partition(train, 3, "label", 1.0, seed=4)
    a = run_simulation(train, plan, cfg, test, arch=tiny_arch(8, 4))
    b = run_simulation(train, plan, cfg, test, arch=tiny_arch(8, 4))
    assert all(torch.equal(x, y) for x, y in zip(a.global_model.tensors(), b.global_model.tensors()))
    assert [m.accuracy for m in a.metrics] == [m.accuracy for m in b.metrics]
    assert a.mask_registry == b.mask_registry


def test_plan_must_cover_dataset(fed_data):
    train, test = fed_data
    plan = make_partition(train.subset(np.arange(20)), 2, "quantity", 10.0, seed=0)
    with pytest.raises(ConfigError):
        run_simulation(train, plan, RoundConfig(rounds=1), test, arch=tiny_arch(8, 4))


@pytest.mark.slow
def test_parallel_matches_sequential(fed_data):
    train, test = fed_data
    plan = make_partition(train, 4, "quantity", IID_ALPHA, seed=1)
    base = dict(local_epochs=1, rounds=2, rho=0.5, batch_size=32, torch_threads=1)
    seq = run_simulation(train, plan, RoundConfig(workers=1, **base), test, arch=tiny_arch(8, 4))
    par = run_simulation(train, plan, RoundConfig(workers=2, **base), test, arch=tiny_arch(8, 4))
    assert all(torch.equal(x, y) for x, y in zip(seq.global_model.tensors(), par.global_model.tensors()))


# ================== ТРЕНДЫ НА НАСТОЛЬНОМ МАСШТАБЕ ==================


def _desk_accuracy(seed, rho, algorithm="fedavg", alpha=IID_ALPHA, mode="quantity"):
    from Models.ids_cnn import ArchConfig, ConvBlock

    ds = generate_synthetic(10, 20, [150] * 10, separation=2.0, seed=seed)
    train, test = split(ds, SplitSpec(seed=seed, stratified=True))
    plan = make_partition(train, 10, mode, alpha, seed=seed)
    arch = ArchConfig(conv=[ConvBlock(out_channels=4, kernel_size=3), ConvBlock(out_channels=4, kernel_size=3)], hidden=[16])
    cfg = RoundConfig(algorithm=algorithm, local_epochs=2, rounds=40, rho=rho, batch_size=32, seed=seed)
    return run_simulation(train, plan, cfg, test, arch=arch).metrics[-1].accuracy


@pytest.mark.slow
def test_desk_scale_pruning_trend():
    seeds = range(5)
    acc = {rho: np.mean([_desk_accuracy(s, rho) for s in seeds]) for rho in (0.0, 0.5, 0.9)}
    assert acc[0.5] >= acc[0.0] - 0.05
    assert acc[0.9] < acc[0.5]


@pytest.mark.slow
def test_desk_scale_fedprox_under_label_skew():
    seeds = range(5)
    prox = np.mean([_desk_accuracy(s, 0.0, "fedprox", alpha=10, mode="label") for s in seeds])
    avg = np.mean([_desk_accuracy(s, 0.0, "fedavg", alpha=10, mode="label") for s in seeds])
    assert prox >= avg - 0.01
