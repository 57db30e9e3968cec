#!/usr/bin/env python3
"""
Единый пайплайн симулятора:

1) partition     → разбиение train-части по клиентам, тепловая карта (CSV)
2) train         → федеративное обучение при заданном ρ: метрики по раундам,
                   confusion matrix финального раунда, блобы масок
3) prune-sweep   → train для каждого ρ из списка + сводная таблица с энергией
4) optimize-rho  → кривая скора (ρ, score, acc_term, energy_term) и оптимальные ρ_i
5) cost          → NP / FLOPs / размер / энергия архитектуры (JSON в stdout)
6) validate      → проверка конфига без запуска

Запуск:
    python -m automatika.run_pipeline train --config configs/synthetic_small.json --out results/small

Коды выхода: 0 — ок, 2 — конфиг, 3 — расходимость/численная ошибка, 4 — входные данные.
"""

import argparse
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

# run_pipeline.py лежит в: .../automatika/run_pipeline.py
# => корень проекта на уровень выше
PROJECT_ROOT = Path(__file__).resolve().parent.parent
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

import numpy as np
import pandas as pd

from Models.errors import ConfigError, DivergenceError, InputError, NumericError
from analytics.cost_model import CostProfile, profile, pruned_profile, published_discrepancy
from analytics.rho_optimizer import optimize_rho, score_curve
from automatika import config as settings
from automatika.artifacts import ArtifactWriter
from automatika.config import ExperimentConfig
from data.csv_loader import load_csv
from data.dataset import Dataset
from data.partition import PartitionPlan, export_heatmap, make_partition
from data.split_dataset import SplitSpec, split
from data.synthetic import generate_synthetic
from train.federation import RoundMetrics, SimulationResult, run_simulation

logger = logging.getLogger("automatika.run_pipeline")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_INPUT = 4


@contextmanager
def run_step(name: str):
    """Баннер шага пайплайна; ошибки пробрасываются наверх и превращаются в код выхода."""
    print("\n" + "=" * 80)
    print(f"▶ {name}")
    print("=" * 80)
    yield
    print(f"✅ Шаг '{name}' выполнен успешно.")


# ============================================
# ДАННЫЕ
# ============================================


def load_dataset(cfg: ExperimentConfig, seed: int) -> Dataset:
    ds_cfg = cfg.dataset
    if ds_cfg.source == "synthetic":
        syn = ds_cfg.synthetic
        return generate_synthetic(
            syn.classes, syn.features, syn.per_class_counts, syn.separation, seed, syn.class_names
        )
    return load_csv(ds_cfg.path, ds_cfg.label_column, ds_cfg.scaling, ds_cfg.class_order)


def prepare(cfg: ExperimentConfig) -> Tuple[Dataset, Dataset, PartitionPlan, Dict[str, int]]:
    seeds = settings.stream_seeds(cfg.seed)
    with run_step("Загрузка и split датасета"):
        ds = load_dataset(cfg, seeds["data"])
        spec = SplitSpec(
            train_fraction=cfg.split.train_fraction, seed=seeds["split"], stratified=cfg.split.stratified
        )
        train, test = split(ds, spec)
        print(f"   samples={len(ds)}  train={len(train)}  test={len(test)}  classes={ds.n_classes}")
    with run_step(f"Разбиение по клиентам ({cfg.partition.mode}, K={cfg.clients}, α={cfg.partition.alpha:g})"):
        plan = make_partition(
            train,
            cfg.clients,
            cfg.partition.mode,
            cfg.partition.alpha,
            seeds["partition"],
            beta=cfg.partition.beta,
            label_alpha=cfg.partition.label_alpha,
        )
        sizes = plan.client_sizes()
        print(f"   размеры клиентов: min={sizes.min()}  max={sizes.max()}  пустых={len(plan.empty_clients)}")
    return train, test, plan, seeds


# ============================================
# ТАБЛИЦЫ
# ============================================


def metrics_frame(metrics: Sequence[RoundMetrics]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "round": [m.round for m in metrics],
            "accuracy": [m.accuracy for m in metrics],
            "loss": [m.loss for m in metrics],
            "train_loss": [m.mean_train_loss for m in metrics],
            "nonzero_weights": [m.nonzero_weights for m in metrics],
            "seconds": [m.seconds for m in metrics],
        }
    )


def client_losses_frame(metrics: Sequence[RoundMetrics]) -> pd.DataFrame:
    rows = [
        {"round": m.round, "client": k, "train_loss": loss}
        for m in metrics
        for k, loss in sorted(m.client_losses.items())
    ]
    return pd.DataFrame(rows, columns=["round", "client", "train_loss"])


def confusion_frame(cm: np.ndarray, class_names: Sequence[str]) -> pd.DataFrame:
    df = pd.DataFrame(cm, columns=list(class_names))
    df.insert(0, "true", list(class_names))
    return df


def cost_payload(prof: CostProfile) -> Dict[str, float]:
    return {
        "NP": prof.params,
        "FLOPs": prof.flops,
        "model_size_bytes": prof.model_size_bytes,
        "energy_pj": prof.energy_pj,
        "rho": prof.rho,
    }


def _simulate(cfg: ExperimentConfig, train, test, plan, seeds, rho) -> SimulationResult:
    fed = cfg.federation.model_copy(update={"rho": rho, "seed": seeds["federation"]})
    arch = cfg.resolved_arch(train.n_features, train.n_classes)
    return run_simulation(train, plan, fed, test, arch=arch)


# ============================================
# ПОДКОМАНДЫ
# ============================================


def cmd_partition(cfg: ExperimentConfig, out: ArtifactWriter) -> None:
    train, _, plan, _ = prepare(cfg)
    with run_step("Экспорт тепловой карты разбиения"):
        export_heatmap(plan, train, out.track("partition_heatmap.csv"))
        sizes = plan.client_sizes()
        out.write_csv(
            "partition_clients.csv",
            pd.DataFrame({"client": np.arange(plan.n_clients), "samples": sizes, "p": sizes / sizes.sum()}),
        )
        out.write_json(
            "partition_meta.json",
            {"mode": plan.mode, "subsampled": plan.subsampled, "warnings": list(plan.warnings)},
        )


def cmd_train(cfg: ExperimentConfig, out: ArtifactWriter) -> None:
    train, test, plan, seeds = prepare(cfg)
    export_heatmap(plan, train, out.track("partition_heatmap.csv"))

    with run_step(f"Федеративное обучение ({cfg.federation.algorithm}, Q={cfg.federation.rounds})"):
        result = _simulate(cfg, train, test, plan, seeds, cfg.federation.rho)

    with run_step("Запись метрик и масок"):
        out.write_csv("metrics.csv", metrics_frame(result.metrics))
        out.write_csv("client_losses.csv", client_losses_frame(result.metrics))
        out.write_csv("confusion_final.csv", confusion_frame(result.metrics[-1].confusion, train.class_names))
        for k, blob in sorted(result.mask_registry.items()):
            out.write_bytes(f"masks/client_{k:03d}.pmsk", blob)
        final = result.metrics[-1]
        print(f"   финальная accuracy={final.accuracy:.4f}  loss={final.loss:.4f}  масок отправлено={result.mask_uploads}")


def cmd_prune_sweep(cfg: ExperimentConfig, out: ArtifactWriter) -> None:
    train, test, plan, seeds = prepare(cfg)
    base = profile(cfg.resolved_arch(train.n_features, train.n_classes), cfg.energy,
                   multiply_add=cfg.cost.multiply_add)

    rows = []
    for rho in cfg.sweep:
        with run_step(f"Sweep: ρ = {rho:g}"):
            result = _simulate(cfg, train, test, plan, seeds, float(rho))
            out.write_csv(f"metrics_rho_{rho:.4f}.csv", metrics_frame(result.metrics))
            pruned = pruned_profile(base, float(rho))
            final = result.metrics[-1]
            rows.append(
                {
                    "rho": float(rho),
                    "accuracy": final.accuracy,
                    "loss": final.loss,
                    "params": pruned.params,
                    "flops": pruned.flops,
                    "energy_pj": pruned.energy_pj,
                }
            )
    out.write_csv("sweep_summary.csv", pd.DataFrame(rows))


def cmd_optimize_rho(cfg: ExperimentConfig, out: ArtifactWriter) -> None:
    seeds = settings.stream_seeds(cfg.seed)
    e_default = None
    if cfg.score.e_unp is None:
        e_default = profile(cfg.resolved_arch(), cfg.energy, multiply_add=cfg.cost.multiply_add).energy_pj
        print(f"   E_unp выведена из архитектуры: {e_default:.3f} pJ")
    score_cfg = cfg.score_config(e_default)

    with run_step(f"Оптимизация ρ ({cfg.score.mode})"):
        solution = optimize_rho(score_cfg, mode=cfg.score.mode, step=cfg.score.step, seed=seeds["federation"])
        out.write_csv("score_curve.csv", score_curve(score_cfg, step=cfg.score.curve_step))
        out.write_json("rho_solution.json", solution.as_dict())
        mean_rho = float(np.mean(solution.rho))
        print(f"   ρ* (среднее) = {mean_rho:.4f}  score = {solution.score:.4f}  feasible = {solution.feasible}")


def cmd_cost(cfg: ExperimentConfig, out: ArtifactWriter, rho: float) -> None:
    features, classes = cfg.data_dims()
    if features is None or (classes is None and cfg.arch.layers is None):
        raise ConfigError("cost: размеры входа/классов неизвестны — задайте arch.input_length и arch.n_classes")
    base = profile(cfg.resolved_arch(), cfg.energy, multiply_add=cfg.cost.multiply_add)
    payload = cost_payload(pruned_profile(base, rho))
    if cfg.cost.published:
        payload["published_discrepancy"] = published_discrepancy(base, cfg.cost.published)
    out.write_json("cost.json", payload)
    print(json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True))


def cmd_validate(args: argparse.Namespace) -> int:
    raw = settings.apply_overrides(settings.apply_env_defaults(settings.read_raw(args.config)), _overrides(args))
    _, violations = settings.collect_violations(raw)
    if violations:
        print(f"❌ {args.config}: нарушений — {len(violations)}")
        for v in violations:
            print(f"   • {v}")
        return EXIT_CONFIG
    print(f"✅ {args.config}: конфиг валиден.")
    return EXIT_OK


# ============================================
# CLI
# ============================================


def _float_list(value: str) -> List[float]:
    try:
        return [float(v) for v in value.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"ожидается число или список через запятую: {value!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="run_pipeline", description="Pruning-aware federated IDS simulator.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("partition", "train", "prune-sweep", "optimize-rho", "cost", "validate"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--label-col", dest="label_col")
        p.add_argument("--rho", type=_float_list)
        p.add_argument("--clients", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--algorithm", choices=["fedavg", "fedprox"])
        p.add_argument("--agg", choices=["normalized", "literal"])
        p.add_argument("--mode", choices=["uniform-grid", "coordinate", "hill-climb"])
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, object]:
    return {
        "seed": args.seed,
        "out": args.out,
        "label_col": args.label_col,
        "rho": args.rho,
        "clients": args.clients,
        "alpha": args.alpha,
        "algorithm": args.algorithm,
        "agg": args.agg,
        "mode": args.mode,
    }


def setup_logging() -> None:
    logging.basicConfig(
        level=getattr(logging, settings.LOG_LEVEL, logging.INFO),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            return cmd_validate(args)

        cfg = settings.load_config(args.config, _overrides(args))
        out = ArtifactWriter(cfg.output_dir or settings.OUT_DIR)

        if args.command == "partition":
            cmd_partition(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, out)
        elif args.command == "prune-sweep":
            cmd_prune_sweep(cfg, out)
        elif args.command == "optimize-rho":
            cmd_optimize_rho(cfg, out)
        elif args.command == "cost":
            cmd_cost(cfg, out, args.rho[0] if args.rho else 0.0)

        out.write_manifest(args.command, settings.config_hash(cfg), cfg.seed)
        print(f"\n🎯 Готово. Результаты: {out.out_dir}")
        return EXIT_OK

    except ConfigError as e:
        print(f"\n❌ Ошибка конфигурации (код {EXIT_CONFIG}):\n{e}")
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"\n❌ Обучение разошлось (код {EXIT_RUNTIME}): раунд {e.round_idx}, клиент {e.client_id}: {e}")
        return EXIT_RUNTIME
    except NumericError as e:
        print(f"\n❌ Численная ошибка (код {EXIT_RUNTIME}) в слое {e.layer}: {e}")
        return EXIT_RUNTIME
    except (InputError, FileNotFoundError) as e:
        print(f"\n❌ Ошибка входных данных (код {EXIT_INPUT}): {e}")
        return EXIT_INPUT


def main() -> None:
    setup_logging()
    sys.exit(run())


if __name__ == "__main__":
    main()
